"""Meta self-training for relation classification.

A labeler network assigns pseudo labels and confidences to unlabeled
mentions; it is trained by differentiating the labeled-data loss through a
one-step update of the classifier. High-confidence pseudo labels are
selected batch by batch and folded into classifier training with their
confidences as frozen loss weights.
"""

from . import autodiff
from .data import (
    Dataset,
    SplitSpec,
    SynthSpec,
    UnlabeledSet,
    load_jsonl,
    partition_unlabeled,
    save_jsonl,
    stratified_split,
    synth_generate,
)
from .encoder import (
    MarkedSequence,
    RelationMention,
    Vocabulary,
    build_vocab,
    encode,
    insert_entity_markers,
    make_mention,
)
from .evaluation import (
    Metrics,
    ablation_suite,
    distribution_l1,
    label_distribution,
    micro_prf,
    pseudo_label_f1,
    sweep,
)
from .meta import MetaConfig, MetaStepTrace, inner_update, meta_loss, meta_step, supervised_warmup
from .networks import (
    ClassifierParams,
    LabeledExample,
    OptimState,
    WeightedExample,
    adam_step,
    classification_loss,
    classify,
    gd_step,
    init_optim_state,
    init_params,
    load_params,
    predict,
    save_params,
)
from .runner import RunConfig, config_from_dict, materialize_data, run_single
from .selftrain import (
    PseudoLabel,
    SelfTrainConfig,
    TrainReport,
    exploit,
    generate_pseudo_labels,
    run_incremental,
    select_top,
)

__all__ = [name for name in dir() if not name.startswith("_")]
