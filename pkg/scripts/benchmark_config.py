"""The seeded synthetic benchmark configs used by the acceptance trends.

Two presets: a moderately skewed corpus (17.4 percent no-relation) for the
meta-helps and selection-helps trends, and a heavily skewed one (78.7
percent) for the drift comparison. Import these rather than copying the
numbers around.
"""

from metasre.data import SynthSpec
from metasre.meta import MetaConfig
from metasre.runner import RunConfig
from metasre.selftrain import SelfTrainConfig

BENCHMARK_SEEDS = (0, 1, 2, 3, 4)


def benchmark_config(out_dir=None) -> RunConfig:
    """K=10, 2000 train mentions, 5% labeled, 50% unlabeled."""
    return RunConfig(
        data=SynthSpec(
            num_classes=10,
            num_mentions=2500,
            no_relation_share=0.174,
            vocab_size=120,
            ambiguity=0.25,
            min_len=6,
            max_len=12,
            seed=2024,
        ),
        test_fraction=0.2,
        labeled_fraction=0.05,
        unlabeled_fraction=0.5,
        selftrain=SelfTrainConfig(
            z_percent=90.0,
            num_batches=10,
            initial_epochs=30,
            epochs_per_batch=2,
            meta_epochs=1,
            batch_size=16,
            learning_rate=0.01,
        ),
        meta=MetaConfig(
            inner_lr=0.05,
            outer_lr=0.01,
            warmup_epochs=2,
            labeled_batch_size=10,
            unlabeled_batch_size=10,
        ),
        hidden_size=32,
        embedding_dim=16,
        seeds=BENCHMARK_SEEDS,
        out_dir=out_dir,
    )


def skewed_config(out_dir=None) -> RunConfig:
    """K=5, heavy no-relation skew (78.7%), for the drift comparison."""
    return RunConfig(
        data=SynthSpec(
            num_classes=5,
            num_mentions=1500,
            no_relation_share=0.787,
            vocab_size=80,
            ambiguity=0.25,
            min_len=6,
            max_len=10,
            seed=4048,
        ),
        test_fraction=0.2,
        labeled_fraction=0.1,
        unlabeled_fraction=0.5,
        selftrain=SelfTrainConfig(
            z_percent=90.0,
            num_batches=10,
            initial_epochs=25,
            epochs_per_batch=2,
            meta_epochs=1,
            batch_size=16,
            learning_rate=0.01,
        ),
        meta=MetaConfig(
            inner_lr=0.05,
            outer_lr=0.01,
            warmup_epochs=2,
            labeled_batch_size=10,
            unlabeled_batch_size=10,
        ),
        hidden_size=24,
        embedding_dim=12,
        seeds=BENCHMARK_SEEDS,
        out_dir=out_dir,
    )
