import numpy as np
import pytest

from metasre import autodiff as ad
from metasre.encoder import build_vocab, make_mention
from metasre.errors import ConfigError, EmptyBatch, NonFiniteGradient
from metasre.meta import (
    MetaConfig,
    inner_update,
    meta_loss,
    meta_objective,
    meta_step,
    pseudo_terms,
    supervised_warmup,
)
from metasre.networks import (
    LabeledExample,
    WeightedExample,
    classification_loss,
    init_optim_state,
    init_params,
    params_from_arrays,
)

from helpers import central_diff_named, max_rel_err, random_mention


def tiny_instance(seed=0, k=2, n_labeled=5, n_unlabeled=3, hidden=4, emb=3):
    rng = np.random.default_rng(seed)
    labeled_mentions = [random_mention(rng, gold=int(rng.integers(0, k))) for _ in range(n_labeled)]
    unlabeled = [random_mention(rng) for _ in range(n_unlabeled)]
    vocab = build_vocab(labeled_mentions + unlabeled)
    labeled = [LabeledExample(m, m.gold_label) for m in labeled_mentions]
    classifier = init_params(seed * 2 + 1, k, hidden, emb, vocab.size, role="classifier")
    labeler = init_params(seed * 2 + 2, k, hidden, emb, vocab.size, role="labeler")
    return labeled, unlabeled, vocab, classifier, labeler


class TestInnerUpdate:
    def test_zero_step_is_bitwise_identity(self):
        labeled, _, vocab, classifier, _ = tiny_instance()
        leaves = classifier.leaves()
        loss = classification_loss(labeled, [], leaves, vocab)
        updated = inner_update(leaves, loss, 0.0)
        for name, leaf in leaves.items():
            assert updated[name] is leaf

    def test_quadratic_toy_loss(self):
        """L = ||x||^2 / 2 shrinks the parameters by (1 - step)."""
        x = ad.leaf(np.asarray([[2.0, -3.0]]), trainable=True)
        loss = ad.scalar_mul(0.5, ad.sum_all(ad.mul(x, x)))
        updated = inner_update({"x": x}, loss, 0.25)
        assert np.allclose(updated["x"].value, 0.75 * x.value, atol=1e-15)

    def test_updated_params_respond_to_labeler(self):
        """Perturbing the labeler moves the one-step-updated classifier."""
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=3)

        def tau_plus_for(lab_params):
            eta_leaves = lab_params.leaves()
            terms = pseudo_terms(eta_leaves, unlabeled, vocab)
            tau_leaves = classifier.leaves()
            loss = classification_loss(labeled, terms, tau_leaves, vocab)
            return inner_update(tau_leaves, loss, 0.1)

        base = tau_plus_for(labeler)
        arrays = labeler.to_dict()
        bumped = arrays["dense2_b"].copy()
        bumped[0, 0] += 0.5  # a single logit, so the softmax actually moves
        arrays["dense2_b"] = bumped
        moved = tau_plus_for(params_from_arrays(arrays, role="labeler"))
        assert any(
            not np.array_equal(base[name].value, moved[name].value) for name in base
        )


class TestMetaLoss:
    def test_reduces_to_plain_labeled_loss_at_zero_step(self):
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=4)
        eta_leaves = labeler.leaves()
        terms = pseudo_terms(eta_leaves, unlabeled, vocab)
        tau_leaves = classifier.leaves()
        inner = classification_loss(labeled, terms, tau_leaves, vocab)
        tau_plus = inner_update(tau_leaves, inner, 0.0)
        value = meta_loss(tau_plus, labeled, vocab)
        plain = classification_loss(labeled, [], classifier.leaves(), vocab)
        assert value.item() == pytest.approx(plain.item(), rel=1e-12)

    def test_perfect_classifier_at_updated_params(self):
        """Saturated logits give probability one and (near) zero loss."""
        labeled, _, vocab, classifier, _ = tiny_instance(seed=5, k=2)
        arrays = {n: np.zeros_like(a) for n, a in classifier.to_dict().items()}
        saturated = []
        for ex in labeled:
            arrays2 = dict(arrays)
            arrays2["dense2_b"] = np.zeros_like(arrays["dense2_b"])
            arrays2["dense2_b"][0, ex.label] = 800.0
            leaves = params_from_arrays(arrays2).leaves()
            saturated.append(meta_loss(leaves, [ex], vocab).item())
        for v in saturated:
            assert v <= 2 * 1e-10

    def test_empty_labeled_rejected(self):
        _, _, vocab, classifier, _ = tiny_instance()
        with pytest.raises(EmptyBatch):
            meta_loss(classifier.leaves(), [], vocab)


class TestSecondOrderOracle:
    def test_labeler_gradient_matches_finite_differences(self):
        """The definitive check: analytic d(meta loss)/d(labeler) vs central
        differences on tiny instances (two classes, hidden 4)."""
        for seed in range(3):
            labeled, unlabeled, vocab, classifier, labeler = tiny_instance(
                seed=seed, k=2, n_labeled=4, n_unlabeled=2, hidden=4, emb=3
            )
            alpha = 0.05
            loss, eta_leaves, _, _ = meta_objective(
                classifier, labeler, labeled, unlabeled, alpha, vocab
            )
            grads = ad.grad(loss, list(eta_leaves.values()))
            analytic = {n: g.value for n, g in zip(eta_leaves, grads)}

            def value(arrays):
                eta = params_from_arrays(arrays, role="labeler")
                v, *_ = meta_objective(
                    classifier, eta, labeled, unlabeled, alpha, vocab, create_graph=False
                )
                return v.item()

            fd = central_diff_named(value, labeler.to_dict(), step=1e-4)
            for name in fd:
                assert max_rel_err(analytic[name], fd[name]) < 1e-3, (seed, name)


class TestMetaStep:
    def cfg(self, **kw):
        return MetaConfig(inner_lr=kw.pop("inner_lr", 0.05), outer_lr=kw.pop("outer_lr", 1e-3), **kw)

    def test_zero_weight_pseudo_terms_sever_the_path(self):
        """Constant-zero weights leave no labeler dependence: the gradient is
        exactly zero and the optimizer step is a no-op."""
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=6)
        eta_leaves = labeler.leaves()
        terms = [
            WeightedExample(m, 0, ad.constant([[0.0]])) for m in unlabeled
        ]
        tau_leaves = classifier.leaves()
        inner = classification_loss(labeled, terms, tau_leaves, vocab)
        tau_plus = inner_update(tau_leaves, inner, 0.05)
        loss = meta_loss(tau_plus, labeled, vocab)
        grads = ad.grad(loss, list(eta_leaves.values()))
        for name, g in zip(eta_leaves, grads):
            assert np.array_equal(g.value, np.zeros_like(g.value)), name

    def test_classifier_untouched(self):
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=7)
        before = {n: a.copy() for n, a in classifier.to_dict().items()}
        state = init_optim_state(labeler, 1e-3)
        meta_step(classifier, labeler, labeled, unlabeled, self.cfg(), state, vocab)
        for name, arr in classifier.to_dict().items():
            assert np.array_equal(arr, before[name]), name

    def test_deterministic(self):
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=8)
        state = init_optim_state(labeler, 1e-3)
        a, _, _ = meta_step(classifier, labeler, labeled, unlabeled, self.cfg(), state, vocab)
        b, _, _ = meta_step(classifier, labeler, labeled, unlabeled, self.cfg(), state, vocab)
        for name, arr in a.to_dict().items():
            assert np.array_equal(arr, b.to_dict()[name]), name

    def test_gradient_scales_linearly_in_inner_step(self):
        """Between step sizes 1e-3 and 1e-4 the gradient norm ratio is 10
        within twenty percent."""
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=9)
        norms = {}
        for alpha in (1e-3, 1e-4):
            loss, eta_leaves, _, _ = meta_objective(
                classifier, labeler, labeled, unlabeled, alpha, vocab
            )
            grads = ad.grad(loss, list(eta_leaves.values()))
            norms[alpha] = np.sqrt(sum(float((g.value**2).sum()) for g in grads))
        ratio = norms[1e-3] / norms[1e-4]
        assert 8.0 <= ratio <= 12.0

    def test_trace_and_updates(self):
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=10)
        state = init_optim_state(labeler, 1e-3)
        new_labeler, new_state, trace = meta_step(
            classifier, labeler, labeled, unlabeled, self.cfg(), state, vocab
        )
        assert trace.pseudo_count == len(unlabeled)
        assert np.isfinite(trace.inner_loss) and np.isfinite(trace.meta_loss)
        assert trace.grad_norm > 0
        assert new_state.step == 1
        assert any(
            not np.array_equal(a, new_labeler.to_dict()[n]) for n, a in labeler.to_dict().items()
        )

    def test_first_order_mode_has_no_labeler_path(self):
        """The documented escape hatch: without the second-order path the
        labeler gradient vanishes identically."""
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=11)
        loss, eta_leaves, _, _ = meta_objective(
            classifier, labeler, labeled, unlabeled, 0.05, vocab, create_graph=False
        )
        grads = ad.grad(loss, list(eta_leaves.values()))
        for g in grads:
            assert np.array_equal(g.value, np.zeros_like(g.value))

    def test_divergence_detected(self):
        """An unbounded inner step produces NaN parameters (inf * zero
        gradient coordinates), which must abort rather than train on."""
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=12)
        state = init_optim_state(labeler, 1e-3)
        huge = MetaConfig(inner_lr=float("inf"), outer_lr=1e-3)
        with np.errstate(all="ignore"), pytest.raises(NonFiniteGradient):
            meta_step(classifier, labeler, labeled, unlabeled, huge, state, vocab)

    def test_empty_batches_rejected(self):
        labeled, unlabeled, vocab, classifier, labeler = tiny_instance(seed=13)
        state = init_optim_state(labeler, 1e-3)
        with pytest.raises(EmptyBatch):
            meta_step(classifier, labeler, [], unlabeled, self.cfg(), state, vocab)
        with pytest.raises(EmptyBatch):
            meta_step(classifier, labeler, labeled, [], self.cfg(), state, vocab)


class TestWarmup:
    def test_zero_epochs_noop(self):
        labeled, _, vocab, _, labeler = tiny_instance(seed=14)
        state = init_optim_state(labeler, 1e-3)
        out, out_state = supervised_warmup(labeler, labeled, 0, state, vocab)
        assert out is labeler
        assert out_state is state

    def test_loss_decreases_on_separable_toy_set(self):
        """Two classes keyed by disjoint cue tokens; one epoch of warmup must
        strictly lower the labeled loss."""
        mentions = []
        for i in range(12):
            cls = i % 2
            cue = "alpha" if cls == 0 else "beta"
            mentions.append(
                make_mention(["e1", cue, "e2", f"f{i % 3}"], (0, 1), (2, 3), cls)
            )
        vocab = build_vocab(mentions)
        labeled = [LabeledExample(m, m.gold_label) for m in mentions]
        labeler = init_params(3, 2, 8, 4, vocab.size, role="labeler")
        state = init_optim_state(labeler, 5e-3)
        before = classification_loss(labeled, [], labeler, vocab).item()
        after_params, _ = supervised_warmup(labeler, labeled, 1, state, vocab, batch_size=4)
        after = classification_loss(labeled, [], after_params, vocab).item()
        assert after < before

    def test_deterministic(self):
        labeled, _, vocab, _, labeler = tiny_instance(seed=15)
        state = init_optim_state(labeler, 1e-3)
        a, _ = supervised_warmup(labeler, labeled, 2, state, vocab)
        b, _ = supervised_warmup(labeler, labeled, 2, state, vocab)
        for name, arr in a.to_dict().items():
            assert np.array_equal(arr, b.to_dict()[name]), name

    def test_negative_epochs_rejected(self):
        labeled, _, vocab, _, labeler = tiny_instance(seed=16)
        state = init_optim_state(labeler, 1e-3)
        with pytest.raises(ConfigError):
            supervised_warmup(labeler, labeled, -1, state, vocab)


def test_meta_config_validation():
    with pytest.raises(ConfigError):
        MetaConfig(inner_lr=0.0)
    with pytest.raises(ConfigError):
        MetaConfig(outer_lr=-1.0)
    with pytest.raises(ConfigError):
        MetaConfig(warmup_epochs=-1)
