import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

import aum.numerics as nx
from aum.encoder import Model, ModelConfig, model_forward
from aum.features import Spectrogram
from aum.numerics import Tape, Tensor, finite_difference_check
from aum.training import (
    Adam,
    Batch,
    Dataset,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    average_precision,
    binary_cross_entropy,
    cross_entropy,
    loss,
    lr_at,
    mean_average_precision,
    mixup,
    spec_augment,
    train,
)

# (scores, labels, AP) enumerated by hand: precision at the rank of each positive, averaged
AP_CASES = [
    ([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0], (1 / 1 + 2 / 3) / 2),
    ([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], (1 / 1 + 2 / 3) / 2),
    ([0.3, 0.2, 0.1], [1, 1, 1], 1.0),
    ([4.0, 3.0, 2.0, 1.0], [0, 0, 0, 1], 1 / 4),
    ([3.0, 2.0, 1.0], [0, 1, 1], (1 / 2 + 2 / 3) / 2),
    ([9.0, 1.0, 2.0, 3.0, 4.0], [1, 0, 0, 0, 0], 1.0),
    ([0.5, 0.5, 0.5], [0, 0, 1], 1 / 3),  # ties keep input order
    ([5.0, 4.0, 3.0, 2.0, 1.0], [1, 0, 0, 1, 1], (1 + 2 / 4 + 3 / 5) / 3),
    ([-1.0, 2.0, 0.0, 1.0], [1, 1, 0, 0], (1 + 2 / 4) / 2),
    ([0.6, 0.5, 0.4, 0.3, 0.2, 0.1], [0, 1, 0, 1, 0, 1], (1 / 2 + 2 / 4 + 3 / 6) / 3),
]


# ------------------------------------------------------------------ config

def test_train_config_validation():
    for bad in [dict(loss="mse"), dict(mixup=1.5), dict(lr_decay=0.0), dict(freqm=-1), dict(batch_size=0)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ------------------------------------------------------------ augmentation

def test_spec_augment_zero_widths_is_identity():
    s = np.random.default_rng(0).standard_normal((8, 8)).astype(np.float32)
    np.testing.assert_array_equal(spec_augment(s, 0, 0, np.random.default_rng(1)), s)


def test_spec_augment_full_width_fills_with_mean():
    s = np.random.default_rng(0).standard_normal((8, 8)).astype(np.float32)

    class Forced:
        """Generator stub that always draws the widest band."""

        def integers(self, lo, hi):
            return hi - 1 if hi > 1 else 0

    out, (f0, wf, t0, wt) = spec_augment(s, 8, 0, Forced(), return_mask=True)
    assert (f0, wf) == (0, 8)
    assert np.all(out == s.mean())


def test_spec_augment_seeded_replay():
    s = np.arange(64, dtype=np.float32).reshape(8, 8)
    out, mask = spec_augment(Spectrogram(s), 3, 4, np.random.default_rng(7), return_mask=True)
    r = np.random.default_rng(7)
    wf = int(r.integers(0, 4))
    f0 = int(r.integers(0, 8 - wf + 1))
    wt = int(r.integers(0, 5))
    t0 = int(r.integers(0, 8 - wt + 1))
    assert mask == (f0, wf, t0, wt)
    expected = s.copy()
    expected[f0 : f0 + wf] = s.mean()
    expected[:, t0 : t0 + wt] = s.mean()
    np.testing.assert_array_equal(out.values, expected)
    assert isinstance(out, Spectrogram)


def test_spec_augment_clamps_oversized_masks(caplog):
    s = np.ones((4, 6), dtype=np.float32)
    with caplog.at_level("WARNING"):
        spec_augment(s, 48, 192, np.random.default_rng(0))
    assert "clamped" in caplog.text


def _batch(r, B=4, C=3):
    x = r.standard_normal((B, 8, 8)).astype(np.float32)
    y = np.eye(C, dtype=np.float32)[r.integers(0, C, B)]
    return Batch(x, y)


def test_mixup_zero_is_identity():
    b = _batch(np.random.default_rng(0))
    out = mixup(b, 0.0, np.random.default_rng(1))
    assert out.spectrograms is b.spectrograms and out.targets is b.targets


def test_mixup_lambda_one_keeps_sample():
    b = _batch(np.random.default_rng(0))
    out = mixup(b, 1.0, np.random.default_rng(1), lam=1.0, perm=[1, 2, 3, 0])
    np.testing.assert_array_equal(out.spectrograms, b.spectrograms)
    np.testing.assert_array_equal(out.targets, b.targets)


def test_mixup_half_blends_targets():
    b = Batch(np.zeros((2, 2, 2), np.float32), np.array([[1, 0], [0, 1]], np.float32))
    out = mixup(b, 1.0, np.random.default_rng(0), lam=0.5, perm=[1, 0])
    np.testing.assert_array_equal(out.targets, [[0.5, 0.5], [0.5, 0.5]])


def test_mixup_rejects_bad_alpha():
    with pytest.raises(ValueError):
        mixup(_batch(np.random.default_rng(0)), -0.1, np.random.default_rng(0))


@given(alpha=st.floats(0.0, 1.0), seed=st.integers(0, 10_000))
def test_mixup_targets_stay_distributions(alpha, seed):
    out = mixup(_batch(np.random.default_rng(seed)), alpha, np.random.default_rng(seed + 1))
    t = out.targets
    assert np.all((t >= 0) & (t <= 1))
    np.testing.assert_allclose(t.sum(1), 1.0, rtol=1e-6)


def test_mixup_strength_one_pins_lambda_to_half():
    b = Batch(np.zeros((3, 1, 1), np.float32), np.eye(3, dtype=np.float32))
    out = mixup(b, 1.0, np.random.default_rng(3), perm=[1, 2, 0])
    np.testing.assert_allclose(out.targets.max(1), 0.5)


# ------------------------------------------------------------------ losses

def test_ce_uniform_logits():
    v = cross_entropy(Tensor(np.zeros((1, 4))), np.eye(4)[[2]])
    assert math.isclose(float(v.data), math.log(4), rel_tol=1e-6)
    assert math.isclose(float(v.data), 1.386294, abs_tol=1e-6)


def test_bce_zero_logits_half_targets():
    v = binary_cross_entropy(Tensor(np.zeros((2, 5))), np.full((2, 5), 0.5))
    assert math.isclose(float(v.data), math.log(2), rel_tol=1e-6)


def test_losses_match_hand_arithmetic():
    z = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
    y = np.array([[0.0, 1.0, 0.0], [0.2, 0.8, 0.0]])
    ce = 0.0
    for i in range(2):
        lse = math.log(sum(math.exp(v) for v in z[i]))
        ce += -sum(y[i, j] * (z[i, j] - lse) for j in range(3))
    assert math.isclose(float(cross_entropy(Tensor(z), y).data), ce / 2, rel_tol=1e-12)
    bce = 0.0
    for i in range(2):
        for j in range(3):
            p = 1 / (1 + math.exp(-z[i, j]))
            bce += -(y[i, j] * math.log(p) + (1 - y[i, j]) * math.log(1 - p))
    assert math.isclose(float(binary_cross_entropy(Tensor(z), y).data), bce / 6, rel_tol=1e-12)


@pytest.mark.parametrize("kind", ["ce", "bce"])
def test_loss_gradients(kind):
    r = np.random.default_rng(0)
    z = Tensor(r.standard_normal((3, 4)), requires_grad=True)
    y = r.dirichlet(np.ones(4), size=3)
    rep = finite_difference_check(lambda: loss(z, y, kind), [z], eps=1e-6)
    assert rep.max_rel_err < 1e-4, str(rep)


def test_loss_shape_and_kind_errors():
    with pytest.raises(nx.ShapeError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        loss(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), "hinge")


# ---------------------------------------------------------------- schedule

def test_lr_before_first_milestone_is_base():
    cfg = TrainConfig(base_lr=1e-3, lr_start=10)
    assert lr_at(1000, 9, cfg) == 1e-3


def test_lr_milestones_apply_from_their_epoch():
    cfg = TrainConfig(base_lr=1.0, lr_start=10, lr_step=5, lr_decay=0.5)
    # milestones 10, 15, 20 all reached at epoch 20
    assert lr_at(0, 20, cfg) == 0.125
    assert [lr_at(0, e, cfg) for e in (10, 14, 15)] == [0.5, 0.5, 0.25]


def test_lr_warmup_is_linear():
    cfg = TrainConfig(base_lr=2e-3, warmup_steps=100)
    assert lr_at(50, 0, cfg) == 1e-3
    assert lr_at(0, 0, cfg) == 0.0 and lr_at(100, 0, cfg) == 2e-3


# --------------------------------------------------------------- optimizer

def test_adam_first_step_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.25])
    opt = Adam({"p": p}, beta1=0.95, beta2=0.999, eps=1e-8, weight_decay=5e-7)
    opt.step(0.1)
    # bias-corrected m/sqrt(v) is sign(g) on step one; decay is decoupled from the gradient
    expect = np.array([1.0, -2.0]) - 0.1 * (np.sign([0.5, -0.25]) * (np.abs([0.5, -0.25]) / (np.abs([0.5, -0.25]) + 1e-8))
                                             + 5e-7 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, expect, rtol=1e-12)


def tiny_model(seed=0, dtype=np.float32, **kw):
    cfg = ModelConfig(embed_dim=8, depth=1, state_dim=4, n_mels=32, target_frames=32, num_classes=2, **kw)
    return Model.init(cfg, seed=seed, dtype=dtype)


def tiny_dataset(n=8, seed=0):
    r = np.random.default_rng(seed)
    return Dataset.from_labels(r.standard_normal((n, 32, 32)), [[i % 2] for i in range(n)], 2)


def test_zero_lr_step_leaves_weights():
    m = tiny_model()
    before = {k: t.data.copy() for k, t in m.parameters().items()}
    train(m, tiny_dataset(), TrainConfig(base_lr=0.0, epochs=1, batch_size=8))
    for k, t in m.parameters().items():
        assert np.array_equal(before[k], t.data), k


def test_loss_decreases_over_every_50_step_window():
    m = tiny_model(seed=1)
    ds = tiny_dataset(8, seed=2)
    opt = Adam(m.parameters())
    losses = []
    for _ in range(200):
        with Tape() as tape:
            v = cross_entropy(model_forward(ds.spectrograms, m), ds.targets)
        tape.backward(v)
        opt.step(1e-3)
        opt.zero_grad()
        losses.append(float(v.data))
    assert all(losses[t + 50] < losses[t] for t in range(len(losses) - 50))


def test_training_is_deterministic():
    def run():
        m = tiny_model(seed=3)
        st_ = train(m, tiny_dataset(12, seed=4), TrainConfig(epochs=3, batch_size=4, mixup=0.5, freqm=4, timem=4, seed=9))
        return st_.log, {k: t.data.copy() for k, t in m.parameters().items()}

    (log_a, w_a), (log_b, w_b) = run(), run()
    assert log_a == log_b
    assert all(np.array_equal(w_a[k], w_b[k]) for k in w_a)


def test_resume_matches_uninterrupted_run():
    cfg = TrainConfig(epochs=4, batch_size=4, mixup=0.5, seed=2)
    ds = tiny_dataset(8, seed=5)
    full = tiny_model(seed=6)
    ref = train(full, ds, cfg)
    part = tiny_model(seed=6)
    st_ = train(part, ds, replace(cfg, epochs=2))
    st_ = train(part, ds, cfg, state=st_)
    assert st_.log == ref.log
    assert all(np.array_equal(full.parameters()[k].data, t.data) for k, t in part.parameters().items())


def test_nan_loss_aborts_with_diagnostic():
    ds = tiny_dataset(4)
    ds.spectrograms[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0, step 0"), np.errstate(invalid="ignore"):
        train(tiny_model(), ds, TrainConfig(epochs=1, batch_size=4))


def test_empty_dataset_is_refused():
    with pytest.raises(ValueError):
        train(tiny_model(), Dataset(np.zeros((0, 32, 32), np.float32), np.zeros((0, 2), np.float32)), TrainConfig())


def test_dataset_label_range():
    with pytest.raises(ValueError):
        Dataset.from_labels(np.zeros((1, 2, 2)), [[5]], 3)


# ----------------------------------------------------------------- metrics

@pytest.mark.parametrize("scores,labels,expected", AP_CASES)
def test_average_precision_hand_cases(scores, labels, expected):
    assert math.isclose(average_precision(scores, labels), expected, rel_tol=1e-12)


@given(seed=st.integers(0, 10_000), n=st.integers(2, 30))
def test_average_precision_agrees_with_sklearn_without_ties(seed, n):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 2, n)
    labels[0] = 1
    scores = r.permutation(n).astype(float)
    assert math.isclose(average_precision(scores, labels), average_precision_score(labels, scores), rel_tol=1e-12)


@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["exp", "cube", "affine", "sigmoid"]))
@settings(max_examples=60)
def test_map_invariant_under_monotone_transforms(seed, kind):
    r = np.random.default_rng(seed)
    scores = r.standard_normal((20, 4))
    targets = (r.random((20, 4)) < 0.3).astype(float)
    targets[0] = 1
    f = {"exp": np.exp, "cube": lambda s: s**3, "affine": lambda s: 3 * s - 7,
         "sigmoid": lambda s: 1 / (1 + np.exp(-s))}[kind]
    assert mean_average_precision(f(scores), targets) == mean_average_precision(scores, targets)


def test_map_skips_classes_without_positives():
    scores = np.array([[0.9, 0.1, 0.5], [0.2, 0.8, 0.5]])
    targets = np.array([[1, 0, 0], [0, 1, 0]])
    assert mean_average_precision(scores, targets) == (1.0, 1)
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [0, 0])


def test_perfect_scores():
    targets = np.eye(3)[[0, 1, 2, 1]]
    assert accuracy(targets * 5, targets) == 1.0
    assert mean_average_precision(targets * 5, targets) == (1.0, 0)


def test_two_class_ranking_by_hand():
    scores = np.array([[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]])
    targets = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
    # class 0 ranking: s0(+), s1(-), s2(+), s3(-) -> (1 + 2/3) / 2
    # class 1 ranking: s3(+), s2(-), s1(+), s0(-) -> (1 + 2/3) / 2
    mAP, skipped = mean_average_precision(scores, targets)
    assert math.isclose(mAP, 5 / 6, rel_tol=1e-12) and skipped == 0


def test_tied_logits_pick_lowest_class():
    targets = np.eye(3)[[0, 0, 1, 2, 0]]
    assert accuracy(np.zeros((5, 3)), targets) == 3 / 5
