import itertools

import numpy as np
import pytest

from draftlab.data import collate
from draftlab.errors import ConfigurationError, EmptyTargetError
from draftlab.gradcheck import finite_difference_check
from draftlab.model import AcousticModel
from draftlab.ssl import (ApcConfig, MaskSpec, apc_batch_loss, apc_loss, apc_targets, info_nce, kmeans_assign,
                          kmeans_fit, masked_cross_entropy, masked_predict_loss, sample_negatives, span_mask,
                          step_labels)
from draftlab.tensor import Tensor

from conftest import LOSS_KINDS, loss_closure, tiny_config


# -- APC targets and loss -------------------------------------------------------
def test_apc_target_count_example(rng):
    steps, tgt = apc_targets(rng.normal(size=(43, 80)), 2)  # 43 raw frames -> 10 steps
    assert len(steps) == 8 and tgt.shape == (8, 320)


def test_constant_features_give_identical_targets():
    _, tgt = apc_targets(np.full((60, 80), 1.5), 1)
    assert (tgt == tgt[0]).all()


def test_shift_index_algebra(rng):
    x = rng.normal(size=(70, 80))
    for n in (1, 2, 3):
        _, a = apc_targets(x, n)
        _, b = apc_targets(x, n + 1)
        np.testing.assert_array_equal(a[1:], b)


def test_targets_lie_after_the_receptive_field(rng):
    x = rng.normal(size=(50, 80))
    _, tgt = apc_targets(x, 1)
    # step 0 sees raw frames 0..6; its shift-1 target is frames 7..10
    np.testing.assert_array_equal(tgt[0], x[7:11].reshape(-1))


def test_shift_too_large_names_t_and_n():
    with pytest.raises(EmptyTargetError, match=r"T=20.*n=5"):
        apc_targets(np.zeros((20, 80)), 5)


def test_apc_loss_examples(rng):
    t = [rng.normal(size=(3, 320)), rng.normal(size=(3, 320))]
    assert float(apc_loss([Tensor(x) for x in t], t).data) == 0.0
    assert float(apc_loss([Tensor(x + 1) for x in t], t).data) == pytest.approx(1.0, abs=1e-6)
    z = [np.zeros((2, 10)), np.zeros((2, 10))]
    preds = [Tensor(np.full((2, 10), 0.2)), Tensor(np.full((2, 10), -0.4))]
    assert float(apc_loss(preds, z).data) == pytest.approx(0.3, abs=1e-7)
    with pytest.raises(ConfigurationError):
        apc_loss(preds, z[:1])
    with pytest.raises(ConfigurationError):
        ApcConfig(shifts=(1, 1))


def test_apc_gradient_does_not_reach_future_frames(rng, small_batch):
    model = AcousticModel(tiny_config(apc_shifts=(1,)), seed=0)
    x = Tensor(small_batch.features[:1, :small_batch.feature_lengths[0]], requires_grad=True)
    enc = model.encode(x)
    pred = model.apc_predictions(enc.hidden)[1]
    u = 2
    pred[0, u].sum().backward()
    end = 4 * u + 6
    assert x.grad[0, :end + 1].any() and not x.grad[0, end + 1:].any()


# -- k-means ----------------------------------------------------------------------
def test_kmeans_two_clusters_brute_force():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    cb = kmeans_fit(x, 2, seed=0)
    labels = kmeans_assign(cb, x)
    assert labels[0] == labels[1] != labels[2] == labels[3]

    def inertia(part):
        return sum(((x[part == c] - x[part == c].mean()) ** 2).sum() for c in (0, 1) if (part == c).any())

    best = min((inertia(np.array(p)) for p in itertools.product((0, 1), repeat=4) if len(set(p)) == 2))
    assert cb.inertia == pytest.approx(best)


def test_kmeans_exact_fit_and_determinism(rng):
    pts = rng.normal(size=(5, 3))
    x = np.repeat(pts, 4, axis=0)
    cb = kmeans_fit(x, 5, seed=1)
    assert cb.inertia == pytest.approx(0.0, abs=1e-9)
    frames = rng.normal(size=(300, 80))
    a, b = kmeans_fit(frames, 8, 20, seed=3), kmeans_fit(frames, 8, 20, seed=3)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert all(h1 >= h2 - 1e-9 for h1, h2 in zip(a.history, a.history[1:]))
    with pytest.raises(ConfigurationError):
        kmeans_fit(frames[:3], 4)


def test_assignment_ties_go_to_lowest_index():
    from draftlab.ssl import PseudoLabelCodebook
    cb = PseudoLabelCodebook(np.array([[1.0], [-1.0]], np.float32))
    assert kmeans_assign(cb, np.array([[0.0]]))[0] == 0


def test_step_labels_majority():
    frames = np.array([0] * 7 + [1, 1, 2, 2] + [3, 3, 3, 1])
    assert step_labels(frames, 3, 4).tolist() == [0, 1, 3]


# -- masking and masked prediction -------------------------------------------------------
def test_span_mask_is_seeded_and_in_range():
    a = span_mask([12, 7], MaskSpec(0.3, 3, seed=4))
    assert a.tobytes() == span_mask([12, 7], MaskSpec(0.3, 3, seed=4)).tobytes()
    assert not a[1, 7:].any()
    with pytest.raises(ConfigurationError):
        MaskSpec(0.0, 3)


def test_masked_ce_examples(rng):
    mask = np.zeros((1, 5), bool)
    mask[0, [1, 3]] = True
    labels = rng.integers(0, 4, (1, 5))
    uniform = masked_cross_entropy(Tensor(np.zeros((1, 5, 4))), labels, mask)
    assert float(uniform.data) == pytest.approx(np.log(4), rel=1e-6)
    oracle = np.full((1, 5, 4), -1e4)
    oracle[0, np.arange(5), labels[0]] = 0.0
    assert float(masked_cross_entropy(Tensor(oracle), labels, mask).data) == pytest.approx(0.0, abs=1e-6)
    logits = rng.normal(size=(1, 5, 4))
    base = masked_cross_entropy(Tensor(logits), labels, mask).data.tobytes()
    logits[0, [0, 2, 4]] += rng.normal(size=(3, 4)) * 10
    assert masked_cross_entropy(Tensor(logits), labels, mask).data.tobytes() == base


def test_masked_loss_runs_on_model(source_utts):
    batch = collate(source_utts[:3])
    model = AcousticModel(tiny_config(), head="masked", seed=0)
    cb = kmeans_fit(np.concatenate([u.features for u in source_utts]), 4, 10)
    loss = masked_predict_loss(model, batch, cb, MaskSpec(0.2, 3, seed=0))
    assert np.isfinite(loss.data) and float(loss.data) > 0


# -- contrastive ------------------------------------------------------------------------
def test_info_nce_examples():
    k = 6
    assert float(info_nce(Tensor(np.full(3, 0.4)), Tensor(np.full((3, k), 0.4)), 0.1).data) == \
        pytest.approx(np.log(k + 1), rel=1e-6)
    assert float(info_nce(Tensor([1.0]), Tensor([[0.0]]), 1.0).data) == pytest.approx(0.3133, abs=1e-4)
    assert float(info_nce(Tensor([1.0]), Tensor([[-1.0] * 5]), 0.01).data) < 1e-12 + 1e-80
    with pytest.raises(ConfigurationError):
        info_nce(Tensor([1.0]), Tensor([[0.0]]), 0.0)


def test_negatives_come_from_same_utterance_masked_steps(rng):
    mask = np.zeros((2, 10), bool)
    mask[0, [1, 2, 3, 4]] = True
    mask[1, [5, 6]] = True
    stats = {}
    b, t, neg = sample_negatives(mask, 3, rng, stats)
    for bi, ti, row in zip(b, t, neg):
        assert mask[bi, row].all() and ti not in row
    assert stats["negatives_with_replacement"] == 2


def test_contrastive_with_single_masked_step_fails(rng):
    mask = np.zeros((1, 4), bool)
    mask[0, 1] = True
    with pytest.raises(EmptyTargetError):
        sample_negatives(mask, 2, rng)


# -- gradient checks: every loss composed with the desk-preset model ------------------------------
@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_loss_gradients_through_desk_model(kind, source_utts):
    batch = collate(source_utts[:2])
    model, f = loss_closure(kind, batch)
    names = [n for n in model.store.names()
             if n.startswith(("frontend.conv1.weight", "blocks.01.attn.wq", "blocks.03.ffn.w2", "head."))]
    for n in names:
        rep = finite_difference_check(f, model.store, n, tol=1e-3, n_coords=8)
        assert rep.passed, rep


def test_apc_batch_loss_is_nonnegative(source_utts, tiny_model):
    assert float(apc_batch_loss(tiny_model, collate(source_utts[:4])).data) >= 0
