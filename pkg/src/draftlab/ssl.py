"""Self-supervised objectives: multi-shift APC, masked cluster prediction, masked contrastive.

Frame bookkeeping: subsampled step ``u`` of the front-end sees raw frames
``4u .. end(u)`` with ``end(u) = 4u + 3(K-1)`` for kernel ``K``. The four raw
frames ``end(u)-3 .. end(u)`` are the ones step ``u`` adds over step ``u-1``;
they form the step's *frame group*. The APC target for step ``u`` at shift
``n`` is the frame group of step ``u+n`` (320 values), which lies strictly
after everything step ``u`` can see.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Batch
from .errors import ConfigurationError, EmptyTargetError
from .model import AcousticModel, frontend_lengths
from .tensor import Tensor

log = logging.getLogger(__name__)

GROUP = 4


def step_end(u, kernel: int = 3):
    return 4 * np.asarray(u) + 3 * (kernel - 1)


# -- APC ------------------------------------------------------------------------
@dataclass(frozen=True)
class ApcConfig:
    shifts: tuple[int, ...] = (1, 2, 3)
    loss: str = "l1"

    def __post_init__(self):
        if not self.shifts or min(self.shifts) < 1 or len(set(self.shifts)) != len(self.shifts):
            raise ConfigurationError(f"APC shifts must be distinct and >= 1, got {self.shifts}")
        if self.loss != "l1":
            raise ConfigurationError("only the L1 APC loss is implemented")


def apc_targets(features: np.ndarray, shift: int, kernel: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Valid output steps and their [n_valid, 320] targets for one utterance."""
    feats = np.asarray(features)
    t = feats.shape[0]
    t_sub = int(frontend_lengths([t], kernel)[0]) if t >= 3 * kernel - 2 else 0
    n_valid = t_sub - shift
    if n_valid < 1:
        raise EmptyTargetError(f"no APC target: T={t} frames gives {t_sub} steps, shift n={shift}")
    steps = np.arange(n_valid)
    ends = step_end(steps + shift, kernel)
    idx = ends[:, None] - (GROUP - 1) + np.arange(GROUP)[None, :]
    return steps, feats[idx].reshape(n_valid, GROUP * feats.shape[1])


def apc_batch_targets(batch: Batch, shift: int, kernel: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Padded targets [B, T''_max, 320] and validity mask [B, T''_max]."""
    sub = frontend_lengths(batch.feature_lengths, kernel)
    t_max = int(sub.max())
    b, _, dim = batch.features.shape
    targets = np.zeros((b, t_max, GROUP * dim), dtype=batch.features.dtype)
    valid = np.zeros((b, t_max), dtype=bool)
    for i in range(b):
        n_valid = int(sub[i]) - shift
        if n_valid < 1:
            continue
        steps, tgt = apc_targets(batch.features[i, :batch.feature_lengths[i]], shift, kernel)
        targets[i, :n_valid] = tgt
        valid[i, :n_valid] = True
    return targets, valid


def apc_loss(predictions: Sequence[Tensor] | Mapping[int, Tensor], targets: Sequence,
             masks: Sequence | None = None) -> Tensor:
    """Mean absolute error per shift, averaged uniformly over shifts."""
    preds = list(predictions.values()) if isinstance(predictions, Mapping) else list(predictions)
    if len(preds) != len(targets) or (masks is not None and len(masks) != len(preds)):
        raise ConfigurationError(
            f"{len(preds)} prediction heads for {len(targets)} target shifts")
    total = None
    for i, (p, tgt) in enumerate(zip(preds, targets)):
        err = T.absolute(p - T.tensor(tgt))
        if masks is None:
            per = err.mean()
        else:
            m = np.asarray(masks[i], dtype=bool)
            n = int(m.sum()) * p.shape[-1]
            if n == 0:
                raise EmptyTargetError(f"shift index {i} has no valid target step in the batch")
            per = (err * m[..., None]).sum() * (1.0 / n)
        total = per if total is None else total + per
    return total * (1.0 / len(preds))


def apc_batch_loss(model: AcousticModel, batch: Batch) -> Tensor:
    enc = model.encode(batch.features, batch.feature_lengths)
    preds = model.apc_predictions(enc.hidden)
    shifts = model.config.apc_shifts
    tm = [apc_batch_targets(batch, n, model.config.conv_kernel) for n in shifts]
    return apc_loss([preds[n] for n in shifts], [t for t, _ in tm], [m for _, m in tm])


# -- k-means pseudo labels ----------------------------------------------------------
@dataclass
class PseudoLabelCodebook:
    centroids: np.ndarray  # [k, D]
    iterations: int = 0
    inertia: float = 0.0
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]


def kmeans_assign(codebook: PseudoLabelCodebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per frame; ties go to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    return np.argmin(_sq_dists(x, codebook.centroids.astype(np.float64)), axis=1)


def kmeans_fit(features: np.ndarray, k: int, iters: int = 50, seed: int = 0) -> PseudoLabelCodebook:
    """Lloyd's algorithm from a seeded k-means++ start."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if k > n:
        raise ConfigurationError(f"k={k} exceeds the number of frames ({n})")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        pick = rng.choice(n, p=closest / total) if total > 0 else int(rng.integers(n))
        centroids[j] = x[pick]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(1))

    history: list[float] = []
    labels = None
    it = 0
    for it in range(1, iters + 1):
        d = np.maximum(_sq_dists(x, centroids), 0.0)
        new_labels = np.argmin(d, axis=1)
        inertia = float(d[np.arange(n), new_labels].sum())
        assert not history or inertia <= history[-1] * (1 + 1e-9) + 1e-9, \
            f"k-means inertia increased: {history[-1]} -> {inertia}"
        history.append(inertia)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
    return PseudoLabelCodebook(centroids.astype(np.float32), it, history[-1], history)


def step_labels(frame_labels: np.ndarray, n_steps: int, k: int, kernel: int = 3) -> np.ndarray:
    """Majority label of each step's four-frame group (lowest label wins ties)."""
    ends = step_end(np.arange(n_steps), kernel)
    groups = frame_labels[ends[:, None] - (GROUP - 1) + np.arange(GROUP)[None, :]]
    counts = np.zeros((n_steps, k), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(n_steps), GROUP), groups.reshape(-1)), 1)
    return np.argmax(counts, axis=1)


def batch_step_labels(batch: Batch, codebook: PseudoLabelCodebook, kernel: int = 3) -> np.ndarray:
    sub = frontend_lengths(batch.feature_lengths, kernel)
    out = np.zeros((len(batch), int(sub.max())), dtype=np.int64)
    for i in range(len(batch)):
        frames = batch.features[i, :batch.feature_lengths[i]]
        out[i, :sub[i]] = step_labels(kmeans_assign(codebook, frames), int(sub[i]), codebook.k, kernel)
    return out


# -- masking ------------------------------------------------------------------------
@dataclass(frozen=True)
class MaskSpec:
    mask_prob: float = 0.065
    span_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mask_prob < 1:
            raise ConfigurationError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if self.span_len < 1:
            raise ConfigurationError(f"span_len must be >= 1, got {self.span_len}")


def _draw_spans(lengths: np.ndarray, spec: MaskSpec, rng) -> np.ndarray:
    t_max = int(lengths.max())
    mask = np.zeros((len(lengths), t_max), dtype=bool)
    for i, n in enumerate(lengths):
        starts = np.nonzero(rng.random(int(n)) < spec.mask_prob)[0]
        for s in starts:
            mask[i, s:min(s + spec.span_len, n)] = True
    return mask


def span_mask(lengths, spec: MaskSpec) -> np.ndarray:
    """Boolean [B, T''] mask; a draw with nothing masked is retried once."""
    lengths = np.asarray(lengths)
    rng = np.random.default_rng(spec.seed)
    mask = _draw_spans(lengths, spec, rng)
    if not mask.any():
        mask = _draw_spans(lengths, spec, rng)
    if not mask.any():
        raise EmptyTargetError(
            f"no positions masked after one retry (mask_prob={spec.mask_prob}, lengths={lengths.tolist()})")
    return mask


# -- masked prediction ----------------------------------------------------------------
def masked_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over positions where ``mask`` is True."""
    b_idx, t_idx = np.nonzero(np.asarray(mask, dtype=bool))
    if len(b_idx) == 0:
        raise EmptyTargetError("masked_cross_entropy: no masked positions")
    lp = T.log_softmax(logits)
    picked = lp[b_idx, t_idx, np.asarray(labels)[b_idx, t_idx]]
    return -picked.mean()


def masked_predict_loss(model: AcousticModel, batch: Batch, codebook: PseudoLabelCodebook,
                        mask: MaskSpec) -> Tensor:
    kernel = model.config.conv_kernel
    sub = frontend_lengths(batch.feature_lengths, kernel)
    m = span_mask(sub, mask)
    labels = batch_step_labels(batch, codebook, kernel)
    enc = model.encode(batch.features, batch.feature_lengths, mask=m)
    return masked_cross_entropy(model.cluster_logits(enc.hidden), labels, m & enc.padding_mask)


# -- contrastive --------------------------------------------------------------------
def info_nce(pos_sims: Tensor, neg_sims: Tensor, temperature: float) -> Tensor:
    """Mean of ``-log softmax([pos, negs] / tau)[0]``; pos [M], neg [M, K]."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    pos_sims, neg_sims = T.tensor(pos_sims), T.tensor(neg_sims)
    logits = T.concat([pos_sims.reshape(-1, 1), neg_sims], axis=1) * (1.0 / temperature)
    return -T.log_softmax(logits)[:, 0].mean()


def sample_negatives(mask: np.ndarray, n_negatives: int, rng,
                     stats: dict | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchors (b, t) and [M, K] negative step indices from the same utterance's masked steps."""
    anchors_b, anchors_t, negs = [], [], []
    for b in range(mask.shape[0]):
        pos = np.nonzero(mask[b])[0]
        for t in pos:
            cand = pos[pos != t]
            if len(cand) == 0:
                _bump(stats, "anchors_without_negatives")
                continue
            if len(cand) < n_negatives:
                _bump(stats, "negatives_with_replacement")
                pick = rng.choice(cand, size=n_negatives, replace=True)
            else:
                pick = rng.choice(cand, size=n_negatives, replace=False)
            anchors_b.append(b)
            anchors_t.append(t)
            negs.append(pick)
    if not anchors_b:
        raise EmptyTargetError("contrastive loss: no masked step has a negative candidate")
    return np.array(anchors_b), np.array(anchors_t), np.array(negs)


def _bump(stats: dict | None, key: str) -> None:
    if stats is not None:
        stats[key] = stats.get(key, 0) + 1


def contrastive_loss(model: AcousticModel, batch: Batch, mask: MaskSpec, n_negatives: int = 10,
                     temperature: float = 0.1, stats: dict | None = None) -> Tensor:
    """InfoNCE between contextual outputs and front-end targets at masked steps."""
    kernel = model.config.conv_kernel
    sub = frontend_lengths(batch.feature_lengths, kernel)
    m = span_mask(sub, mask)
    rng = np.random.default_rng(mask.seed + 7919)
    enc = model.encode(batch.features, batch.feature_lengths, mask=m)
    c, q = model.contrastive_projections(enc.hidden, enc.frontend)
    cn, qn = T.l2_normalize(c), T.l2_normalize(q)
    b_idx, t_idx, neg_t = sample_negatives(m & enc.padding_mask, n_negatives, rng, stats)
    anchor = cn[b_idx, t_idx]
    pos = (anchor * qn[b_idx, t_idx]).sum(axis=-1)
    q_neg = qn[np.repeat(b_idx[:, None], n_negatives, axis=1), neg_t]
    neg = (anchor.reshape(len(b_idx), 1, -1) * q_neg).sum(axis=-1)
    if stats and stats.get("negatives_with_replacement"):
        log.debug("contrastive: %d anchors sampled negatives with replacement",
                  stats["negatives_with_replacement"])
    return info_nce(pos, neg, temperature)
