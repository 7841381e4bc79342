"""Target assignment and training objectives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .location import ReferenceState
from .panoptic import Prediction, _np
from .tensor import ContractError, DenseArray, ShapeError

DICE_EPS = 1e-6


@dataclass
class PanopticTarget:
    """Ground truth: K disjoint, non-empty binary masks (K x H x W) and their class ids."""

    masks: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.masks.ndim != 3 or self.masks.shape[0] != self.classes.shape[0]:
            raise ShapeError(f"masks {self.masks.shape} vs classes {self.classes.shape}")
        if self.K and self.masks.sum(axis=0).max() > 1:
            raise ValueError("target masks overlap")
        if self.K and (self.masks.reshape(self.K, -1).sum(axis=1) == 0).any():
            raise ValueError("target contains an empty mask")

    @property
    def K(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]

    def id_map(self) -> np.ndarray:
        """H x W raster with mask index k at its pixels and K at background."""
        ids = np.full((self.height, self.width), self.K, dtype=np.int64)
        for k in range(self.K):
            ids[self.masks[k]] = k
        return ids

    def permuted(self, order) -> "PanopticTarget":
        order = np.asarray(order)
        return PanopticTarget(self.masks[order], self.classes[order])


@dataclass
class Matching:
    """Injective prediction -> target pairs, sorted by target index."""

    pairs: list[tuple[int, int]]
    total_cost: float

    def pred_of_target(self) -> dict[int, int]:
        return {k: n for n, k in self.pairs}

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([n for n, _ in self.pairs], dtype=np.int64)

    @property
    def target_indices(self) -> np.ndarray:
        return np.array([k for _, k in self.pairs], dtype=np.int64)


@dataclass
class SampledPixelSet:
    indices: np.ndarray
    cluster_of: np.ndarray = field(repr=False)


def hungarian(cost) -> Matching:
    """Exact minimum-cost assignment of every target (column) to a distinct prediction (row)."""
    cost = np.asarray(_np(cost), dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be N x K, got {cost.shape}")
    n, k = cost.shape
    if n < k:
        raise ContractError(f"need at least as many predictions as targets (N={n} < K={k})")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    if k == 0:
        return Matching([], 0.0)
    pred_of_target = _kernels.assign_rows(np.ascontiguousarray(cost.T))
    pairs = [(int(pred_of_target[t]), t) for t in range(k)]
    total = 0.0
    for p, t in pairs:
        total += cost[p, t]
    return Matching(pairs, float(total))


def block_counts(target: PanopticTarget, height: int, width: int) -> np.ndarray:
    """Pixel counts of every mask (and background, last column) inside each output cell.

    Returns (height*width) x (K+1). Output cells tile the target raster exactly.
    """
    H, W = target.height, target.width
    if H % height or W % width:
        raise ShapeError(f"target {H}x{W} is not a multiple of prediction {height}x{width}")
    sh, sw = H // height, W // width
    ids = target.id_map().reshape(height, sh, width, sw).transpose(0, 2, 1, 3).reshape(height * width, sh * sw)
    out = np.zeros((height * width, target.K + 1), dtype=np.float64)
    for k in range(target.K + 1):
        out[:, k] = (ids == k).sum(axis=1)
    return out


def downsample_target(target: PanopticTarget, height: int, width: int) -> PanopticTarget:
    """Majority label per output cell (ties to the lower mask index); masks that vanish are dropped."""
    ids = block_counts(target, height, width).argmax(axis=1).reshape(height, width)
    keep = [k for k in range(target.K) if (ids == k).any()]
    masks = np.stack([ids == k for k in keep]) if keep else np.zeros((0, height, width), dtype=bool)
    return PanopticTarget(masks, target.classes[keep])


def matching_cost(pred: Prediction, target: PanopticTarget) -> np.ndarray:
    """``cost[n, k] = -p_n(c_k) - Dice(Z[:, n], m_k)`` at the target's resolution.

    Z is compared to full-resolution masks by treating every output cell as
    the block of target pixels it covers.
    """
    z = np.asarray(_np(pred.Z), dtype=np.float64)
    probs = np.asarray(_np(pred.class_probs), dtype=np.float64)
    counts = block_counts(target, pred.height, pred.width)[:, : target.K]
    cell = (target.height // pred.height) * (target.width // pred.width)
    inter = z.T @ counts
    dice = 2.0 * inter / (cell * z.sum(axis=0)[:, None] + counts.sum(axis=0)[None, :] + DICE_EPS)
    return -probs[:, target.classes] - dice


# --------------------------------------------------------------------------
# Mask approximation
# --------------------------------------------------------------------------


def mask_statistics(target: PanopticTarget) -> np.ndarray:
    """Per mask: [min_h, max_h, avg_h, min_w, max_w, avg_w] of its pixel-center coordinates."""
    H, W = target.height, target.width
    stats = np.zeros((target.K, 6))
    for k in range(target.K):
        ii, jj = np.nonzero(target.masks[k])
        h = (ii + 0.5) / H
        w = (jj + 0.5) / W
        stats[k] = [h.min(), h.max(), h.mean(), w.min(), w.max(), w.mean()]
    return stats


def mask_approximation_loss(ref: ReferenceState, matching: Matching, target: PanopticTarget) -> DenseArray:
    """L1 between predicted reference points and matched ground-truth masks.

    Extreme term: 4 per-axis extremes averaged over matched centers; center
    term: 2 per-axis means. Unmatched centers do not contribute.
    """
    K = len(matching.pairs)
    if target.K == 0 or K == 0:
        return DenseArray(0.0, dtype=ref.r_c.dtype)
    stats = mask_statistics(target)[matching.target_indices].astype(ref.r_c.dtype)
    pts = T.take(ref.r_c, matching.pred_indices, axis=0)
    h = T.take(pts, np.arange(ref.M), axis=1)
    w = T.take(pts, np.arange(ref.M, 2 * ref.M), axis=1)

    def l1(x: DenseArray, col: int) -> DenseArray:
        return T.reduce(T.absolute(T.sub(x, stats[:, col].copy())), "sum")

    ext = l1(T.reduce(h, "min", 1), 0) + l1(T.reduce(h, "max", 1), 1)
    ext = ext + l1(T.reduce(w, "min", 1), 3) + l1(T.reduce(w, "max", 1), 4)
    cen = l1(T.reduce(h, "mean", 1), 2) + l1(T.reduce(w, "mean", 1), 5)
    return T.scale(ext, 1.0 / (4 * K)) + T.scale(cen, 1.0 / (2 * K))


# --------------------------------------------------------------------------
# Pixel-wise instance discrimination
# --------------------------------------------------------------------------


def sample_pixels(target: PanopticTarget, count: int, rng_seed: int, exponent: float = 0.5) -> SampledPixelSet:
    """Draw ``count`` distinct pixels, each weighted by ``area(its mask) ** -exponent``.

    Background is one more stratum. Deterministic for a given seed.
    """
    ids = target.id_map().ravel()
    hw = ids.size
    if count > hw:
        raise ContractError(f"cannot sample {count} of {hw} pixels without replacement")
    areas = np.bincount(ids, minlength=target.K + 1).astype(np.float64)
    weights = areas[ids] ** (-exponent)
    rng = np.random.default_rng(rng_seed)
    if count == hw:
        picked = np.arange(hw)
    else:
        picked = np.sort(rng.choice(hw, size=count, replace=False, p=weights / weights.sum()))
    return SampledPixelSet(indices=picked, cluster_of=ids[picked])


def pixel_contrastive_loss(features: DenseArray, sample: SampledPixelSet, tau: float = 0.3) -> DenseArray:
    """Supervised contrastive loss over sampled pixels with every same-cluster pixel as a positive.

    Features are L2-normalized; the anchor itself is excluded from its own
    denominator. Anchors without positives are skipped and the result is the
    mean over the remaining anchors.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    cl = np.asarray(sample.cluster_of)
    n = cl.size
    same = cl[:, None] == cl[None, :]
    not_self = ~np.eye(n, dtype=bool)
    positives = same & not_self
    n_pos = positives.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        return DenseArray(0.0, dtype=features.dtype)
    f = T.normalize_rows(T.take(features, sample.indices, axis=0))
    sim = T.scale(T.matmul(f, T.transpose(f)), 1.0 / tau)
    logp = T.log_softmax_axis(sim, axis=1, where=not_self)
    weights = np.where(positives, 1.0 / np.maximum(n_pos, 1)[:, None], 0.0) / anchors.sum()
    return T.neg(T.reduce(T.mul(logp, weights.astype(features.dtype)), "sum"))


# --------------------------------------------------------------------------
# Matched segmentation losses
# --------------------------------------------------------------------------


def _log_z(pred_like, logits) -> DenseArray:
    if logits is not None:
        return T.log_softmax_axis(logits, axis=1)
    return T.log(pred_like)


def mask_target_weights(
    pred: Prediction, matching: Matching, target: PanopticTarget, background_query: int | None = -1
) -> np.ndarray:
    """Per-cell target distribution over queries, (height*width) x N.

    Matched queries receive the fraction of their mask inside each cell; the
    reserved background query receives the uncovered fraction.
    """
    N = pred.num_queries
    counts = block_counts(target, pred.height, pred.width)
    counts = counts / counts.sum(axis=1, keepdims=True)
    y = np.zeros((pred.height * pred.width, N))
    for n, k in matching.pairs:
        y[:, n] += counts[:, k]
    if background_query is not None:
        bq = background_query % N
        if any(n == bq for n, _ in matching.pairs):
            raise ContractError(f"query {bq} is reserved for background and cannot be matched")
        y[:, bq] += counts[:, target.K]
    return y


def mask_cross_entropy(
    Z: DenseArray, logits: DenseArray | None, weights: np.ndarray
) -> DenseArray:
    logz = _log_z(Z, logits)
    return T.scale(T.reduce(T.mul(logz, weights.astype(logz.dtype)), "sum"), -1.0 / weights.shape[0])


def class_targets(num_queries: int, num_classes: int, matching: Matching, target: PanopticTarget,
                  background_query: int | None = -1, background_class: int = 0) -> np.ndarray:
    """Class index each query should predict; unmatched queries get the void class."""
    tgt = np.full(num_queries, num_classes, dtype=np.int64)
    for n, k in matching.pairs:
        tgt[n] = target.classes[k]
    if background_query is not None:
        tgt[background_query % num_queries] = background_class
    return tgt


def class_cross_entropy(pred: Prediction, targets: np.ndarray) -> DenseArray:
    logp = _log_z(pred.class_probs, pred.class_logits)
    n = targets.size
    picked = T.take(T.reshape(logp, (logp.size,)), np.arange(n) * logp.shape[1] + targets)
    return T.scale(T.reduce(picked, "sum"), -1.0 / n)


def matched_segmentation_loss(
    pred: Prediction,
    matching: Matching,
    target: PanopticTarget,
    aux: list[tuple[DenseArray, DenseArray | None]] = (),
    aux_weight: float = 0.5,
    background_query: int | None = -1,
    background_class: int = 0,
) -> DenseArray:
    """Mask cross-entropy + classification cross-entropy + weighted per-layer mask cross-entropy.

    ``aux`` holds ``(Z, logits)`` of intermediate layers; all reuse ``matching``.
    """
    weights = mask_target_weights(pred, matching, target, background_query)
    loss = mask_cross_entropy(pred.Z, pred.logits, weights)
    num_classes = _np(pred.class_probs).shape[1] - 1
    tgt = class_targets(pred.num_queries, num_classes, matching, target, background_query, background_class)
    loss = loss + class_cross_entropy(pred, tgt)
    for Z, logits in aux:
        loss = loss + T.scale(mask_cross_entropy(Z, logits, weights), aux_weight)
    return loss
