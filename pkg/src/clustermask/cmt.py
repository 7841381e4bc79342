"""Clustering mask transformer decoder layer.

Pixels are assigned to cluster centers (softmax over centers, with affinity
logits carried residually from layer to layer), centers pool the pixels
assigned to them, and pixels receive their centers' values back. The
DETR-style cross-attention (softmax over pixels) is kept as a separate term
so the three center-update variants can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .location import PixelCoordGrid, ReferenceState, inject_coordinates, update_reference_masks
from .tensor import DenseArray, ShapeError

VARIANTS = ("baseline_eq3", "clustering_eq5", "combined_eq7")


@dataclass(frozen=True)
class DecoderConfig:
    variant: str = "combined_eq7"
    attention_scale: bool = False
    layer_norm: bool = False
    self_attention: bool = True
    feed_forward: bool = True
    share_affinity_projections: bool = False
    # multiplies the Z^T V^p term; 0 reduces the combined update to the baseline
    cluster_update_weight: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass(frozen=True)
class DecoderState:
    F: DenseArray
    C: DenseArray
    S: DenseArray
    ref: ReferenceState

    def __post_init__(self):
        hw, n = self.F.shape[0], self.C.shape[0]
        if self.S.shape != (hw, n):
            raise ShapeError(f"affinity logits {self.S.shape} do not match {hw} pixels x {n} centers")
        if self.F.shape[1] != self.C.shape[1]:
            raise ShapeError(f"feature width {self.F.shape[1]} vs center width {self.C.shape[1]}")


@dataclass
class LayerTrace:
    """Per-layer quantities kept for supervision and inspection."""

    Z: DenseArray  # HW x N, rows sum to 1
    logits: DenseArray  # carried S' before the softmax
    attention: DenseArray | None  # N x HW softmax over pixels (None when not computed)


def _affinity_scale(cfg: DecoderConfig, D: int) -> float:
    return 1.0 / math.sqrt(D) if cfg.attention_scale else 1.0


def _clustering_projections(params: Mapping[str, DenseArray], cfg: DecoderConfig):
    if cfg.share_affinity_projections:
        return params["q_c"], params["k_p"]
    return params["qt_c"], params["kt_p"]


def assign_pixels(
    state: DecoderState, params: Mapping[str, DenseArray], cfg: DecoderConfig = DecoderConfig()
) -> tuple[DenseArray, DenseArray]:
    """Return ``(Z, S')`` with ``S' = S + K~^p (Q~^c)^T`` and ``Z = softmax_N(S')``."""
    wq, wk = _clustering_projections(params, cfg)
    keys = T.matmul(state.F, wk)
    queries = T.matmul(state.C, wq)
    affinity = T.matmul(keys, T.transpose(queries))
    s = _affinity_scale(cfg, state.F.shape[1])
    if s != 1.0:
        affinity = T.scale(affinity, s)
    logits = T.add(state.S, affinity)
    return T.softmax_axis(logits, axis=1), logits


def baseline_attention(
    state: DecoderState, params: Mapping[str, DenseArray], cfg: DecoderConfig = DecoderConfig()
) -> DenseArray:
    """``softmax_HW(Q^c (K^p)^T)``: one distribution over pixels per center (N x HW)."""
    q = T.matmul(state.C, params["q_c"])
    k = T.matmul(state.F, params["k_p"])
    logits = T.matmul(q, T.transpose(k))
    s = _affinity_scale(cfg, state.F.shape[1])
    if s != 1.0:
        logits = T.scale(logits, s)
    return T.softmax_axis(logits, axis=1)


def cross_attention_baseline(
    state: DecoderState, params: Mapping[str, DenseArray], cfg: DecoderConfig = DecoderConfig()
) -> DenseArray:
    """Additive update term of DETR-style cross-attention, without the residual."""
    return T.matmul(baseline_attention(state, params, cfg), T.matmul(state.F, params["v_p"]))


def cluster_center_update(Z: DenseArray, Vp: DenseArray) -> DenseArray:
    """``Z^T V^p``: each center pools the values of the pixels assigned to it."""
    if Z.shape[0] != Vp.shape[0]:
        raise ShapeError(f"assignment has {Z.shape[0]} pixels, values have {Vp.shape[0]}")
    return T.matmul(T.transpose(Z), Vp)


def combined_center_update(
    state: DecoderState,
    params: Mapping[str, DenseArray],
    Z: DenseArray,
    cfg: DecoderConfig = DecoderConfig(),
    attention: DenseArray | None = None,
) -> DenseArray:
    """Center update for the configured variant.

    combined_eq7 evaluates the factored form ``C + (A + Z^T) V^p``.
    """
    Vp = T.matmul(state.F, params["v_p"])
    if cfg.variant != "clustering_eq5" and attention is None:
        attention = baseline_attention(state, params, cfg)
    if cfg.variant == "baseline_eq3":
        mix = attention
    else:
        zt = T.transpose(Z)
        if cfg.cluster_update_weight != 1.0:
            zt = T.scale(zt, cfg.cluster_update_weight)
        mix = zt if cfg.variant == "clustering_eq5" else T.add(attention, zt)
    return T.add(state.C, T.matmul(mix, Vp))


def pixel_feature_update(F: DenseArray, Z: DenseArray, Vc: DenseArray) -> DenseArray:
    """``F + Z V^c``: every pixel receives its (soft) centers' values."""
    if Z.shape != (F.shape[0], Vc.shape[0]) or Vc.shape[1] != F.shape[1]:
        raise ShapeError(f"pixel update shapes F{F.shape} Z{Z.shape} V{Vc.shape}")
    return T.add(F, T.matmul(Z, Vc))


def _center_self_attention(C: DenseArray, params: Mapping[str, DenseArray], cfg: DecoderConfig) -> DenseArray:
    q = T.matmul(C, params["sa_q"])
    k = T.matmul(C, params["sa_k"])
    logits = T.matmul(q, T.transpose(k))
    s = _affinity_scale(cfg, C.shape[1])
    if s != 1.0:
        logits = T.scale(logits, s)
    return T.add(C, T.matmul(T.softmax_axis(logits, axis=1), T.matmul(C, params["sa_v"])))


def _feed_forward(C: DenseArray, params: Mapping[str, DenseArray]) -> DenseArray:
    hidden = T.gelu(T.affine(C, params["ffn_w1"], params["ffn_b1"]))
    return T.add(C, T.affine(hidden, params["ffn_w2"], params["ffn_b2"]))


def _maybe_norm(x: DenseArray, cfg: DecoderConfig) -> DenseArray:
    return T.layer_norm(x) if cfg.layer_norm else x


def _sub(params: Mapping[str, DenseArray], prefix: str) -> dict[str, DenseArray]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def cmt_layer(
    state: DecoderState,
    params: Mapping[str, DenseArray],
    grid: PixelCoordGrid,
    cfg: DecoderConfig = DecoderConfig(),
    ref_mlp: Mapping[str, DenseArray] | None = None,
    record_attention: bool = False,
) -> tuple[DecoderState, LayerTrace]:
    """One decoder layer.

    Order: coordinate injection, pixel assignment, center update, pixel
    update, self-attention over centers, feed-forward, reference-mask update.
    ``ref_mlp`` overrides the layer's own ``ref_mlp.*`` parameters (shared head).
    ``record_attention`` computes the softmax-over-pixels map for inspection
    even when the variant does not use it.
    """
    F, C = inject_coordinates(state.F, state.C, grid, state.ref, _sub(params, "conv_f."), _sub(params, "conv_c."))
    cur = DecoderState(F=F, C=C, S=state.S, ref=state.ref)

    Z, logits = assign_pixels(cur, params, cfg)
    uses_attention = cfg.variant != "clustering_eq5"
    attention = baseline_attention(cur, params, cfg) if uses_attention or record_attention else None
    C = _maybe_norm(combined_center_update(cur, params, Z, cfg, attention=attention if uses_attention else None), cfg)
    F = _maybe_norm(pixel_feature_update(F, Z, T.matmul(C, params["v_c"])), cfg)
    if cfg.self_attention:
        C = _maybe_norm(_center_self_attention(C, params, cfg), cfg)
    if cfg.feed_forward:
        C = _maybe_norm(_feed_forward(C, params), cfg)
    ref = update_reference_masks(state.ref, C, ref_mlp if ref_mlp is not None else _sub(params, "ref_mlp."))
    return DecoderState(F=F, C=C, S=logits, ref=ref), LayerTrace(Z=Z, logits=logits, attention=attention)


def _orthonormal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def init_layer_params(
    rng: np.random.Generator, D: int, M: int, dtype=np.float64, with_ref_mlp: bool = True, coord_scale: float = 1.0
) -> dict[str, np.ndarray]:
    """Initial parameters for one layer (plain arrays, keyed by local name).

    Query/key projections are orthonormal; every value projection and the
    feed-forward output start at zero so the layer starts as the identity on
    (F, C). Coordinate convolutions start as ``[I; random]`` projections.
    """
    p: dict[str, np.ndarray] = {}
    for name in ("q_c", "k_p", "qt_c", "kt_p", "sa_q", "sa_k"):
        p[name] = _orthonormal(rng, D)
    for name in ("v_p", "v_c", "sa_v"):
        p[name] = np.zeros((D, D))
    p["ffn_w1"] = rng.normal(scale=1.0 / math.sqrt(D), size=(D, 2 * D))
    p["ffn_b1"] = np.zeros(2 * D)
    p["ffn_w2"] = np.zeros((2 * D, D))
    p["ffn_b2"] = np.zeros(D)
    p["conv_f.w"] = np.vstack([np.eye(D), rng.normal(scale=coord_scale, size=(2, D))])
    p["conv_f.b"] = np.zeros(D)
    p["conv_c.w"] = np.vstack([np.eye(D), rng.normal(scale=coord_scale / math.sqrt(M), size=(2 * M, D))])
    p["conv_c.b"] = np.zeros(D)
    if with_ref_mlp:
        p.update({f"ref_mlp.{k}": v for k, v in init_ref_mlp(rng, D, M).items()})
    return {k: v.astype(dtype) for k, v in p.items()}


def init_ref_mlp(rng: np.random.Generator, D: int, M: int) -> dict[str, np.ndarray]:
    return {
        "w1": rng.normal(scale=1.0 / math.sqrt(D), size=(D, D)),
        "b1": np.zeros(D),
        "w2": rng.normal(scale=0.1 / math.sqrt(D), size=(D, 2 * M)),
        "b2": np.zeros(2 * M),
    }


def attention_entropy_report(maps: Sequence, matched_center: int) -> list[float]:
    """Shannon entropy (nats) of one center's column in each HW x N map.

    Each column is normalized to a distribution over pixels first; an all-zero
    column has entropy 0.
    """
    out = []
    for m in maps:
        arr = m.data if isinstance(m, DenseArray) else np.asarray(m)
        col = np.asarray(arr[:, matched_center], dtype=np.float64)
        total = col.sum()
        if total <= 0:
            out.append(0.0)
            continue
        p = col / total
        nz = p[p > 0]
        out.append(float(-(nz * np.log(nz)).sum()))
    return out
