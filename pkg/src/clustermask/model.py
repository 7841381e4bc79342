"""Toy end-to-end network, its losses, Adam training loop and checkpoints."""

from __future__ import annotations

import dataclasses
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .cmt import VARIANTS, DecoderConfig, DecoderState, LayerTrace, cmt_layer, init_layer_params, init_ref_mlp
from .data import BACKGROUND, NUM_CLASSES, Sample, gt_panoptic_map
from .location import PixelCoordGrid, ReferenceState
from .panoptic import PanopticMap, PQAccumulator, PQResult, Prediction, maskwise_merge, pixelwise_argmax
from .tensor import ContractError, DenseArray, ShapeError

STRIDE = 4
CKPT_MAGIC = b"CMTW"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    D: int = 64
    N: int = 8
    num_layers: int = 3
    M: int = 8
    num_classes: int = NUM_CLASSES
    variant: str = "combined_eq7"
    rfn: bool = False
    rfn_stack2: bool = True
    attention_scale: bool = False
    layer_norm: bool = False
    share_affinity_projections: bool = False
    share_ref_mlp: bool = False
    cluster_update_weight: float = 1.0
    fresh_readout: bool = False
    loc_weight: float = 1.0
    ins_weight: float = 1.0
    aux_weight: float = 0.5
    stack1_weight: float = 0.5
    tau: float = 0.3
    sample_count: int = 128
    sample_exponent: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.N < 2 or self.D < 1 or self.num_layers < 1 or self.M < 1:
            raise ValueError("N must be >= 2 and D, num_layers, M >= 1")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def background_query(self) -> int:
        return self.N - 1

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(
            variant=self.variant,
            attention_scale=self.attention_scale,
            layer_norm=self.layer_norm,
            share_affinity_projections=self.share_affinity_projections,
            cluster_update_weight=self.cluster_update_weight,
        )


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 1
    lr: float = 1e-3
    warmup: int = 150
    power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_interval: int = 10
    clip_norm: float = 1.0  # global gradient-norm clip; 0 disables

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if not 0 <= self.warmup <= self.iterations:
            raise ValueError(f"warmup {self.warmup} must lie in [0, iterations={self.iterations}]")


# --------------------------------------------------------------------------
# key=value serialization shared by checkpoints and run configs
# --------------------------------------------------------------------------


def parse_value(template, text: str):
    """Convert ``text`` to the type of ``template``."""
    if isinstance(template, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text.strip()


def config_to_text(cfg) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)!r}\n".replace("'", "") for f in dataclasses.fields(cfg))


def config_from_items(cls, items: Mapping[str, str]):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(items) - known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return cls(**{k: parse_value(getattr(defaults, k), v) for k, v in items.items()})


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


def _decoder_prefixes(cfg: ModelConfig) -> list[str]:
    stacks = ["layer"] + (["rfn.layer"] if cfg.rfn else [])
    return [f"{s}{i}." for s in stacks for i in range(cfg.num_layers)]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D = cfg.D
    p: dict[str, np.ndarray] = {
        "stem.conv1.w": rng.normal(scale=math.sqrt(2.0 / 27), size=(27, D)),
        "stem.conv1.b": np.zeros(D),
        "stem.conv2.w": rng.normal(scale=math.sqrt(2.0 / (9 * D)), size=(9 * D, D)),
        "stem.conv2.b": np.zeros(D),
        "centers": rng.normal(scale=1.0 / math.sqrt(D), size=(cfg.N, D)),
    }
    heads = ["cls."] + (["rfn.cls."] if cfg.rfn else [])
    for h in heads:
        p[h + "w"] = np.zeros((D, cfg.num_classes + 1))
        p[h + "b"] = np.zeros(cfg.num_classes + 1)
    for prefix in _decoder_prefixes(cfg):
        layer = init_layer_params(rng, D, cfg.M, with_ref_mlp=not cfg.share_ref_mlp)
        p.update({prefix + k: v for k, v in layer.items()})
    if cfg.share_ref_mlp:
        p.update({f"ref_mlp.{k}": v for k, v in init_ref_mlp(rng, D, cfg.M).items()})
    return {k: np.ascontiguousarray(v, dtype=cfg.np_dtype) for k, v in p.items()}


def as_dense(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, DenseArray]:
    return {k: DenseArray(v, requires_grad=requires_grad) for k, v in params.items()}


def _sub(params: Mapping[str, DenseArray], prefix: str) -> dict[str, DenseArray]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# --------------------------------------------------------------------------
# Stem
# --------------------------------------------------------------------------


def _conv_indices(h: int, w: int) -> np.ndarray:
    """Row indices of the 3x3 stride-2 pad-1 neighborhoods; ``h*w`` marks padding."""
    ho, wo = h // 2, w // 2
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    idx = np.empty((ho * wo, 9), dtype=np.int64)
    t = 0
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ii, jj = 2 * oi + di, 2 * oj + dj
            ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            idx[:, t] = np.where(ok, ii * w + jj, h * w).ravel()
            t += 1
    return idx


def _im2col(image: np.ndarray) -> np.ndarray:
    H, W, ch = image.shape
    flat = np.vstack([image.reshape(H * W, ch), np.zeros((1, ch), dtype=image.dtype)])
    return flat[_conv_indices(H, W)].reshape((H // 2) * (W // 2), 9 * ch)


def stem(image: np.ndarray, params: Mapping[str, DenseArray]) -> DenseArray:
    """Two 3x3 stride-2 convolutions with GeLU: H x W x 3 -> (H/4 * W/4) x D."""
    image = np.asarray(image)
    H, W = image.shape[:2]
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be H x W x 3, got {image.shape}")
    if H % STRIDE or W % STRIDE:
        raise ShapeError(f"image {H}x{W} is not divisible by the stem stride {STRIDE}")
    dtype = params["stem.conv1.w"].dtype
    cols = DenseArray(_im2col(image.astype(dtype) - 0.5))
    x = T.gelu(T.affine(cols, params["stem.conv1.w"], params["stem.conv1.b"]))
    h, w = H // 2, W // 2
    D = x.shape[1]
    padded = T.concat([x, DenseArray(np.zeros((1, D), dtype=dtype))], axis=0)
    cols = T.reshape(T.take(padded, _conv_indices(h, w), axis=0), ((h // 2) * (w // 2), 9 * D))
    return T.gelu(T.affine(cols, params["stem.conv2.w"], params["stem.conv2.b"]))


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------


@dataclass
class ForwardResult:
    pred: Prediction  # at stride 4
    Z_layers: list[DenseArray]
    ref: ReferenceState
    traces: list[LayerTrace]
    state: DecoderState
    stem_features: DenseArray
    stack1: "ForwardResult | None" = None

    def __iter__(self) -> Iterator:
        return iter((self.pred, self.Z_layers, self.ref))


def _decode(
    state: DecoderState,
    params: Mapping[str, DenseArray],
    prefix: str,
    grid: PixelCoordGrid,
    cfg: ModelConfig,
    record_attention: bool,
) -> tuple[DecoderState, list[LayerTrace]]:
    dcfg = cfg.decoder()
    shared = _sub(params, "ref_mlp.") if cfg.share_ref_mlp else None
    traces = []
    for i in range(cfg.num_layers):
        state, tr = cmt_layer(state, _sub(params, f"{prefix}{i}."), grid, dcfg, shared, record_attention)
        traces.append(tr)
    return state, traces


def _readout(
    state: DecoderState, traces: list[LayerTrace], params, head: str, grid: PixelCoordGrid, cfg: ModelConfig
) -> Prediction:
    if cfg.fresh_readout:
        logits = T.matmul(state.F, T.transpose(state.C))
        Z = T.softmax_axis(logits, axis=1)
    else:
        Z, logits = traces[-1].Z, traces[-1].logits
    class_logits = T.affine(state.C, params[head + "w"], params[head + "b"])
    return Prediction(
        Z=Z,
        class_probs=T.softmax_axis(class_logits, axis=1),
        height=grid.height,
        width=grid.width,
        logits=logits,
        class_logits=class_logits,
    )


def _initial_state(F: DenseArray, params, cfg: ModelConfig) -> DecoderState:
    dtype = F.dtype
    return DecoderState(
        F=F,
        C=params["centers"],
        S=DenseArray(np.zeros((F.shape[0], cfg.N), dtype=dtype)),
        ref=ReferenceState.initial(cfg.N, cfg.M, dtype=dtype),
    )


def forward(
    image: np.ndarray, params: Mapping[str, DenseArray], cfg: ModelConfig, record_attention: bool = False
) -> ForwardResult:
    """Single-stack forward pass. Unpacks as ``(pred, Z_layers, ref)``."""
    H, W = np.shape(image)[:2]
    grid = PixelCoordGrid(H // STRIDE, W // STRIDE)
    F0 = stem(image, params)
    state, traces = _decode(_initial_state(F0, params, cfg), params, "layer", grid, cfg, record_attention)
    pred = _readout(state, traces, params, "cls.", grid, cfg)
    return ForwardResult(pred, [t.Z for t in traces], state.ref, traces, state, F0)


def forward_rfn(
    image: np.ndarray, params: Mapping[str, DenseArray], cfg: ModelConfig, record_attention: bool = False
) -> ForwardResult:
    """Two stacked decoders sharing centers; stack 2 sees the mean of stem and stack-1 features."""
    if not cfg.rfn:
        raise ContractError("forward_rfn needs a config with rfn enabled")
    first = forward(image, params, cfg, record_attention)
    if not cfg.rfn_stack2:
        return first
    grid = PixelCoordGrid(first.pred.height, first.pred.width)
    F = T.scale(T.add(first.stem_features, first.state.F), 0.5)
    start = DecoderState(F=F, C=first.state.C, S=first.state.S, ref=first.state.ref)
    state, traces = _decode(start, params, "rfn.layer", grid, cfg, record_attention)
    pred = _readout(state, traces, params, "rfn.cls.", grid, cfg)
    return ForwardResult(pred, [t.Z for t in traces], state.ref, traces, state, first.stem_features, stack1=first)


def run_model(image, params, cfg: ModelConfig, record_attention: bool = False) -> ForwardResult:
    return (forward_rfn if cfg.rfn else forward)(image, params, cfg, record_attention)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


@dataclass
class LossTerms:
    total: DenseArray
    seg: DenseArray
    mask_ce: DenseArray
    loc: DenseArray
    ins: DenseArray
    matching: L.Matching

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "seg", "mask_ce", "loc", "ins")}


def match(pred: Prediction, target: L.PanopticTarget, cfg: ModelConfig) -> L.Matching:
    """Hungarian matching that never assigns the reserved background query."""
    cost = L.matching_cost(pred, target)
    return L.hungarian(np.delete(cost, cfg.background_query, axis=0))


def contrastive_sample(target: L.PanopticTarget, height: int, width: int, cfg: ModelConfig, seed: int):
    low = L.downsample_target(target, height, width)
    return L.sample_pixels(low, min(cfg.sample_count, height * width), seed, cfg.sample_exponent)


def _stack_losses(res: ForwardResult, matching, target, sample, cfg: ModelConfig):
    pred = res.pred
    weights = L.mask_target_weights(pred, matching, target, cfg.background_query)
    mask_ce = L.mask_cross_entropy(pred.Z, pred.logits, weights)
    classes = L.class_targets(cfg.N, cfg.num_classes, matching, target, cfg.background_query, BACKGROUND)
    seg = mask_ce + L.class_cross_entropy(pred, classes)
    for tr in res.traces[:-1]:
        seg = seg + T.scale(L.mask_cross_entropy(tr.Z, tr.logits, weights), cfg.aux_weight)
    if cfg.fresh_readout:
        last = res.traces[-1]
        seg = seg + T.scale(L.mask_cross_entropy(last.Z, last.logits, weights), cfg.aux_weight)
    loc = L.mask_approximation_loss(res.ref, matching, target)
    ins = L.pixel_contrastive_loss(res.state.F, sample, cfg.tau)
    return seg, mask_ce, loc, ins


def compute_loss(
    res: ForwardResult,
    target: L.PanopticTarget,
    cfg: ModelConfig,
    sample_seed: int = 0,
    matching: L.Matching | None = None,
    sample: L.SampledPixelSet | None = None,
) -> LossTerms:
    """Matched segmentation + weighted mask approximation + weighted contrastive loss.

    The matching comes from the final output and is reused for every layer
    and, under RFN, for stack 1 (whose terms are scaled by ``stack1_weight``).
    """
    if matching is None:
        matching = match(res.pred, target, cfg)
    if sample is None:
        sample = contrastive_sample(target, res.pred.height, res.pred.width, cfg, sample_seed)
    seg, mask_ce, loc, ins = _stack_losses(res, matching, target, sample, cfg)
    if res.stack1 is not None:
        s1 = _stack_losses(res.stack1, matching, target, sample, cfg)
        w = cfg.stack1_weight
        seg = seg + T.scale(s1[0], w)
        loc = loc + T.scale(s1[2], w)
        ins = ins + T.scale(s1[3], w)
    total = seg + T.scale(loc, cfg.loc_weight) + T.scale(ins, cfg.ins_weight)
    return LossTerms(total=total, seg=seg, mask_ce=mask_ce, loc=loc, ins=ins, matching=matching)


# --------------------------------------------------------------------------
# Optimizer and training loop
# --------------------------------------------------------------------------


def learning_rate(step: int, tcfg: TrainConfig) -> float:
    """``base * min(t / warmup, (1 - t / total) ** power)``."""
    warm = step / tcfg.warmup if tcfg.warmup > 0 else 1.0
    decay = max(0.0, 1.0 - step / tcfg.iterations) ** tcfg.power
    return tcfg.lr * min(warm, decay)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    tcfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step; returns new arrays and never mutates the inputs."""
    t = state.step + 1
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + tcfg.eps)).astype(p.dtype)
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm:
        return dict(grads)
    return {k: (g * (max_norm / norm)).astype(g.dtype) for k, g in grads.items()}


def batch_indices(step: int, tcfg: TrainConfig, n: int) -> list[int]:
    """Dataset indices for 1-based ``step``: a seeded permutation per epoch."""
    out = []
    for j in range(tcfg.batch_size):
        pos = (step - 1) * tcfg.batch_size + j
        epoch, offset = divmod(pos, n)
        out.append(int(np.random.default_rng([tcfg.seed, epoch]).permutation(n)[offset]))
    return out


def _sample_seed(tcfg: TrainConfig, step: int, j: int) -> int:
    return int(np.random.SeedSequence([tcfg.seed, step, j]).generate_state(1)[0])


def loss_and_grads(
    params: Mapping[str, np.ndarray], samples: Sequence[Sample], cfg: ModelConfig, seeds: Sequence[int]
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Average loss terms and gradients over ``samples``."""
    acc: dict[str, float] = {}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for s, seed in zip(samples, seeds):
        leaves = as_dense(params, requires_grad=True)
        terms = compute_loss(run_model(s.image, leaves, cfg), s.target, cfg, seed)
        terms.total.backward()
        for k, leaf in leaves.items():
            if leaf.grad is not None:
                grads[k] += leaf.grad
        for k, v in terms.values().items():
            acc[k] = acc.get(k, 0.0) + v
    n = len(samples)
    return {k: v / n for k, v in acc.items()}, {k: (g / n).astype(params[k].dtype) for k, g in grads.items()}


@dataclass
class LogRecord:
    step: int
    total: float
    mask: float
    loc: float
    ins: float
    lr: float
    mask_ce: float = float("nan")

    def line(self) -> str:
        return f"{self.step}\t{self.total:.6f}\t{self.mask:.6f}\t{self.loc:.6f}\t{self.ins:.6f}\t{self.lr:.6e}"


LOG_COLUMNS = "step\tloss_total\tloss_mask\tloss_loc\tloss_ins\tlr"


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    adam: AdamState
    log: list[LogRecord] = field(default_factory=list)


def train(
    dataset: Sequence[Sample],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    params: Mapping[str, np.ndarray] | None = None,
    adam: AdamState | None = None,
    on_log: Callable[[LogRecord], None] | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Adam on the composite loss, resuming after ``adam.step`` when given.

    Deterministic for a given seed: the batch order and the contrastive pixel
    samples depend only on ``(seed, step)``, so a resumed run matches an
    uninterrupted one. ``stop_after`` ends the run early without changing
    the schedule.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    max_k = max(s.target.K for s in dataset)
    if cfg.N < max_k + 1:
        raise ContractError(f"N={cfg.N} queries cannot cover {max_k} masks plus the background query")
    params = dict(params) if params is not None else init_params(cfg, tcfg.seed)
    adam = adam if adam is not None else AdamState.zeros_like(params)
    log: list[LogRecord] = []
    last = tcfg.iterations if stop_after is None else min(stop_after, tcfg.iterations)
    for step in range(adam.step + 1, last + 1):
        idx = batch_indices(step, tcfg, len(dataset))
        seeds = [_sample_seed(tcfg, step, j) for j in range(len(idx))]
        vals, grads = loss_and_grads(params, [dataset[i] for i in idx], cfg, seeds)
        if not all(math.isfinite(v) for v in vals.values()):
            raise TrainingDiverged(f"non-finite loss at step {step}: {vals}")
        if tcfg.clip_norm > 0:
            grads = clip_gradients(grads, tcfg.clip_norm)
        lr = learning_rate(step, tcfg)
        params, adam = adam_update(params, grads, adam, lr, tcfg)
        if step % tcfg.log_interval == 0 or step == tcfg.iterations:
            rec = LogRecord(step, vals["total"], vals["seg"], vals["loc"], vals["ins"], lr, vals["mask_ce"])
            log.append(rec)
            if on_log is not None:
                on_log(rec)
    return TrainResult(params, adam, log)


# --------------------------------------------------------------------------
# Inference and evaluation
# --------------------------------------------------------------------------


def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """n_out x n_in interpolation matrix with half-pixel centers and edge clamping."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] += 1.0 - frac
    w[np.arange(n_out), hi] += frac
    return w


def upsample_bilinear(Z: np.ndarray, height: int, width: int, out_h: int, out_w: int) -> np.ndarray:
    """(height*width) x N -> (out_h*out_w) x N; rows stay convex combinations."""
    n = Z.shape[1]
    grid = np.asarray(Z, dtype=np.float64).reshape(height, width, n)
    up = np.einsum("Hh,Ww,hwn->HWn", _bilinear_weights(height, out_h), _bilinear_weights(width, out_w), grid)
    return up.reshape(out_h * out_w, n)


def predict(params: Mapping[str, np.ndarray], image: np.ndarray, cfg: ModelConfig) -> Prediction:
    """Full-resolution prediction as plain arrays."""
    with T.no_grad():
        res = run_model(image, as_dense(params), cfg)
    p = res.pred
    H, W = np.shape(image)[:2]
    Z = upsample_bilinear(p.Z.data, p.height, p.width, H, W)
    return Prediction(Z=Z, class_probs=np.asarray(p.class_probs.data, dtype=np.float64), height=H, width=W)


def panoptic_from_prediction(
    pred: Prediction, merge: str = "argmax", conf_threshold: float = 0.7, overlap_threshold: float = 0.5
) -> PanopticMap:
    stuff = (BACKGROUND,)
    if merge == "argmax":
        return pixelwise_argmax(pred, conf_threshold, stuff_classes=stuff)
    if merge == "maskwise":
        return maskwise_merge(pred, conf_threshold, overlap_threshold, stuff_classes=stuff)
    raise ValueError(f"unknown merge mode {merge!r}")


def evaluate(
    params: Mapping[str, np.ndarray],
    samples: Sequence[Sample],
    cfg: ModelConfig,
    thing_classes: Sequence[int],
    merge: str = "argmax",
    conf_threshold: float = 0.7,
    overlap_threshold: float = 0.5,
) -> PQResult:
    acc = PQAccumulator(thing_classes)
    for s in samples:
        pm = panoptic_from_prediction(predict(params, s.image, cfg), merge, conf_threshold, overlap_threshold)
        acc.add(pm, gt_panoptic_map(s.target))
    return acc.result()


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg_text = config_to_text(ckpt.config).encode("utf-8")
    named = list(ckpt.params.items())
    named += [(f"adam.m.{k}", v) for k, v in ckpt.adam.m.items()]
    named += [(f"adam.v.{k}", v) for k, v in ckpt.adam.v.items()]
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg_text)), cfg_text]
    parts.append(struct.pack("<II", ckpt.adam.step, len(named)))
    parts += [_pack_array(k, v) for k, v in named]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte offset {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic, expected b'CMTW'")
    version, cfg_len = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    items = dict(line.split("=", 1) for line in take(cfg_len, "config").decode("utf-8").splitlines() if line)
    cfg = config_from_items(ModelConfig, items)
    step, count = struct.unpack("<II", take(8, "step"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(4 * size, name), dtype="<f4").reshape(shape).astype(cfg.np_dtype)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes at offset {pos}")
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in arrays.items() if k.startswith("adam.v.")}
    return Checkpoint(cfg, params, AdamState(m, v, step))


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    """Raise CheckpointError naming the first parameter that disagrees with ``cfg``."""
    expected = {k: v.shape for k, v in init_params(cfg, 0).items()}
    for k, shape in expected.items():
        if k not in params:
            raise CheckpointError(f"parameter {k} missing for this model config")
        if params[k].shape != shape:
            raise CheckpointError(f"parameter {k} has shape {params[k].shape}, config expects {shape}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"parameter {extra[0]} is not part of this model config")
