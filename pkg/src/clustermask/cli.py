"""Command-line entry point: gen, train, eval, attn, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 failed check.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import os
import sys
import time
from dataclasses import dataclass
from typing import Callable, Sequence, TextIO

import numpy as np

from . import cmt
from . import data as Dm
from . import losses as L
from . import model as Mm
from . import tensor as T
from .location import PixelCoordGrid, ReferenceState
from .panoptic import PQAccumulator, PQResult

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
# roundoff of a two-point difference on an O(1) loss is ~1e-16/eps; the composite
# has entries with gradients near 1e-7, so a wider step is needed there
COMPOSITE_EPS = 1e-4
PARAM_JITTER = 0.1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# Run configuration files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSettings:
    merge: str = "argmax"
    conf_threshold: float = 0.7
    overlap_threshold: float = 0.5


_SECTIONS = (Mm.ModelConfig, Mm.TrainConfig, EvalSettings)


@dataclass
class RunConfig:
    model: Mm.ModelConfig
    train: Mm.TrainConfig
    eval: EvalSettings


def _owner(key: str):
    for cls in _SECTIONS:
        if key in {f.name for f in dataclasses.fields(cls)}:
            return cls
    return None


def parse_run_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse ``key=value`` lines (``#`` comments allowed); ``overrides`` win over the file."""
    items: dict[type, dict[str, str]] = {cls: {} for cls in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cls = _owner(key)
        if cls is None:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        items[cls][key] = value
    for key, value in (overrides or {}).items():
        cls = _owner(key)
        if cls is None:
            raise ValueError(f"unknown key {key!r}")
        items[cls][key] = value
    try:
        built = [Mm.config_from_items(cls, items[cls]) for cls in _SECTIONS]
    except (TypeError, ValueError) as exc:
        raise ValueError(f"invalid configuration: {exc}") from None
    return RunConfig(*built)


def load_run_config(path: str | None, overrides: dict[str, str]) -> RunConfig:
    text = ""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_run_config(text, overrides)


# --------------------------------------------------------------------------
# PGM heatmaps
# --------------------------------------------------------------------------


def heatmap_levels(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to integers 0..255; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.int64)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.int64)


def encode_pgm(levels: np.ndarray) -> str:
    h, w = levels.shape
    rows = "\n".join(" ".join(str(int(x)) for x in row) for row in levels)
    return f"P2\n{w} {h}\n255\n{rows}\n"


def decode_pgm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines() for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P2":
        raise ValueError("not an ASCII PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    body = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if body.size != w * h:
        raise ValueError(f"expected {w * h} samples, found {body.size}")
    return body.reshape(h, w)


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {text!r}") from None
    if h < 16 or w < 16:
        raise UsageError(f"--size {text} is below the 16x16 minimum")
    return h, w


def cmd_gen(args, out: TextIO) -> int:
    h, w = _parse_size(args.size)
    if args.samples < 0:
        raise UsageError("--samples must be non-negative")
    config = Dm.SceneConfig(height=h, width=w, max_shapes=args.max_shapes)
    try:
        samples = Dm.generate_dataset(args.samples, args.seed, config)
    except Dm.GenerationError as exc:
        raise UsageError(str(exc)) from None
    Dm.write_dataset(args.out, samples)
    print(f"samples\t{len(samples)}", file=out)
    for cls, count in Dm.class_histogram(samples).items():
        print(f"class\t{cls}\t{Dm.CLASS_NAMES[cls]}\t{count}", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("variant", "variant"), ("iterations", "iterations"), ("seed", "seed"), ("merge", "merge")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def log_header(cfg: RunConfig, timestamp: bool) -> list[str]:
    lines = ["# clustermask training log"]
    if timestamp:
        lines.append(f"# started {datetime.datetime.now().isoformat(timespec='seconds')}")
    lines += [f"# {line}" for line in Mm.config_to_text(cfg.model).splitlines()]
    lines += [f"# {line}" for line in Mm.config_to_text(cfg.train).splitlines()]
    lines.append(Mm.LOG_COLUMNS)
    return lines


def cmd_train(args, out: TextIO) -> int:
    run = load_run_config(args.config, _overrides(args))
    header, samples = Dm.read_dataset_with_header(args.data)
    if not samples:
        raise UsageError(f"dataset {args.data} is empty")
    params = adam = None
    if args.resume:
        ckpt = Mm.load_checkpoint(args.resume)
        if ckpt.config != run.model:
            diff = [f.name for f in dataclasses.fields(Mm.ModelConfig) if getattr(ckpt.config, f.name) != getattr(run.model, f.name)]
            raise UsageError(f"checkpoint config differs from run config in: {', '.join(diff)}")
        params, adam = ckpt.params, ckpt.adam
    log_path = args.log or f"{args.out}.log"
    with open(log_path, "w", encoding="utf-8") as log:
        for line in log_header(run, timestamp=not args.no_timestamp):
            log.write(line + "\n")

        def on_log(rec: Mm.LogRecord) -> None:
            log.write(rec.line() + "\n")
            log.flush()
            if not args.quiet:
                print(rec.line(), file=out)

        try:
            result = Mm.train(
                samples, run.model, run.train, params=params, adam=adam, on_log=on_log, stop_after=args.stop_after
            )
        except Mm.TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CHECK
    Mm.save_checkpoint(args.out, Mm.Checkpoint(run.model, result.params, result.adam))
    print(f"checkpoint\t{args.out}\tstep\t{result.adam.step}", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def format_pq(res: PQResult, tsv: bool) -> list[str]:
    rows = [("all", res.pq, res.sq, res.rq), ("thing", res.pq_thing, float("nan"), float("nan")),
            ("stuff", res.pq_stuff, float("nan"), float("nan"))]
    if tsv:
        lines = ["scope\tpq\tsq\trq\ttp\tfp\tfn"]
        lines += [f"{name}\t{pq:.6f}\t{sq:.6f}\t{rq:.6f}\t\t\t" for name, pq, sq, rq in rows]
        for c, r in res.per_class.items():
            lines.append(f"class:{c}\t{r['pq']:.6f}\t{r['sq']:.6f}\t{r['rq']:.6f}\t{r['tp']}\t{r['fp']}\t{r['fn']}")
        return lines

    def pct(x):
        return "    -" if x != x else f"{100 * x:5.1f}"

    lines = [f"PQ {pct(res.pq)}  SQ {pct(res.sq)}  RQ {pct(res.rq)}  PQ^Th {pct(res.pq_thing)}  PQ^St {pct(res.pq_stuff)}"]
    lines.append("class       PQ     SQ     RQ    TP    FP    FN")
    for c, r in res.per_class.items():
        name = Dm.CLASS_NAMES[c] if c < len(Dm.CLASS_NAMES) else str(c)
        lines.append(f"{name:<10} {pct(r['pq'])}  {pct(r['sq'])}  {pct(r['rq'])} {r['tp']:5d} {r['fp']:5d} {r['fn']:5d}")
    return lines


def cmd_eval(args, out: TextIO) -> int:
    header, samples = Dm.read_dataset_with_header(args.data)
    if args.oracle:
        acc = PQAccumulator(header.thing_classes)
        for s in samples:
            gt = Dm.gt_panoptic_map(s.target)
            acc.add(gt, gt)
        res = acc.result()
        run = None
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt unless --oracle is given")
        ckpt = Mm.load_checkpoint(args.ckpt)
        base = {f.name: str(getattr(ckpt.config, f.name)) for f in dataclasses.fields(Mm.ModelConfig)}
        text = ""
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        run = parse_run_config("\n".join(f"{k}={v}" for k, v in base.items()) + "\n" + text, _overrides(args))
        try:
            Mm.check_params(ckpt.params, run.model)
        except Mm.CheckpointError as exc:
            raise UsageError(str(exc)) from None
        e = run.eval
        res = Mm.evaluate(ckpt.params, samples, run.model, header.thing_classes, e.merge, e.conf_threshold, e.overlap_threshold)
    if run is not None and not args.tsv:
        print(f"merge {run.eval.merge}", file=out)
    for line in format_pq(res, args.tsv):
        print(line, file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# attn
# --------------------------------------------------------------------------


def attention_maps(params, image, cfg: Mm.ModelConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per decoder layer: (clustering assignment Z, HW x N; softmax-over-pixels attention, N x HW)."""
    with T.no_grad():
        res = Mm.run_model(image, Mm.as_dense(params), cfg, record_attention=True)
    traces = (res.stack1.traces if res.stack1 is not None else []) + res.traces
    return [(tr.Z.data, tr.attention.data) for tr in traces]


def entropy_table(maps, center: int) -> list[tuple[float, float]]:
    """(clustering-column entropy, attention-row entropy) per layer, in nats."""
    cluster = cmt.attention_entropy_report([z for z, _ in maps], center)
    attention = cmt.attention_entropy_report([a.T for _, a in maps], center)
    return list(zip(cluster, attention))


def matched_center_entropies(params, samples: Sequence[Dm.Sample], cfg: Mm.ModelConfig) -> tuple[float, float]:
    """Mean clustering and attention entropies over matched centers and layers."""
    cl, at = [], []
    for s in samples:
        with T.no_grad():
            res = Mm.run_model(s.image, Mm.as_dense(params), cfg)
        matching = Mm.match(res.pred, s.target, cfg)
        maps = attention_maps(params, s.image, cfg)
        for n in matching.pred_indices:
            for c, a in entropy_table(maps, int(n)):
                cl.append(c)
                at.append(a)
    return float(np.mean(cl)), float(np.mean(at))


def cmd_attn(args, out: TextIO) -> int:
    ckpt = Mm.load_checkpoint(args.ckpt)
    samples = Dm.read_dataset(args.data)
    cfg = ckpt.config
    if not 0 <= args.sample < len(samples):
        raise UsageError(f"--sample {args.sample} outside dataset of {len(samples)}")
    if not 0 <= args.center < cfg.N:
        raise UsageError(f"--center {args.center} must be below N={cfg.N}")
    image = samples[args.sample].image
    h, w = image.shape[0] // Mm.STRIDE, image.shape[1] // Mm.STRIDE
    maps = attention_maps(ckpt.params, image, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    for i, (z, a) in enumerate(maps):
        for kind, col in (("cluster", z[:, args.center]), ("attention", a[args.center])):
            path = os.path.join(args.out_dir, f"layer{i}_{kind}.pgm")
            with open(path, "w", encoding="ascii") as fh:
                fh.write(encode_pgm(heatmap_levels(col.reshape(h, w))))
    print("layer\tcluster_entropy\tattention_entropy", file=out)
    rows = entropy_table(maps, args.center)
    for i, (c, a) in enumerate(rows):
        print(f"{i}\t{c:.6f}\t{a:.6f}", file=out)
    print(f"mean\t{np.mean([r[0] for r in rows]):.6f}\t{np.mean([r[1] for r in rows]):.6f}", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

GRADCHECK_SIZES = {
    "tiny": dict(image=8, D=4, N=3, num_layers=1, M=2, rfn=False),
    "small": dict(image=16, D=6, N=4, num_layers=2, M=3, rfn=True),
}


def _primitive_checks(rng: np.random.Generator) -> list[tuple[str, Callable, list]]:
    def arr(*shape, positive=False):
        x = rng.normal(size=shape)
        return T.DenseArray(np.abs(x) + 0.5 if positive else x)

    wts = {}

    def weighted(shape):
        # a random weighting keeps every gradient entry away from structural zeros
        if shape not in wts:
            wts[shape] = rng.normal(size=shape)
        return wts[shape]

    def wsum(y):
        return T.reduce(T.mul(y, weighted(y.shape)), "sum")

    mask = rng.random((4, 5)) > 0.3
    mask[:, 0] = True
    idx = np.array([2, 0, 3, 3])
    return [
        ("matmul", lambda a, b: wsum(T.matmul(a, b)), [arr(3, 4), arr(4, 2)]),
        ("transpose", lambda a: wsum(T.transpose(a)), [arr(3, 4)]),
        ("reshape", lambda a: wsum(T.reshape(a, (2, 6))), [arr(3, 4)]),
        ("softmax_axis", lambda a: wsum(T.softmax_axis(a, axis=1)), [arr(3, 4)]),
        ("log_softmax_axis", lambda a: wsum(T.log_softmax_axis(a, axis=0)), [arr(3, 4)]),
        ("log_softmax_masked", lambda a: wsum(T.log_softmax_axis(a, axis=1, where=mask)), [arr(4, 5)]),
        ("concat", lambda a, b: wsum(T.concat([a, b], axis=1)), [arr(3, 2), arr(3, 4)]),
        ("take", lambda a: wsum(T.take(a, idx, axis=0)), [arr(4, 3)]),
        ("affine", lambda x, w, b: wsum(T.affine(x, w, b)), [arr(5, 3), arr(3, 4), arr(4)]),
        ("add", lambda a, b: wsum(T.add(a, b)), [arr(3, 3), arr(3, 3)]),
        ("sub", lambda a, b: wsum(T.sub(a, b)), [arr(3, 3), arr(3, 3)]),
        ("mul", lambda a, b: wsum(T.mul(a, b)), [arr(3, 3), arr(3, 3)]),
        ("scale", lambda a: wsum(T.scale(a, -1.7)), [arr(3, 3)]),
        ("sigmoid", lambda a: wsum(T.sigmoid(a)), [arr(3, 4)]),
        ("gelu", lambda a: wsum(T.gelu(a)), [arr(3, 4)]),
        ("log", lambda a: wsum(T.log(a)), [arr(3, 4, positive=True)]),
        ("exp", lambda a: wsum(T.exp(a)), [arr(3, 4)]),
        ("absolute", lambda a: wsum(T.absolute(a)), [arr(3, 4, positive=True)]),
        ("reduce_sum", lambda a: wsum(T.reduce(a, "sum", axis=1)), [arr(3, 4)]),
        ("reduce_mean", lambda a: wsum(T.reduce(a, "mean", axis=0)), [arr(3, 4)]),
        ("reduce_min", lambda a: wsum(T.reduce(a, "min", axis=1)), [arr(3, 4)]),
        ("reduce_max", lambda a: wsum(T.reduce(a, "max", axis=0)), [arr(3, 4)]),
        ("normalize_rows", lambda a: wsum(T.normalize_rows(a)), [arr(3, 4)]),
        ("layer_norm", lambda a: wsum(T.layer_norm(a)), [arr(3, 4)]),
    ]


def _randomized_params(cfg: Mm.ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    # zero-initialized projections make many gradients structurally zero; perturb everything
    return {k: v + rng.normal(scale=PARAM_JITTER, size=v.shape) for k, v in Mm.init_params(cfg, 0).items()}


def _composite_check(size: str, rng: np.random.Generator) -> list[tuple[str, float]]:
    size_cfg = GRADCHECK_SIZES[size]
    H = size_cfg["image"]
    checks = []
    variants = cmt.VARIANTS
    for variant in variants:
        cfg = Mm.ModelConfig(
            D=size_cfg["D"], N=size_cfg["N"], num_layers=size_cfg["num_layers"], M=size_cfg["M"], variant=variant,
            rfn=size_cfg["rfn"], dtype="float64", sample_count=H * H // 16,
        )
        scene = Dm.generate_scene(int(rng.integers(1 << 31)), Dm.SceneConfig(16, 16, max_shapes=cfg.N - 1))
        # nearest downscale keeps the scene valid at the tiny resolution
        step = 16 // H
        masks = scene.target.masks[:, ::step, ::step]
        keep = masks.reshape(len(masks), -1).any(axis=1)
        target = L.PanopticTarget(masks[keep], scene.target.classes[keep])
        image = scene.image[::step, ::step]
        params = _randomized_params(cfg, rng)
        names = sorted(params)
        with T.no_grad():
            base = Mm.run_model(image, Mm.as_dense(params), cfg)
        matching = Mm.match(base.pred, target, cfg)
        sample = Mm.contrastive_sample(target, base.pred.height, base.pred.width, cfg, 0)

        def f(*arrays):
            p = dict(zip(names, arrays))
            res = Mm.run_model(image, p, cfg)
            return Mm.compute_loss(res, target, cfg, matching=matching, sample=sample).total

        err = T.finite_diff_check(f, [T.DenseArray(params[k]) for k in names], eps=COMPOSITE_EPS)
        checks.append((f"forward+loss[{variant}{',rfn' if cfg.rfn else ''}]", err))
    return checks


def _layer_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    HW, N, D, M = 4, 3, 3, 2
    grid = PixelCoordGrid(2, 2)
    out = []
    layer = {k: v + rng.normal(scale=PARAM_JITTER, size=v.shape) for k, v in cmt.init_layer_params(rng, D, M).items()}
    names = sorted(layer)
    F0, C0, S0 = rng.normal(size=(HW, D)), rng.normal(size=(N, D)), rng.normal(size=(HW, N))
    e0 = rng.normal(size=(N, 2 * M))
    w_f, w_c = rng.normal(size=(HW, D)), rng.normal(size=(N, D))
    for variant in cmt.VARIANTS:
        cfg = cmt.DecoderConfig(variant=variant)

        def f(F, C, S, e, *arrays, cfg=cfg):
            state = cmt.DecoderState(F, C, S, ReferenceState.from_embedding(e, M))
            new, _ = cmt.cmt_layer(state, dict(zip(names, arrays)), grid, cfg)
            return T.reduce(T.mul(new.F, w_f), "sum") + T.reduce(T.mul(new.C, w_c), "sum")

        inputs = [T.DenseArray(x) for x in (F0, C0, S0, e0)] + [T.DenseArray(layer[k]) for k in names]
        out.append((f"cmt_layer[{variant}]", T.finite_diff_check(f, inputs, eps=COMPOSITE_EPS)))
    return out


def run_gradcheck(size: str, seed: int, corrupt: Sequence[str] = ()) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    results = []
    with T.corrupt_gradient(*corrupt):
        for name, fn, inputs in _primitive_checks(rng):
            results.append((name, T.finite_diff_check(fn, inputs)))
        results += _layer_checks(rng)
        results += _composite_check(size, rng)
    return results


def cmd_gradcheck(args, out: TextIO) -> int:
    start = time.perf_counter()
    results = run_gradcheck(args.size, args.seed, args.corrupt or ())
    bad = []
    print("component\tmax_rel_error\tstatus", file=out)
    for name, err in results:
        ok = err < GRADCHECK_TOL
        if not ok:
            bad.append(name)
        print(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}", file=out)
    print(f"elapsed\t{time.perf_counter() - start:.1f}s", file=out)
    if bad:
        print(f"gradient check failed: {', '.join(bad)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clustermask", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", default="64x64")
    g.add_argument("--max-shapes", type=int, default=4)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config")
    t.add_argument("--variant", choices=cmt.VARIANTS)
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--log", help="metrics log path (default: <out>.log)")
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--stop-after", type=int, metavar="STEP", help="save and stop after this step")
    t.add_argument("--no-timestamp", action="store_true")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="panoptic quality on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--config")
    e.add_argument("--merge", choices=("argmax", "maskwise"))
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--tsv", action="store_true")
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")

    a = sub.add_parser("attn", help="attention heatmaps and entropies")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--sample", type=int, default=0)
    a.add_argument("--center", type=int, default=0)
    a.add_argument("--out-dir", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check")
    c.add_argument("--size", choices=tuple(GRADCHECK_SIZES), default="tiny")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "attn": cmd_attn, "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        if isinstance(exc, (Dm.FormatError, Mm.CheckpointError)):
            print(f"format error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
