"""Command-line entry point.

Precedence for every setting: built-in defaults, then ``--config`` file
(``key = value`` lines), then explicit flags. All randomness derives from
``--seed`` (see :mod:`skelpaint.seeding`).

Exit codes: 0 success, 1 invalid input or usage, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff_net import NetConfig, Tensor, forward_repaint, load_checkpoint, save_checkpoint
from .autodiff_net.checkpoint import CheckpointError
from .chamfer import benchmark
from .colorize import ColorScheme, apply_color_mask, build_cloud, colorize_cloud, export_ply
from .evalbench import (
    SyntheticSpec,
    compute_metrics,
    generate_dataset,
    load_benchmark,
    write_metrics_csv,
)
from .skeleton_data import SkeletonDataError, normalize_sequence, parse_sequence, read_manifest, sample_frames
from .training import (
    ClassifierConfig,
    LinearClassifier,
    PretrainConfig,
    baseline_model,
    config_from_mapping,
    finetune,
    linear_probe,
    model_input,
    predict,
    pretrain_stream,
    read_config,
)

log = logging.getLogger("skelpaint")

NET_KEYS = ("k", "widths", "feat_dim", "grid_size", "decoder_hidden")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    if seed:
        p.add_argument("--seed", type=int, default=None, help="run seed; every random stream is derived from it")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS/OpenMP worker threads (falls back to $SKELPAINT_THREADS)")
    p.add_argument("--config", type=Path, default=None, help="key = value run config file")
    p.add_argument("-v", "--verbose", action="store_true", default=None, help="log per-epoch progress")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, default=None, help="dataset manifest (tab-separated); may come from --config")
    p.add_argument("--frames", type=int, default=None, help="frames T sampled per sequence (default 16)")
    p.add_argument("--test-fraction", type=float, default=None,
                   help="held-out share of every class (default 0.25)")
    p.add_argument("--split-seed", type=int, default=None, help="seed of the train/test split (default: --seed)")


def _add_classifier(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, action="append", default=[],
                   help="pretrained stream checkpoint; repeat to fuse streams")
    p.add_argument("--baseline", action="store_true", default=None, help="use a random, never-pretrained encoder on raw clouds")
    p.add_argument("--epochs", type=int, default=None, help="classifier epochs (default 100)")
    p.add_argument("--batch-size", type=int, default=None, help="classifier batch size (default 32)")
    p.add_argument("--lr-max", type=float, default=None, help="initial SGD learning rate (default 1e-3)")
    p.add_argument("--lr-min", type=float, default=None, help="final SGD learning rate (default 1e-5)")
    p.add_argument("--fusion", choices=("concat", "score"), default=None,
                   help="combine streams by feature concatenation or softmax-score averaging")
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=None,
                   help="z-score features with training-split statistics before the linear head (default on)")
    p.add_argument("--out", type=Path, default=None, help="output checkpoint (streams + classifier)")
    p.add_argument("--metrics", type=Path, default=None, help="CSV of epoch,split,loss,accuracy")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skelpaint", description="Skeleton cloud colorization toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic skeleton-action dataset")
    p.add_argument("--out", type=Path, required=True, help="output directory for sequences and manifest.tsv")
    p.add_argument("--classes", type=int, default=None, help="number of action classes (default 5)")
    p.add_argument("--per-class", type=int, default=None, help="sequences per class (default 40)")
    p.add_argument("--joints", type=int, default=None, help="joints per skeleton (default 8)")
    p.add_argument("--raw-frames", type=int, default=None, help="frames per generated sequence (default 32)")
    p.add_argument("--persons", type=int, choices=(1, 2), default=None, help="persons per sequence (default 1)")
    p.add_argument("--noise", type=float, default=None, help="Gaussian joint noise in meters (default 0.01)")
    _add_common(p)

    p = sub.add_parser("colorize", help="colorize one sequence file and write a PLY")
    p.add_argument("--in", dest="input", type=Path, required=True, help="input sequence file")
    p.add_argument("--scheme", required=True, help="temporal, spatial or person")
    p.add_argument("--mask", type=float, default=1.0, help="share of frames/joints that keep color (default 1)")
    p.add_argument("--frames", type=int, default=None, help="resample to this many frames first")
    p.add_argument("--out", type=Path, required=True, help="output PLY path")
    _add_common(p, seed=False)

    p = sub.add_parser("pretrain", help="self-supervised repaint pretraining of one stream")
    _add_data(p)
    p.add_argument("--scheme", default=None, help="temporal, spatial or person (default temporal)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 150)")
    p.add_argument("--batch-size", type=int, default=None, help="batch size (default 24)")
    p.add_argument("--lr-max", type=float, default=None, help="initial Adam learning rate (default 1e-5)")
    p.add_argument("--lr-min", type=float, default=None, help="final Adam learning rate (default 1e-7)")
    p.add_argument("--input-mode", choices=("raw", "hint"), default=None,
                   help="encoder input: raw cloud or partially colored hint cloud")
    p.add_argument("--hint-ratio", type=float, default=None, help="colored share of hint clouds (default 0.5)")
    p.add_argument("--feat-dim", type=int, default=None, help="encoder feature size F (default 128)")
    p.add_argument("--grid-size", type=int, default=None, help="decoder grid side G (default ceil(sqrt(N)))")
    p.add_argument("--out", type=Path, default=None, help="output checkpoint (default <scheme>.skpt)")
    p.add_argument("--loss-csv", type=Path, default=None,
                   help="CSV of per-epoch mean repaint loss (default: checkpoint path with .loss.csv)")
    _add_common(p)

    p = sub.add_parser("probe", help="linear probe on frozen encoders (unsupervised protocol)")
    _add_data(p)
    _add_classifier(p)
    _add_common(p)

    p = sub.add_parser("finetune", help="fine-tune encoders and classifier (semi-/supervised protocols)")
    _add_data(p)
    _add_classifier(p)
    p.add_argument("--fraction", type=float, default=None,
                   help="labeled share per class; below 1 selects the semi-supervised protocol")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a probe/finetune checkpoint on the test split")
    _add_data(p)
    p.add_argument("--model", type=Path, required=True, help="checkpoint written by probe or finetune")
    p.add_argument("--all", action="store_true", default=None, help="evaluate on every manifest entry instead of the test split")
    p.add_argument("--out", type=Path, default=None, help="per-class metrics CSV")
    _add_common(p)

    p = sub.add_parser("export-ply", help="repaint a sequence with a pretrained stream and write a PLY")
    p.add_argument("--checkpoint", type=Path, required=True, help="pretrained stream checkpoint")
    p.add_argument("--in", dest="input", type=Path, required=True, help="input sequence file")
    p.add_argument("--frames", type=int, default=None, help="frames T the model was trained with")
    p.add_argument("--out", type=Path, required=True, help="output PLY path")
    _add_common(p, seed=False)

    p = sub.add_parser("bench-chamfer", help="time brute-force vs kd-tree Chamfer distance")
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256, 512], help="point counts to time")
    p.add_argument("--repeats", type=int, default=3, help="repetitions per size")
    _add_common(p)
    return parser


def _settings(args) -> dict:
    """Config-file values overlaid with explicitly given flags."""
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key, val in vars(args).items():
        if val is not None and key not in ("config", "command"):
            values[key] = val
    return values


def _flag(values: dict, key: str) -> bool:
    val = values.get(key)
    if isinstance(val, str):
        return val.strip().lower() in ("1", "true", "yes", "on")
    return bool(val)


def _require(values: dict, key: str) -> Path:
    if not values.get(key):
        raise ValueError(f"--{key.replace('_', '-')} is required (as a flag or config key)")
    return Path(values[key])


def _get(values: dict, key: str, default, cast=None):
    val = values.get(key, default)
    if val is None:
        return None
    return (cast or type(default))(val) if isinstance(val, str) and default is not None else val


def _net_config(values: dict, n_points: int) -> NetConfig:
    kw = {}
    for key in NET_KEYS:
        if key in values and values[key] is not None:
            v = values[key]
            if key == "widths":
                kw[key] = tuple(int(x) for x in str(v).replace(",", " ").split()) if isinstance(v, str) else tuple(v)
            else:
                kw[key] = int(v)
    return NetConfig.for_points(n_points, **kw)


def _benchmark(values: dict):
    manifest = read_manifest(_require(values, "manifest"))
    seed = int(values.get("seed", 0) or 0)
    T = _get(values, "frames", 16, int)
    split_seed = _get(values, "split_seed", seed, int)
    frac = _get(values, "test_fraction", 0.25, float)
    return load_benchmark(manifest, T, frac, split_seed), T, split_seed, frac


def _limit_threads(n: int | None):
    if n is None and os.environ.get("SKELPAINT_THREADS"):
        n = int(os.environ["SKELPAINT_THREADS"])
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def cmd_gen_data(values: dict) -> None:
    spec = SyntheticSpec(
        n_classes=_get(values, "classes", 5, int),
        per_class=_get(values, "per_class", 40, int),
        n_joints=_get(values, "joints", 8, int),
        n_frames=_get(values, "raw_frames", 32, int),
        n_persons=_get(values, "persons", 1, int),
        noise=_get(values, "noise", 0.01, float),
        seed=_get(values, "seed", 0, int),
    )
    manifest = generate_dataset(spec, values["out"])
    print(f"wrote {len(manifest)} sequences to {values['out']}")


def cmd_colorize(values: dict) -> None:
    seq = normalize_sequence(parse_sequence(values["input"]))
    if values.get("frames"):
        seq = sample_frames(seq, int(values["frames"]))
    cloud = colorize_cloud(build_cloud(seq), ColorScheme.parse(values["scheme"]))
    ratio = float(values.get("mask", 1.0))
    if ratio < 1.0:
        cloud = apply_color_mask(cloud, ratio)
    export_ply(cloud, values["out"])
    print(f"wrote {len(cloud)} points ({int(cloud.colored.sum())} colored) to {values['out']}")


def cmd_pretrain(values: dict) -> None:
    bm, T, split_seed, frac = _benchmark(values)
    cfg = config_from_mapping(PretrainConfig, values)
    net = _net_config(values, len(bm.train_clouds[0]))
    log.info("pretrain config %s", asdict(cfg))
    log.info("net config %s", net.to_dict())
    out = Path(values.get("out") or f"{ColorScheme.parse(cfg.scheme).value}.skpt")
    loss_csv = Path(values.get("loss_csv") or out.with_suffix(".loss.csv"))
    result = pretrain_stream(bm.train_seqs, cfg, net)
    save_checkpoint(out, {result.model.scheme: result.model},
                    extra={"frames": T, "split_seed": split_seed, "test_fraction": frac, "seed": cfg.seed})
    write_metrics_csv([{"epoch": i + 1, "split": "train", "loss": f"{v:.10g}", "accuracy": ""}
                       for i, v in enumerate(result.losses)], loss_csv)
    final = f"{result.losses[-1]:.6f}" if result.losses else "n/a"
    print(f"pretrained {result.model.scheme} stream for {cfg.epochs} epochs; final loss {final}")


def _load_streams(values: dict, n_points: int):
    models = []
    for path in values.get("checkpoint") or []:
        loaded, _, _ = load_checkpoint(path)
        models += list(loaded.values())
    if _flag(values, "baseline"):
        models.append(baseline_model(_net_config(values, n_points), int(values.get("seed", 0) or 0)))
    if not models:
        raise ValueError("give at least one --checkpoint or --baseline")
    return models


def _save_protocol(values: dict, result, extra: dict) -> None:
    arrays = {f"classifier/{k}": v.data for k, v in result.classifier.params.items()}
    if result.classifier.mean is not None:
        arrays["classifier/mean"] = result.classifier.mean
        arrays["classifier/std"] = result.classifier.std
    extra = dict(extra, fusion=result.classifier.fusion, n_heads=len(result.classifier.heads),
                 stream_order=[m.scheme for m in result.models], accuracy=result.accuracy)
    save_checkpoint(_require(values, "out"), {f"{i}:{m.scheme}": m for i, m in enumerate(result.models)},
                    extra=extra, arrays=arrays)
    if values.get("metrics"):
        write_metrics_csv(result.history, values["metrics"])


def _classifier_run(values: dict, fn, protocol: str) -> None:
    _require(values, "out")
    bm, T, split_seed, frac = _benchmark(values)
    overrides = {"protocol": protocol}
    if protocol != "unsupervised":
        fraction = float(values.get("fraction", 1.0) or 1.0)
        overrides = {"protocol": "semi" if fraction < 1.0 else "supervised", "fraction": fraction}
    cfg = config_from_mapping(ClassifierConfig, values, **overrides)
    log.info("classifier config %s", asdict(cfg))
    models = _load_streams(values, len(bm.train_clouds[0]))
    result = fn(models, bm.train_clouds, bm.train_labels, bm.test_clouds, bm.test_labels, cfg, bm.n_classes)
    _save_protocol(values, result, {"frames": T, "split_seed": split_seed, "test_fraction": frac,
                                    "n_classes": bm.n_classes, "protocol": cfg.protocol})
    print(f"{cfg.protocol} top-1 accuracy: {100 * result.accuracy:.2f}%")


def cmd_eval(values: dict) -> None:
    models_by_key, extra, arrays = load_checkpoint(values["model"])
    keys = sorted(models_by_key, key=lambda k: int(k.split(":")[0]))
    models = [models_by_key[k] for k in keys]
    heads = [(Tensor(arrays[f"classifier/cls{i}.w"]), Tensor(arrays[f"classifier/cls{i}.b"]))
             for i in range(int(extra["n_heads"]))]
    clf = LinearClassifier(heads, extra["fusion"], arrays.get("classifier/mean"), arrays.get("classifier/std"))
    values.setdefault("frames", extra.get("frames"))
    values.setdefault("split_seed", extra.get("split_seed"))
    values.setdefault("test_fraction", extra.get("test_fraction"))
    bm, *_ = _benchmark(values)
    if _flag(values, "all"):
        clouds, labels = bm.train_clouds + bm.test_clouds, np.concatenate([bm.train_labels, bm.test_labels])
    else:
        if set(bm.train_ids.tolist()) & set(bm.test_ids.tolist()):
            raise ValueError("train and test splits overlap")
        clouds, labels = bm.test_clouds, bm.test_labels
    metrics = compute_metrics(predict(models, clf, clouds), labels, int(extra.get("n_classes", bm.n_classes)))
    print(metrics.summary())
    if values.get("out"):
        Path(values["out"]).write_text(metrics.to_csv(), encoding="utf-8")


def cmd_export_ply(values: dict) -> None:
    models, extra, _ = load_checkpoint(values["checkpoint"])
    model = next(iter(models.values()))
    seq = normalize_sequence(parse_sequence(values["input"]))
    seq = sample_frames(seq, int(values.get("frames") or extra.get("frames") or seq.n_frames))
    out = forward_repaint(model, model_input(model, build_cloud(seq))).data
    # repainted colors are unconstrained; clip for display
    from .colorize import ColorizedCloud

    n = len(out)
    cloud = ColorizedCloud(out[:, :3], np.clip(out[:, 3:], 0.0, 1.0), np.ones((n, 3), dtype=np.int64),
                           ColorScheme.parse(model.scheme), np.ones(n, dtype=bool), 1, 1)
    export_ply(cloud, values["out"])
    print(f"wrote {n} repainted points to {values['out']}")


def cmd_bench_chamfer(values: dict) -> None:
    print("n_points,method,seconds")
    for n, method, secs in benchmark(values["sizes"], int(values["repeats"]), int(values.get("seed") or 0)):
        print(f"{n},{method},{secs:.6f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "colorize": cmd_colorize,
    "pretrain": cmd_pretrain,
    "probe": lambda v: _classifier_run(v, linear_probe, "unsupervised"),
    "finetune": lambda v: _classifier_run(v, finetune, "supervised"),
    "eval": cmd_eval,
    "export-ply": cmd_export_ply,
    "bench-chamfer": cmd_bench_chamfer,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", None) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        values = _settings(args)
        values.setdefault("seed", 0)
        log.info("%s: seed=%s resolved=%s", args.command, values.get("seed"),
                    {k: str(v) for k, v in sorted(values.items())})
        limiter = _limit_threads(values.get("threads"))
        try:
            COMMANDS[args.command](values)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (OSError, CheckpointError) as exc:
        print(f"skelpaint {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, SkeletonDataError) as exc:
        print(f"skelpaint {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
