"""Command-line entry point: ``efficientfi <subcommand> ...``.

Every subcommand writes a run manifest (JSON) beside its main artifact with
the resolved arguments, timestamps and produced paths.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import statistics
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines
from . import edge_cloud as ec
from . import eval_metrics as em
from . import model as mdl
from . import synthetic_csi as sc
from .quantizer import CorruptMessageError
from .tensor_core import ConfigurationError, InputError, UsageError

log = logging.getLogger("efficientfi")

EXPECTED_ERRORS = (InputError, ConfigurationError, UsageError, CorruptMessageError,
                   ec.ProtocolError, mdl.CheckpointError, mdl.TrainingDivergedError, OSError)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _finite_or_str(v):
    return v if not isinstance(v, float) or math.isfinite(v) else str(v)


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clean = {k: _finite_or_str(v) for k, v in payload.items()}
    path.write_text(json.dumps(clean, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def manifest_path(artifact: Path) -> Path:
    return artifact / "run_manifest.json" if artifact.is_dir() else artifact.with_name(artifact.name + ".manifest.json")


def write_manifest(args: argparse.Namespace, started: str, artifacts: list[Path]) -> Path:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "manifest")}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "started": started,
        "finished": _now(),
        "artifacts": [str(a) for a in artifacts],
        "tool_version": __version__,
    }
    target = Path(args.manifest) if args.manifest else manifest_path(artifacts[0])
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return target


# ---------------------------------------------------------------------------
# shared helpers


def _load_split(directory: str, split: str) -> tuple[sc.CSIDataset, sc.DatasetConfig]:
    train, test, cfg = sc.load_dataset(directory)
    return (train if split == "train" else test), cfg


def _checked(params: mdl.ModelParameters, data: sc.CSIDataset) -> mdl.ModelParameters:
    shape = tuple(data.x.shape[1:])
    if shape != tuple(params.config.input_shape):
        raise InputError(f"checkpoint expects frames {tuple(params.config.input_shape)} "
                         f"(preset {params.config.preset!r}) but dataset has {shape}")
    if data.labels.size and int(data.labels.max()) >= params.config.num_classes:
        raise InputError("dataset has more classes than the checkpoint classifier")
    return params


def _train_config(args, **override) -> mdl.TrainConfig:
    kw = dict(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
              lam=args.lam, seed=args.seed, clip_norm=args.clip_norm,
              codebook_init=args.codebook_init, reduction=args.reduction,
              restart_dead_codes=args.restart_dead_codes)
    kw.update(override)
    return mdl.TrainConfig(**kw)


def _train(train: sc.CSIDataset, preset: str, K: int, D: int, cfg: mdl.TrainConfig,
           metrics_csv: Path | None, ckpt: Path | None) -> mdl.ModelParameters:
    arch = mdl.architecture(preset, K=K, D=D, num_classes=len(train.class_names))
    params, _ = mdl.train_loop(train.x, train.labels, arch, cfg, metrics_csv=metrics_csv, checkpoint=ckpt)
    return params


# ---------------------------------------------------------------------------
# subcommands; each returns the list of artifacts it wrote


def cmd_generate(args) -> list[Path]:
    classes = sc.default_profiles()
    if not 1 <= args.classes <= len(classes):
        raise InputError(f"--classes must lie in [1, {len(classes)}]")
    cfg = sc.DatasetConfig(preset=args.preset, classes=tuple(classes[:args.classes]),
                           per_class=args.per_class, split=args.split, seed=args.seed)
    train, test = sc.gen_dataset(cfg)
    out = Path(args.out)
    sc.save_dataset(out, cfg, train, test)
    print(f"wrote {len(train)} train / {len(test)} test frames to {out}")
    return [out]


def cmd_train(args) -> list[Path]:
    train, _ = _load_split(args.data, "train")
    _, _, dcfg = sc.load_dataset(args.data)
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    _train(train, dcfg.preset, args.K, args.D, _train_config(args), metrics, out)
    print(f"checkpoint {out}, metrics {metrics}")
    return [out, metrics]


def cmd_eval(args) -> list[Path]:
    data, _ = _load_split(args.data, args.split)
    params = _checked(mdl.load_checkpoint(args.ckpt), data)
    report = em.evaluate(params, data)
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".eval.json")
    report.to_json(out)
    print(f"accuracy {report.accuracy:.4f}  NMSE {report.nmse_db:.2f} dB  -> {out}")
    return [out]


def cmd_simulate(args) -> list[Path]:
    data, _ = _load_split(args.data, args.split)
    params = _checked(mdl.load_checkpoint(args.ckpt), data)
    transport = "tcp" if args.tcp is not None else "memory"
    rep = ec.simulate_session(data, params.subset(mdl.EDGE), params.subset(mdl.CLOUD), transport,
                              port=args.tcp or 0, log_path=args.log)
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".session.json")
    write_json(out, rep.to_dict())
    print(f"{rep.n_frames} frames over {transport}: accuracy {rep.accuracy:.4f}  "
          f"NMSE {rep.nmse_db:.2f} dB  {rep.bytes_transferred} bytes")
    return [out] + ([Path(args.log)] if args.log else [])


def _load_frame(path: str) -> np.ndarray:
    x = np.load(path, allow_pickle=False)
    return x[0] if x.ndim == 4 and len(x) == 1 else x


def cmd_compress(args) -> list[Path]:
    edge = mdl.load_checkpoint(args.ckpt)
    msg = ec.encode_frame(_load_frame(args.input).astype(np.float32), edge, args.sample_id)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(msg.to_bytes())
    print(f"{len(msg.to_bytes())} bytes ({msg.M} indices, K={msg.K}) -> {out}")
    return [out]


def cmd_decompress(args) -> list[Path]:
    cloud = mdl.load_checkpoint(args.ckpt)
    msg = ec.QuantizedMessage.from_bytes(Path(args.input).read_bytes())
    recon, pred, probs = ec.decode_frame(msg, cloud)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:  # keep the exact name; np.save would append .npy
        np.save(fh, recon)
    pred_path = write_json(out.with_name(out.name + ".prediction.json"),
                           {"sample_id": msg.sample_id, "predicted_class": pred,
                            "probabilities": [float(p) for p in probs]})
    print(f"class {pred} -> {out}")
    return [out, pred_path]


def cmd_baseline(args) -> list[Path]:
    data, _ = _load_split(args.data, args.split)
    rep = baselines.baseline_report(data, args.rate, args.seed, args.basis, args.lambda_l1,
                                    args.max_frames, args.max_iter)
    out = Path(args.out) if args.out else Path(args.data) / f"baseline_rate{args.rate}.json"
    write_json(out, rep)
    print(f"ISTA rate {args.rate}: NMSE {rep['nmse_db']:.2f} dB over {rep['n_frames']} frames -> {out}")
    return [out]


SWEEP_PARAMS = {"D": int, "K": int, "lambda": float}


def cmd_sweep(args) -> list[Path]:
    train, test, dcfg = sc.load_dataset(args.data)
    cast = SWEEP_PARAMS[args.param]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for raw in args.values:
        v = cast(raw)
        K, D = (v if args.param == "K" else args.K), (v if args.param == "D" else args.D)
        cfg = _train_config(args, lam=v) if args.param == "lambda" else _train_config(args)
        tag = f"{args.param}_{raw}"
        params = _train(train, dcfg.preset, K, D, cfg, out / f"{tag}.csv", out / f"{tag}.ckpt")
        rep = em.evaluate(params, test)
        rep.to_json(out / f"{tag}.json")
        rows.append([args.param, raw, rep.accuracy, rep.nmse_db, rep.gamma_payload])
        print(f"{tag}: accuracy {rep.accuracy:.4f}  NMSE {rep.nmse_db:.2f} dB")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value", "accuracy", "nmse_db", "gamma_payload"])
        w.writerows(rows)
    return [out]


def cmd_bench(args) -> list[Path]:
    params = mdl.load_checkpoint(args.ckpt)
    if args.data:
        frames = _checked(params, _load_split(args.data, args.split)[0]).x[:args.frames]
    else:
        rng = np.random.default_rng(args.seed)
        frames = rng.uniform(0, 2, (args.frames,) + tuple(params.config.input_shape)).astype(np.float32)
    for f in frames[:args.warmup]:
        mdl.encode(f, params)
    times = []
    for f in frames:
        t0 = time.perf_counter()
        mdl.encode(f, params)
        times.append((time.perf_counter() - t0) * 1e3)
    report = {
        "frames": len(times),
        "mean_ms": statistics.fmean(times),
        "median_ms": statistics.median(times),
        "p95_ms": float(np.percentile(times, 95)),
        "min_ms": min(times),
        "max_ms": max(times),
        "preset": params.config.preset,
        "threads": os.environ.get("EFI_THREADS"),
        "reference": "2.1 ms per frame reported on a GPU; context only, not comparable",
    }
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".bench.json")
    write_json(out, report)
    print(f"encode+quantize: median {report['median_ms']:.2f} ms  p95 {report['p95_ms']:.2f} ms -> {out}")
    return [out]


def cmd_export(args) -> list[Path]:
    data, _ = _load_split(args.data, args.split)
    params = _checked(mdl.load_checkpoint(args.ckpt), data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = em.export_embeddings(params, data, args.layer, out)
    print(f"{len(data)} rows of length {n} -> {out}")
    return [out]


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_args(p: argparse.ArgumentParser) -> None:
    d = mdl.TrainConfig()
    p.add_argument("--K", type=int, default=256, choices=[64, 128, 256, 512, 1024])
    p.add_argument("--D", type=int, default=256)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--clip-norm", type=float, default=d.clip_norm)
    p.add_argument("--codebook-init", choices=["uniform", "data"], default=d.codebook_init)
    p.add_argument("--reduction", choices=["mean", "sum"], default=d.reduction)
    p.add_argument("--restart-dead-codes", action="store_true",
                   help="re-seed codes unused during an epoch from encoder outputs")
    p.add_argument("--seed", type=int, default=0)


def _add_split(p: argparse.ArgumentParser, default: str = "test") -> None:
    p.add_argument("--split", choices=["train", "test"], default=default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="efficientfi", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--manifest", help="run manifest path (default: beside the main artifact)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a CSI activity dataset")
    p.add_argument("--preset", choices=sorted(sc.PRESETS), default="desk")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train encoder, codebook, decoder and classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="epoch CSV (default: checkpoint path with .csv)")
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy, NMSE and compression rates of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    _add_split(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="stream a split through the edge/cloud wire protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tcp", type=int, nargs="?", const=0, metavar="PORT",
                   help="run the edge in a second process over local TCP (0 = any free port)")
    p.add_argument("--log", help="reconstruction log file")
    p.add_argument("--out")
    _add_split(p)
    p.set_defaults(func=cmd_simulate)

    for name, func, help_ in (("compress", cmd_compress, "encode one .npy frame into a wire message"),
                              ("decompress", cmd_decompress, "decode a wire message into a .npy frame")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", required=True)
        if name == "compress":
            p.add_argument("--sample-id", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("baseline", help="ISTA/LASSO compressive-sensing reconstruction")
    p.add_argument("--data", required=True)
    p.add_argument("--rate", type=float, default=0.25)
    p.add_argument("--basis", choices=baselines.BASES, default="identity")
    p.add_argument("--lambda-l1", type=float, default=0.01)
    p.add_argument("--max-frames", type=int)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_split(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep", help="train and evaluate over a grid of one hyperparameter")
    p.add_argument("--data", required=True)
    p.add_argument("--param", choices=sorted(SWEEP_PARAMS), required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_train_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="per-frame encode+quantize latency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_split(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-embeddings", help="CSV of raw, quantized or penultimate vectors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", choices=em.LAYERS, required=True)
    p.add_argument("--out", required=True)
    _add_split(p)
    p.set_defaults(func=cmd_export)
    return ap


def _validate(args) -> None:
    if args.command == "sweep":
        cast = SWEEP_PARAMS[args.param]
        for v in args.values:
            try:
                cast(v)
            except ValueError:
                raise InputError(f"--values entry {v!r} is not a valid {args.param}") from None


def thread_limit():
    """Cap BLAS/OpenMP pools when EFI_THREADS is set."""
    n = os.environ.get("EFI_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    if not n.isdigit() or int(n) < 1:
        raise InputError(f"EFI_THREADS must be a positive integer, got {n!r}")
    return threadpool_limits(limits=int(n))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    started = _now()
    try:
        _validate(args)
        with thread_limit():
            artifacts = args.func(args)
        write_manifest(args, started, artifacts)
    except EXPECTED_ERRORS as exc:
        print(f"efficientfi {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
