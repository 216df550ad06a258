"""Command-line front end.

Exit codes: 0 success, 1 validation error, 2 numeric failure (non-finite
values, failed gradient check or benchmark assertion), 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checks, data, flops
from . import config as C
from . import tensor as T
from . import training as TR
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, read_header, save_checkpoint
from .geometry import PointFileError, atomic_write_text

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1); argparse's default 2 means numeric failure here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _print_row(row: dict) -> None:
    oa = "" if row["oa"] != row["oa"] else f" oa {row['oa']:.4f}"
    print(f"epoch {row['epoch']:>3} {row['split']:<8} loss {row['loss']:.6f}{oa} lr {row['lr']:.3e}", flush=True)


def _run_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.preset(args.preset)
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "epochs", None) is not None:
        cfg.train = TR.TrainHyper.from_dict({**cfg.train.to_dict(), "epochs": args.epochs})
    if getattr(args, "init_checkpoint", None):
        cfg.init_checkpoint = args.init_checkpoint
    return C.apply_env(cfg)


def _require(cfg: C.RunConfig, *names) -> None:
    for n in names:
        if not getattr(cfg, n):
            raise C.ConfigError(n, "required (set it in the config or pass the flag)")


def _write_run(cfg: C.RunConfig, history: list, ck: Checkpoint, name: str) -> Path:
    out = Path(cfg.out)
    atomic_write_text(out / "config.json", cfg.dumps())
    atomic_write_text(out / "metrics.csv", TR.metrics_csv(history))
    path = out / name
    save_checkpoint(path, ck)
    return path


def cmd_synth(args) -> int:
    samples = data.synth_dataset(args.classes, args.per_class, args.points, args.noise, args.seed)
    path = data.write_dataset(args.out_dir, samples)
    n_train = sum(s.split == "train" for s in samples)
    print(f"wrote {len(samples)} clouds ({n_train} train / {len(samples) - n_train} test) and {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _require(cfg, "data", "out")
    T.set_default_dtype(cfg.dtype)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    atomic_write_text(Path(cfg.out) / "config.json", cfg.dumps())
    train, test = data.load_dataset(cfg.data)
    init = None
    if cfg.init_checkpoint:
        init = TR.encoder_part(load_checkpoint(cfg.init_checkpoint).params)
    r = TR.train_classifier(train, test, cfg.encoder, cfg.train, cfg.seed, init_params=init, log=_print_row)
    meta = {"kind": "classifier", "run": cfg.to_dict(), "history": r.history}
    path = _write_run(cfg, r.history, Checkpoint(cfg.encoder, r.params, r.optimizer, r.rng_state, r.epoch, meta),
                      "model.m3dc")
    print(f"saved {path} ({r.seconds:.1f}s)")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _run_config(args)
    _require(cfg, "data", "out")
    T.set_default_dtype(cfg.dtype)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    atomic_write_text(Path(cfg.out) / "config.json", cfg.dumps())
    train, _ = data.load_dataset(cfg.data)
    r = TR.pretrain(train, cfg.encoder, cfg.train, cfg.seed, log=_print_row)
    meta = {"kind": "pretrain", "run": cfg.to_dict(), "history": r.history}
    path = _write_run(cfg, r.history, Checkpoint(cfg.encoder, r.params, r.optimizer, r.rng_state, r.epoch, meta),
                      "pretrain.m3dc")
    print(f"saved {path} ({r.seconds:.1f}s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if "head.fc1.w" not in ck.params:
        raise ValueError(f"{args.checkpoint} holds no classification head (pretraining checkpoint?)")
    T.set_default_dtype(ck.params["head.fc1.w"].dtype)
    batch = ck.meta.get("run", {}).get("train", {}).get("batch_size", 32)
    train, test = data.load_dataset(args.data)
    clouds = {"train": train, "test": test, "all": train + test}[args.split]
    if not clouds:
        raise ValueError(f"no {args.split} samples in {args.data}")
    r = TR.evaluate(clouds, ck.params, ck.config, batch)
    print(f"split {args.split}: {len(clouds)} samples, loss {r.loss:.6f}")
    print(f"overall accuracy: {r.oa:.6f}")
    for c, acc in enumerate(r.per_class(ck.config.n_classes)):
        print(f"class {c}: {'n/a' if acc != acc else f'{acc:.6f}'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = C.load(args.config).encoder if args.config else C.preset("tiny").encoder
    blocks = tuple(b for b in args.blocks.split(",") if b) if args.blocks else checks.BLOCKS
    for b in blocks:
        if b not in checks.ALL_BLOCKS:
            raise ValueError(f"unknown block {b!r}; expected one of {checks.ALL_BLOCKS}")
    if args.mutate and args.mutate not in blocks:
        raise ValueError(f"--mutate {args.mutate!r} is not among the checked blocks")
    with T.default_dtype(args.dtype):
        results = checks.run_gradchecks(cfg, blocks, args.seed, args.mutate)
    print(checks.format_table(results))
    failed = [r.block for r in results if not r.passed]
    if failed:
        raise NumericFailure(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = C.load(args.config).encoder if args.config else C.preset(args.preset).encoder
    lengths = [int(x) for x in args.lengths.split(",")]
    ssm_rep = flops.ssm_layer_report(cfg, lengths)
    att_rep = flops.attention_report(cfg.C, lengths)
    if args.repeats > 0:
        with T.default_dtype(args.dtype):
            ssm_rep.wall, att_rep.wall = flops.time_layers(cfg, lengths, args.repeats)
    text = "\n".join([flops.CSV_HEADER, *ssm_rep.csv_rows(), *att_rep.csv_rows()]) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    ratio = [float(a / s) for a, s in zip(att_rep.per_token(), ssm_rep.per_token())]
    print("attention/SSM FLOP ratio: " + ", ".join(f"L={L}: {r:.3f}" for L, r in zip(lengths, ratio)),
          file=sys.stderr)
    if len(lengths) >= 3:
        if any(d != 0 for d in ssm_rep.second_differences()):
            raise NumericFailure("SSM layer FLOPs are not affine in L")
        if not all(d > 0 for d in att_rep.second_differences()):
            raise NumericFailure("attention layer FLOPs show no quadratic term")
    return EXIT_OK


def cmd_inspect(args) -> int:
    header = read_header(args.checkpoint)
    if not args.full:
        header["manifest"] = [f"{e['group']}:{e['name']} {e['dtype']}{e['shape']} @{e['offset']}"
                              for e in header["manifest"]]
        header.get("meta", {}).pop("history", None)
    print(json.dumps(header, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="m3d", description="Point-cloud SSM encoder: data, training and checks.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic shape dataset")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_synth)

    for name, fn, help_ in (("train", cmd_train, "train a classifier"),
                            ("pretrain", cmd_pretrain, "masked point modeling pretraining")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="RunConfig JSON")
        p.add_argument("--preset", default="desk", choices=sorted(C.PRESETS), help="used when --config is absent")
        p.add_argument("--data", help="dataset directory or manifest (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--epochs", type=int, help="override train.epochs")
        if name == "train":
            p.add_argument("--init-checkpoint", help="fine-tune from this checkpoint's encoder")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="accuracy of a saved classifier")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable block")
    p.add_argument("--config", help="RunConfig JSON (encoder section used; must be tiny)")
    p.add_argument("--dtype", default="f64", choices=C.DTYPES)
    p.add_argument("--blocks", help=f"comma list from {','.join(checks.ALL_BLOCKS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mutate", help="inject a wrong-sign gradient into this block")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="analytic FLOPs and wall time vs sequence length")
    p.add_argument("--config")
    p.add_argument("--preset", default="full", choices=sorted(C.PRESETS))
    p.add_argument("--lengths", default="64,128,256,512")
    p.add_argument("--repeats", type=int, default=3, help="timed runs per length; 0 skips timing")
    p.add_argument("--dtype", default="f32", choices=C.DTYPES)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="print a checkpoint header")
    p.add_argument("checkpoint")
    p.add_argument("--full", action="store_true", help="full manifest and training history")
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help and usage errors
        return e.code if isinstance(e.code, int) else EXIT_INVALID
    try:
        return args.fn(args)
    except (CheckpointError, PointFileError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericFailure, T.NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
