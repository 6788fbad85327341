"""Command-line interface.

Subcommands: gen-data, train, eval, gradcheck, colorfulness.  The report
paths (train/eval) write figures next to the delimited outputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checks
from .attributes import COLORFULNESS_NAMES, colorfulness, colorfulness_level
from .harness import TrainConfig


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aesnet",
        description="Desk-scale multi-attribute aesthetic scoring toolkit.")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file (keys mirror the training config)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="render a synthetic dataset")
    gen.add_argument("--n", type=int, required=True, help="number of images")
    gen.add_argument("--seed", dest="gen_seed", type=int, default=0)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--size", type=int, default=16, help="image edge length")

    tr = sub.add_parser("train", help="train on a manifest; writes log.csv, "
                        "checkpoint.json, eval.json and figures")
    tr.add_argument("--manifest", type=Path, required=True)
    tr.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.add_argument("--out", type=Path, default=None,
                    help="directory for report.json, scatter.png, attention.csv")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every block")
    gc.add_argument("--seeds", type=int, default=checks.DEFAULT_SEEDS)

    col = sub.add_parser(
        "colorfulness",
        help="colorfulness of P6 PPM images; one path prints value and "
             "level, several emit CSV (path,M,level); values exactly on a "
             "threshold go to the upper level")
    col.add_argument("images", nargs="+", type=Path)

    return parser


def _load_config(args) -> TrainConfig:
    if args.config is not None:
        cfg = TrainConfig.from_json(Path(args.config).read_text(encoding="ascii"))
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _cmd_gen_data(args) -> int:
    from .datagen import make_dataset
    records = make_dataset(args.n, args.gen_seed, args.out, args.size, args.size)
    print(f"wrote {len(records)} images + manifest.jsonl to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .harness import train
    cfg = _load_config(args)
    log = train(cfg, args.manifest, args.out)
    report = log.final_report
    plcc = "n/a" if report.plcc is None else f"{report.plcc:.4f}"
    srcc = "n/a" if report.srcc is None else f"{report.srcc:.4f}"
    print(f"trained {len(log.rows)} epochs (best {log.best_epoch}); "
          f"test plcc={plcc} srcc={srcc} mse={report.mse:.4f}")
    print(f"outputs in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate_split
    from .model import AestheticNet, export_attention_weights, load_checkpoint
    from .plots import save_prediction_scatter
    from .harness import load_samples

    cfg = _load_config(args)
    model = AestheticNet(cfg.model_config())
    load_checkpoint(model, args.checkpoint)
    splits, skipped = load_samples(args.manifest, cfg.input_size)
    samples = splits[args.split]
    if not samples:
        print(f"error: split {args.split!r} is empty", file=sys.stderr)
        return 1
    if skipped:
        print(f"warning: skipped {skipped} invalid manifest records", file=sys.stderr)
    report = evaluate_split(model, samples, cfg.loss_config())
    print(report.to_json())
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="ascii")
        save_prediction_scatter(report, out / "scatter.png")
        if cfg.interaction:
            rows = [(s.sample_id, model.predict(s.features)[1]) for s in samples]
            export_attention_weights(rows, out / "attention.csv")
    return 0


def _cmd_gradcheck(args) -> int:
    failed = False
    for result in checks.gradcheck_suite(args.seeds):
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:28s} worst={result.worst:.3e}  "
              f"(eps={result.eps:.0e}, {result.seeds} seeds)  {status}")
        failed = failed or not result.passed
    return 1 if failed else 0


def _cmd_colorfulness(args) -> int:
    from .ppm import read_ppm
    if len(args.images) == 1:
        img = read_ppm(args.images[0])
        value = colorfulness(img)
        level = colorfulness_level(value)
        print(f"colorfulness: {value:.4f}")
        print(f"level: {level} ({COLORFULNESS_NAMES[level]})")
    else:
        print("path,colorfulness,level")
        for path in args.images:
            value = colorfulness(read_ppm(path))
            print(f"{path},{value:.4f},{colorfulness_level(value)}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "colorfulness": _cmd_colorfulness,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # surface errors as exit codes, not tracebacks
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
