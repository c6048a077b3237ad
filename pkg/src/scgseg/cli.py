"""Command-line interface: train, evaluate, predict, verify, curves.

Exit codes: 0 success, 1 validation/configuration error, 2 I/O error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CheckpointError, NonFiniteLossError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("scgseg")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--device", choices=("cpu", "gpu"))
    p.add_argument("--deterministic", action="store_true", default=None)


def _data_flags(p: argparse.ArgumentParser):
    p.add_argument("--image-dir")
    p.add_argument("--mask-dir")
    p.add_argument("--manifest", help="tab-separated image, mask, id per line")
    p.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic blob slices")
    p.add_argument("--image-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scgseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    _data_flags(p)
    p.add_argument("--synthetic-test", type=int, metavar="N", help="synthetic held-out slices")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--node-grid", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--objective", choices=("dice", "bce", "dice_bce", "focal_tversky"))
    p.add_argument("--checkpoint-dir")

    p = sub.add_parser("evaluate", help="dice / focal-Tversky table for a checkpoint")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("all", "train", "test"), default="test",
                   help="which part of a directory/manifest split to score")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--output", type=Path, help="write the per-sample CSV here")

    p = sub.add_parser("predict", help="write binary masks for images")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output-dir", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--save-prob", action="store_true", help="also write 16-bit probability maps")

    p = sub.add_parser("verify", help="run the numerical self-check suite")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--output", type=Path, help="write the JSON report here")

    p = sub.add_parser("curves", help="plot dice/loss curves from a metrics log")
    p.add_argument("--log", type=Path, required=True)
    p.add_argument("--output-dir", type=Path, required=True)
    return parser


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    ov = {
        "seed": get("seed"),
        "device": get("device"),
        "deterministic": get("deterministic"),
        "data.image_dir": get("image_dir"),
        "data.mask_dir": get("mask_dir"),
        "data.manifest": get("manifest"),
        "data.train_fraction": get("train_fraction"),
        "model.input_size": get("image_size"),
        "epochs": get("epochs"),
        "max_steps": get("max_steps"),
        "batch_size": get("batch_size"),
        "learning_rate": get("lr"),
        "model.dropout_p": get("dropout"),
        "model.node_grid": get("node_grid"),
        "model.latent_dim": get("latent_dim"),
        "loss.objective": get("objective"),
        "checkpoint_dir": get("checkpoint_dir"),
    }
    if get("synthetic") is not None:
        ov["data.synthetic"] = True
        ov["data.synthetic_count"] = args.synthetic
    if get("synthetic_test") is not None:
        ov["data.synthetic_test_count"] = args.synthetic_test
    return ov


def cmd_train(args) -> int:
    from .config import dump_config, load_config
    from .training import train

    config = load_config(args.config, _overrides(args))
    Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    dump_config(config, Path(config.checkpoint_dir) / "config.yaml")
    result = train(config)
    summary = {"steps": result.steps, "last_checkpoint": str(result.last_checkpoint),
               "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None}
    if result.log_rows:
        summary["final"] = result.log_rows[-1]
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .config import load_config
    from .training import evaluate, load_checkpoint, prepare_data, resolve_device

    config = load_config(args.config, _overrides(args))
    model, manifest = load_checkpoint(args.checkpoint)
    if args.image_size is None:
        config.model.input_size = model.config.input_size
    if config.data.synthetic:
        # score the held-out generator stream unless asked otherwise
        config.data.synthetic_test_count = config.data.synthetic_test_count or config.data.synthetic_count
    train_set, test_set = prepare_data(config)
    samples = {"train": train_set, "test": test_set, "all": train_set + test_set}[args.split] or train_set
    device = resolve_device(config.device)
    model.to(device)
    table = evaluate(model, samples, config.loss, threshold=args.threshold, batch_size=config.batch_size)
    if args.output:
        table.write_csv(args.output)
    print(json.dumps({"checkpoint": str(args.checkpoint), "step": manifest.get("step"),
                      "samples": len(table.rows), **table.aggregate}, indent=2))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .training import load_checkpoint, predict, resolve_device

    model, _ = load_checkpoint(args.checkpoint)
    model.to(resolve_device(args.device or "cpu"))
    written, failures = predict(model, args.input, args.output_dir, args.threshold, args.save_prob)
    for path, err in failures.items():
        print(f"error: {path}: {err}", file=sys.stderr)
    print(json.dumps({"written": [str(p) for p in written], "failed": len(failures)}, indent=2))
    return EXIT_IO if failures else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import verify

    report = verify(args.seed if args.seed is not None else 0, trials=args.trials)
    text = json.dumps(report, indent=2, default=str)
    if args.output:
        args.output.write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_curves(args) -> int:
    from .curves import emit_curves

    paths = emit_curves(args.log, args.output_dir)
    print(json.dumps({"plots": [str(p) for p in paths]}, indent=2))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict,
            "verify": cmd_verify, "curves": cmd_curves}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, CheckpointError, NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
