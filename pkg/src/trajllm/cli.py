"""Command line: synth, train, eval, predict.

Exit codes: 0 success, 2 invalid arguments or inputs, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from trajllm.data import TEMPLATES, SceneFileError, generate_dataset, load_scenes, save_scenes

logger = logging.getLogger("trajllm")

MIXED = "mixed"


class UsageError(Exception):
    """Invalid user input; reported with exit code 2."""


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _nonnegative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajllm", description="Desk-scale trajectory prediction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--num", required=True, type=_positive_int)
    p.add_argument("--template", default=MIXED, choices=(*TEMPLATES, MIXED))
    p.add_argument("--noise", default=0.0, type=_nonnegative_float)
    p.add_argument("--seed", default=0, type=int)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--train", required=True, type=Path)
    p.add_argument("--val", type=Path)
    p.add_argument("--out-dir", required=True, type=Path)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--k", type=_positive_int)

    p = sub.add_parser("predict", help="write prediction records (and plots)")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--plot", type=Path, help="SVG output path")
    return parser


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _scenes(path: Path, what: str):
    _require_file(path, what)
    scenes = load_scenes(path)
    if not scenes:
        raise UsageError(f"{what} {path} contains no scenes")
    return scenes


def _load_model(path: Path, k: int | None):
    from trajllm.checkpoint import load_checkpoint

    model = load_checkpoint(_require_file(path, "checkpoint"))
    if k is not None and k != model.config.k_modes:
        raise UsageError(f"--k {k} does not match the checkpoint's k_modes {model.config.k_modes}")
    return model


def cmd_synth(args) -> int:
    templates = TEMPLATES if args.template == MIXED else (args.template,)
    samples = generate_dataset(args.num, templates, args.noise, args.seed)
    path = save_scenes(samples, args.out)
    print(f"wrote {len(samples)} scenes to {path}")
    return 0


def cmd_train(args) -> int:
    from trajllm.config import TrainConfig
    from trajllm.training import evaluate, train, write_history

    config = TrainConfig.load(_require_file(args.config, "config file"))
    train_scenes = _scenes(args.train, "training set")
    val_scenes = _scenes(args.val, "validation set") if args.val else None

    def log_step(step, row):
        if step % 50 == 0:
            logger.info("step %d total %.4f", step, row["L_total"])

    result = train(config, train_scenes, val_scenes, out_dir=args.out_dir, on_step=log_step)
    write_history(result.history, args.out_dir / "history.csv")
    model = result.load_best()
    report = evaluate(model, val_scenes or train_scenes)
    (args.out_dir / "metrics.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_eval(args) -> int:
    from trajllm.training import evaluate

    model = _load_model(args.ckpt, args.k)
    print(evaluate(model, _scenes(args.data, "data file")).to_json())
    return 0


def cmd_predict(args) -> int:
    from trajllm.prediction import Prediction, dumps_predictions, plot_paths, render_svg
    from trajllm.training import predict

    model = _load_model(args.ckpt, args.k)
    scenes = _scenes(args.scene, "scene file")
    pi, mu, b, _ = predict(model, scenes)
    preds = [Prediction(s.scene_id, pi[i], mu[i], b[i]) for i, s in enumerate(scenes)]
    sys.stdout.write(dumps_predictions(preds))
    if args.plot:
        ids = [re.sub(r"[^\w.-]", "_", str(s.scene_id)) for s in scenes]
        for path, scene, pred in zip(plot_paths(args.plot, ids), scenes, preds):
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(render_svg(scene, pred))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from trajllm.checkpoint import CheckpointError
    from trajllm.config import ConfigError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, SceneFileError, CheckpointError) as exc:
        parser.print_usage(sys.stderr)
        print(f"trajllm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"trajllm {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
