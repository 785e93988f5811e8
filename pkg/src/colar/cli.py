"""Command-line pipeline: synth -> exemplars -> train -> detect -> eval.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import dataset as ds
from .errors import ColarError, NumericError, ParameterError
from .evaluation import evaluate
from .exemplars import build_bank, load_bank, save_bank
from .model import Hyper, load_checkpoint, save_checkpoint
from .numeric import make_rng
from .streaming import detect_video, prediction_records, read_predictions, write_predictions
from .training import TrainConfig, read_run_config, train, write_loss_log

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_synth(args) -> None:
    data = ds.gen_synthetic(
        args.classes, args.dim, args.videos, args.frames, args.separation, make_rng(args.seed),
        prefix=args.prefix,
    )  # fmt: skip
    manifest = ds.save_dataset(data, args.out)
    print(f"wrote {len(data)} videos ({data.n_frames} frames) to {manifest}")


def cmd_exemplars(args) -> None:
    data = ds.load_dataset(args.data)
    bank = build_bank(data, args.m, make_rng(args.seed))
    save_bank(bank, args.out)
    print(f"wrote bank with {bank.C + 1}x{bank.M} exemplars of dim {bank.D} to {args.out}")


def cmd_train(args) -> None:
    data = ds.load_dataset(args.data)
    bank = load_bank(args.bank)
    config, model_kw = read_run_config(args.config) if args.config else (TrainConfig(), {})
    overrides = {k: getattr(args, k) for k in ("epochs", "seed") if getattr(args, k) is not None}
    if overrides:
        config = TrainConfig(**{**config.__dict__, **overrides})
    hyper = Hyper(M=bank.M, **model_kw)
    model, curve = train(data, bank, config, hyper)
    save_checkpoint(model, args.out)
    log_path = args.log or str(args.out) + ".loss.json"
    write_loss_log(curve, log_path)
    if curve:
        print(f"trained {config.epochs} epochs: total loss {curve[0]['total']:.4f} -> {curve[-1]['total']:.4f}")
    print(f"wrote checkpoint {args.out} and loss log {log_path}")


def cmd_detect(args) -> None:
    data = ds.load_dataset(args.data, split="test")
    bank = load_bank(args.bank)
    model = load_checkpoint(args.ckpt)
    beta = model.hyper.beta if args.beta is None else args.beta
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"--beta must lie in [0, 1], got {beta}")

    def records():
        for seq in data.sequences:
            yield from prediction_records(seq.video_id, *detect_video(seq, model, bank, beta))

    write_predictions(records(), args.out)
    print(f"wrote predictions for {data.n_frames} frames to {args.out}")


def cmd_eval(args) -> None:
    data = ds.load_dataset(args.data, split="test")
    report = evaluate(read_predictions(args.pred), data, key=args.key)
    Path(args.out).write_text(report.to_json() + "\n")
    print(report.table())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="colar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic feature dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--videos", type=int, default=20)
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--separation", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--prefix", default="v", help="video id prefix")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("exemplars", help="build the per-class exemplar bank")
    e.add_argument("--data", required=True)
    e.add_argument("--m", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_exemplars)

    t = sub.add_parser("train", help="train both branches")
    t.add_argument("--data", required=True)
    t.add_argument("--bank", required=True)
    t.add_argument("--config", help="JSON training/model config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="loss-curve JSON (default: <out>.loss.json)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="stream every test video and dump per-frame scores")
    d.add_argument("--data", required=True)
    d.add_argument("--bank", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--beta", type=float)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    v = sub.add_parser("eval", help="compute mAP / cmAP / per-portion mcAP")
    v.add_argument("--pred", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--key", default="scores", choices=["scores", "s_d", "s_s"])
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ParameterError as exc:
        print(f"colar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"colar: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ColarError, OSError, KeyError) as exc:
        print(f"colar: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
