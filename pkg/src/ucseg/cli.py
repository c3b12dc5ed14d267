"""Command-line entry point: ``ucseg train|eval|ablate|generate``."""

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .data import DatasetSpec, generate_dataset, load_dataset
from .errors import UCSegError
from .report import format_table, training_figure, write_report
from .trainer import evaluate_state, fit, holdout_data, load_state

log = logging.getLogger("ucseg")

ABLATABLE = ("upg", "ife", "ic")


def _progress(every):
    def show(rec):
        if every and (rec["step"] + 1) % every == 0:
            log.info("step %6d  L_total %.4f  dice_a %.3f  dice_b %.3f", rec["step"] + 1, rec["L_total"],
                     rec["dice_a"], rec["dice_b"])
    return show


def _train_and_report(cfg, log_every):
    result = fit(cfg, progress=_progress(log_every))
    dataset = holdout_data(cfg)
    reports, preds = evaluate_state(result.state, cfg, dataset)
    out = Path(cfg.out_dir)
    paths = write_report(reports, out, dataset, preds,
                         extra={"checkpoint": result.checkpoint.name, "steps": cfg.max_iterations})
    training_figure(result.records, out / "training.png")
    _emit(reports, paths)
    return 0


def _emit(reports, paths):
    print("=== report ===")
    print(format_table(reports), end="")
    print("=== files ===")
    for kind, path in paths.items():
        print(f"{kind}\t{path}")


def cmd_train(args):
    cfg = load_config(args.config)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    return _train_and_report(cfg, args.log_every)


def cmd_ablate(args):
    cfg = load_config(args.config)
    if args.baseline:
        cfg = cfg.baseline()
        tag = "baseline"
    else:
        if not args.disable:
            raise UCSegError("ablate needs --disable or --baseline")
        cfg = cfg.replace(**{flag: False for flag in args.disable})
        tag = "no-" + "-".join(sorted(set(args.disable)))
    out = Path(args.out) if args.out else Path(cfg.out_dir) / tag
    return _train_and_report(cfg.replace(out_dir=str(out)), args.log_every)


def cmd_eval(args):
    state, cfg = load_state(args.checkpoint)
    dataset = load_dataset(args.data)
    reports, preds = evaluate_state(state, cfg, dataset)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    paths = write_report(reports, out, dataset, preds, extra={"checkpoint": str(args.checkpoint),
                                                               "data": str(args.data)})
    _emit(reports, paths)
    return 0


def cmd_generate(args):
    spec = DatasetSpec(n_images=args.n, image_size=args.size, spatial_rank=args.rank, seed=args.seed)
    out = generate_dataset(spec, args.out)
    print(f"wrote {args.n} image/mask pairs to {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ucseg", description="Uncertainty-guided dual-subnet semi-supervised "
                                                          "segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train with a config file, then evaluate on the test split")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override out_dir")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train with method components switched off")
    a.add_argument("--config", required=True)
    a.add_argument("--disable", action="append", choices=ABLATABLE, default=[])
    a.add_argument("--baseline", action="store_true", help="labeled-only baseline (all components off)")
    a.add_argument("--out")
    a.add_argument("--log-every", type=int, default=100)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--rank", type=int, default=2, choices=(2, 3))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (UCSegError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
