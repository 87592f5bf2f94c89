"""Command line entry point: ``fedmcc run|eval|gradcheck``."""

from __future__ import annotations

import argparse
import logging
import sys

from .data import load_csv
from .errors import FedMCCError
from .experiment import load_config, run_experiment
from .federated import infer_cluster
from .gradcheck import run_suite
from .metrics import evaluate
from .model import MccModel


def _cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    result = run_experiment(cfg)
    final = result.final or {}
    print(f"wrote {result.checkpoint.parent}")
    if final:
        print(f"final ACC={final['ACC']:.4f} NMI={final['NMI']:.4f} ARI={final['ARI']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    with open(args.checkpoint, "rb") as fh:
        model = MccModel.from_bytes(fh.read())
    data = load_csv(args.dataset)
    pred = infer_cluster(model.online["f"], model.online["g_C"], data.x)
    scores = evaluate(pred, data.labels)
    print(" ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(args.trials, args.seed)
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.name}: {r.trials} trials, {r.failures} failures, "
              f"worst abs err {r.worst_abs:.3e}")
        for note in r.notes[:5]:
            print(f"    failed: {note}")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmcc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate per a config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score a checkpoint on a labelled CSV dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FedMCCError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
