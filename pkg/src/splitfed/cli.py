"""Command-line experiment driver.

Subcommands: run, sweep, partition, gradcheck, diagnose, oracle-v1.
Exit codes: 0 success, 1 check failed, 2 config error, 3 data error,
4 I/O error, 5 engine/protocol error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .config import ConfigError, parse_config
from .data import IdxFormatError, PartitionError
from .engine import Dense, EngineError, LayeredModel, SoftmaxOutput, grad_check
from .models import build_conv, build_mlp
from .runner import diagnose, oracle_v1, run_experiment, run_sweep

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_IO = 4
EXIT_ENGINE = 5

ORACLE_TOLERANCE = 1e-12
GRADCHECK_TOLERANCE = 1e-6


def _load(args):
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    summary = run_experiment(cfg, out_dir=args.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    cuts = [int(c) for c in args.cuts.split(",") if c.strip()]
    rows = run_sweep(cfg, cuts, out_dir=args.out)
    print(f"{'cut':>4} {'train_loss':>12} {'test_loss':>12} {'test_acc':>9}")
    for r in rows:
        print(f"{r['cut']:>4} {r['final_train_loss']:>12.6f} "
              f"{r['final_test_loss']:>12.6f} {r['final_test_acc']:>9.4f}")
    return 0


def cmd_partition(args) -> int:
    cfg = _load(args)
    from .config import build_datasets, build_partition
    train, _ = build_datasets(cfg)
    part = build_partition(cfg, train)
    print(f"clients={part.num_clients} samples={len(train)} "
          f"classes={train.num_classes}")
    for k in range(part.num_clients):
        labels = train.labels[part.assignments[k]]
        hist = np.bincount(labels, minlength=train.num_classes)
        frac = hist.max() / max(len(labels), 1)
        print(f"client {k:3d}: D_k={len(labels):6d} alpha={part.weights[k]:.4f} "
              f"max_class_frac={frac:.3f} hist={hist.tolist()}")
    return 0


def cmd_gradcheck(args) -> int:
    checks = []
    x = np.random.default_rng(7).uniform(-1, 1, size=(5, 4))
    y = np.random.default_rng(8).integers(0, 3, size=5)
    mlp, _ = build_mlp((4,), (8,), 3)
    mlp.init_params(7)
    checks.append(("mlp dense+relu", grad_check(mlp, x, y)))

    xc = np.random.default_rng(9).uniform(-1, 1, size=(3, 1, 6, 6))
    yc = np.random.default_rng(10).integers(0, 2, size=3)
    conv, _ = build_conv((1, 6, 6), (2,), 4, 2)
    conv.init_params(7)
    checks.append(("conv stack", grad_check(conv, xc, yc)))

    head = LayeredModel([Dense(4, 3), SoftmaxOutput()], (4,))
    head.init_params(3)
    checks.append(("softmax head", grad_check(head, x, y)))

    worst = 0.0
    for name, err in checks:
        status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:>14}: max_rel_err={err:.3e} [{status}]")
        worst = max(worst, err)
    return 0 if worst <= GRADCHECK_TOLERANCE else EXIT_CHECK_FAILED


def cmd_diagnose(args) -> int:
    cfg = _load(args)
    report = diagnose(cfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_oracle_v1(args) -> int:
    cfg = _load(args)
    deviations = oracle_v1(cfg)
    worst = max(deviations.values())
    for cut, dev in sorted(deviations.items()):
        print(f"cut {cut}: max parameter deviation {dev:.3e}")
    print(f"worst deviation {worst:.3e} (tolerance {ORACLE_TOLERANCE:.0e})")
    return 0 if worst <= ORACLE_TOLERANCE else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitfed",
        description="Deterministic split federated learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run one experiment per cut")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--cuts", required=True, help="comma-separated, e.g. 1,2,3")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_part = sub.add_parser("partition", help="inspect the client partition")
    p_part.add_argument("--config", required=True)
    p_part.add_argument("--seed", type=int, default=None)
    p_part.add_argument("--inspect", action="store_true",
                        help="accepted for compatibility; inspection is the default")
    p_part.set_defaults(func=cmd_partition)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_diag = sub.add_parser("diagnose", help="assumption estimates and bound report")
    p_diag.add_argument("--config", required=True)
    p_diag.add_argument("--seed", type=int, default=None)
    p_diag.set_defaults(func=cmd_diagnose)

    p_oracle = sub.add_parser("oracle-v1",
                              help="round-by-round equivalence check against fedavg")
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--seed", type=int, default=None)
    p_oracle.set_defaults(func=cmd_oracle_v1)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxFormatError, PartitionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EngineError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
