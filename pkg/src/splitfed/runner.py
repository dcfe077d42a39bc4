"""Experiment driver: build everything from a config, advance rounds,
emit metrics and checkpoints, and run the equivalence/diagnostic suites.

Given the same config and seed, every emitted byte except the wall_ms
column is identical across runs.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig, build_datasets, build_model, build_partition
from .data import Dataset, Partition
from .diagnostics import (AssumptionEstimates, check_local_drift_cap, default_probe_radius,
                          estimate_eps2, estimate_sigma2, eval_v1_bound, global_gradient,
                          lr_threshold, probe_smoothness)
from .engine import LayeredModel, layer_from_spec
from .models import engine_cut
from .protocols import (CommLedger, ProtocolState, RoundConfig, SPLIT_VARIANTS, comm_cost,
                        evaluate, init_protocol, run_round)
from .split import _split_unchecked, payload_profile

METRICS_COLUMNS = ("round", "train_loss", "test_loss", "test_acc",
                   "uplink_elems", "downlink_elems", "wall_ms")

CHECKPOINT_VERSION = 1

OUT_DIR_ENV = "SPLITFED_OUT"


class CheckpointError(Exception):
    pass


@dataclass
class MetricsRecord:
    round: int
    train_loss: float
    test_loss: float
    test_acc: float
    uplink_elems: int
    downlink_elems: int
    wall_ms: float

    def csv_row(self) -> str:
        return ",".join([
            str(self.round),
            repr(float(self.train_loss)),
            repr(float(self.test_loss)),
            repr(float(self.test_acc)),
            str(self.uplink_elems),
            str(self.downlink_elems),
            repr(float(self.wall_ms)),
        ])


def emit_metrics(records: list[MetricsRecord], path) -> None:
    with open(path, "w") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for r in records:
            f.write(r.csv_row() + "\n")


# ---------------------------------------------------------------------------
# Checkpoints: one JSON manifest line, then raw little-endian f64 parameters
# ---------------------------------------------------------------------------

def checkpoint_save(model: LayeredModel, path) -> None:
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "endianness": "little",
        "input_shape": list(model.input_shape),
        "layers": [layer.spec() for layer in model.layers],
        "param_shapes": [list(p.shape) for p in model.parameters()],
        "param_count": model.param_count,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8") + b"\n")
        f.write(model.flatten_params().astype("<f8").tobytes())


def checkpoint_load(path) -> LayeredModel:
    with open(path, "rb") as f:
        blob = f.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: no manifest line found")
    try:
        manifest = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')}"
        )
    payload = blob[newline + 1:]
    count = int(manifest["param_count"])
    if len(payload) != 8 * count:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, manifest promises "
            f"{8 * count} ({count} f64 values)"
        )
    model = LayeredModel([layer_from_spec(s) for s in manifest["layers"]],
                         tuple(manifest["input_shape"]))
    shapes = [list(p.shape) for p in model.parameters()]
    if shapes != manifest["param_shapes"]:
        raise CheckpointError(f"{path}: parameter shapes disagree with manifest")
    model.load_params(np.frombuffer(payload, dtype="<f8"))
    return model


# ---------------------------------------------------------------------------
# Experiment assembly
# ---------------------------------------------------------------------------

@dataclass
class Experiment:
    config: ExperimentConfig
    train: Dataset
    test: Dataset
    partition: Partition
    full_model: LayeredModel
    boundaries: list[int]
    state: ProtocolState
    round_cfg: RoundConfig
    ledger: CommLedger

    def uplink_downlink(self) -> tuple[int, int]:
        return self.ledger.totals()


def prepare(cfg: ExperimentConfig, variant: str | None = None,
            cut: int | None = None) -> Experiment:
    """Build datasets, partition, model and protocol state for a config.

    ``variant``/``cut`` override the config (used by sweeps and the
    equivalence runners, which share everything else).
    """
    variant = variant or cfg.variant
    train, test = build_datasets(cfg)
    partition = build_partition(cfg, train)
    full_model, boundaries = build_model(cfg, train.sample_shape, train.num_classes)

    if variant in SPLIT_VARIANTS:
        block_cut = cut if cut is not None else cfg.cut
        cut_layers = engine_cut(boundaries, block_cut)
    else:
        cut_layers = None

    state = init_protocol(full_model, variant, cut_layers, cfg.clients,
                          cfg.optimizer.kind, _initial_lr(cfg))
    round_cfg = RoundConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                            master_seed=cfg.seed, lr_schedule=cfg.lr_schedule,
                            permute_per_round=cfg.permute_per_round)
    profile_cut = cut_layers if cut_layers is not None else len(full_model)
    profile = payload_profile(_split_unchecked(full_model, profile_cut))
    ledger = comm_cost(variant, partition, profile, cfg.epochs, cfg.batch_size)
    return Experiment(config=cfg, train=train, test=test, partition=partition,
                      full_model=full_model, boundaries=boundaries, state=state,
                      round_cfg=round_cfg, ledger=ledger)


def _initial_lr(cfg: ExperimentConfig) -> float:
    lr = cfg.optimizer.lr
    return float(lr[0]) if isinstance(lr, tuple) else float(lr)


def _resolve_out_dir(cfg: ExperimentConfig, out_dir) -> str:
    if out_dir is not None:
        return str(out_dir)
    return os.environ.get(OUT_DIR_ENV, cfg.out_dir)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run the configured protocol for ``rounds`` rounds.

    Writes ``metrics.csv`` (appended and flushed per round, so a crash
    leaves a valid prefix), ``config.json`` (the effective config) and
    ``checkpoint.ckpt`` (final global model).
    """
    exp = prepare(cfg)
    out = _resolve_out_dir(cfg, out_dir)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")

    up, down = exp.uplink_downlink()
    last = None
    with open(os.path.join(out, "metrics.csv"), "w") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        f.flush()
        for t in range(cfg.rounds):
            started = time.perf_counter()
            train_loss = run_round(exp.state, exp.train, exp.partition,
                                   exp.round_cfg, t)
            test_loss, test_acc = evaluate(exp.state.global_model(), exp.test)
            wall_ms = (time.perf_counter() - started) * 1000.0
            last = MetricsRecord(t, train_loss, test_loss, test_acc, up, down, wall_ms)
            f.write(last.csv_row() + "\n")
            f.flush()
    checkpoint_save(exp.state.global_model(), os.path.join(out, "checkpoint.ckpt"))
    return {
        "out_dir": out,
        "rounds": cfg.rounds,
        "final_train_loss": last.train_loss if last else None,
        "final_test_loss": last.test_loss if last else None,
        "final_test_acc": last.test_acc if last else None,
        "uplink_elems": up,
        "downlink_elems": down,
    }


def run_sweep(cfg: ExperimentConfig, cuts: list[int], out_dir=None) -> list[dict]:
    """One run per cut, sharing the master seed (hence dataset, partition,
    initialization and batch streams). Writes ``sweep.csv``."""
    n_blocks = cfg.num_blocks
    for c in cuts:
        if not 1 <= c <= n_blocks - 1:
            raise ValueError(f"cut {c} outside [1, {n_blocks - 1}]")
    out = _resolve_out_dir(cfg, out_dir)
    os.makedirs(out, exist_ok=True)
    rows = []
    for c in cuts:
        sub_cfg = replace(cfg, cut=c)
        summary = run_experiment(sub_cfg, out_dir=os.path.join(out, f"cut_{c}"))
        summary["cut"] = c
        rows.append(summary)
    with open(os.path.join(out, "sweep.csv"), "w") as f:
        f.write("cut,final_train_loss,final_test_loss,final_test_acc,"
                "uplink_elems,downlink_elems\n")
        for r in rows:
            f.write(",".join([
                str(r["cut"]),
                repr(float(r["final_train_loss"])),
                repr(float(r["final_test_loss"])),
                repr(float(r["final_test_acc"])),
                str(r["uplink_elems"]),
                str(r["downlink_elems"]),
            ]) + "\n")
    return rows


def oracle_v1(cfg: ExperimentConfig, cuts: list[int] | None = None) -> dict[int, float]:
    """Round-by-round parameter comparison of the stitched two-server
    variant against plain federated averaging, per cut.

    Returns the max absolute parameter deviation seen for each cut over
    all rounds. Under SGD this is the hard equivalence check; optimizers
    with state are compared on a best-effort basis.
    """
    if cuts is None:
        cuts = list(range(1, cfg.num_blocks))
    deviations: dict[int, float] = {}
    for c in cuts:
        split_exp = prepare(cfg, variant="sflv1", cut=c)
        fed_exp = prepare(cfg, variant="fedavg")
        worst = 0.0
        for t in range(cfg.rounds):
            run_round(split_exp.state, split_exp.train, split_exp.partition,
                      split_exp.round_cfg, t)
            run_round(fed_exp.state, fed_exp.train, fed_exp.partition,
                      fed_exp.round_cfg, t)
            stitched = split_exp.state.global_model().flatten_params()
            reference = fed_exp.state.global_model().flatten_params()
            worst = max(worst, float(np.max(np.abs(stitched - reference)))
                        if stitched.size else 0.0)
        deviations[c] = worst
    return deviations


def diagnose(cfg: ExperimentConfig, num_probes: int = 4,
             sigma_batches: int = 8) -> dict:
    """Estimate the assumption constants on the configured workload, run
    the configured protocol while tracing the global gradient, and report
    the convergence-bound and drift comparisons."""
    exp = prepare(cfg)
    theta0 = exp.full_model.flatten_params()

    probe_model = exp.full_model.clone()

    def grad_at(theta):
        probe_model.load_params(theta)
        return global_gradient(probe_model, exp.train, exp.partition)[1]

    radius = default_probe_radius(theta0)
    smoothness = probe_smoothness(grad_at, theta0, num_probes, radius, seed=cfg.seed)

    sigma_batch_size = min(cfg.batch_size, int(exp.partition.sizes.min()))
    sigma2 = [
        estimate_sigma2(exp.full_model, exp.train, exp.partition, k,
                        sigma_batch_size, sigma_batches)
        for k in range(cfg.clients)
    ]
    eps2 = estimate_eps2(exp.full_model, exp.train, exp.partition)
    estimates = AssumptionEstimates(smoothness=smoothness, sigma2_by_client=sigma2,
                                    eps2=eps2, num_probes=num_probes)

    tau = max(
        cfg.epochs * int(np.ceil(d / cfg.batch_size)) for d in exp.partition.sizes
    )
    grad_sq_trace = []
    loss_trace = []
    snapshots: list[np.ndarray] = []

    def first_round_hook(client_id, step, params):
        if client_id == 0:
            snapshots.append(params)

    for t in range(cfg.rounds):
        loss_t, grad_t = global_gradient(exp.state.global_model(), exp.train,
                                         exp.partition)
        loss_trace.append(loss_t)
        grad_sq_trace.append(float(np.sum(grad_t ** 2)))
        hook = first_round_hook if (
            t == 0 and cfg.variant in ("fedavg", "sflv1")) else None
        run_round(exp.state, exp.train, exp.partition, exp.round_cfg, t,
                  snapshot_hook=hook)

    report: dict = {
        "smoothness": smoothness,
        "sigma2_by_client": sigma2,
        "sigma2_batch_size": sigma_batch_size,
        "eps2": eps2,
        "tau": tau,
        "lr_threshold": lr_threshold(smoothness, cfg.clients,
                                     exp.partition.weights, tau),
        "f_initial": loss_trace[0] if loss_trace else None,
        "grad_sq_trace": grad_sq_trace,
    }

    if cfg.rounds > 0:
        lrs = [exp.round_cfg.lr_at(t) for t in range(cfg.rounds)]
        bound = eval_v1_bound(grad_sq_trace, lrs, loss_trace[0], estimates,
                              exp.partition.weights, tau)
        report["bound"] = {
            "lhs": bound.lhs,
            "rhs_term1": bound.rhs_term1,
            "rhs_term2": bound.rhs_term2,
            "holds": bound.holds,
            "lr_condition_ok": bound.lr_condition_ok,
            "f_star": bound.f_star_assumed,
        }
        eta0 = lrs[0]
        tau_first = len(snapshots)
        drift_cap = (1.0 / (np.sqrt(8.0) * smoothness * tau_first)
                     if smoothness > 0 and tau_first else 0.0)
        if snapshots and eta0 <= drift_cap:
            lhs, rhs, holds = check_local_drift_cap(
                snapshots, eta0, tau_first, sigma2[0], eps2,
                grad_sq_trace[0], smoothness)
            report["drift"] = {"lhs": lhs, "rhs": rhs, "holds": holds}
        else:
            report["drift"] = {
                "skipped": "no snapshots for this variant" if not snapshots else
                           f"learning rate {eta0} above drift cap {drift_cap:.3e}",
            }
    return report
