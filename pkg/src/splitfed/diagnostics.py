"""Empirical estimates of smoothness, gradient variance and data
heterogeneity, plus the per-round convergence-bound and drift checks.

Everything here is an estimate from realized runs, not a verification of
the underlying analysis: expectations are replaced by single-run samples
and the smoothness probe is a lower bound by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Partition
from .engine import LayeredModel, cross_entropy


@dataclass
class AssumptionEstimates:
    smoothness: float                 # max probed gradient Lipschitz ratio
    sigma2_by_client: list[float]     # minibatch gradient variance per client
    eps2: float                       # max squared client-vs-global gradient gap
    num_probes: int


@dataclass
class BoundReport:
    lhs: float
    rhs_term1: float
    rhs_term2: float
    lr_condition_ok: bool
    tau: int
    f_star_assumed: float

    @property
    def rhs(self) -> float:
        return self.rhs_term1 + self.rhs_term2

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


# ---------------------------------------------------------------------------
# Gradient probes
# ---------------------------------------------------------------------------

def dataset_gradient(model: LayeredModel, features: np.ndarray,
                     labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and flat gradient of the mean cross-entropy over all samples."""
    logits = model.forward(features)
    loss, grad_logits = cross_entropy(logits, labels)
    grads, _ = model.backward(grad_logits)
    if not grads:
        return loss, np.zeros(0)
    return loss, np.concatenate([g.ravel() for g in grads])


def client_gradient(model: LayeredModel, ds: Dataset, partition: Partition,
                    client_id: int) -> tuple[float, np.ndarray]:
    idx = partition.assignments[client_id]
    return dataset_gradient(model, ds.features[idx], ds.labels[idx])


def global_gradient(model: LayeredModel, ds: Dataset,
                    partition: Partition) -> tuple[float, np.ndarray]:
    """Weighted global objective value and gradient at the current model."""
    total_loss = 0.0
    total_grad = np.zeros(model.param_count)
    for k in range(partition.num_clients):
        loss, grad = client_gradient(model, ds, partition, k)
        w = partition.weights[k]
        total_loss += w * loss
        total_grad += w * grad
    return float(total_loss), total_grad


def estimate_sigma2(model: LayeredModel, ds: Dataset, partition: Partition,
                    client_id: int, batch_size: int, num_batches: int) -> float:
    """Variance (summed over coordinates) of minibatch gradients around the
    full-local-data gradient at a fixed model.

    Batches are consecutive chunks of the client's index list, cycling, so
    the estimate replays exactly.
    """
    if num_batches < 2:
        raise ValueError(f"need at least 2 batches, got {num_batches}")
    idx = partition.assignments[client_id]
    if len(idx) < batch_size:
        raise ValueError(
            f"client {client_id} has {len(idx)} samples, fewer than one "
            f"batch of {batch_size}"
        )
    _, full_grad = dataset_gradient(model, ds.features[idx], ds.labels[idx])
    total = 0.0
    n_chunks = len(idx) // batch_size
    for i in range(num_batches):
        start = (i % n_chunks) * batch_size
        sub = idx[start:start + batch_size]
        _, g = dataset_gradient(model, ds.features[sub], ds.labels[sub])
        total += float(np.sum((g - full_grad) ** 2))
    return total / num_batches


def estimate_eps2(model: LayeredModel, ds: Dataset, partition: Partition) -> float:
    """Max over clients of the squared distance between the client gradient
    and the weighted global gradient."""
    grads = [client_gradient(model, ds, partition, k)[1]
             for k in range(partition.num_clients)]
    global_grad = np.zeros_like(grads[0])
    for w, g in zip(partition.weights, grads):
        global_grad += w * g
    return max(float(np.sum((g - global_grad) ** 2)) for g in grads)


def probe_smoothness(grad_fn, theta0: np.ndarray, num_pairs: int, radius: float,
                     seed: int, refine_steps: int = 8) -> float:
    """Lower bound on the gradient Lipschitz constant.

    Each probe starts from a random displacement of norm ``radius`` and is
    refined by following the gradient-difference direction, which converges
    to the top local curvature direction on (near-)quadratic objectives.
    Probes are keyed individually by (seed, probe index), so enlarging
    ``num_pairs`` never lowers the result.
    """
    if num_pairs < 1:
        raise ValueError(f"need at least one probe pair, got {num_pairs}")
    if radius < 1e-12:
        raise ValueError(f"probe radius {radius} is degenerate (< 1e-12)")
    theta0 = np.asarray(theta0, dtype=np.float64)
    g0 = np.asarray(grad_fn(theta0))
    best = 0.0
    for j in range(num_pairs):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), j]))
        delta = rng.standard_normal(theta0.size)
        delta *= radius / np.linalg.norm(delta)
        for _ in range(refine_steps):
            g1 = np.asarray(grad_fn(theta0 + delta))
            diff = g1 - g0
            norm = float(np.linalg.norm(diff))
            best = max(best, norm / float(np.linalg.norm(delta)))
            if norm == 0.0:
                break
            delta = diff * (radius / norm)
    return best


def default_probe_radius(theta: np.ndarray) -> float:
    theta = np.asarray(theta)
    return 0.1 * float(np.linalg.norm(theta)) / np.sqrt(theta.size)


# ---------------------------------------------------------------------------
# Bound evaluation
# ---------------------------------------------------------------------------

def lr_threshold(smoothness: float, num_clients: int, weights, tau: int) -> float:
    if smoothness <= 0:
        raise ValueError(f"smoothness estimate must be > 0, got {smoothness}")
    sum_sq = float(np.sum(np.asarray(weights) ** 2))
    return min(1.0 / (16.0 * smoothness * tau),
               1.0 / (8.0 * smoothness * num_clients * tau * sum_sq))


def check_lr_condition(lrs, smoothness: float, num_clients: int, weights,
                       tau: int) -> bool:
    """True iff every per-round learning rate is below the step-size cap the
    cut-invariance bound requires."""
    thr = lr_threshold(smoothness, num_clients, weights, tau)
    return all(lr <= thr for lr in np.atleast_1d(np.asarray(lrs, dtype=np.float64)))


def eval_v1_bound(grad_sq_trace, lrs, f_initial: float,
                  estimates: AssumptionEstimates, weights, tau: int,
                  f_star: float = 0.0) -> BoundReport:
    """Evaluate both sides of the cut-invariance convergence bound on a
    realized trace of squared global-gradient norms.

    ``f_star`` defaults to 0, a valid lower bound for cross-entropy, which
    makes the first right-hand term an over-estimate (conservative for the
    lhs <= rhs comparison).
    """
    grad_sq = np.asarray(grad_sq_trace, dtype=np.float64)
    rounds = len(grad_sq)
    if rounds < 1:
        raise ValueError("need at least one round in the trace")
    lrs = np.atleast_1d(np.asarray(lrs, dtype=np.float64))
    if len(lrs) == 1:
        lrs = np.full(rounds, lrs[0])
    if len(lrs) != rounds:
        raise ValueError(f"{len(lrs)} learning rates for {rounds} rounds")
    weights = np.asarray(weights, dtype=np.float64)
    k_clients = len(weights)
    sigma2 = np.asarray(estimates.sigma2_by_client, dtype=np.float64)
    if len(sigma2) != k_clients:
        raise ValueError("one sigma^2 estimate per client required")

    lhs = float(np.mean(lrs * grad_sq))
    rhs_term1 = float(4.0 / (rounds * tau) * (f_initial - f_star))
    het = float(np.sum(weights ** 2 * (sigma2 + estimates.eps2)))
    rhs_term2 = float((16.0 * k_clients * estimates.smoothness * tau / rounds)
                      * het * np.sum(lrs ** 2))
    ok = check_lr_condition(lrs, estimates.smoothness, k_clients, weights, tau)
    return BoundReport(lhs=lhs, rhs_term1=rhs_term1, rhs_term2=rhs_term2,
                       lr_condition_ok=ok, tau=tau, f_star_assumed=f_star)


def check_local_drift_cap(snapshots: list[np.ndarray], eta: float, tau: int,
                       sigma2_k: float, eps2: float, grad_sq_global: float,
                       smoothness: float) -> tuple[float, float, bool]:
    """Compare realized local-model drift against its theoretical cap.

    ``snapshots`` are the client's stacked parameters before each of the
    tau local updates of one round; the first entry is the round-start
    model. Expectations are replaced by this single realization.
    """
    if not snapshots:
        raise ValueError("snapshots missing: record per-iteration parameters first")
    if len(snapshots) != tau:
        raise ValueError(f"expected {tau} snapshots, got {len(snapshots)}")
    cap = 1.0 / (np.sqrt(8.0) * smoothness * tau)
    if eta > cap:
        raise ValueError(
            f"learning rate {eta} exceeds the drift cap {cap:.3e}; "
            "the comparison is undefined above it"
        )
    start = snapshots[0]
    lhs = float(sum(np.sum((s - start) ** 2) for s in snapshots))
    rhs = 2.0 * tau ** 2 * (8.0 * tau * eta ** 2 * (sigma2_k + eps2 + grad_sq_global))
    return lhs, rhs, lhs <= rhs
