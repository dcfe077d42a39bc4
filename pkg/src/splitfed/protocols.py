"""Training protocols: FedAvg, vanilla split learning, and the two
split-federated variants, plus the centralized reference loop.

Conventions shared by every round runner:

* one "round" = every client consuming its full round batch stream
  (``epochs`` seeded epoch shuffles, ceil(D_k/B) batches each);
* every iteration performs a fresh full forward/backward through both
  halves, then one optimizer step per half;
* all cross-client reductions (aggregation, loss averaging) run in
  ascending client-id order, so results are schedule-independent;
* optimizer state is local and persists across rounds; synchronization
  replaces parameters only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .data import Dataset, Partition, pooled_round_batches, round_batches
from .engine import EngineError, LayeredModel, cross_entropy, make_optimizer
from .split import CutPayloadProfile, _split_unchecked

VARIANTS = ("fedavg", "sl", "sflv1", "sflv2", "centralized")
SPLIT_VARIANTS = ("sl", "sflv1", "sflv2")

CAT_ACTIVATION = "activation"
CAT_GRADIENT = "activation-gradient"
CAT_SYNC = "weight-sync"
CATEGORIES = (CAT_ACTIVATION, CAT_GRADIENT, CAT_SYNC)


@dataclass
class RoundConfig:
    epochs: int
    batch_size: int
    master_seed: int
    lr_schedule: float | list[float] = 0.01
    permute_per_round: bool = False

    def lr_at(self, round_index: int) -> float:
        if isinstance(self.lr_schedule, (int, float)):
            return float(self.lr_schedule)
        if not self.lr_schedule:
            raise ValueError("empty learning-rate schedule")
        return float(self.lr_schedule[min(round_index, len(self.lr_schedule) - 1)])


@dataclass
class ClientState:
    client_id: int
    model: LayeredModel   # client half, or the full model under fedavg
    optimizer: object


@dataclass
class TrainingServerState:
    variant: str                      # "v1" keeps one model per client, "v2" one shared
    models: list[LayeredModel]
    optimizers: list[object]

    def __post_init__(self):
        if self.variant == "v1" and len(self.models) < 1:
            raise ValueError("v1 training server needs one model per client")
        if self.variant == "v2" and len(self.models) != 1:
            raise ValueError("v2 training server holds exactly one shared model")


# ---------------------------------------------------------------------------
# Communication accounting
# ---------------------------------------------------------------------------

@dataclass
class CommLedger:
    """Per-client element counts, split by payload category."""
    uplink: list[dict[str, int]]
    downlink: list[dict[str, int]]

    @classmethod
    def empty(cls, num_clients: int) -> "CommLedger":
        return cls(
            uplink=[{c: 0 for c in CATEGORIES} for _ in range(num_clients)],
            downlink=[{c: 0 for c in CATEGORIES} for _ in range(num_clients)],
        )

    def add_up(self, client_id: int, category: str, elems: int) -> None:
        self.uplink[client_id][category] += int(elems)

    def add_down(self, client_id: int, category: str, elems: int) -> None:
        self.downlink[client_id][category] += int(elems)

    def totals(self) -> tuple[int, int]:
        up = sum(sum(d.values()) for d in self.uplink)
        down = sum(sum(d.values()) for d in self.downlink)
        return up, down


def _round_batch_sizes(d_k: int, batch_size: int, epochs: int) -> list[int]:
    per_epoch = [batch_size] * (d_k // batch_size)
    if d_k % batch_size:
        per_epoch.append(d_k % batch_size)
    return per_epoch * epochs


def comm_cost(variant: str, partition: Partition, profile: CutPayloadProfile,
              epochs: int, batch_size: int) -> CommLedger:
    """Exact per-round element counts, computed (never measured) from the
    partition and cut payload profile."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    k_clients = partition.num_clients
    ledger = CommLedger.empty(k_clients)
    if variant == "centralized":
        return ledger

    full = profile.client_param_count + profile.server_param_count
    sizes = [_round_batch_sizes(int(d), batch_size, epochs) for d in partition.sizes]

    if variant == "fedavg":
        for k in range(k_clients):
            ledger.add_up(k, CAT_SYNC, full)
            ledger.add_down(k, CAT_SYNC, full)
        return ledger

    if variant == "sflv2":
        tau_max = max(len(s) for s in sizes)
        step_sizes = [
            [s[i % len(s)] for i in range(tau_max)] if s else [] for s in sizes
        ]
    else:
        step_sizes = sizes

    for k in range(k_clients):
        n_act = sum(b * profile.activation_elems for b in step_sizes[k])
        n_lab = sum(step_sizes[k])
        ledger.add_up(k, CAT_ACTIVATION, n_act + n_lab)
        ledger.add_down(k, CAT_GRADIENT, n_act)
        if variant == "sflv1":
            ledger.add_up(k, CAT_SYNC, full)
            ledger.add_down(k, CAT_SYNC, full)
        else:  # sl relay / sflv2 client-half sync
            ledger.add_up(k, CAT_SYNC, profile.client_param_count)
            ledger.add_down(k, CAT_SYNC, profile.client_param_count)
    return ledger


# ---------------------------------------------------------------------------
# Aggregation and evaluation
# ---------------------------------------------------------------------------

def aggregate_weighted(models: list[LayeredModel], weights) -> LayeredModel:
    """Dataset-size-weighted parameter average.

    Accumulated in ascending client order as weighted deviations from the
    first model, which keeps the operation exact when all inputs are
    identical (weights are treated as summing to exactly one, the first
    entry absorbing any rounding in the weight vector).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(models) != len(weights):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1 (got {weights.sum()!r})")
    shapes = [p.shape for p in models[0].parameters()]
    for m in models[1:]:
        if [p.shape for p in m.parameters()] != shapes:
            raise EngineError("cannot aggregate models with different parameter shapes")
    out = models[0].clone()
    out_params = out.parameters()
    base_params = models[0].parameters()
    for m, w in zip(models[1:], weights[1:]):
        for po, pm, pb in zip(out_params, m.parameters(), base_params):
            po += w * (pm - pb)
    return out


def evaluate(model: LayeredModel, ds: Dataset, chunk: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy over a dataset."""
    total_loss = 0.0
    correct = 0
    n = len(ds)
    for start in range(0, n, chunk):
        x = ds.features[start:start + chunk]
        y = ds.labels[start:start + chunk]
        logits = model.forward(x)
        loss, _ = cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / n, correct / n


# ---------------------------------------------------------------------------
# Round runners
# ---------------------------------------------------------------------------

class _LossMeter:
    """Sample-weighted loss accumulator per client."""

    def __init__(self, num_clients: int):
        self.loss = np.zeros(num_clients)
        self.samples = np.zeros(num_clients, dtype=np.int64)

    def add(self, client_id: int, loss: float, n: int) -> None:
        self.loss[client_id] += loss * n
        self.samples[client_id] += n

    def weighted(self, weights) -> float:
        per_client = np.divide(self.loss, self.samples,
                               out=np.zeros_like(self.loss),
                               where=self.samples > 0)
        return float(np.dot(np.asarray(weights), per_client))


def _split_step(client_model, client_opt, server_model, server_opt, x, y,
                meter: CommLedger | None, client_id: int) -> float:
    """One full split iteration: client forward, server forward/backward and
    step, client backward and step. Either half may be empty (identity)."""
    acts = client_model.forward(x)
    if meter is not None:
        meter.add_up(client_id, CAT_ACTIVATION, acts.size + len(y))
    logits = server_model.forward(acts)
    loss, grad_logits = cross_entropy(logits, y)
    server_grads, grad_acts = server_model.backward(grad_logits)
    if server_grads:
        server_opt.step(server_model.parameters(), server_grads)
    if meter is not None:
        meter.add_down(client_id, CAT_GRADIENT, grad_acts.size)
    client_grads, _ = client_model.backward(grad_acts)
    if client_grads:
        client_opt.step(client_model.parameters(), client_grads)
    return loss


def run_fedavg_round(clients: list[ClientState], global_model: LayeredModel,
                     dataset: Dataset, partition: Partition, cfg: RoundConfig,
                     round_index: int, meter: CommLedger | None = None,
                     snapshot_hook=None) -> tuple[LayeredModel, float]:
    """Full local training on every client followed by weighted averaging."""
    lr = cfg.lr_at(round_index)
    global_params = global_model.flatten_params()
    losses = _LossMeter(partition.num_clients)
    for c in clients:
        c.model.load_params(global_params)
        c.optimizer.lr = lr
        if meter is not None:
            meter.add_down(c.client_id, CAT_SYNC, c.model.param_count)
        batches = round_batches(partition, c.client_id, cfg.batch_size,
                                cfg.master_seed, round_index, cfg.epochs)
        for i, idx in enumerate(batches):
            if snapshot_hook is not None:
                snapshot_hook(c.client_id, i, c.model.flatten_params())
            x, y = dataset.features[idx], dataset.labels[idx]
            logits = c.model.forward(x)
            loss, grad_logits = cross_entropy(logits, y)
            grads, _ = c.model.backward(grad_logits)
            c.optimizer.step(c.model.parameters(), grads)
            losses.add(c.client_id, loss, len(y))
        if meter is not None:
            meter.add_up(c.client_id, CAT_SYNC, c.model.param_count)
    new_global = aggregate_weighted([c.model for c in clients], partition.weights)
    return new_global, losses.weighted(partition.weights)


def run_sflv1_round(clients: list[ClientState], ts: TrainingServerState,
                    theta_c: LayeredModel, theta_s: LayeredModel,
                    dataset: Dataset, partition: Partition, cfg: RoundConfig,
                    round_index: int, meter: CommLedger | None = None,
                    snapshot_hook=None) -> tuple[LayeredModel, LayeredModel, float]:
    """Per-client server models; both halves are aggregated at round end."""
    if ts.variant != "v1":
        raise ValueError("run_sflv1_round needs a v1 training server")
    lr = cfg.lr_at(round_index)
    c_params = theta_c.flatten_params()
    s_params = theta_s.flatten_params()
    losses = _LossMeter(partition.num_clients)
    for c in clients:
        k = c.client_id
        server_model, server_opt = ts.models[k], ts.optimizers[k]
        c.model.load_params(c_params)
        server_model.load_params(s_params)
        c.optimizer.lr = lr
        server_opt.lr = lr
        if meter is not None:
            meter.add_down(k, CAT_SYNC, c.model.param_count + server_model.param_count)
        batches = round_batches(partition, k, cfg.batch_size,
                                cfg.master_seed, round_index, cfg.epochs)
        for i, idx in enumerate(batches):
            if snapshot_hook is not None:
                snapshot_hook(k, i, np.concatenate(
                    [c.model.flatten_params(), server_model.flatten_params()]))
            x, y = dataset.features[idx], dataset.labels[idx]
            loss = _split_step(c.model, c.optimizer, server_model, server_opt,
                               x, y, meter, k)
            losses.add(k, loss, len(y))
        if meter is not None:
            meter.add_up(k, CAT_SYNC, c.model.param_count + server_model.param_count)
    new_theta_c = aggregate_weighted([c.model for c in clients], partition.weights)
    new_theta_s = aggregate_weighted(ts.models, partition.weights)
    return new_theta_c, new_theta_s, losses.weighted(partition.weights)


def run_sflv2_round(clients: list[ClientState], ts: TrainingServerState,
                    theta_c: LayeredModel, dataset: Dataset, partition: Partition,
                    cfg: RoundConfig, round_index: int,
                    meter: CommLedger | None = None) -> tuple[LayeredModel, float]:
    """Single shared server model updated sequentially over client
    permutations; only client halves are aggregated. Clients with fewer
    batches than the longest stream wrap around their own stream."""
    if ts.variant != "v2":
        raise ValueError("run_sflv2_round needs a v2 training server")
    lr = cfg.lr_at(round_index)
    server_model, server_opt = ts.models[0], ts.optimizers[0]
    server_opt.lr = lr
    c_params = theta_c.flatten_params()
    streams = []
    for c in clients:
        c.model.load_params(c_params)
        c.optimizer.lr = lr
        if meter is not None:
            meter.add_down(c.client_id, CAT_SYNC, c.model.param_count)
        streams.append(round_batches(partition, c.client_id, cfg.batch_size,
                                     cfg.master_seed, round_index, cfg.epochs))
    losses = _LossMeter(partition.num_clients)
    tau_max = max((len(s) for s in streams), default=0)
    round_perm = seeds.rng_for(cfg.master_seed, seeds.PERMUTE,
                               round_index).permutation(len(clients))
    for i in range(tau_max):
        if cfg.permute_per_round:
            perm = round_perm
        else:
            perm = seeds.rng_for(cfg.master_seed, seeds.PERMUTE,
                                 round_index, i).permutation(len(clients))
        for k in perm:
            k = int(k)
            if not streams[k]:
                continue
            idx = streams[k][i % len(streams[k])]
            x, y = dataset.features[idx], dataset.labels[idx]
            loss = _split_step(clients[k].model, clients[k].optimizer,
                               server_model, server_opt, x, y, meter, k)
            losses.add(k, loss, len(y))
    for c in clients:
        if meter is not None:
            meter.add_up(c.client_id, CAT_SYNC, c.model.param_count)
    new_theta_c = aggregate_weighted([c.model for c in clients], partition.weights)
    return new_theta_c, losses.weighted(partition.weights)


def run_sl_round(clients: list[ClientState], ts: TrainingServerState,
                 relay_params: np.ndarray, dataset: Dataset, partition: Partition,
                 cfg: RoundConfig, round_index: int,
                 meter: CommLedger | None = None) -> tuple[np.ndarray, float]:
    """Vanilla split learning: clients take sequential turns against the
    shared server, relaying client-half weights to the next client."""
    if ts.variant != "v2":
        raise ValueError("run_sl_round needs a shared-server training state")
    lr = cfg.lr_at(round_index)
    server_model, server_opt = ts.models[0], ts.optimizers[0]
    server_opt.lr = lr
    losses = _LossMeter(partition.num_clients)
    current = relay_params
    for c in clients:
        k = c.client_id
        c.model.load_params(current)
        c.optimizer.lr = lr
        if meter is not None:
            meter.add_down(k, CAT_SYNC, c.model.param_count)
        batches = round_batches(partition, k, cfg.batch_size,
                                cfg.master_seed, round_index, cfg.epochs)
        for idx in batches:
            x, y = dataset.features[idx], dataset.labels[idx]
            loss = _split_step(c.model, c.optimizer, server_model, server_opt,
                               x, y, meter, k)
            losses.add(k, loss, len(y))
        current = c.model.flatten_params()
        if meter is not None:
            meter.add_up(k, CAT_SYNC, c.model.param_count)
    return current, losses.weighted(partition.weights)


def run_centralized_round(model: LayeredModel, optimizer, dataset: Dataset,
                          cfg: RoundConfig, round_index: int) -> float:
    """Plain minibatch training over the pooled dataset."""
    optimizer.lr = cfg.lr_at(round_index)
    batches = pooled_round_batches(len(dataset), cfg.batch_size,
                                   cfg.master_seed, round_index, cfg.epochs)
    total, count = 0.0, 0
    for idx in batches:
        x, y = dataset.features[idx], dataset.labels[idx]
        logits = model.forward(x)
        loss, grad_logits = cross_entropy(logits, y)
        grads, _ = model.backward(grad_logits)
        optimizer.step(model.parameters(), grads)
        total += loss * len(y)
        count += len(y)
    return total / count if count else 0.0


# ---------------------------------------------------------------------------
# Protocol state: one object per experiment, advanced round by round
# ---------------------------------------------------------------------------

@dataclass
class ProtocolState:
    variant: str
    cut: int | None
    clients: list[ClientState] = field(default_factory=list)
    ts: TrainingServerState | None = None
    theta_c: LayeredModel | None = None   # global client half (or full model)
    theta_s: LayeredModel | None = None   # global server half (sflv1 only)
    relay: np.ndarray | None = None       # sl relay weights
    model: LayeredModel | None = None     # centralized
    optimizer: object | None = None       # centralized

    def global_model(self) -> LayeredModel:
        """Current global model, stitched for split variants."""
        if self.variant == "centralized":
            return self.model.clone()
        if self.variant == "fedavg":
            return self.theta_c.clone()
        if self.variant == "sflv1":
            server = self.theta_s
        else:
            server = self.ts.models[0]
        if self.variant == "sl":
            client = self.clients[0].model.clone()
            client.load_params(self.relay)
        else:
            client = self.theta_c
        layers = [l.clone() for l in client.layers] + [l.clone() for l in server.layers]
        return LayeredModel(layers, client.input_shape)


def init_protocol(full_model: LayeredModel, variant: str, cut: int | None,
                  num_clients: int, optimizer_kind: str, lr: float,
                  allow_limit_cuts: bool = False) -> ProtocolState:
    """Build client/server states for one experiment.

    ``full_model`` must already be initialized; every copy descends from it.
    ``allow_limit_cuts`` opens the degenerate sflv2 cuts 0 and L used by the
    reduction checks.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    state = ProtocolState(variant=variant, cut=cut)
    if variant == "centralized":
        state.model = full_model.clone()
        state.optimizer = make_optimizer(optimizer_kind, lr)
        return state
    if variant == "fedavg":
        state.theta_c = full_model.clone()
        state.clients = [
            ClientState(k, full_model.clone(), make_optimizer(optimizer_kind, lr))
            for k in range(num_clients)
        ]
        return state

    if cut is None:
        raise ValueError(f"variant {variant!r} needs a cut index")
    low = 0 if (allow_limit_cuts and variant == "sflv2") else 1
    high = len(full_model) if (allow_limit_cuts and variant == "sflv2") else len(full_model) - 1
    if not low <= cut <= high:
        raise ValueError(f"cut {cut} out of range [{low}, {high}] for variant {variant!r}")
    sm = _split_unchecked(full_model, cut)
    state.theta_c = sm.client_half.clone()
    state.clients = [
        ClientState(k, sm.client_half.clone(), make_optimizer(optimizer_kind, lr))
        for k in range(num_clients)
    ]
    if variant == "sflv1":
        state.theta_s = sm.server_half.clone()
        state.ts = TrainingServerState(
            "v1",
            [sm.server_half.clone() for _ in range(num_clients)],
            [make_optimizer(optimizer_kind, lr) for _ in range(num_clients)],
        )
    else:
        state.ts = TrainingServerState(
            "v2", [sm.server_half.clone()], [make_optimizer(optimizer_kind, lr)]
        )
        if variant == "sl":
            state.relay = sm.client_half.flatten_params()
    return state


def run_round(state: ProtocolState, dataset: Dataset, partition: Partition,
              cfg: RoundConfig, round_index: int,
              meter: CommLedger | None = None, snapshot_hook=None) -> float:
    """Advance one communication round; returns the weighted train loss."""
    if state.variant == "centralized":
        return run_centralized_round(state.model, state.optimizer, dataset,
                                     cfg, round_index)
    if state.variant == "fedavg":
        state.theta_c, loss = run_fedavg_round(
            state.clients, state.theta_c, dataset, partition, cfg, round_index,
            meter=meter, snapshot_hook=snapshot_hook)
        return loss
    if state.variant == "sflv1":
        state.theta_c, state.theta_s, loss = run_sflv1_round(
            state.clients, state.ts, state.theta_c, state.theta_s, dataset,
            partition, cfg, round_index, meter=meter, snapshot_hook=snapshot_hook)
        return loss
    if state.variant == "sflv2":
        state.theta_c, loss = run_sflv2_round(
            state.clients, state.ts, state.theta_c, dataset, partition, cfg,
            round_index, meter=meter)
        return loss
    if state.variant == "sl":
        state.relay, loss = run_sl_round(
            state.clients, state.ts, state.relay, dataset, partition, cfg,
            round_index, meter=meter)
        return loss
    raise ValueError(f"unknown variant {state.variant!r}")
