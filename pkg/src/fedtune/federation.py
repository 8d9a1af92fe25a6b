"""Cross-silo federated training of adapter models.

Every round, all clients run K local (DP-)SGD steps on their own shard, the
server averages the trainable factors (FedAvg) and broadcasts the result.
With DP enabled, each client clips per-sample gradients jointly across all of
its trainable factors and adds Gaussian noise before any update is applied,
so nothing that leaves the client boundary is un-privatized: the server only
ever sees post-privatization states.

The run is fully deterministic in the config seed. Each (round, client) pair
owns a private RNG stream keyed by (seed, "round", r, "client", i), and the
server reduces client factors in ascending client order, so executing clients
concurrently cannot change a single bit of the result.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .adapters import (
    AdapterConfig,
    AdapterState,
    apply_update,
    backprop_to_adapter,
    effective_weight,
    grads_from_flat,
    init_adapter,
    per_sample_flat_grads,
)
from .linalg import RngStream, frobenius_norm
from .privacy import DpConfig, epsilon_from_sigma, privatize_batch, rdp_curve, sigma_for_budget
from .tasks import (
    Dataset,
    PartitionSpec,
    SoftmaxModel,
    SyntheticTaskSpec,
    accuracy,
    gen_synthetic,
    mean_loss_and_grad_w,
    partition,
    softmax_deltas,
)

__all__ = [
    "AggregationError",
    "FedConfig",
    "ClientState",
    "TrainRound",
    "TrainTrace",
    "local_update",
    "fedavg",
    "aggregation_gap",
    "run_federation",
]

TRACE_HEADER = ["round", "train_loss", "test_acc", "grad_norm", "agg_gap", "epsilon"]


class AggregationError(ValueError):
    """Client states that cannot be averaged (mismatched or divergent)."""


@dataclass(frozen=True)
class FedConfig:
    """Federation schedule and shared hyperparameters.

    ``weighting`` is "uniform" (1/n each) or "size" (proportional to client
    dataset sizes). local_steps = 0 is the degenerate no-training schedule.
    """

    n_clients: int
    rounds: int
    local_steps: int
    batch_size: int
    eta: float
    adapter: AdapterConfig
    dp: DpConfig | None = None
    seed: int = 0
    weighting: str = "uniform"

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_steps < 0:
            raise ValueError("local_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.weighting not in ("uniform", "size"):
            raise ValueError("weighting must be 'uniform' or 'size'")


@dataclass(frozen=True, eq=False)
class ClientState:
    """One client's shard, current model, and private RNG stream."""

    id: int
    dataset: Dataset
    model: SoftmaxModel
    rng: RngStream


@dataclass(frozen=True)
class TrainRound:
    round: int
    train_loss: float
    test_acc: float
    grad_norm: float
    agg_gap: float
    epsilon: float


@dataclass(frozen=True)
class TrainTrace:
    """Per-round metrics; exactly one record per communication round."""

    rounds: tuple[TrainRound, ...]

    def __post_init__(self):
        for rec in self.rounds:
            for field in dataclasses.fields(rec):
                v = getattr(rec, field.name)
                if not math.isfinite(v):
                    raise ValueError(f"non-finite trace value {field.name}={v}")

    def to_rows(self) -> list[list]:
        return [
            [r.round, repr(r.train_loss), repr(r.test_acc), repr(r.grad_norm),
             repr(r.agg_gap), repr(r.epsilon)]
            for r in self.rounds
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_HEADER)
            writer.writerows(self.to_rows())

    def to_json(self, path) -> None:
        payload = [dataclasses.asdict(r) for r in self.rounds]
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _run_local_steps(client: ClientState, k_steps: int, eta: float,
                     dp: DpConfig | None, batch_size: int):
    """Shared implementation: returns (new ClientState, mean step-grad norm)."""
    if batch_size > client.dataset.n:
        raise ValueError(
            f"batch_size {batch_size} exceeds client {client.id} dataset size "
            f"{client.dataset.n}"
        )
    state = client.model.state
    norms = []
    for _ in range(k_steps):
        idx = client.rng.choice_without_replacement(client.dataset.n, batch_size)
        xb = client.dataset.x[idx]
        yb = client.dataset.y[idx]
        model = SoftmaxModel(state=state)
        if dp is not None:
            _, deltas = softmax_deltas(model, xb, yb)
            rows = per_sample_flat_grads(state, xb, deltas)
            flat = privatize_batch(rows, dp.clip, dp.sigma, client.rng)
            grads = grads_from_flat(state, flat)
        else:
            _, grad_w = mean_loss_and_grad_w(model, xb, yb)
            grads = backprop_to_adapter(state, grad_w)
            flat = np.concatenate([g.ravel() for _, g in grads.factors()])
        norms.append(float(np.linalg.norm(flat)))
        state = apply_update(state, grads, eta)
    new_client = dataclasses.replace(client, model=SoftmaxModel(state=state))
    mean_norm = float(np.mean(norms)) if norms else 0.0
    return new_client, mean_norm


def local_update(client: ClientState, k_steps: int, eta: float,
                 dp: DpConfig | None = None, batch_size: int | None = None) -> ClientState:
    """Run ``k_steps`` of (DP-)SGD on the client's shard.

    Each step samples a fixed-size batch uniformly without replacement from
    the client's stream, backpropagates to the adapter factors, and either
    averages the per-sample gradients (no DP) or jointly clips and privatizes
    them (DP) before the simultaneous factor update. Frozen factors are
    untouched. eta >= 0; dp requires a calibrated sigma.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if dp is not None and dp.sigma is None:
        raise ValueError("dp.sigma must be calibrated before local updates")
    if batch_size is None:
        batch_size = client.dataset.n
    new_client, _ = _run_local_steps(client, k_steps, eta, dp, batch_size)
    return new_client


def _check_compatible(states: list[AdapterState], weights) -> np.ndarray:
    if not states:
        raise AggregationError("no states to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(states),):
        raise AggregationError("weights must align with states")
    if abs(float(weights.sum()) - 1.0) > 1e-9:
        raise AggregationError(f"weights sum to {float(weights.sum())}, not 1")
    first = states[0]
    for s in states[1:]:
        if s.kind != first.kind:
            raise AggregationError(f"mixed adapter kinds {first.kind} vs {s.kind}")
        if s.shape != first.shape:
            raise AggregationError("mismatched weight shapes")
        for (name, f0), (_, fi) in zip(first.frozen_factors(), s.frozen_factors()):
            if f0.shape != fi.shape or not np.array_equal(f0, fi):
                raise AggregationError(f"clients disagree on frozen factor '{name}'")
    return weights


def fedavg(states: list[AdapterState], weights) -> AdapterState:
    """Weighted average of the clients' trainable factors.

    Frozen factors are copied from the inputs after asserting they are
    bitwise identical across clients. Accumulation runs in ascending client
    order so the reduction is deterministic.
    """
    weights = _check_compatible(states, weights)
    first = states[0]
    updates = {}
    for fi, (name, factor) in enumerate(first.trainable_factors()):
        acc = weights[0] * factor
        for ci in range(1, len(states)):
            acc = acc + weights[ci] * states[ci].trainable_factors()[fi][1]
        updates[name] = acc
    return dataclasses.replace(first, **updates)


def aggregation_gap(states: list[AdapterState], weights) -> float:
    """Frobenius distance between the averaged model's effective weight and
    the average of the clients' effective weights."""
    weights = _check_compatible(states, weights)
    averaged = effective_weight(fedavg(states, weights))
    mean_of_effectives = sum(
        w * effective_weight(s) for w, s in zip(weights, states)
    )
    return frobenius_norm(averaged - mean_of_effectives)


def _client_weights(config: FedConfig, shards: list[Dataset]) -> np.ndarray:
    if config.weighting == "size":
        sizes = np.array([s.n for s in shards], dtype=np.float64)
        return sizes / sizes.sum()
    return np.full(len(shards), 1.0 / len(shards))


def resolve_dp(config: FedConfig, client_size: int) -> DpConfig | None:
    """Fill in sample_rate, steps and (if absent) a calibrated sigma."""
    dp = config.dp
    if dp is None or config.local_steps == 0:
        return None
    q = config.batch_size / client_size
    steps = config.rounds * config.local_steps
    if dp.sigma is None:
        sigma = sigma_for_budget(dp.epsilon, dp.delta, q, steps)
    else:
        sigma = dp.sigma
    return dataclasses.replace(dp, sigma=sigma, sample_rate=q, steps=steps)


def run_federation(config: FedConfig, partition_spec: PartitionSpec,
                   task_spec: SyntheticTaskSpec, *, datasets=None,
                   threads: int = 1) -> TrainTrace:
    """Full federated run: R rounds of local updates, FedAvg, broadcast.

    ``datasets`` optionally supplies prebuilt (train, test, w0) instead of
    generating them from ``task_spec`` (the heterogeneity sweep uses this to
    pass a class-balanced pool). Deterministic in config.seed, including
    under ``threads`` > 1.
    """
    if partition_spec.n_clients != config.n_clients:
        raise ValueError("partition spec and config disagree on client count")
    if datasets is None:
        train, test, w0, _ = gen_synthetic(task_spec)
    else:
        train, test, w0 = datasets
    shards = partition(train, partition_spec, config.seed)
    weights = _client_weights(config, shards)
    client_size = min(s.n for s in shards)
    dp = resolve_dp(config, client_size)

    server = init_adapter(config.adapter, w0)

    # Per-step RDP is constant across the run; precompute the curve once so
    # per-round epsilon is a cheap scan.
    eps_curve = None
    if dp is not None:
        eps_curve = rdp_curve(dp.sample_rate, dp.sigma)

    def round_epsilon(steps_done: int) -> float:
        if eps_curve is None or steps_done == 0:
            return 0.0
        log_inv_delta = math.log(1.0 / dp.delta)
        return min(
            steps_done * v + log_inv_delta / (o - 1)
            for o, v in zip(eps_curve.orders, eps_curve.values)
        )

    records = []
    for rnd in range(config.rounds):
        clients = [
            ClientState(
                id=i,
                dataset=shards[i],
                model=SoftmaxModel(state=server),
                rng=RngStream(config.seed, "round", rnd, "client", i),
            )
            for i in range(config.n_clients)
        ]

        def work(client):
            return _run_local_steps(client, config.local_steps, config.eta,
                                    dp, config.batch_size)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, clients))
        else:
            results = [work(c) for c in clients]

        states = [res[0].model.state for res in results]
        gap = aggregation_gap(states, weights)
        server = fedavg(states, weights)

        model = SoftmaxModel(state=server)
        losses, _ = softmax_deltas(model, train.x, train.y)
        records.append(
            TrainRound(
                round=rnd,
                train_loss=float(losses.mean()),
                test_acc=accuracy(model, test),
                grad_norm=float(np.mean([res[1] for res in results])),
                agg_gap=gap,
                epsilon=round_epsilon((rnd + 1) * config.local_steps),
            )
        )
    return TrainTrace(rounds=tuple(records))
