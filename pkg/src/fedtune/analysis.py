"""Desk-scale experiments that check the analytic behavior of low-rank
adapters under noise, scaling, and heterogeneous federated aggregation.

Each experiment returns plain data plus a dict of named boolean checks; the
CLI serializes both (CSV + JSON summary) and maps failed checks to its
claim-violation exit code. Checks compare against analytic expectations
derived from the experiment's own parameters (e.g. noise crossover at
sigma = 1/sqrt(r)), so they remain meaningful away from the default sizes.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .adapters import (
    AdapterConfig,
    AdapterKind,
    InitScheme,
    apply_update,
    backprop_to_adapter,
    effective_weight,
    init_adapter,
)
from .federation import FedConfig, run_federation
from .linalg import RngStream, frobenius_norm, gaussian_matrix
from .privacy import DpConfig
from .tasks import (
    Dataset,
    PartitionSpec,
    SoftmaxModel,
    SyntheticTaskSpec,
    _integer_counts,
    gen_synthetic,
    mean_loss_and_grad_w,
    softmax_deltas,
)

__all__ = [
    "NoiseScanRow",
    "AlphaLimitRow",
    "SmoothnessProbeRow",
    "ExperimentReport",
    "DEFAULT_SIGMA_GRID",
    "noise_norm_scan",
    "noise_crossover_sigma",
    "alpha_limit_trajectory",
    "alpha_limit_one_step_reference",
    "smoothness_probe_counterexample",
    "smoothness_bound_check_ffa",
    "heterogeneity_sweep",
    "init_scheme_comparison",
    "HET_LEVELS",
    "heterogeneity_proportions",
    "balanced_pool",
]

DEFAULT_SIGMA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 16))

HET_LEVELS = ("iid", "mild", "severe")

# Per-client label distributions for the named heterogeneity levels.
_BINARY_SPLITS = {
    "iid": ((0.5, 0.5), (0.5, 0.5), (0.5, 0.5)),
    "mild": ((0.15, 0.85), (0.85, 0.15), (0.5, 0.5)),
    "severe": ((0.1, 0.9), (0.9, 0.1), (0.5, 0.5)),
}
_TERNARY_SPLITS = {
    "iid": tuple((1 / 3, 1 / 3, 1 / 3) for _ in range(3)),
    "mild": ((0.6, 0.2, 0.2), (0.2, 0.6, 0.2), (0.2, 0.2, 0.6)),
    "severe": ((0.9, 0.05, 0.05), (0.05, 0.9, 0.05), (0.05, 0.05, 0.9)),
}


@dataclass(frozen=True)
class NoiseScanRow:
    """Mean Frobenius norms of the update-noise terms at one sigma."""

    sigma: float
    lora_noise: float   # mean ||xi_B xi_A||_F
    full_noise: float   # mean ||xi_W||_F
    ba_cross: float     # mean ||xi_B A||_F
    ab_cross: float     # mean ||B xi_A||_F
    trials: int


@dataclass(frozen=True)
class AlphaLimitRow:
    """Per-step distance between the scaled run and the frozen-A run."""

    alpha: float
    gaps: tuple[float, ...]  # index k in 0..K, gaps[0] == 0


@dataclass(frozen=True)
class SmoothnessProbeRow:
    k: int
    ratio: float


@dataclass(frozen=True)
class ExperimentReport:
    """Long-format rows, per-cell summary, and named pass/fail checks."""

    rows: tuple[dict, ...]
    summary: dict
    checks: dict


def noise_norm_scan(d: int, k: int, r: int, sigma_grid=DEFAULT_SIGMA_GRID,
                    trials: int = 30, rng: RngStream | None = None) -> list[NoiseScanRow]:
    """Average noise-term norms over ``trials`` per sigma.

    xi_B is d x r, xi_A is r x k, xi_W is d x k, all with i.i.d. N(0, sigma^2)
    entries. The cross terms need an (A, B) context; both context matrices are
    drawn N(0, 1/r) per trial, which puts ||xi_B A|| on the same sigma*sqrt(dk)
    scale as the full-update noise while the product term grows like
    sigma^2 * sqrt(dkr).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if rng is None:
        rng = RngStream(0, "noise-scan")
    rows = []
    for si, sigma in enumerate(sigma_grid):
        lora, full, ba, ab = 0.0, 0.0, 0.0, 0.0
        for t in range(trials):
            trial_rng = rng.child("sigma", si, "trial", t)
            xi_b = trial_rng.normal((d, r), sigma)
            xi_a = trial_rng.normal((r, k), sigma)
            xi_w = trial_rng.normal((d, k), sigma)
            a_ctx = trial_rng.normal((r, k), 1.0 / np.sqrt(r))
            b_ctx = trial_rng.normal((d, r), 1.0 / np.sqrt(r))
            lora += frobenius_norm(xi_b @ xi_a)
            full += frobenius_norm(xi_w)
            ba += frobenius_norm(xi_b @ a_ctx)
            ab += frobenius_norm(b_ctx @ xi_a)
        rows.append(NoiseScanRow(sigma=float(sigma), lora_noise=lora / trials,
                                 full_noise=full / trials, ba_cross=ba / trials,
                                 ab_cross=ab / trials, trials=trials))
    return rows


def noise_crossover_sigma(rows: list[NoiseScanRow]) -> float | None:
    """Smallest grid sigma where the product-noise norm exceeds the
    full-update noise norm, or None if it never does."""
    for row in rows:
        if row.lora_noise > row.full_noise:
            return row.sigma
    return None


def _frozen_a_base(task_spec: SyntheticTaskSpec, rank: int, w0: np.ndarray):
    """Frozen-A adapter with scaling 1 (alpha = rank), seeded from the task."""
    cfg = AdapterConfig(kind=AdapterKind.FFA_LORA, rank=rank, alpha=float(rank),
                        seed=task_spec.seed)
    return init_adapter(cfg, w0)


def alpha_limit_trajectory(task_spec: SyntheticTaskSpec, eta1: float, k_steps: int,
                           alpha_list, b_init: np.ndarray) -> list[AlphaLimitRow]:
    """Distance between scaled-product training and frozen-A training.

    Runs K full-batch steps of (a) the frozen-A adapter with scaling 1 and
    learning rate eta1 from (A0, B = b_init), and (b) the two-factor adapter
    with scaling alpha, learning rate eta1/alpha^2, A = A0 and B = b_init/alpha
    (so both start from the same effective weight). gaps[k] is the Frobenius
    distance between the two effective weights after k steps; gaps[0] = 0 by
    construction, and the whole sequence shrinks as alpha grows.
    """
    train, _, w0, _ = gen_synthetic(task_spec)
    b_init = np.asarray(b_init, dtype=np.float64)
    d, r = b_init.shape
    if d != train.dim:
        raise ValueError("b_init rows must match the task dimension")

    ffa0 = _frozen_a_base(task_spec, r, w0)
    a0 = ffa0.a

    def full_batch_step(state, eta):
        model = SoftmaxModel(state=state)
        _, grad_w = mean_loss_and_grad_w(model, train.x, train.y)
        return apply_update(state, backprop_to_adapter(state, grad_w), eta)

    # Reference trajectory: frozen-A, scaling 1 (alpha = r), rate eta1.
    ffa_traj = [effective_weight(dataclasses.replace(ffa0, b=b_init.copy()))]
    state = dataclasses.replace(ffa0, b=b_init.copy())
    for _ in range(k_steps):
        state = full_batch_step(state, eta1)
        ffa_traj.append(effective_weight(state))

    rows = []
    for alpha in alpha_list:
        alpha = float(alpha)
        cfg = AdapterConfig(kind=AdapterKind.LORA, rank=r, alpha=alpha * r,
                            seed=task_spec.seed)
        state = init_adapter(cfg, w0)
        state = dataclasses.replace(state, a=a0.copy(), b=b_init / alpha)
        gaps = [frobenius_norm(effective_weight(state) - ffa_traj[0])]
        eta = eta1 / alpha**2
        for step in range(k_steps):
            state = full_batch_step(state, eta)
            gaps.append(frobenius_norm(effective_weight(state) - ffa_traj[step + 1]))
        rows.append(AlphaLimitRow(alpha=alpha, gaps=tuple(gaps)))
    return rows


def alpha_limit_one_step_reference(task_spec: SyntheticTaskSpec, eta1: float,
                                   alpha: float, b_init: np.ndarray) -> float:
    """(eta1^2/alpha) * ||dB0 @ dA0||_F with scaling-1 gradients at the shared
    start. With b_init = 0 the A-gradient dA0 = b_init^T grad_w vanishes, so
    the reference (like the measured one-step gap) is zero."""
    train, _, w0, _ = gen_synthetic(task_spec)
    b_init = np.asarray(b_init, dtype=np.float64)
    ffa0 = _frozen_a_base(task_spec, b_init.shape[1], w0)
    state = dataclasses.replace(ffa0, b=b_init.copy())
    model = SoftmaxModel(state=state)
    _, grad_w = mean_loss_and_grad_w(model, train.x, train.y)
    grad_b = grad_w @ ffa0.a.T
    grad_a = b_init.T @ grad_w
    return (eta1**2 / float(alpha)) * frobenius_norm(grad_b @ grad_a)


def smoothness_probe_counterexample(k_list, d: int = 6) -> list[SmoothnessProbeRow]:
    """Gradient-change ratio along the diverging sequence A = B = k*I.

    With base weight zero, loss F(W) = 0.5*||W||_F^2 and scaling 1, the
    probe computes

        (||dA(x_k) - dA(0)|| + ||dB(x_k) - dB(0)||) /
        (||A_k - 0|| + ||B_k - 0||)

    which equals k^2 exactly: the effective weight is k^2 I, so both factor
    gradients are k^3 I while the parameters grow like k. The ratio is
    unbounded in k, so no global smoothness constant exists for the jointly
    trained factors.
    """
    w0 = np.zeros((d, d))
    cfg = AdapterConfig(kind=AdapterKind.LORA, rank=d, alpha=float(d), seed=0)
    base = init_adapter(cfg, w0)
    eye = np.eye(d)
    rows = []
    for k in k_list:
        k = int(k)
        if k < 1:
            raise ValueError("probe indices must be >= 1")
        state = dataclasses.replace(base, a=k * eye, b=k * eye)
        grad_w = effective_weight(state)          # gradient of 0.5*||W||^2
        grads = backprop_to_adapter(state, grad_w)
        num = frobenius_norm(grads.a) + frobenius_norm(grads.b)
        den = frobenius_norm(state.a) + frobenius_norm(state.b)
        rows.append(SmoothnessProbeRow(k=k, ratio=num / den))
    return rows


def smoothness_bound_check_ffa(a_matrix: np.ndarray, pairs: int,
                               rng: RngStream, d: int = 8) -> float:
    """Max gradient-Lipschitz ratio of the frozen-A adapter under the
    1-smooth loss 0.5*||W||_F^2.

    For random pairs (B1, B2), measures ||dB(B1) - dB(B2)|| / ||B1 - B2||.
    The bound is ||A||_F^2: the difference equals (B1 - B2) A A^T.
    """
    a_matrix = np.asarray(a_matrix, dtype=np.float64)
    r, k = a_matrix.shape
    w0 = np.zeros((d, k))
    cfg = AdapterConfig(kind=AdapterKind.FFA_LORA, rank=r, alpha=float(r), seed=0)
    base = dataclasses.replace(init_adapter(cfg, w0), a=a_matrix)
    worst = 0.0
    for _ in range(pairs):
        b1 = rng.normal((d, r))
        b2 = rng.normal((d, r))
        s1 = dataclasses.replace(base, b=b1)
        s2 = dataclasses.replace(base, b=b2)
        g1 = backprop_to_adapter(s1, effective_weight(s1)).b
        g2 = backprop_to_adapter(s2, effective_weight(s2)).b
        denom = frobenius_norm(b1 - b2)
        if denom > 0:
            worst = max(worst, frobenius_norm(g1 - g2) / denom)
    return worst


def heterogeneity_proportions(level: str, n_classes: int) -> PartitionSpec:
    """The named 3-client splits for binary and ternary tasks."""
    table = {2: _BINARY_SPLITS, 3: _TERNARY_SPLITS}.get(n_classes)
    if table is None:
        raise ValueError("named heterogeneity levels exist for 2 or 3 classes")
    if level not in table:
        raise ValueError(f"unknown heterogeneity level {level!r}")
    return PartitionSpec(proportions=table[level])


def balanced_pool(dataset: Dataset, spec: PartitionSpec) -> Dataset:
    """Largest class-balanced prefix subset for which ``spec`` is feasible.

    Trims every class to a common per-class count (keeping original order,
    so the result is deterministic) and shrinks that count until the spec's
    integer per-class demands fit. Argmax-generated labels are only
    approximately balanced, while splits like [0.1, 0.9]/[0.9, 0.1]/[0.5, 0.5]
    demand exactly half of each class; this makes those splits feasible
    without touching the partitioner's strict feasibility contract.
    """
    k = spec.n_classes
    counts = np.bincount(dataset.y, minlength=k)
    per_class = int(counts.min())
    while per_class >= 1:
        size = (k * per_class) // spec.n_clients
        demand = np.sum([_integer_counts(p, size) for p in spec.proportions], axis=0)
        if size >= 1 and (demand <= per_class).all():
            break
        per_class -= 1
    else:
        raise ValueError("could not balance the pool for this partition spec")
    keep = np.concatenate(
        [np.where(dataset.y == c)[0][:per_class] for c in range(k)]
    )
    keep.sort()
    return dataset.subset(keep)


def _sweep_run(kind: AdapterKind, level: str, seed: int,
               task_spec: SyntheticTaskSpec, fed: FedConfig,
               dp: DpConfig | None):
    spec = heterogeneity_proportions(level, task_spec.classes)
    run_task = dataclasses.replace(task_spec, seed=task_spec.seed + seed)
    train, test, w0, _ = gen_synthetic(run_task)
    pool = balanced_pool(train, spec)
    adapter = dataclasses.replace(fed.adapter, kind=kind, seed=run_task.seed)
    config = dataclasses.replace(fed, adapter=adapter, dp=dp, seed=run_task.seed)
    trace = run_federation(config, spec, run_task, datasets=(pool, test, w0))
    final_acc = trace.rounds[-1].test_acc
    mean_gap = float(np.mean([r.agg_gap for r in trace.rounds]))
    return {
        "level": level,
        "kind": kind.value,
        "dp": "none" if dp is None else repr(dp.epsilon),
        "seed": seed,
        "final_acc": final_acc,
        "mean_gap": mean_gap,
    }


def heterogeneity_sweep(levels, kinds, dp: DpConfig | None, seeds: int,
                        task_spec: SyntheticTaskSpec, fed: FedConfig,
                        threads: int = 1) -> ExperimentReport:
    """Grid of run_federation over heterogeneity levels and adapter kinds,
    repeated over ``seeds`` deterministic repetitions.

    Checks: frozen-A cells always aggregate exactly (gap <= 1e-12); the
    two-factor adapter's severe-het gap exceeds its iid gap; and, with DP on
    and both kinds present, the frozen-A variant's final-accuracy standard
    deviation does not exceed the two-factor one's on the severe split, with
    mean accuracy within one point.
    """
    levels = list(levels)
    kinds = [k if isinstance(k, AdapterKind) else AdapterKind(k) for k in kinds]
    jobs = [(kind, level, s)
            for level in levels for kind in kinds for s in range(seeds)]

    def work(job):
        kind, level, s = job
        return _sweep_run(kind, level, s, task_spec, fed, dp)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, jobs))
    else:
        rows = [work(j) for j in jobs]

    summary = {}
    for level in levels:
        for kind in kinds:
            accs = [r["final_acc"] for r in rows
                    if r["level"] == level and r["kind"] == kind.value]
            gaps = [r["mean_gap"] for r in rows
                    if r["level"] == level and r["kind"] == kind.value]
            summary[f"{level}/{kind.value}"] = {
                "acc_mean": float(np.mean(accs)),
                "acc_std": float(np.std(accs)),
                "gap_mean": float(np.mean(gaps)),
            }

    checks = {}
    ffa = AdapterKind.FFA_LORA
    lora = AdapterKind.LORA
    if ffa in kinds:
        checks["ffa_gap_zero"] = all(
            summary[f"{level}/{ffa.value}"]["gap_mean"] <= 1e-12 for level in levels
        )
    if lora in kinds and "severe" in levels and "iid" in levels:
        checks["lora_gap_severe_gt_iid"] = (
            summary[f"severe/{lora.value}"]["gap_mean"]
            > summary[f"iid/{lora.value}"]["gap_mean"]
        )
    if dp is not None and ffa in kinds and lora in kinds and "severe" in levels:
        ffa_cell = summary[f"severe/{ffa.value}"]
        lora_cell = summary[f"severe/{lora.value}"]
        checks["dp_ffa_std_le_lora"] = ffa_cell["acc_std"] <= lora_cell["acc_std"]
        checks["dp_ffa_mean_within_1pt"] = (
            ffa_cell["acc_mean"] >= lora_cell["acc_mean"] - 0.01
        )
    return ExperimentReport(rows=tuple(rows), summary=summary, checks=checks)


def init_scheme_comparison(schemes, task_spec: SyntheticTaskSpec, fed: FedConfig,
                           partition_spec: PartitionSpec | None = None,
                           seeds: int = 3, threads: int = 1) -> ExperimentReport:
    """Frozen-A federated runs under different A initializations, with
    matched seeds across schemes.

    Checks: every scheme appears exactly once in the summary, and every run
    ends with lower pooled training loss than the fresh model's.
    """
    schemes = [s if isinstance(s, InitScheme) else InitScheme(s) for s in schemes]
    if len(set(schemes)) != len(schemes):
        raise ValueError("schemes must be unique")
    if fed.adapter.kind != AdapterKind.FFA_LORA:
        raise ValueError("init comparison runs the frozen-A adapter only")
    if partition_spec is None:
        partition_spec = heterogeneity_proportions("mild", task_spec.classes)

    jobs = [(scheme, s) for scheme in schemes for s in range(seeds)]

    def work(job):
        scheme, s = job
        run_task = dataclasses.replace(task_spec, seed=task_spec.seed + s)
        train, test, w0, _ = gen_synthetic(run_task)
        pool = balanced_pool(train, partition_spec)
        adapter = dataclasses.replace(fed.adapter, init=scheme, seed=run_task.seed)
        config = dataclasses.replace(fed, adapter=adapter, seed=run_task.seed)
        trace = run_federation(config, partition_spec, run_task,
                               datasets=(pool, test, w0))
        fresh = SoftmaxModel(state=init_adapter(adapter, w0))
        fresh_losses, _ = softmax_deltas(fresh, pool.x, pool.y)
        return {
            "scheme": scheme.value,
            "seed": s,
            "final_acc": trace.rounds[-1].test_acc,
            "final_loss": trace.rounds[-1].train_loss,
            "fresh_loss": float(fresh_losses.mean()),
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            rows = list(pool_exec.map(work, jobs))
    else:
        rows = [work(j) for j in jobs]

    summary = {}
    for scheme in schemes:
        accs = [r["final_acc"] for r in rows if r["scheme"] == scheme.value]
        summary[scheme.value] = {
            "acc_mean": float(np.mean(accs)),
            "acc_std": float(np.std(accs)),
        }
    checks = {
        "schemes_unique": len(summary) == len(schemes),
        "all_converged": all(r["final_loss"] < r["fresh_loss"] for r in rows),
    }
    return ExperimentReport(rows=tuple(rows), summary=summary, checks=checks)
