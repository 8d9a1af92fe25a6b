"""Acceptance suite: one test per shipped claim, each printing a PASS/FAIL
line with its measured values and runtime (run with -s to see them live).

Budgets are generous on purpose; every criterion runs far inside its limit
on a laptop-class machine.
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest

from fedtune.adapters import (
    AdapterConfig,
    AdapterKind,
    backprop_to_adapter,
    effective_weight,
    init_adapter,
)
from fedtune.analysis import (
    alpha_limit_one_step_reference,
    alpha_limit_trajectory,
    balanced_pool,
    heterogeneity_sweep,
    noise_crossover_sigma,
    noise_norm_scan,
    smoothness_bound_check_ffa,
    smoothness_probe_counterexample,
)
from fedtune.cli import main
from fedtune.federation import FedConfig, aggregation_gap, run_federation
from fedtune.linalg import RngStream, frobenius_norm
from fedtune.privacy import DpConfig, epsilon_from_sigma, sigma_for_budget
from fedtune.tasks import PartitionSpec, SyntheticTaskSpec, gen_synthetic

from oracles import fd_factor_gradient, trainable_field_names
from test_adapters import make_state, randomize_trainables


def report(number, name, passed, detail, elapsed, budget):
    status = "PASS" if passed and elapsed < budget else "FAIL"
    print(f"ACCEPTANCE {number} ({name}): {status} [{elapsed:.1f}s/"
          f"{budget:.0f}s] {detail}", flush=True)
    assert passed, f"criterion {number}: {detail}"
    assert elapsed < budget, f"criterion {number} exceeded {budget}s ({elapsed:.1f}s)"


def test_01_noise_amplification():
    t0 = time.time()
    d = k = 1024
    r = 8
    grid_rows = noise_norm_scan(d, k, r, trials=30, rng=RngStream(0, "acc-noise"))
    check = noise_norm_scan(d, k, r, sigma_grid=[0.99], trials=30,
                            rng=RngStream(0, "acc-noise-99"))[0]
    ratio = check.lora_noise / check.full_noise
    crossover = noise_crossover_sigma(grid_rows)
    # Mean norms track the moment calculation (product entries have variance
    # r*sigma^4) to within 2% at this size and trial count.
    analytic_ok = all(
        abs(row.full_noise - row.sigma * math.sqrt(d * k))
        <= 0.02 * row.sigma * math.sqrt(d * k)
        and abs(row.lora_noise - row.sigma**2 * math.sqrt(d * k * r))
        <= 0.02 * row.sigma**2 * math.sqrt(d * k * r)
        for row in grid_rows
    )
    ok = (2.6 <= ratio <= 3.0 and crossover is not None
          and 0.30 <= crossover <= 0.45 and analytic_ok)
    report(1, "noise amplification", ok,
           f"ratio@0.99={ratio:.3f} (want [2.6, 3.0]), "
           f"crossover={crossover} (want [0.30, 0.45]), "
           f"means within 2% of analytic: {analytic_ok}",
           time.time() - t0, budget=60)


def test_02_accountant_calibration():
    t0 = time.time()
    sigma = sigma_for_budget(6.0, 1e-5, 200 / 22450, 10_000)
    window_ok = 0.85 <= sigma <= 1.15

    rng = RngStream(1, "acc-mono")
    violations = 0
    for _ in range(50):
        q = float(rng.generator.uniform(0.001, 0.5))
        s = float(rng.generator.uniform(0.5, 8.0))
        steps = int(rng.integers(1, 5000))
        delta = float(rng.generator.uniform(1e-7, 1e-4))
        base = epsilon_from_sigma(s, q, steps, delta)
        if not epsilon_from_sigma(s * 1.5, q, steps, delta) < base:
            violations += 1
        if not epsilon_from_sigma(s, q, steps * 2, delta) > base:
            violations += 1
        if not epsilon_from_sigma(s, min(q * 1.5, 1.0), steps, delta) >= base:
            violations += 1
    report(2, "accountant calibration", window_ok and violations == 0,
           f"sigma(eps=6)={sigma:.4f} (want [0.85, 1.15]), "
           f"monotonicity violations={violations}/150",
           time.time() - t0, budget=10)


def test_03_alpha_limit_theorem():
    t0 = time.time()
    task = SyntheticTaskSpec(dim=8, classes=4, samples=400,
                             class_separation=2.0, truth_rank=2, seed=13)
    b0 = np.zeros((8, 2))
    eta1 = 0.5
    rows = alpha_limit_trajectory(task, eta1, 10, [10.0, 100.0, 1000.0], b0)
    finals = {row.alpha: row.gaps[-1] for row in rows}
    decreasing = finals[10.0] > finals[100.0] > finals[1000.0] > 0
    shrink_ok = finals[1000.0] <= finals[10.0] / 50
    one_step_ok = True
    for row in rows:
        ref = alpha_limit_one_step_reference(task, eta1, row.alpha, b0)
        one_step_ok = one_step_ok and abs(row.gaps[1] - ref) <= 1e-10
    report(3, "alpha-limit theorem", decreasing and shrink_ok and one_step_ok,
           f"gap_K: 10->{finals[10.0]:.2e}, 100->{finals[100.0]:.2e}, "
           f"1000->{finals[1000.0]:.2e}; one-step |diff|<=1e-10: {one_step_ok}",
           time.time() - t0, budget=5)


def test_04_aggregation_identities():
    t0 = time.time()
    rng = RngStream(2, "acc-agg")

    # 100 random multi-client frozen-A state sets aggregate exactly.
    worst_ffa = 0.0
    for trial in range(100):
        d = int(rng.integers(2, 9))
        k = int(rng.integers(2, 9))
        r = int(rng.integers(1, min(d, k) + 1))
        cfg = AdapterConfig(kind=AdapterKind.FFA_LORA, rank=r,
                            alpha=float(rng.integers(1, 17)), seed=trial)
        base = init_adapter(cfg, rng.normal((d, k)))
        n = int(rng.integers(2, 6))
        states = [dataclasses.replace(base, b=rng.normal((d, r), 2.0))
                  for _ in range(n)]
        raw = rng.generator.random(n) + 0.05
        worst_ffa = max(worst_ffa, aggregation_gap(states, raw / raw.sum()))
    ffa_ok = worst_ffa <= 1e-12

    # Scalar two-factor example: averaged product 6 vs mean product 7.
    cfg = AdapterConfig(kind=AdapterKind.LORA, rank=1, alpha=1.0)
    s1 = dataclasses.replace(init_adapter(cfg, np.array([[0.0]])),
                             b=np.array([[1.0]]), a=np.array([[2.0]]))
    s2 = dataclasses.replace(s1, b=np.array([[3.0]]), a=np.array([[4.0]]))
    hand_gap = aggregation_gap([s1, s2], [0.5, 0.5])
    hand_ok = hand_gap == 1.0

    # Severe-het run: two-factor gap positive every round, frozen-A at zero.
    task = SyntheticTaskSpec(dim=20, classes=2, samples=3000, truth_rank=2,
                             seed=41)
    spec = PartitionSpec(proportions=((0.1, 0.9), (0.9, 0.1), (0.5, 0.5)))
    train, test, w0, _ = gen_synthetic(task)
    pool = balanced_pool(train, spec)
    traces = {}
    for kind in (AdapterKind.LORA, AdapterKind.FFA_LORA):
        adapter = AdapterConfig(kind=kind, rank=4, alpha=8.0, seed=41)
        fed = FedConfig(n_clients=3, rounds=5, local_steps=10, batch_size=32,
                        eta=0.4, adapter=adapter, seed=41)
        traces[kind] = run_federation(fed, spec, task, datasets=(pool, test, w0))
    lora_gaps = [r.agg_gap for r in traces[AdapterKind.LORA].rounds]
    ffa_gaps = [r.agg_gap for r in traces[AdapterKind.FFA_LORA].rounds]
    run_ok = all(g > 0 for g in lora_gaps) and all(g <= 1e-12 for g in ffa_gaps)

    report(4, "aggregation identities", ffa_ok and hand_ok and run_ok,
           f"max FFA gap={worst_ffa:.2e} (<=1e-12), scalar example gap={hand_gap}, "
           f"severe-het LoRA gaps all>0: {all(g > 0 for g in lora_gaps)}",
           time.time() - t0, budget=30)


def test_05_smoothness():
    t0 = time.time()
    rows = smoothness_probe_counterexample(range(1, 11), d=6)
    quad_err = max(abs(row.ratio - row.k**2) for row in rows)
    quad_ok = quad_err <= 1e-9

    bound_ok = True
    worsts = {}
    for i, c in enumerate((1.0, 2.0, 4.0)):
        rng = RngStream(3, "acc-smooth", i)
        a = rng.normal((3, 5))
        a *= c / np.linalg.norm(a)
        worst = smoothness_bound_check_ffa(a, 1000, rng)
        worsts[c] = worst
        bound_ok = bound_ok and worst <= c * c + 1e-9
    report(5, "smoothness", quad_ok and bound_ok,
           f"max |ratio - k^2|={quad_err:.1e} (<=1e-9); "
           f"bound ratios {[f'{c}:{w:.3f}' for c, w in worsts.items()]} <= C^2",
           time.time() - t0, budget=10)


def test_06_gradient_correctness():
    t0 = time.time()
    failures = 0
    total = 0
    for kind in (AdapterKind.FULL, AdapterKind.LORA, AdapterKind.FFA_LORA,
                 AdapterKind.QVP):
        rng = RngStream(4, "acc-fd", kind.value)
        for trial in range(25):
            d = int(rng.integers(2, 9))
            k = int(rng.integers(2, 9))
            r = int(rng.integers(1, min(d, k) + 1))
            state = make_state(kind, d=d, k=k, rank=r,
                               alpha=float(rng.integers(1, 9)), seed=trial,
                               w0=rng.normal((d, k)))
            state = randomize_trainables(state, rng)
            target = rng.normal((d, k))
            grads = backprop_to_adapter(state, effective_weight(state) - target)
            for name in trainable_field_names(state):
                total += 1
                fd = fd_factor_gradient(state, name, target)
                bp = getattr(grads, name)
                scale = max(frobenius_norm(bp), frobenius_norm(fd), 1e-8)
                if frobenius_norm(fd - bp) > 1e-5 * scale:
                    failures += 1
    report(6, "gradient correctness", failures == 0,
           f"{failures} failures out of {total} factor checks "
           "(100 instances, rel tol 1e-5)",
           time.time() - t0, budget=20)


def test_07_directional_private_federation():
    t0 = time.time()
    task = SyntheticTaskSpec(dim=64, classes=2, samples=4000,
                             class_separation=2.0, truth_rank=2, seed=0)
    adapter = AdapterConfig(kind=AdapterKind.FFA_LORA, rank=4, alpha=8.0, seed=0)
    fed = FedConfig(n_clients=3, rounds=40, local_steps=10, batch_size=32,
                    eta=1.0, adapter=adapter, seed=0)
    dp = DpConfig(epsilon=1.0, delta=1e-5, clip=1.0)
    rep = heterogeneity_sweep(["severe"],
                              [AdapterKind.LORA, AdapterKind.FFA_LORA], dp,
                              seeds=10, task_spec=task, fed=fed, threads=4)
    lora = rep.summary["severe/lora"]
    ffa = rep.summary["severe/ffa_lora"]
    std_ok = ffa["acc_std"] <= lora["acc_std"]
    mean_ok = ffa["acc_mean"] >= lora["acc_mean"] - 0.01
    report(7, "directional private federation", std_ok and mean_ok,
           f"LoRA {lora['acc_mean']:.3f}±{lora['acc_std']:.3f} vs "
           f"FFA {ffa['acc_mean']:.3f}±{ffa['acc_std']:.3f} "
           "(want FFA std <= LoRA std and FFA mean >= LoRA mean - 1pt)",
           time.time() - t0, budget=600)


def test_08_determinism(tmp_path):
    t0 = time.time()
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps({
        "task": {"dim": 10, "classes": 2, "samples": 1200, "truth_rank": 2},
        "fed": {"rounds": 3, "local_steps": 4, "batch_size": 16, "eta": 0.5,
                "rank": 2, "alpha": 4.0, "kind": "lora"},
        "dp": {"epsilon": 2.0, "delta": 1e-5, "clip": 1.0},
        "partition": {"level": "severe"},
        "seed": 9,
    }))
    noise_cfg = tmp_path / "noise.json"
    noise_cfg.write_text(json.dumps({
        "dim_rows": 64, "dim_cols": 64, "rank": 4, "trials": 5,
        "sigma_grid": [0.3, 0.8], "analytic_tol": 0.25,
    }))
    sweep_cfg = tmp_path / "sweep.json"
    sweep_cfg.write_text(json.dumps({
        "levels": ["iid", "severe"], "seeds": 2, "use_dp": False,
        "task": {"dim": 12, "samples": 1600},
        "fed": {"rounds": 3, "local_steps": 4, "batch_size": 16, "eta": 0.5,
                "rank": 2, "alpha": 4.0},
    }))
    init_cfg = tmp_path / "init.json"
    init_cfg.write_text(json.dumps({
        "seeds": 2,
        "task": {"dim": 10, "samples": 1200},
        "fed": {"rounds": 3, "local_steps": 4, "batch_size": 16,
                "rank": 2, "alpha": 4.0},
    }))
    runs = [
        ("simulate", ["--config", str(sim_cfg), "--threads", "4"]),
        ("accountant", ["--epsilon", "3", "--delta", "1e-5", "--q", "0.02",
                        "--steps", "400"]),
        ("noise-scan", ["--config", str(noise_cfg)]),
        ("alpha-limit", []),
        ("smoothness", []),
        ("het-sweep", ["--config", str(sweep_cfg), "--threads", "4"]),
        ("init-compare", ["--config", str(init_cfg), "--threads", "4"]),
    ]
    mismatches = []
    for name, extra in runs:
        out_a = tmp_path / f"{name}-a"
        out_b = tmp_path / f"{name}-b"
        code_a = main([name, *extra, "--out", str(out_a)])
        code_b = main([name, *extra, "--out", str(out_b)])
        if code_a != 0 or code_b != 0:
            mismatches.append(f"{name}: exit {code_a}/{code_b}")
            continue
        files_a = sorted(p.name for p in out_a.iterdir())
        files_b = sorted(p.name for p in out_b.iterdir())
        if files_a != files_b:
            mismatches.append(f"{name}: file sets differ")
            continue
        for fname in files_a:
            if (out_a / fname).read_bytes() != (out_b / fname).read_bytes():
                mismatches.append(f"{name}/{fname}")
    report(8, "determinism", not mismatches,
           f"all 7 scenarios byte-identical across reruns "
           f"(mismatches: {mismatches or 'none'})",
           time.time() - t0, budget=120)
