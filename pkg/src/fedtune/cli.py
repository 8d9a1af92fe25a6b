"""Scenario-driven command line front end.

Subcommands: simulate, accountant, noise-scan, alpha-limit, smoothness,
het-sweep, init-compare, regress. Every run first echoes its fully resolved
configuration into the output directory (resolved_config.json) and then
emits CSV/JSON artifacts there; nothing is written anywhere else.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error, 3 an embedded
claim check failed (so CI can tell a crash from a violated claim).

Seed precedence: --seed flag > FEDTUNE_SEED environment variable > config
file value > schema default.
"""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig, AdapterKind, InitScheme
from .analysis import (
    DEFAULT_SIGMA_GRID,
    HET_LEVELS,
    alpha_limit_one_step_reference,
    alpha_limit_trajectory,
    balanced_pool,
    heterogeneity_proportions,
    heterogeneity_sweep,
    init_scheme_comparison,
    noise_crossover_sigma,
    noise_norm_scan,
    smoothness_bound_check_ffa,
    smoothness_probe_counterexample,
)
from .artifacts import read_csv, write_csv, write_json
from .federation import FedConfig, run_federation
from .linalg import RngStream
from .privacy import (
    CalibrationError,
    DpConfig,
    epsilon_from_sigma,
    optimal_order,
    sigma_for_budget,
)
from .tasks import (
    FeasibilityError,
    PartitionSpec,
    SyntheticTaskSpec,
    dataset_to_csv,
    gen_synthetic,
)

__all__ = ["ScenarioConfig", "ParseError", "parse_config", "run_scenario",
           "regression_check", "main"]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_PARSE = 2
EXIT_CLAIM = 3

SEED_ENV_VAR = "FEDTUNE_SEED"

SCENARIOS = ("simulate", "accountant", "noise-scan", "alpha-limit",
             "smoothness", "het-sweep", "init-compare")

POISSON_NOTE = ("accounting assumes Poisson subsampling at rate q; "
                "the trainer draws fixed-size batches (standard approximation)")

# Per-file numeric tolerances for regression comparison: (relative, absolute).
REGRESSION_TOLERANCES = {
    "default": (1e-9, 1e-12),
    "het_sweep.csv": (1e-6, 1e-9),
    "trace.csv": (1e-6, 1e-9),
}


class ParseError(ValueError):
    """Invalid configuration; maps to exit code 2."""


@dataclass(frozen=True)
class ScenarioConfig:
    """A fully resolved scenario: name, seed, and scenario-specific options."""

    scenario: str
    seed: int
    options: dict
    out_dir: Path | None = None
    threads: int = 1


# --------------------------------------------------------------------------
# Config schemas. Each entry maps a key to (default, converter). A converter
# raises ValueError/TypeError on bad input; REQUIRED marks keys with no
# default. Defaults are the desk-scale configurations used by the acceptance
# experiments.
# --------------------------------------------------------------------------

_REQUIRED = object()


def _bool(v):
    if isinstance(v, bool):
        return v
    raise TypeError("expected true/false")


def _pos_int(v):
    iv = int(v)
    if iv < 1 or (isinstance(v, float) and v != iv):
        raise ValueError("expected a positive integer")
    return iv


def _nonneg_int(v):
    iv = int(v)
    if iv < 0 or (isinstance(v, float) and v != iv):
        raise ValueError("expected a non-negative integer")
    return iv


def _pos_float(v):
    fv = float(v)
    if fv <= 0:
        raise ValueError("expected a positive number")
    return fv


def _nonneg_float(v):
    fv = float(v)
    if fv < 0:
        raise ValueError("expected a non-negative number")
    return fv


def _float_list(v):
    if not isinstance(v, (list, tuple)) or not v:
        raise TypeError("expected a non-empty list of numbers")
    return [float(x) for x in v]


def _int_list(v):
    if not isinstance(v, (list, tuple)) or not v:
        raise TypeError("expected a non-empty list of integers")
    return [int(x) for x in v]


def _str_list(v):
    if not isinstance(v, (list, tuple)) or not v:
        raise TypeError("expected a non-empty list of strings")
    return [str(x) for x in v]


TASK_SCHEMA = {
    "dim": (16, _pos_int),
    "classes": (2, _pos_int),
    "samples": (2000, _pos_int),
    "class_separation": (2.0, _pos_float),
    "label_noise": (0.0, _nonneg_float),
    "truth_rank": (2, _nonneg_int),
}

FED_SCHEMA = {
    "n_clients": (3, _pos_int),
    "rounds": (20, _pos_int),
    "local_steps": (10, _nonneg_int),
    "batch_size": (32, _pos_int),
    "eta": (0.5, _pos_float),
    "kind": ("ffa_lora", str),
    "rank": (4, _pos_int),
    "alpha": (8.0, _pos_float),
    "init": ("kaiming_gaussian", str),
    "weighting": ("uniform", str),
}

DP_SCHEMA = {
    "epsilon": (1.0, _pos_float),
    "delta": (1e-5, _pos_float),
    "clip": (1.0, _pos_float),
    "sigma": (None, _pos_float),
}

PARTITION_SCHEMA = {
    "level": ("severe", str),
    "proportions": (None, list),
}

SCENARIO_SCHEMAS = {
    "simulate": {
        "scenario": ("simulate", str),
        "seed": (0, _nonneg_int),
        "task": (None, dict),
        "fed": (None, dict),
        "dp": (None, dict),
        "partition": (None, dict),
        "balance_pool": (True, _bool),
        "dump_data": (True, _bool),
    },
    "accountant": {
        "scenario": ("accountant", str),
        "seed": (0, _nonneg_int),
        "epsilon": (None, _pos_float),
        "sigma": (None, _pos_float),
        "delta": (1e-5, _pos_float),
        "q": (None, _pos_float),
        "steps": (None, _pos_int),
    },
    "noise-scan": {
        "scenario": ("noise-scan", str),
        "seed": (0, _nonneg_int),
        "dim_rows": (1024, _pos_int),
        "dim_cols": (1024, _pos_int),
        "rank": (8, _pos_int),
        "trials": (30, _pos_int),
        "sigma_grid": (list(DEFAULT_SIGMA_GRID), _float_list),
        "check_sigma": (0.99, _pos_float),
        "analytic_tol": (0.02, _pos_float),
    },
    "alpha-limit": {
        "scenario": ("alpha-limit", str),
        "seed": (0, _nonneg_int),
        "task": (None, dict),
        "rank": (2, _pos_int),
        "eta1": (0.5, _pos_float),
        "steps": (10, _pos_int),
        "alphas": ([10.0, 100.0, 1000.0], _float_list),
        "b_init": ("zero", str),
    },
    "smoothness": {
        "scenario": ("smoothness", str),
        "seed": (0, _nonneg_int),
        "dim": (6, _pos_int),
        "k_list": (list(range(1, 11)), _int_list),
        "pairs": (1000, _pos_int),
        "bound_norms": ([1.0, 2.0, 4.0], _float_list),
        "bound_rank": (3, _pos_int),
        "bound_cols": (5, _pos_int),
    },
    "het-sweep": {
        "scenario": ("het-sweep", str),
        "seed": (0, _nonneg_int),
        "levels": (list(HET_LEVELS), _str_list),
        "kinds": (["lora", "ffa_lora"], _str_list),
        "seeds": (10, _pos_int),
        "task": (None, dict),
        "fed": (None, dict),
        "dp": (None, dict),
        "use_dp": (True, _bool),
    },
    "init-compare": {
        "scenario": ("init-compare", str),
        "seed": (0, _nonneg_int),
        "schemes": (["kaiming_gaussian", "orthogonal_rows", "svd_of_base"], _str_list),
        "seeds": (3, _pos_int),
        "task": (None, dict),
        "fed": (None, dict),
    },
}

# Task defaults differ per scenario where the desk-scale experiments need them.
SWEEP_TASK_DEFAULTS = {"dim": 64, "classes": 2, "samples": 4000,
                       "class_separation": 2.0, "label_noise": 0.0, "truth_rank": 2}
SWEEP_FED_DEFAULTS = {"rounds": 40, "local_steps": 10, "batch_size": 32,
                      "eta": 1.0, "rank": 4, "alpha": 8.0}
ALPHA_TASK_DEFAULTS = {"dim": 8, "classes": 4, "samples": 400,
                       "class_separation": 2.0, "label_noise": 0.0, "truth_rank": 2}


def _reject_unknown(section: str, given: dict, known) -> None:
    for key in given:
        if key not in known:
            hint = difflib.get_close_matches(key, list(known), n=1)
            suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ParseError(f"unknown key {key!r} in {section}{suggestion}")


def _resolve_section(section: str, given: dict | None, schema: dict,
                     overrides: dict | None = None) -> dict:
    given = dict(given or {})
    _reject_unknown(section, given, schema)
    resolved = {}
    for key, (default, convert) in schema.items():
        if overrides and key in overrides and key not in given:
            given[key] = overrides[key]
        if key in given:
            if given[key] is None:
                resolved[key] = None
                continue
            try:
                resolved[key] = convert(given[key])
            except (TypeError, ValueError) as err:
                raise ParseError(f"invalid value for {section}.{key}: {err}") from err
        elif default is _REQUIRED:
            raise ParseError(f"missing required key {section}.{key}")
        else:
            resolved[key] = default
    return resolved


def parse_config(path, scenario: str, seed_override: int | None = None,
                 threads: int = 1) -> ScenarioConfig:
    """Load, strictly validate, and resolve a scenario config file.

    Unknown keys are rejected with a nearest-known-key suggestion. Constraint
    violations name the offending key. The file may be absent (path None):
    every scenario is fully runnable from defaults.
    """
    if scenario not in SCENARIO_SCHEMAS:
        raise ParseError(f"unknown scenario {scenario!r}")
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ParseError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise ParseError(f"config is not valid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise ParseError("config root must be a JSON object")

    schema = SCENARIO_SCHEMAS[scenario]
    resolved = _resolve_section(scenario, raw, schema)
    if resolved.get("scenario") not in (None, scenario):
        raise ParseError(
            f"config names scenario {resolved['scenario']!r} but {scenario!r} was invoked"
        )
    resolved["scenario"] = scenario

    task_defaults = None
    if scenario == "het-sweep":
        task_defaults = SWEEP_TASK_DEFAULTS
    elif scenario in ("alpha-limit",):
        task_defaults = ALPHA_TASK_DEFAULTS
    if "task" in schema:
        resolved["task"] = _resolve_section(
            "task", raw.get("task"), TASK_SCHEMA, overrides=task_defaults)
    if "fed" in schema:
        fed_defaults = SWEEP_FED_DEFAULTS if scenario == "het-sweep" else None
        resolved["fed"] = _resolve_section(
            "fed", raw.get("fed"), FED_SCHEMA, overrides=fed_defaults)
    if "dp" in schema:
        if raw.get("dp") is None and scenario == "simulate":
            resolved["dp"] = None
        else:
            resolved["dp"] = _resolve_section("dp", raw.get("dp"), DP_SCHEMA)
    if scenario == "simulate":
        resolved["partition"] = _resolve_section(
            "partition", raw.get("partition"), PARTITION_SCHEMA)

    env_seed = os.environ.get(SEED_ENV_VAR)
    seed = resolved.get("seed", 0)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as err:
            raise ParseError(f"{SEED_ENV_VAR} must be an integer: {err}") from err
    if seed_override is not None:
        seed = seed_override
    resolved["seed"] = int(seed)

    return ScenarioConfig(scenario=scenario, seed=int(seed), options=resolved,
                          threads=threads)


def _build_task(opts: dict, seed: int) -> SyntheticTaskSpec:
    try:
        return SyntheticTaskSpec(
            dim=opts["dim"], classes=opts["classes"], samples=opts["samples"],
            class_separation=opts["class_separation"],
            label_noise=opts["label_noise"], truth_rank=opts["truth_rank"],
            seed=seed)
    except ValueError as err:
        raise ParseError(f"invalid task config: {err}") from err


def _build_fed(opts: dict, dp: DpConfig | None, seed: int) -> FedConfig:
    try:
        adapter = AdapterConfig(
            kind=AdapterKind(opts["kind"]), rank=opts["rank"],
            alpha=opts["alpha"], init=InitScheme(opts["init"]), seed=seed)
        return FedConfig(
            n_clients=opts["n_clients"], rounds=opts["rounds"],
            local_steps=opts["local_steps"], batch_size=opts["batch_size"],
            eta=opts["eta"], adapter=adapter, dp=dp, seed=seed,
            weighting=opts["weighting"])
    except ValueError as err:
        raise ParseError(f"invalid fed config: {err}") from err


def _build_dp(opts: dict | None) -> DpConfig | None:
    if opts is None:
        return None
    try:
        return DpConfig(epsilon=opts["epsilon"], delta=opts["delta"],
                        clip=opts["clip"], sigma=opts["sigma"])
    except ValueError as err:
        raise ParseError(f"invalid dp config: {err}") from err


def _build_partition(opts: dict, n_classes: int) -> PartitionSpec:
    if opts.get("proportions") is not None:
        try:
            return PartitionSpec(
                proportions=tuple(tuple(p) for p in opts["proportions"]))
        except (TypeError, ValueError) as err:
            raise ParseError(f"invalid partition.proportions: {err}") from err
    try:
        return heterogeneity_proportions(opts["level"], n_classes)
    except ValueError as err:
        raise ParseError(f"invalid partition.level: {err}") from err


# --------------------------------------------------------------------------
# Scenario runners. Each returns a checks dict; empty dict means nothing to
# claim (exit 0 unless something raised).
# --------------------------------------------------------------------------

def _run_simulate(cfg: ScenarioConfig, out: Path) -> dict:
    opts = cfg.options
    task = _build_task(opts["task"], cfg.seed)
    dp = _build_dp(opts["dp"])
    fed = _build_fed(opts["fed"], dp, cfg.seed)
    spec = _build_partition(opts["partition"], task.classes)
    if spec.n_clients != fed.n_clients:
        raise ParseError("partition client count does not match fed.n_clients")

    train, test, w0, _ = gen_synthetic(task)
    pool = balanced_pool(train, spec) if opts["balance_pool"] else train
    if opts["dump_data"]:
        dataset_to_csv(pool, out / "train_data.csv")
        dataset_to_csv(test, out / "test_data.csv")
    trace = run_federation(fed, spec, task, datasets=(pool, test, w0),
                           threads=cfg.threads)
    trace.to_csv(out / "trace.csv")
    trace.to_json(out / "trace.json")
    last = trace.rounds[-1]
    write_json(out / "summary.json", {
        "final_test_acc": last.test_acc,
        "final_train_loss": last.train_loss,
        "final_epsilon": last.epsilon,
        "mean_agg_gap": float(np.mean([r.agg_gap for r in trace.rounds])),
        "rounds": len(trace.rounds),
        "checks": {},
    })
    return {}


def _run_accountant(cfg: ScenarioConfig, out: Path | None) -> dict:
    opts = cfg.options
    if opts["q"] is None or opts["steps"] is None:
        raise ParseError("accountant needs both q and steps")
    has_eps, has_sigma = opts["epsilon"] is not None, opts["sigma"] is not None
    if has_eps == has_sigma:
        raise ParseError("accountant needs exactly one of epsilon or sigma")
    q, steps, delta = opts["q"], opts["steps"], opts["delta"]
    if not 0.0 < q <= 1.0:
        raise ParseError("q must be in (0, 1]")
    if has_eps:
        sigma = sigma_for_budget(opts["epsilon"], delta, q, steps)
        epsilon = epsilon_from_sigma(sigma, q, steps, delta)
        budget = opts["epsilon"]
    else:
        sigma = opts["sigma"]
        epsilon = epsilon_from_sigma(sigma, q, steps, delta)
        budget = epsilon
    payload = {
        "sigma": sigma,
        "epsilon": epsilon,
        "delta": delta,
        "q": q,
        "steps": steps,
        "order_at_min": optimal_order(sigma, q, steps, delta),
        "note": POISSON_NOTE,
    }
    print(f"sigma = {sigma:.6g}" if has_eps else f"epsilon = {epsilon:.6g}")
    print(json.dumps(payload, indent=2, sort_keys=True))
    print(f"note: {POISSON_NOTE}", file=sys.stderr)
    if out is not None:
        write_json(out / "accountant.json", payload)
    checks = {}
    if has_eps:
        checks["budget_met"] = epsilon <= budget * (1 + 1e-9)
    return checks


def _run_noise_scan(cfg: ScenarioConfig, out: Path) -> dict:
    opts = cfg.options
    d, k, r = opts["dim_rows"], opts["dim_cols"], opts["rank"]
    trials = opts["trials"]
    rng = RngStream(cfg.seed, "noise-scan")
    rows = noise_norm_scan(d, k, r, opts["sigma_grid"], trials, rng)
    write_csv(out / "noise_scan.csv",
              ["sigma", "lora_noise", "full_noise", "ba_cross", "ab_cross"],
              [[row.sigma, row.lora_noise, row.full_noise, row.ba_cross,
                row.ab_cross] for row in rows])

    tol = opts["analytic_tol"]
    analytic_ok = True
    for row in rows:
        if row.sigma <= 0:
            continue
        exp_full = row.sigma * math.sqrt(d * k)
        exp_lora = row.sigma**2 * math.sqrt(d * k * r)
        if abs(row.full_noise - exp_full) > tol * exp_full:
            analytic_ok = False
        if abs(row.lora_noise - exp_lora) > tol * exp_lora:
            analytic_ok = False

    check_sigma = opts["check_sigma"]
    check_rows = noise_norm_scan(d, k, r, [check_sigma], trials,
                                 RngStream(cfg.seed, "noise-check"))
    ratio = check_rows[0].lora_noise / check_rows[0].full_noise
    expected_ratio = check_sigma * math.sqrt(r)

    crossover = noise_crossover_sigma(rows)
    analytic_cross = 1.0 / math.sqrt(r)
    grid = sorted(opts["sigma_grid"])
    grid_step = max((b - a for a, b in zip(grid, grid[1:])), default=0.0)
    checks = {
        "means_match_analytic": analytic_ok,
        "amplification_matches_analytic": abs(ratio - expected_ratio)
        <= 0.1 * expected_ratio,
    }
    if grid and grid[0] <= analytic_cross <= grid[-1]:
        checks["crossover_near_analytic"] = (
            crossover is not None
            and abs(crossover - analytic_cross) <= grid_step + 1e-12
        )
    write_json(out / "summary.json", {
        "dims": [d, k], "rank": r, "trials": trials,
        "ratio_at_check_sigma": ratio,
        "check_sigma": check_sigma,
        "expected_ratio": expected_ratio,
        "empirical_crossover": crossover,
        "analytic_crossover": analytic_cross,
        "checks": checks,
    })
    return checks


def _run_alpha_limit(cfg: ScenarioConfig, out: Path) -> dict:
    opts = cfg.options
    task = _build_task(opts["task"], cfg.seed)
    r = opts["rank"]
    if opts["b_init"] == "zero":
        b0 = np.zeros((task.dim, r))
    elif opts["b_init"] == "gaussian":
        b0 = RngStream(cfg.seed, "alpha-b0").normal((task.dim, r), 0.5)
    else:
        raise ParseError("alpha-limit b_init must be 'zero' or 'gaussian'")
    alphas = sorted(opts["alphas"])
    eta1, steps = opts["eta1"], opts["steps"]
    rows = alpha_limit_trajectory(task, eta1, steps, alphas, b0)
    write_csv(out / "alpha_limit.csv", ["alpha", "k", "gap"],
              [[row.alpha, k, gap] for row in rows
               for k, gap in enumerate(row.gaps)])

    final = {row.alpha: row.gaps[-1] for row in rows}
    checks = {
        "gaps_decreasing_in_alpha": all(
            final[a2] < final[a1] for a1, a2 in zip(alphas, alphas[1:])
        ),
    }
    if alphas and alphas[-1] >= 100 * alphas[0]:
        checks["gap_shrinks_50x"] = final[alphas[-1]] <= final[alphas[0]] / 50
    one_step = {}
    if opts["b_init"] == "zero":
        ok = True
        for row in rows:
            ref = alpha_limit_one_step_reference(task, eta1, row.alpha, b0)
            one_step[repr(row.alpha)] = {"measured": row.gaps[1], "reference": ref}
            ok = ok and abs(row.gaps[1] - ref) <= 1e-10
        checks["one_step_matches_reference"] = ok
    write_json(out / "summary.json", {
        "alphas": alphas,
        "final_gaps": {repr(a): final[a] for a in alphas},
        "one_step": one_step,
        "checks": checks,
    })
    return checks


def _run_smoothness(cfg: ScenarioConfig, out: Path) -> dict:
    opts = cfg.options
    rows = smoothness_probe_counterexample(opts["k_list"], opts["dim"])
    write_csv(out / "smoothness.csv", ["k", "ratio"],
              [[row.k, row.ratio] for row in rows])
    quad_ok = all(abs(row.ratio - row.k**2) <= 1e-9 for row in rows)

    r, k_cols = opts["bound_rank"], opts["bound_cols"]
    bound_results = {}
    bound_ok = True
    for i, c in enumerate(opts["bound_norms"]):
        rng = RngStream(cfg.seed, "smoothness-bound", i)
        a = rng.normal((r, k_cols))
        a *= c / np.linalg.norm(a)
        worst = smoothness_bound_check_ffa(a, opts["pairs"], rng)
        bound_results[repr(float(c))] = worst
        bound_ok = bound_ok and worst <= c * c + 1e-9
    checks = {
        "counterexample_ratio_is_k_squared": quad_ok,
        "ffa_bound_holds": bound_ok,
    }
    write_json(out / "summary.json", {
        "ratios": {str(row.k): row.ratio for row in rows},
        "ffa_bound_max_ratios": bound_results,
        "pairs": opts["pairs"],
        "checks": checks,
    })
    return checks


def _run_het_sweep(cfg: ScenarioConfig, out: Path) -> dict:
    opts = cfg.options
    task = _build_task(opts["task"], cfg.seed)
    dp = _build_dp(opts["dp"]) if opts["use_dp"] else None
    fed = _build_fed(opts["fed"], dp, cfg.seed)
    kinds = []
    for name in opts["kinds"]:
        try:
            kinds.append(AdapterKind(name))
        except ValueError as err:
            raise ParseError(f"unknown adapter kind {name!r}") from err
    report = heterogeneity_sweep(opts["levels"], kinds, dp, opts["seeds"],
                                 task, fed, threads=cfg.threads)
    write_csv(out / "het_sweep.csv",
              ["level", "kind", "dp", "seed", "final_acc", "mean_gap"],
              [[r["level"], r["kind"], r["dp"], r["seed"], r["final_acc"],
                r["mean_gap"]] for r in report.rows])
    write_json(out / "summary.json",
               {"cells": report.summary, "checks": report.checks})
    return report.checks


def _run_init_compare(cfg: ScenarioConfig, out: Path) -> dict:
    opts = cfg.options
    task = _build_task(opts["task"], cfg.seed)
    fed_opts = dict(opts["fed"])
    fed_opts["kind"] = "ffa_lora"
    fed = _build_fed(fed_opts, None, cfg.seed)
    try:
        schemes = [InitScheme(s) for s in opts["schemes"]]
    except ValueError as err:
        raise ParseError(f"unknown init scheme: {err}") from err
    report = init_scheme_comparison(schemes, task, fed, seeds=opts["seeds"],
                                    threads=cfg.threads)
    write_csv(out / "init_compare.csv",
              ["scheme", "seed", "final_acc", "final_loss", "fresh_loss"],
              [[r["scheme"], r["seed"], r["final_acc"], r["final_loss"],
                r["fresh_loss"]] for r in report.rows])
    write_json(out / "summary.json",
               {"schemes": report.summary, "checks": report.checks})
    return report.checks


_RUNNERS = {
    "simulate": _run_simulate,
    "noise-scan": _run_noise_scan,
    "alpha-limit": _run_alpha_limit,
    "smoothness": _run_smoothness,
    "het-sweep": _run_het_sweep,
    "init-compare": _run_init_compare,
}


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> int:
    """Run one scenario, writing artifacts under its output directory.

    The resolved config is written before anything runs, so a crashed run
    still leaves it behind for forensics.
    """
    out = Path(out_dir) if out_dir is not None else cfg.out_dir
    if out is None:
        raise ParseError("scenario needs an output directory")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json",
               {**cfg.options, "seed": cfg.seed, "threads": cfg.threads})
    try:
        if cfg.scenario == "accountant":
            checks = _run_accountant(cfg, out)
        else:
            checks = _RUNNERS[cfg.scenario](cfg, out)
    except ParseError:
        raise
    except (FeasibilityError, CalibrationError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    if checks and not all(checks.values()):
        failed = sorted(name for name, ok in checks.items() if not ok)
        print(f"claim check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CLAIM
    return EXIT_OK


def _tolerance_for(name: str) -> tuple[float, float]:
    return REGRESSION_TOLERANCES.get(name, REGRESSION_TOLERANCES["default"])


def regression_check(golden_dir, output_dir) -> int:
    """Compare CSV artifacts in ``output_dir`` against ``golden_dir``.

    Structure (headers, row/column counts) must match exactly; numeric cells
    must agree within the per-file tolerances. Extra files in the output are
    warnings, missing ones are failures (exit 1); any out-of-tolerance value
    exits 3 with a report naming file, row, and column.
    """
    golden = Path(golden_dir)
    output = Path(output_dir)
    if not golden.is_dir() or not output.is_dir():
        print("error: both directories must exist", file=sys.stderr)
        return EXIT_RUNTIME
    golden_files = sorted(p.name for p in golden.glob("*.csv"))
    output_files = sorted(p.name for p in output.glob("*.csv"))
    for extra in sorted(set(output_files) - set(golden_files)):
        print(f"warning: unexpected artifact {extra} (ignored)")

    failures = []
    for name in golden_files:
        if name not in output_files:
            print(f"error: missing artifact {name}", file=sys.stderr)
            return EXIT_RUNTIME
        g_header, g_rows = read_csv(golden / name)
        o_header, o_rows = read_csv(output / name)
        if g_header != o_header:
            failures.append(f"{name}: header mismatch")
            continue
        if len(g_rows) != len(o_rows):
            failures.append(f"{name}: {len(o_rows)} rows, expected {len(g_rows)}")
            continue
        rel, absol = _tolerance_for(name)
        for i, (g_row, o_row) in enumerate(zip(g_rows, o_rows)):
            if len(g_row) != len(o_row):
                failures.append(f"{name}: row {i} has {len(o_row)} columns, "
                                f"expected {len(g_row)}")
                continue
            for j, (gv, ov) in enumerate(zip(g_row, o_row)):
                try:
                    gf, of = float(gv), float(ov)
                except ValueError:
                    if gv != ov:
                        failures.append(
                            f"{name}: row {i} column {g_header[j]!r}: "
                            f"{ov!r} != {gv!r}")
                    continue
                if abs(of - gf) > absol + rel * abs(gf):
                    failures.append(
                        f"{name}: row {i} column {g_header[j]!r}: "
                        f"{of!r} outside tolerance of {gf!r}")
    if failures:
        for f in failures:
            print(f"diff: {f}", file=sys.stderr)
        return EXIT_CLAIM
    print(f"regression check passed ({len(golden_files)} artifacts)")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedtune",
        description="Deterministic desk-scale federated fine-tuning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", type=str, default=None,
                       help="JSON scenario config (defaults used if omitted)")
        p.add_argument("--out", type=str, required=needs_out,
                       help="output directory for artifacts")
        p.add_argument("--seed", type=int, default=None,
                       help=f"seed override (beats {SEED_ENV_VAR} and config)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for clients / grid cells")

    for name in SCENARIOS:
        p = sub.add_parser(name)
        add_common(p, needs_out=(name != "accountant"))
        if name == "accountant":
            p.add_argument("--epsilon", type=float, default=None)
            p.add_argument("--sigma", type=float, default=None)
            p.add_argument("--delta", type=float, default=None)
            p.add_argument("--q", type=float, default=None)
            p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("regress")
    p.add_argument("--golden", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    if args.command == "regress":
        return regression_check(args.golden, args.out)

    try:
        cfg = parse_config(args.config, args.command,
                           seed_override=args.seed, threads=max(args.threads, 1))
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=Path(args.out))
        if args.command == "accountant":
            opts = dict(cfg.options)
            for key in ("epsilon", "sigma", "delta", "q", "steps"):
                flag = getattr(args, key)
                if flag is not None:
                    opts[key] = flag
            cfg = dataclasses.replace(cfg, options=opts)
            if cfg.out_dir is None:
                try:
                    checks = _run_accountant(cfg, None)
                except ParseError:
                    raise
                except (CalibrationError, ValueError) as err:
                    print(f"error: {err}", file=sys.stderr)
                    return EXIT_RUNTIME
                return EXIT_OK if all(checks.values()) else EXIT_CLAIM
        return run_scenario(cfg)
    except ParseError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
