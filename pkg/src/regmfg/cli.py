"""Command-line front end.

    regmfg solve     --preset paper-sec5 --out out/
    regmfg learn     --preset paper-sec5 --reps 20 --threads 4
    regmfg constants --config run.yaml
    regmfg nash      --preset paper-sec5
    regmfg example   (solve + constants + learn + nash on a preset)

Exit codes: 0 success, 1 runtime or convergence failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import (
    PRESETS,
    ConfigError,
    RunConfig,
    build_model,
    build_regularizer,
    load_config,
    preset_config,
)
from .exact import (
    ConvergenceError,
    LipschitzEstimate,
    estimate_lipschitz_constants,
    estimate_reward_bound,
    kappa_bound,
    solve_mfe,
    theory_constants,
)
from .learn import (
    FitError,
    GenerativeSimulator,
    LearnerConfig,
    SampleComplexityInputs,
    learn_mfe,
    sample_size_m1,
    sample_size_m2,
    uniform_simplex_behavior,
)
from .nagent import candidate_deviations, default_horizon, exploitability_estimate

SCHEMA_VERSION = 1
log = logging.getLogger("regmfg")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def to_json(obj, indent: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return "null"  # strict JSON has no infinities
    if isinstance(obj, (bool, np.bool_, int, np.integer, float, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        return to_json(obj.tolist(), indent)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {to_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(to_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + to_json(v, indent + 1) for v in obj) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj)}")


def write_json(path: Path, payload: dict) -> None:
    body = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(to_json(body) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (int, float, np.integer, np.floating)) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _setup(cfg: RunConfig):
    model = build_model(cfg)
    return model, build_regularizer(cfg, model.n_actions)


def _lipschitz(cfg: RunConfig, model) -> LipschitzEstimate:
    if cfg.constants.lipschitz is not None:
        L1, K1 = cfg.constants.lipschitz
        return LipschitzEstimate(float(L1), float(K1), "analytic (user override)")
    return estimate_lipschitz_constants(model, cfg.constants.sample_budget, cfg.constants.seed)


def _constants(cfg: RunConfig, model, reg):
    est = _lipschitz(cfg, model)
    r_max = estimate_reward_bound(model, reg, cfg.constants.sample_budget, cfg.constants.seed)
    tc = theory_constants(est.L1, est.K1, model.discount, reg.modulus, reg.lipschitz_bound, r_max,
                          reg_clip=reg.clip, provenance=est.provenance)
    return est, tc


def _solve(cfg: RunConfig, model, reg):
    _, tc = _constants(cfg, model, reg)
    return solve_mfe(model, reg, tol=cfg.exact.tol, max_iter=cfg.exact.max_iter, constants=tc,
                     allow_unverified=True)


def cmd_solve(cfg: RunConfig, out: Path) -> dict:
    model, reg = _setup(cfg)
    try:
        sol = _solve(cfg, model, reg)
    except ConvergenceError as exc:
        write_csv(out / "exact_trace.csv", ["iteration", *[f"mu[{x}]" for x in range(model.n_states)]],
                  [[i, *mu] for i, mu in enumerate(exc.history)])
        raise
    write_json(out / "exact.json", {
        "model": model.name,
        "mean_field": sol.mean_field,
        "policy": sol.policy,
        "values": sol.values,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "contraction_verified": sol.verified,
    })
    write_csv(out / "exact_meanfield.csv", ["state", "probability"],
              [[x, p] for x, p in enumerate(sol.mean_field)])
    return {"solution": sol}


def _run_rep(sim, lc, rep):
    try:
        return learn_mfe(sim, lc, repetition=rep)
    except FitError as exc:
        log.warning("repetition %d failed: %s", rep, exc)
        return exc


def cmd_learn(cfg: RunConfig, out: Path, threads: int = 1) -> dict:
    model, reg = _setup(cfg)
    sol = _solve(cfg, model, reg)
    lr = cfg.learner
    lc = LearnerConfig(K=lr.K, N=lr.N, L=lr.L, M=lr.M, seed=lr.seed)
    sim = GenerativeSimulator(model, reg, lr.seed)
    reps = range(lr.repetitions)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: _run_rep(sim, lc, r), reps))
    else:
        results = [_run_rep(sim, lc, r) for r in reps]

    trace_rows, timing_rows, failures = [], [], []
    ok = []
    for rep, res in zip(reps, results):
        if isinstance(res, Exception):
            failures.append({"repetition": rep, "error": str(res)})
            partial = getattr(res, "result", None)
            records = partial.trace if partial is not None else []
        else:
            ok.append(res)
            records = res.trace
        for t in records:
            trace_rows.append([rep, t.k, t.l1_step])
            timing_rows.append([rep, t.k, t.wall_ms])
        if not isinstance(res, Exception):
            trace_rows.append([rep, lr.K, ""])
    write_csv(out / "learn_trace.csv", ["repetition", "k", "l1_step"], trace_rows)
    write_csv(out / "learn_timing.csv", ["repetition", "k", "wall_ms"], timing_rows)
    if not ok:
        write_json(out / "learn.json", {"failures": failures})
        raise RuntimeError("all learning repetitions failed")

    mus = np.array([r.mean_field for r in ok])
    pis = np.array([r.policy for r in ok])
    vals = np.array([r.values for r in ok])
    n = len(ok)

    def se(a):
        return a.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(a.shape[1:])

    rows = []
    for x in range(model.n_states):
        rows.append([f"meanfield[{x}]", sol.mean_field[x], mus.mean(0)[x], se(mus)[x]])
    for x in range(model.n_states):
        for a in range(model.n_actions):
            rows.append([f"policy[{x}][{a}]", sol.policy[x, a], pis.mean(0)[x, a], se(pis)[x, a]])
    for x in range(model.n_states):
        rows.append([f"value[{x}]", sol.values[x], vals.mean(0)[x], se(vals)[x]])
    write_csv(out / "learned_vs_exact.csv", ["quantity", "exact", "learned_mean", "learned_stderr"], rows)

    summary = {
        "repetitions": n,
        "failures": failures,
        "mean_field_error_l1": float(np.abs(mus.mean(0) - sol.mean_field).sum()),
        "policy_error_sup_l1": float(np.abs(pis.mean(0) - sol.policy).sum(axis=1).max()),
        "value_error_sup": float(np.abs(vals.mean(0) - sol.values).max()),
        "learner": {"N": lr.N, "L": lr.L, "M": lr.M, "K": lr.K, "seed": lr.seed},
    }
    write_json(out / "learn.json", summary)
    return {"solution": sol, "learned": ok, "summary": summary}


def cmd_constants(cfg: RunConfig, out: Path) -> dict:
    model, reg = _setup(cfg)
    est, tc = _constants(cfg, model, reg)
    cs = cfg.constants
    payload = {
        "lipschitz": {"L1": est.L1, "K1": est.K1, "provenance": est.provenance},
        "constants": {k: v for k, v in tc.as_dict().items() if k not in ("provenance",)},
        "assumption2_holds": tc.assumption2_holds,
        "regularizer_lipschitz_note": f"entropy Lipschitz constant on the simplex clipped at {reg.clip:g}",
    }
    if not tc.assumption2_holds:
        payload["warning"] = "ASSUMPTION 2 VIOLATED: K_H >= 1, the MFE operator is not certified contractive"
        payload["kappa"] = None
    else:
        payload["kappa"] = [{"epsilon": e, "kappa": kappa_bound(e, 0.0, tc)} for e in cs.epsilon_grid]
    payload["m2"] = [{"epsilon": e, "delta": d, "n_states": model.n_states, "M": sample_size_m2(e, d, model.n_states)}
                     for e, d in cs.m2_pairs]
    behavior = uniform_simplex_behavior(model.n_actions)
    inputs = SampleComplexityInputs(model.n_actions, model.discount, tc.r_max, tc.Q_Lip, tc.L_reg,
                                    cs.V_F, cs.V_Fmax, behavior.floor, cs.alpha)
    m1 = sample_size_m1(cs.m1_epsilon, cs.m1_delta, cs.m1_rounds, inputs)
    payload["m1"] = {
        "status": "reported, not enforced",
        "epsilon": cs.m1_epsilon, "delta": cs.m1_delta, "L": cs.m1_rounds,
        "V_F": cs.V_F, "V_Fmax": cs.V_Fmax, "alpha": cs.alpha,
        "N": str(m1.n), "horizon_condition_holds": m1.horizon_ok,
        "Lambda": inputs.Lambda, "Upsilon": inputs.Upsilon, "gamma": inputs.gamma,
    }
    write_json(out / "constants.json", payload)
    return {"constants": tc, "lipschitz": est}


def cmd_nash(cfg: RunConfig, out: Path, policy: Optional[np.ndarray] = None, epsilon: float = 0.0) -> dict:
    model, reg = _setup(cfg)
    _, tc = _constants(cfg, model, reg)
    sol = _solve(cfg, model, reg)
    ns = cfg.nash
    shared = sol.policy if policy is None else policy
    if policy is None:
        bound = 0.0 if tc.tau is not None else None
    else:
        bound = tc.tau * kappa_bound(epsilon, 0.0, tc) if tc.tau is not None else None
    horizon = ns.horizon or default_horizon(model.discount, tc.r_max)
    if ns.candidates_only_shared:
        cands = [shared]
    else:
        extra = [policy] if (policy is not None and ns.include_learned) else []
        cands = candidate_deviations(model, reg, ns.grid, ns.vertices, extra)
    rows = []
    for n in ns.n_agents:
        res = exploitability_estimate(model, reg, shared, int(n), sol.mean_field, horizon, ns.episodes, cands,
                                      rng_seed=ns.seed)
        rows.append([int(n), res.gap, res.standard_error, "" if bound is None else bound])
    write_csv(out / "nash.csv", ["n_agents", "gap_lower_bound", "stderr", "tau_epsilon_bound"], rows)
    return {"rows": rows, "horizon": horizon}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regmfg", description="Regularized mean-field game solver and learner.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "compute the equilibrium with the exact MFE operator",
        "learn": "learn the equilibrium from samples (repeated, seeded)",
        "constants": "Lipschitz and contraction constants, error bounds, sample sizes",
        "nash": "finite-agent exploitability probe of the equilibrium policy",
        "example": "run solve, constants, learn and nash on a preset",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", type=Path, help="YAML run configuration")
        src.add_argument("--preset", choices=PRESETS, help="built-in configuration")
        p.add_argument("--seed", type=int, help="seed override (MFG_SEED env var takes precedence)")
        p.add_argument("--out", type=Path, help="output directory (default: config 'output')")
        p.add_argument("--reps", type=int, help="learning repetitions")
        p.add_argument("--threads", type=int, default=1, help="worker threads for repetitions")
        if name == "nash":
            p.add_argument("--learned", action="store_true", help="probe the learned policy instead of the exact one")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from exc
        cfg = load_config(text)
    else:
        cfg = preset_config(args.preset or "paper-sec5")
    seed = None
    if args.seed is not None:
        seed = args.seed
    env = os.environ.get("MFG_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"MFG_SEED must be an integer, got {env!r}") from exc
    if seed is not None:
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg.learner.seed = cfg.nash.seed = cfg.constants.seed = seed
    if args.reps is not None:
        if args.reps < 1:
            raise ConfigError("--reps must be >= 1")
        cfg.learner.repetitions = args.reps
    if args.out is not None:
        cfg.output = str(args.out)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    status = 0
    try:
        if args.command == "solve":
            cmd_solve(cfg, out)
        elif args.command == "learn":
            cmd_learn(cfg, out, args.threads)
        elif args.command == "constants":
            cmd_constants(cfg, out)
        elif args.command == "nash":
            if args.learned:
                res = cmd_learn(cfg, out, args.threads)
                pol = np.mean([r.policy for r in res["learned"]], axis=0)
                eps = cfg.nash.epsilon
                if eps is None:
                    eps = min(res["summary"]["mean_field_error_l1"], 1.0 - 1e-12)
                cmd_nash(cfg, out, pol, eps)
            else:
                cmd_nash(cfg, out)
        elif args.command == "example":
            cmd_solve(cfg, out)
            cmd_constants(cfg, out)
            cmd_learn(cfg, out, args.threads)
            cmd_nash(cfg, out)
    except (ConvergenceError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = 1
    write_json(out / "metadata.json", {
        "command": args.command,
        "status": status,
        "seed": cfg.learner.seed,
        "versions": {"regmfg": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": time.perf_counter() - t0,
        "config": cfg.to_dict(),
    })
    return status


if __name__ == "__main__":
    sys.exit(main())
