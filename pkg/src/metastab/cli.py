"""
Command-line interface.

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 capability
error (N above the exact-enumeration limit), 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .annealed import (BirthDeathChain, FreeEnergySpec, critical_field, local_minima, lumped_mean_hitting,
                       lumped_solve, metastable_sets, nearest_level, write_chain_table,
                       write_free_energy_curve)
from .disorder import (CouplingMatrix, DisorderSpec, RandomSeed, alpha_n, annealed_couplings,
                       deterministic_couplings, read_couplings, sample_couplings, write_couplings)
from .exceptions import CapabilityError, ConfigError, MetastabError
from .experiments import ExperimentConfig, resolve_threads, run_experiment
from .model import ModelParams
from .potential import GlauberNetwork, MetaSpec, StateSet, metastability_certificate

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_CAPABILITY, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4


class AcceptanceFailure(Exception):
    pass


def load_config(path) -> dict:
    """Read a JSON or YAML mapping."""
    text = Path(path).read_text()
    try:
        if str(path).endswith(".json"):
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return data


def _write_kv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for k, v in rows:
            w.writerow([k, repr(v) if isinstance(v, float) else v])


def _print_kv(rows):
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v!r}" if isinstance(v, float) else f"{k:<{width}}  {v}")


# gen


def cmd_gen(args) -> int:
    data = load_config(args.config)
    beta = args.beta
    if "kind" in data:
        spec = DisorderSpec.from_dict(data)
    else:
        cfg = ExperimentConfig.from_dict(data)
        spec = cfg.disorder_spec()
        beta = beta if beta is not None else cfg.beta
        if args.seed is None:
            args.seed = cfg.master_seed
    seed = RandomSeed(args.seed or 0, args.replica, args.environment)
    cm = sample_couplings(spec, seed)
    write_couplings(cm, args.out)
    rows = [("N", spec.n_sites), ("edges", spec.n_edges), ("mean_J", float(np.mean(cm.values))),
            ("mean_conditional_mean", float(np.mean(cm.mean))),
            ("mean_conditional_var", float(np.mean(cm.var))), ("k_J", cm.k_j)]
    if beta is not None:
        rows.append(("alpha_N", alpha_n(cm, beta)))
    _print_kv(rows)
    return EXIT_OK


# exact


def _couplings_from_args(args) -> CouplingMatrix:
    if args.couplings:
        cm = read_couplings(args.couplings)
        if args.annealed:
            cm = annealed_couplings(cm)
        return cm
    if not args.annealed:
        raise ConfigError("give a coupling file or --annealed")
    if args.n_sites is None:
        raise ConfigError("--annealed without a coupling file needs --n-sites")
    return deterministic_couplings(args.n_sites, args.pbar, k_j=max(1.0, args.pbar))


def _mean_coupling(cm: CouplingMatrix) -> float:
    m = np.asarray(cm.mean)
    if m.size == 0 or np.ptp(m) > 1e-12:
        raise ConfigError("automatic sets need a constant mean coupling; pass --sets")
    return float(m[0])


def _metaspec(args, cm: CouplingMatrix, params: ModelParams) -> MetaSpec:
    n = cm.n_sites
    if args.sets == "auto":
        m1, m2, _, _ = metastable_sets(FreeEnergySpec(params.beta, params.h, _mean_coupling(cm),
                                                      k_j=max(cm.k_j, 1.0)), n)
        return MetaSpec((m1, m2), args.index, rho=args.rho)
    try:
        values = [float(x) for x in args.sets.split(",")]
    except ValueError as exc:
        raise ConfigError(f"cannot parse --sets {args.sets!r}") from exc
    levels = [nearest_level(m, n) for m in values]
    sets = tuple(StateSet(n, levels=[k], label=f"m={(2 * k - n) / n:+.4f}") for k in levels)
    return MetaSpec(sets, args.index, rho=args.rho)


def cmd_exact(args) -> int:
    cm = _couplings_from_args(args)
    params = ModelParams(cm.n_sites, args.beta, args.h, cm.k_j, args.enum_limit)
    params.require_enumerable()
    ms = _metaspec(args, cm, params)
    net = GlauberNetwork.from_couplings(cm, params)
    ms = ms.ordered_by([net.measure(s) for s in ms.sets])
    a, b = ms.target_a, ms.target_b
    sol = net.solve(a, b)
    direct = net.mean_hitting_direct(b, sol.nu)
    cert = metastability_certificate(cm, params, ms, net=net, max_singletons=args.max_singletons)
    rho = ms.rho_target
    rows = [
        ("N", cm.n_sites), ("beta", params.beta), ("h", params.h),
        ("sets", ";".join(s.label for s in ms.sets)), ("target_A", a.label), ("target_B", b.label or "union"),
        ("log_Z", sol.log_z), ("capacity", sol.cap), ("log_Z_capacity", sol.log_z_cap),
        ("dirichlet_energy", net.dirichlet_energy(sol.h)),
        ("harmonic_sum", sol.harm), ("log_Z_harmonic_sum", sol.log_z_harm),
        ("mean_hitting_identity", sol.mean_hitting_time), ("mean_hitting_direct", direct),
        ("mean_hitting_relative_gap", abs(sol.mean_hitting_time / direct - 1.0)),
        ("generator_residual", sol.residual),
        ("lambda0", cert.lambda0), ("lambda0_residual", cert.eigen_residual),
        ("singleton_min", cert.singleton_min), ("singletons_scanned", cert.n_singletons),
        ("certificate_numerator", cert.numerator),
        ("ratio_upper", cert.ratio_upper), ("ratio_lower", cert.ratio_lower),
        ("rho", rho), ("certified_below_rho", cert.is_certified_below(rho)),
    ]
    _print_kv(rows)
    if args.out:
        _write_kv(args.out, rows)
    if args.dump_h:
        with open(args.dump_h, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "magnetization", "h", "gibbs"])
            mags = (2 * np.array([bin(i).count("1") for i in range(net.n_states)]) - cm.n_sites) / cm.n_sites
            for i in range(net.n_states):
                w.writerow([i, repr(float(mags[i])), repr(float(sol.h[i])), repr(float(net.gibbs[i]))])
    return EXIT_OK


# lumped


def cmd_lumped(args) -> int:
    spec = FreeEnergySpec(args.beta, args.h, args.pbar, k_j=max(1.0, args.pbar), grid=args.grid)
    single_phase = args.beta * args.pbar <= 1
    wants_meta = args.hc or args.metastable
    if single_phase and wants_meta:
        raise ConfigError(f"beta*pbar = {args.beta * args.pbar} <= 1: single-phase regime, "
                          "no critical field or metastable sets")
    out = Path(args.out_dir) if args.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    minima = local_minima(spec)
    rows = [("beta", args.beta), ("h", args.h), ("pbar", args.pbar), ("N", args.n_sites)]
    for i, (x, kind) in enumerate(minima):
        rows.append((f"stationary_{i}_{kind}", x))
    if not single_phase:
        rows.append(("h_c", critical_field(args.beta, args.pbar)))
    chain = BirthDeathChain(args.n_sites, args.beta, args.h, args.pbar)
    rows.append(("log_Z_lumped", chain.log_z))
    rows.append(("detailed_balance_error", chain.detailed_balance_error()))
    n_min = sum(k == "min" for _, k in minima)
    if n_min == 2:
        m1, m2, x1, x2 = metastable_sets(spec, args.n_sites)
        sol = lumped_solve(chain, m2, m1)
        ident, direct = lumped_mean_hitting(chain, m2, m1)
        rows += [("m1_N", x1), ("m2_N", x2), ("log_capacity", sol.log_cap), ("capacity", sol.cap),
                 ("log_harmonic_sum", sol.log_harm), ("log_mean_hitting_identity", ident),
                 ("log_mean_hitting_direct", direct)]
    elif wants_meta:
        raise ConfigError(f"free energy has {n_min} minima at h={args.h}; no metastable pair")
    _print_kv(rows)
    if out:
        _write_kv(out / "lumped_summary.csv", rows)
        write_chain_table(out / "chain.csv", chain, spec)
        write_free_energy_curve(out / "free_energy.csv", spec)
        if args.figures:
            from .plotting import render_lumped_figures

            x = np.linspace(-1, 1, spec.grid)
            from .annealed import free_energy

            render_lumped_figures(chain, x, free_energy(x, spec), minima, out)
    return EXIT_OK


# simulate


def cmd_simulate(args) -> int:
    from .dynamics import sample_hitting_times, write_trajectory

    cm = _couplings_from_args(args)
    params = ModelParams(cm.n_sites, args.beta, args.h, cm.k_j, args.enum_limit)
    ms = _metaspec(args, cm, params)
    exact = None
    if cm.n_sites <= params.enum_limit:
        net = GlauberNetwork.from_couplings(cm, params)
        ms = ms.ordered_by([net.measure(s) for s in ms.sets])
        sol = net.solve(ms.target_a, ms.target_b)
        exact = sol.mean_hitting_time
        start = sol.nu
    else:
        start = None
    a, b = ms.target_a, ms.target_b
    if args.start is not None:
        start = int(args.start)
    elif start is None:
        # without enumeration, start from the first configuration of A's level
        k = a.levels[0]
        start = (1 << k) - 1
    t_all = sample_hitting_times(start, b, cm, params, args.runs, args.seed, args.budget)
    truncated = int(np.isnan(t_all).sum())
    t = t_all[~np.isnan(t_all)]
    mean = float(t.mean()) if t.size else math.nan
    se = float(t.std(ddof=1) / math.sqrt(t.size)) if t.size > 1 else math.nan
    rows = [("runs", args.runs), ("truncated", truncated), ("mean_hitting_time", mean), ("stderr", se)]
    if exact is not None:
        rows += [("exact_mean_hitting_time", exact), ("z_score", (mean - exact) / se if se > 0 else math.nan)]
    _print_kv(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "time"])
            for i, x in enumerate(t_all):
                w.writerow([i, repr(float(x))])
    if args.trajectory:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed, spawn_key=(5, 0))))
        with open(args.trajectory, "w") as fh:
            write_trajectory(fh, start, cm, params, rng, args.trajectory_jumps)
    return EXIT_OK


# experiment


def cmd_experiment(args) -> int:
    data = load_config(args.config)
    for flag, key in (("replicas", "replicas"), ("seed", "master_seed"), ("n_sites", "n_sites"),
                      ("beta", "beta"), ("h", "h")):
        if getattr(args, flag) is not None:
            data[key] = getattr(args, flag)
    cfg = ExperimentConfig.from_dict(data)
    threads = resolve_threads(args.threads)
    outcome = run_experiment(cfg, args.out_dir, threads=threads, figures=args.figures,
                             progress=lambda m: print(m, file=sys.stderr))
    for name, rep in outcome.reports.items():
        extra = f" (c = {rep.c_fit:.4g})" if hasattr(rep, "c_fit") else ""
        print(f"{name:<24} {rep.status}{extra}")
    if outcome.manifest_path:
        print(f"manifest: {outcome.manifest_path}")
    if outcome.failed:
        raise AcceptanceFailure("failing reports: " + ", ".join(outcome.failed))
    return EXIT_OK


# check


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise AcceptanceFailure("failing checks: " + ", ".join(failed))
    return EXIT_OK


def _add_model_args(p, need_beta=True):
    p.add_argument("--couplings", help="coupling file written by `metastab gen`")
    p.add_argument("--annealed", action="store_true",
                   help="use the annealed couplings (constant --pbar without a coupling file)")
    p.add_argument("--n-sites", type=int, help="N for --annealed without a coupling file")
    p.add_argument("--pbar", type=float, default=1.0, help="mean coupling for --annealed (default 1)")
    p.add_argument("--beta", type=float, required=need_beta)
    p.add_argument("--h", type=float, default=0.0)
    p.add_argument("--sets", default="auto",
                   help="'auto' (free-energy minima) or comma-separated magnetizations, one per set")
    p.add_argument("--index", type=int, default=2, help="1-based index of the target set A")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--enum-limit", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metastab", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"metastab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="sample a coupling array")
    p.add_argument("config", help="disorder spec or experiment config (JSON/YAML)")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--replica", type=int, default=0)
    p.add_argument("--environment", type=int, default=None)
    p.add_argument("--beta", type=float, default=None, help="inverse temperature for alpha_N")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("exact", help="exact potential theory on the full state space")
    _add_model_args(p)
    p.add_argument("--max-singletons", type=int, default=None)
    p.add_argument("--out", help="CSV of the computed quantities")
    p.add_argument("--dump-h", help="CSV of the equilibrium potential per configuration")
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("lumped", help="annealed Curie-Weiss free energy and lumped chain")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--h", type=float, default=0.0)
    p.add_argument("--pbar", type=float, default=1.0)
    p.add_argument("--n-sites", type=int, default=100)
    p.add_argument("--grid", type=int, default=2001)
    p.add_argument("--hc", action="store_true", help="require the critical field")
    p.add_argument("--metastable", action="store_true", help="require metastable outputs")
    p.add_argument("--out-dir")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    p.set_defaults(func=cmd_lumped)

    p = sub.add_parser("simulate", help="sample hitting times with the exact dynamics")
    _add_model_args(p)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=10**9)
    p.add_argument("--start", type=int, default=None, help="start configuration index")
    p.add_argument("--out")
    p.add_argument("--trajectory", help="write one debug trajectory here")
    p.add_argument("--trajectory-jumps", type=int, default=1000)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run a disorder experiment")
    p.add_argument("config")
    p.add_argument("--out-dir", default="metastab-out")
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--n-sites", type=int, help="override n_sites")
    p.add_argument("--beta", type=float, help="override beta")
    p.add_argument("--h", type=float, help="override h")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default $METASTAB_THREADS or 1)")
    p.add_argument("--figures", action="store_true", help="also render PNG figures")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("check", help="run the fast invariant suite")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AcceptanceFailure as exc:
        print(f"acceptance failure: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MetastabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
