"""Optional PNG figures rendered next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["render_experiment_figures", "render_lumped_figures"]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _tail_axes(ax, report, title, ylabel="exceedance frequency"):
    rows = report.rows
    t = np.array([r["t"] for r in rows])
    emp = np.array([r["empirical"] for r in rows])
    se = np.array([r["stderr"] for r in rows])
    bound = np.array([min(r["bound"], 1.5) for r in rows])
    ax.errorbar(t, emp, yerr=3 * se, fmt="o", capsize=3, label="empirical (3 s.e.)")
    ax.plot(t, bound, "-", label="envelope")
    vac = np.array([r["vacuous"] for r in rows])
    if vac.any():
        ax.plot(t[vac], bound[vac], "x", color="grey", label="vacuous")
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.set_title(f"{title} [{report.status}]")
    ax.legend(fontsize=8)


def render_experiment_figures(reports: dict, results: dict, config, out_dir) -> list:
    plt = _pyplot()
    out = Path(out_dir)
    paths = []

    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    _tail_axes(axes[0], reports["capacity_concentration"], "log(Z cap)")
    _tail_axes(axes[1], reports["harmonic_concentration"], "log(Z ||h||)")
    _tail_axes(axes[2], reports["ratio_tail"], "ratio sandwich", "frequency inside")
    fig.tight_layout()
    p = out / "tails.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    main = [r for r in results[config.n_sites] if not r.failed]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    axes[0].hist([r.log_z_cap - np.mean([s.log_z_cap for s in main]) for r in main], bins=40)
    axes[0].set_xlabel("centred log(Z cap)")
    axes[0].set_ylabel("replicas")
    axes[1].hist([r.log_ratio for r in main], bins=40)
    axes[1].set_xlabel("log(quenched / annealed mean hitting time)")
    fig.suptitle(f"N={config.n_sites}, beta={config.beta}, h={config.h}, R={len(main)}")
    fig.tight_layout()
    p = out / "replica_histograms.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    loc = reports["localization"].rows
    mom = reports["ratio_moments"].rows
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    axes[0].semilogy([r["N"] for r in loc], [max(r["empirical"], 1e-16) for r in loc], "o-")
    axes[0].axhline(reports["localization"].meta["threshold"], ls="--", color="grey")
    axes[0].set_xlabel("N")
    axes[0].set_ylabel("max |harmonic sum / mu[valley] - 1|")
    for q in sorted({r["q"] for r in mom}):
        rows = [r for r in mom if r["q"] == q]
        n = [r["N"] for r in rows]
        axes[1].plot(n, [r["norm"] for r in rows], "o-", label=f"q={q}")
        axes[1].fill_between(n, [r["lower"] for r in rows], [r["upper"] for r in rows], alpha=0.15)
    axes[1].set_xlabel("N")
    axes[1].set_ylabel("||ratio||_q")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    p = out / "sizes.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def render_lumped_figures(chain, curve_x, curve_f, minima, out_dir, stem: str = "lumped") -> list:
    plt = _pyplot()
    out = Path(out_dir)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    axes[0].plot(curve_x, curve_f)
    for x, kind in minima:
        axes[0].axvline(x, ls="--" if kind == "min" else ":", color="grey")
    axes[0].set_xlabel("magnetization")
    axes[0].set_ylabel("free energy")
    axes[1].plot(chain.m, chain.log_mu / np.log(10))
    axes[1].set_xlabel("magnetization")
    axes[1].set_ylabel("log10 lumped Gibbs weight")
    fig.suptitle(f"N={chain.n_sites}, beta={chain.beta}, h={chain.h}, pbar={chain.pbar}")
    fig.tight_layout()
    p = out / f"{stem}.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [p]
