"""Static SVG figures rendered from experiment tables.

Figures are deterministic for a given input: the SVG hash salt is tied to
the configuration hash and metadata timestamps are stripped.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path, salt):
    with matplotlib.rc_context({"svg.hashsalt": salt}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def spectrum_overlay(path, counts, edges, grid, density, zero_mass, salt, title):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    widths = np.diff(edges)
    total = counts.sum()
    ax.bar(edges[:-1], counts / (total * widths), width=widths, align="edge",
           alpha=0.45, label="sampled eigenvalues", color="tab:blue")
    ax.plot(grid, density, color="tab:red", lw=1.8, label="limiting density")
    if zero_mass > 1e-12:
        ax.axvline(0.0, color="tab:red", ls=":", lw=1.2)
        ax.annotate(f"mass {zero_mass:.3f} at 0", xy=(0, 0),
                    xytext=(0.03, 0.92), textcoords="axes fraction", fontsize=9)
    ax.set_xlabel(r"$\lambda$")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    return _save(fig, path, salt)


def descent_overlay(path, records, salt, title, extra_curves=()):
    """records: list of dicts with N, gamma, eg_sim_mean/_stderr, eg_theory,
    diverged.  extra_curves: (label, list of (inv_gamma, value)) pairs."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    inv_gamma = np.array([1.0 / r["gamma"] for r in records])
    sim = np.array([r["eg_sim_mean"] for r in records])
    err = np.array([3 * r["eg_sim_stderr"] for r in records])
    ax.errorbar(inv_gamma, sim, yerr=err, fmt="o-", ms=4, lw=1.2,
                color="tab:blue", label="simulated")
    th_x = [1.0 / r["gamma"] for r in records
            if r["eg_theory"] is not None and not r["diverged"]]
    th_y = [r["eg_theory"] for r in records
            if r["eg_theory"] is not None and not r["diverged"]]
    if th_y:
        ax.plot(th_x, th_y, "s--", ms=4, lw=1.2, color="tab:red", label="theory")
    div_x = [1.0 / r["gamma"] for r in records if r["diverged"]]
    for x in div_x:
        ax.axvline(x, color="tab:red", ls=":", lw=0.9, alpha=0.7)
    for label, pts in extra_curves:
        xs, ys = zip(*pts)
        ax.plot(xs, ys, "^:", ms=3, lw=1.0, label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(r"$1/\gamma = N/n$")
    ax.set_ylabel("generalisation error")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    return _save(fig, path, salt)


def variance_scaling_plot(path, Ns, variances, slope, intercept, salt, title):
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    ax.loglog(Ns, variances, "o", color="tab:blue", label="entrywise variance")
    fit = np.exp(intercept) * np.asarray(Ns, dtype=float) ** slope
    ax.loglog(Ns, fit, "--", color="tab:red", label=f"fit slope {slope:.3f}")
    ax.set_xlabel("width N")
    ax.set_ylabel("variance of kernel entry")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    return _save(fig, path, salt)


def limits_plot(path, comparisons, salt, title):
    """comparisons: list of (label, formula_value, endpoint_value)."""
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    idx = np.arange(len(comparisons))
    labels = [c[0] for c in comparisons]
    ax.bar(idx - 0.17, [c[1] for c in comparisons], width=0.34, label="curve value")
    ax.bar(idx + 0.17, [c[2] for c in comparisons], width=0.34, label="asymptotic limit")
    ax.set_xticks(idx, labels)
    ax.set_ylabel("generalisation error")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    return _save(fig, path, salt)
