"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path, title):
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def capacity_figure(path, report, empirical=None, tag=""):
    J = [r.J for r in report.rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.plot(J, [r.mu for r in report.rows], label="mu (analytic)")
    if empirical:
        js = sorted(empirical)
        a.plot(js, [empirical[j][0] for j in js], "o", ms=4, label="Monte Carlo")
    a.set_xlabel("J (keys)")
    a.set_ylabel("collisions per key")
    a.legend(fontsize=7)
    b.plot(J, [r.p_success for r in report.rows])
    b.axhline(report.params.zeta, ls=":", c="gray")
    if math.isfinite(report.J_star):
        b.axvline(report.J_star, ls="--", c="r", lw=0.8)
    b.set_xlabel("J (keys)")
    b.set_ylabel("P_Success")
    return _save(fig, path, f"capacity {tag}")


def curves_figure(path, outcome, xlabel, tag=""):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    x = range(len(outcome.normal_acc_curve))
    ax.plot(x, outcome.normal_acc_curve, label="normal")
    ax.plot(x, outcome.trigger_acc_curve, label="trigger")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    return _save(fig, path, tag)


def prune_figure(path, outcomes, chance, tag=""):
    f = [o.extra["fraction"] for o in outcomes]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(f, [o.normal_acc_curve[-1] for o in outcomes], label="normal")
    ax.plot(f, [o.trigger_acc_curve[-1] for o in outcomes], label="trigger")
    ax.axhline(chance, ls=":", c="gray")
    ax.set_xlabel("pruned fraction of weights")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=7)
    return _save(fig, path, tag)


def cells_figure(path, per_cell, clean, tag=""):
    """Box plot of test accuracy per (scheme, backdoor) cell across seeds."""
    names = list(per_cell)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2.5, 3.2))
    ax.boxplot([per_cell[n] for n in names] + [clean])
    ax.set_xticks(range(1, len(names) + 2), names + ["clean"])
    ax.set_ylabel("test accuracy")
    return _save(fig, path, tag)


def nhat_figure(path, curve, gamma, tag=""):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([n for n, _ in curve], [a for _, a in curve], "o-", ms=3)
    ax.axhline(gamma, ls=":", c="gray")
    ax.set_xlabel("post-triggers injected")
    ax.set_ylabel("test accuracy")
    return _save(fig, path, tag)
