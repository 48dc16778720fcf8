"""Figures written next to the CSV reports."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}


def _snr_label(snr_db):
    return "noise-free" if snr_db is None else f"SNR {snr_db:g} dB"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_supported_users(result, path, analytic=None):
    """Mean supported users against ``n`` (or the first varying parameter),
    one curve per SNR."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        curves: dict = {}
        for pt in result:
            curves.setdefault(pt.config.snr_db, []).append(pt)
        for snr, pts in curves.items():
            pts = sorted(pts, key=lambda p: p.config.n)
            ax.errorbar([p.config.n for p in pts],
                        [p.mean["supported_users"] for p in pts],
                        yerr=[p.std["supported_users"] for p in pts],
                        marker="o", ms=3, capsize=2, label=_snr_label(snr))
        if analytic:
            xs = sorted(analytic)
            ax.plot(xs, [analytic[x] for x in xs], "k--", lw=1, label="error-free detection")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("signal dimension n")
        ax.set_ylabel("supported users per frame")
        ax.legend()
        return _save(fig, path)


def plot_snr_curve(result, path):
    """Supported users against SNR for a single ``n``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pts = [p for p in result if p.config.snr_db is not None]
        pts.sort(key=lambda p: p.config.snr_db)
        ax.plot([p.config.snr_db for p in pts], [p.mean["supported_users"] for p in pts],
                marker="o", ms=3, label="simulated")
        for p in result:
            if p.config.snr_db is None:
                ax.axhline(p.mean["supported_users"], color="k", ls="--", lw=1, label="noise-free")
        ax.set_xlabel("SNR [dB]")
        ax.set_ylabel("supported users per frame")
        ax.legend()
        return _save(fig, path)


def plot_tail(rows, path, x_key, group_key, xlabel, title=None):
    """Empirical tails (markers) against their bounds (lines)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        groups: dict = {}
        for r in rows:
            groups.setdefault(tuple(r.parameters[k] for k in group_key), []).append(r)
        for key, rs in groups.items():
            label = ", ".join(f"{k}={v}" for k, v in zip(group_key, key))
            xs = [r.parameters[x_key] for r in rs]
            line, = ax.plot(xs, [r.bound for r in rs], lw=1, label=f"bound {label}")
            emp = [r.empirical if r.empirical > 0 else math.nan for r in rs]
            ax.plot(xs, emp, "o", ms=3, color=line.get_color())
        ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("tail probability")
        if title:
            ax.set_title(title)
        ax.legend(ncol=2)
        return _save(fig, path)
