"""Figure rendering for experiment reports.

Each experiment gets one self-contained SVG next to its CSV/JSON
artifacts.  Rendering failures never fail a run; the data artifacts are
primary.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .experiments import ExperimentResult


def render_figure(result: ExperimentResult, path: Path) -> bool:
    """Render the figure for an experiment result; True on success."""
    renderer = _RENDERERS.get(result.experiment)
    if renderer is None:
        return False
    try:
        fig = renderer(result)
        fig.savefig(path, format="svg")
        plt.close(fig)
        return True
    except Exception:
        plt.close("all")
        return False


def _fig(width=6.0, height=4.0):
    return plt.subplots(figsize=(width, height), constrained_layout=True)


def _single_flip(result):
    fig, ax = _fig()
    t = [r["time_us"] for r in result.sweep]
    d = [r["p_flip_per_us"] for r in result.sweep]
    ax.bar(t, d, width=t[1] - t[0] if len(t) > 1 else 0.25, color="#3465a4", alpha=0.8)
    m = result.metrics
    ax.axvline(m["mean_correction_time_us"], color="k", ls="--", lw=1,
               label=f"mean {m['mean_correction_time_us']:.2f} us")
    ax.set_xlabel("time since induced error (us)")
    ax.set_ylabel("P_flip(t) (1/us)")
    ax.set_title(f"q{m['qubit']} detection efficiency "
                 f"{m['efficiency']:.3f} "
                 f"[{m['efficiency_wilson_low']:.3f}, {m['efficiency_wilson_high']:.3f}]")
    ax.legend()
    return fig


def _dark_counts(result):
    fig, ax = _fig()
    qs = [r["qubit"] for r in result.sweep]
    rates = [r["dark_rate_per_ms"] for r in result.sweep]
    errs = [r["rate_err_per_ms"] for r in result.sweep]
    thermal = [r["thermal_assisted_per_ms"] for r in result.sweep]
    ax.bar(qs, rates, yerr=errs, color="#3465a4", alpha=0.8, label="dark rate")
    ax.bar(qs, thermal, color="#cc0000", alpha=0.6, width=0.4, label="thermal-assisted")
    ax.set_xticks(qs)
    ax.set_xlabel("detected flip class")
    ax.set_ylabel("rate (1/ms)")
    ax.legend()
    ax.set_title("dark count rates")
    return fig


def _dead_time(result):
    fig, ax = _fig()
    d = np.array([r["delay_ns"] for r in result.sweep]) / 1000.0
    for key, color in (("correct", "#4e9a06"), ("logical", "#cc0000"),
                       ("other", "#f57900"), ("none", "#888a85")):
        p = [r[f"p_{key}"] for r in result.sweep]
        e = [r[f"p_{key}_err"] for r in result.sweep]
        ax.errorbar(d, p, yerr=e, label=key, color=color, marker="o", ms=3, lw=1)
    dt = result.metrics["dead_time_ns"]
    if result.metrics["dead_time_bounded"]:
        ax.axvline(dt / 1000.0, color="k", ls=":", label=f"dead time {dt:.0f} ns")
    ax.set_xlabel("delay between flips (us)")
    ax.set_ylabel("probability")
    ax.set_title(f"flip pair {tuple(result.metrics['pair'])} classification")
    ax.legend()
    return fig


def _logical_t1(result):
    fig, ax = _fig()
    t = [r["time_us"] for r in result.sweep]
    p = [r["p_excited_logical"] for r in result.sweep]
    e = [r["p_excited_err"] for r in result.sweep]
    ax.errorbar(t, p, yerr=e, fmt="o", ms=2.5, color="#3465a4", label="excited logical population")
    m = result.metrics
    tt = np.linspace(t[0], t[-1], 200)
    ax.plot(tt, m["fit_amplitude"] * np.exp(-tt / m["t1_logical_us"]) + m["fit_offset"],
            "k--", lw=1,
            label=f"fit T = {m['t1_logical_us']:.0f} us (x{m['lifetime_ratio']:.1f} bare)")
    ax.set_xlabel("time (us)")
    ax.set_ylabel("population")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{m['sector']} logical lifetime, feedback "
                 f"{'on' if m['feedback_on'] else 'off'}")
    ax.legend()
    return fig


def _coherence_transfer(result):
    fig, ax = _fig()
    m = result.metrics
    ax.bar([0], [m["relative_coherence"]], yerr=[m["relative_coherence_sigma"]],
           color="#3465a4", alpha=0.8, label="simulated")
    ax.plot([-0.4, 0.4], [m["predicted_relative_coherence"]] * 2, "k--",
            label=f"predicted exp(-zeta), zeta={m['predicted_zeta']:.3f}")
    flip = m["flip"]
    ax.set_xticks([0])
    ax.set_xticklabels([f"{m['from_sector']} -> {m['to_sector']}"
                        + ("" if flip is None else f" (flip q{flip})")])
    ax.set_ylabel("relative logical coherence")
    ax.set_ylim(0, 1.1)
    ax.legend()
    ax.set_title("coherence transfer through a parity flip")
    return fig


def _conditional_coherence(result):
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.5, 6.0), sharex=True,
                                   constrained_layout=True)
    t = np.array([r["t_bin_us"] for r in result.sweep])
    re = np.array([r["coh_re"] for r in result.sweep])
    im = np.array([r["coh_im"] for r in result.sweep])
    sig = np.array([r["coh_sigma"] for r in result.sweep])
    ax1.errorbar(t, re, yerr=sig, fmt="o", ms=3, color="#3465a4", label="Re")
    ax1.errorbar(t, im, yerr=sig, fmt="s", ms=3, color="#cc0000", label="Im")
    ax1.set_ylabel("logical coherence")
    ax1.legend()
    m = result.metrics
    ax1.set_title(f"coherence vs correction time; fitted {abs(m['fitted_freq_mhz']):.3f} MHz "
                  f"(configured {abs(m['delta_beta_mhz']):.3f} MHz)")
    phases = np.array([r["coh_phase_rad"] for r in result.sweep])
    ax2.plot(t, np.unwrap(phases), "o-", ms=3, color="#4e9a06")
    ax2.set_xlabel("correction time (us)")
    ax2.set_ylabel("phase (rad)")
    return fig


def _distinguishability(result):
    fig, ax = _fig(7.0, 4.0)
    rows = result.sweep
    labels = [f"R{r['resonator']}:{r['pair']}" for r in rows]
    vals = [max(r["distinguishability"], 1e-6) for r in rows]
    colors = ["#cc0000" if r["pair"] in ("01,10",) else "#3465a4" for r in rows]
    ax.bar(range(len(rows)), vals, color=colors, alpha=0.85)
    ax.set_yscale("log")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=60, fontsize=8)
    ax.set_ylabel("distinguishability |alpha_m - alpha_n|^2")
    m = result.metrics
    ax.set_title(f"even/odd ratio: R0 {m['ratio_r0']:.1f} (theory {m['ratio_theory_r0']:.1f}), "
                 f"R1 {m['ratio_r1']:.1f} (theory {m['ratio_theory_r1']:.1f})")
    return fig


def _thresholds(result):
    fig, ax = _fig(5.0, 4.5)
    conf = np.array(result.metrics["confusion_matrix"])
    im = ax.imshow(conf, cmap="Blues", vmin=0, vmax=1)
    names = ("q0", "q1", "q2", "none")
    ax.set_xticks(range(4)); ax.set_xticklabels(names)
    ax.set_yticks(range(4)); ax.set_yticklabels(names)
    ax.set_xlabel("prepared")
    ax.set_ylabel("classified")
    for i in range(4):
        for j in range(4):
            ax.text(j, i, f"{conf[i, j]:.2f}", ha="center", va="center",
                    color="white" if conf[i, j] > 0.5 else "black", fontsize=8)
    m = result.metrics
    ax.set_title(f"thresholds ({m['theta1']:.2f}, {m['theta2']:.2f}, {m['theta3']:.2f}), "
                 f"objective {m['objective']:.4f}")
    fig.colorbar(im, ax=ax, shrink=0.8)
    return fig


_RENDERERS = {
    "single-flip": _single_flip,
    "dark-counts": _dark_counts,
    "dead-time": _dead_time,
    "logical-t1": _logical_t1,
    "coherence-transfer": _coherence_transfer,
    "conditional-coherence": _conditional_coherence,
    "distinguishability-scan": _distinguishability,
    "optimize-thresholds": _thresholds,
}


def record_trace_figure(records: np.ndarray, path: Path, title: str = "") -> bool:
    """Plot one trajectory's filtered record traces (V per resonator)."""
    try:
        fig, ax = _fig(7.0, 3.5)
        t_us = records[:, 0] / 1000.0
        ax.plot(t_us, records[:, 5], lw=0.8, label="V0", color="#3465a4")
        ax.plot(t_us, records[:, 6], lw=0.8, label="V1", color="#cc0000")
        ax.set_xlabel("time (us)")
        ax.set_ylabel("filtered record (norm.)")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.savefig(path, format="svg")
        plt.close(fig)
        return True
    except Exception:
        plt.close("all")
        return False


def apply_house_style():
    """Shared matplotlib defaults for report figures."""
    matplotlib.rcParams.update({
        "font.size": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "svg.fonttype": "path",
        "figure.dpi": 110,
    })
