"""Report figures written to files with the non-interactive backend."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata so repeated runs write identical bytes
_PNG_META = {"Software": None}
_COLORS = {"CTL": "tab:blue", "OB": "tab:orange", "SH": "tab:green"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def predicted_vs_true(preds, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    t = np.array([p.truth for p in preds])
    y = np.array([p.fused for p in preds])
    for state in sorted({p.heart_state for p in preds}):
        sel = np.array([p.heart_state == state for p in preds])
        ax.scatter(t[sel], y[sel], s=18, label=state, color=_COLORS.get(state))
    lo, hi = float(min(t.min(), y.min())), float(max(t.max(), y.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=1)
    ax.set_xlabel("true failure age (months)")
    ax.set_ylabel("predicted (months)")
    if title:
        ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(history, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.arange(len(history))
    ax.plot(steps, [h.total for h in history], label="total")
    ax.plot(steps, [h.l_reg for h in history], label="regression")
    ax.plot(steps, [h.l_ssat for h in history], label="masked reconstruction")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)


def spectrum_plot(spectrum, path, title: str = "") -> Path:
    """Amplitude against frequency, coloured by growth rate."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if spectrum.modes:
        f = spectrum.omegas / (2 * np.pi)
        sc = ax.scatter(f, spectrum.amplitudes, c=spectrum.deltas, cmap="coolwarm", s=20)
        fig.colorbar(sc, ax=ax, label="growth rate (1/s)")
        ax.set_yscale("log")
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("amplitude")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def kind_comparison(rmse_by_kind: dict[str, float], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    names: Sequence[str] = list(rmse_by_kind)
    ax.bar(range(len(names)), [rmse_by_kind[n] for n in names])
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel("RMSE (months)")
    fig.tight_layout()
    return _save(fig, path)
