"""Text summaries and matplotlib figures for analysis runs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import DeformationField  # noqa: E402
from .spectrum import Band, RadialSpectrum  # noqa: E402


def modal_euler_triples(df: DeformationField, min_share: float = 0.05, merge_deg: float = 3.0,
                        max_modes: int = 8) -> list[dict]:
    """Most frequent Euler triples (degrees, rounded to 1) over non-defect voxels.

    Modes closer than ``merge_deg`` to an already chosen mode are folded into
    it; modes holding less than ``min_share`` of the voxels are dropped.
    """
    good = ~df.defect & np.all(np.isfinite(df.euler), axis=-1)
    eul = np.degrees(df.euler[good])
    if eul.size == 0:
        return []
    keys, counts = np.unique(np.round(eul).astype(int), axis=0, return_counts=True)
    order = np.argsort(-counts, kind="stable")
    modes: list[dict] = []
    for i in order:
        k = keys[i].astype(float)
        hit = next((m for m in modes if np.max(np.abs(np.array(m["euler_deg"]) - k)) <= merge_deg), None)
        if hit is not None:
            hit["count"] += int(counts[i])
        elif len(modes) < max_modes:
            modes.append({"euler_deg": k.tolist(), "count": int(counts[i])})
    n = eul.shape[0]
    out = []
    for m in modes:
        if m["count"] / n >= min_share:
            sel = np.max(np.abs(eul - np.array(m["euler_deg"])), axis=1) <= merge_deg
            out.append({"euler_deg": np.mean(eul[sel], axis=0).round(3).tolist(),
                        "share": round(m["count"] / n, 4)})
    return out


def summary_lines(df: DeformationField) -> list[str]:
    info = df.info
    lines = [
        f"L\t{info.get('L')}",
        f"band\t{info['band'][0]:.4g}:{info['band'][1]:.4g}",
        f"N\t{info['N']:.6g}",
        f"atoms\t{info['n_atoms']}",
        f"L_B\t{info['L_B']}",
        f"delta\t{info['delta']:.6g}",
        f"retained_entries\t{info['retained_entries']}",
        f"fubini_residual\t{info['fubini_residual']:.3e}",
        f"defect_fraction\t{info['defect_fraction']:.6f}",
        f"mass_min\t{float(df.mass.min()):.6f}",
        f"mass_median\t{float(np.median(df.mass)):.6f}",
    ]
    for i, m in enumerate(modal_euler_triples(df)):
        a, b, c = m["euler_deg"]
        lines.append(f"euler_mode_{i}\t{a:.3f},{b:.3f},{c:.3f}\tshare={m['share']:.4f}")
    return lines


def plot_spectrum(E: RadialSpectrum, band: Band | None, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    # floor-subtracted values can dip below zero where there is no signal
    top = float(np.max(E.values)) if E.values.size else 1.0
    ax.plot(E.r, np.clip(E.values, top * 1e-6, None), lw=1.2, color="k")
    if band is not None:
        ax.axvspan(band.r1, band.r2, color="tab:orange", alpha=0.25, label="band")
        ax.axvline(band.wavenumber, color="tab:red", lw=0.8, ls="--", label=f"N = {band.wavenumber:.2f}")
        ax.legend(frameon=False)
    ax.set_xlabel("r")
    ax.set_ylabel("E(r)")
    if top > 0:
        ax.set_yscale("log")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _central_slices(arr: np.ndarray):
    n = arr.shape[0] // 2
    return [arr[n], arr[:, n], arr[:, :, n]]


def plot_mass(df: DeformationField, path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    for j, (ax, m, d) in enumerate(zip(axes, _central_slices(df.mass), _central_slices(df.defect))):
        im = ax.imshow(m.T, origin="lower", cmap="gray", vmin=0, vmax=1)
        if d.any() and not d.all():
            ax.contour(d.T.astype(float), levels=[0.5], colors="tab:red", linewidths=0.8)
        ax.set_title(f"mass, x{j + 1} = 1/2")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.8)
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_euler(df: DeformationField, path, axis: int = 3) -> Path:
    n = df.lb // 2
    eul = np.degrees(np.take(df.euler, n, axis=axis - 1))
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    for k, (ax, name) in enumerate(zip(axes, ("alpha", "beta", "gamma"))):
        im = ax.imshow(np.ma.masked_invalid(eul[..., k]).T, origin="lower", cmap="viridis")
        ax.set_title(f"{name} (deg), x{axis} = 1/2")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_slice_overview(data: np.ndarray, axis: int, path) -> Path:
    plane = np.take(data, data.shape[axis - 1] // 2, axis=axis - 1)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(plane.T, origin="lower", cmap="gray")
    ax.set_title(f"x{axis} = 1/2")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
