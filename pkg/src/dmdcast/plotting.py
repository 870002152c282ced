"""Heatmap output for skill maps.

``write_ppm`` produces a binary PPM with a blue-white-red scale and no
imaging dependency.  The matplotlib helpers render the same maps, plus
training curves, as figure files for reports.
"""

from __future__ import annotations

import numpy as np

MASK_RGB = (128, 128, 128)
_LOW = np.array([33.0, 102.0, 172.0])
_MID = np.array([255.0, 255.0, 255.0])
_HIGH = np.array([178.0, 24.0, 43.0])


def diverging_rgb(values, vmin, vmax):
    """Map values to uint8 RGB; ``vmin`` -> blue, midpoint -> white, ``vmax`` -> red."""
    if not vmax > vmin:
        raise ValueError(f"color range must satisfy vmin < vmax, got [{vmin}, {vmax}]")
    x = np.clip((np.asarray(values, dtype=np.float64) - vmin) / (vmax - vmin), 0.0, 1.0)
    x = np.nan_to_num(x, nan=0.5)[..., None]
    lo = _LOW + (_MID - _LOW) * np.clip(2 * x, 0, 1)
    hi = _MID + (_HIGH - _MID) * np.clip(2 * x - 1, 0, 1)
    rgb = np.where(x <= 0.5, lo, hi)
    return np.rint(rgb).astype(np.uint8)


def skill_image(skill, vmin=-1.0, vmax=1.0, scale=1):
    """RGB array with the northernmost row on top and masked points gray."""
    rgb = diverging_rgb(skill.values, vmin, vmax)
    rgb[~skill.mask] = MASK_RGB
    lats = skill.lats
    if lats is None or lats[0] < lats[-1]:
        rgb = rgb[::-1]
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    return rgb


def write_ppm(rgb, path):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


_TITLES = {"acc": "ACC", "delta_acc": "ΔACC", "rmse": "RMSE"}


def plot_skill_map(skill, path, vmin=-1.0, vmax=1.0, title=None):
    plt = _pyplot()
    lats = skill.lats
    if lats is None:
        from .gridstore import default_lats

        lats = default_lats(skill.mask.shape[0])
    nlon = skill.mask.shape[1]
    lons = (np.arange(nlon) + 0.5) * 360.0 / nlon
    data = np.ma.masked_array(skill.values, ~skill.mask)
    cmap = plt.get_cmap("RdBu_r").copy()
    cmap.set_bad("0.6")
    fig, ax = plt.subplots(figsize=(7, 3.6))
    mesh = ax.pcolormesh(lons, lats, data, cmap=cmap, vmin=vmin, vmax=vmax, shading="nearest")
    fig.colorbar(mesh, ax=ax, shrink=0.85)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    label = _TITLES[skill.metric]
    ax.set_title(title or f"{label}, lead {skill.lead_months} months (n={skill.n_samples})")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_history(history, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = np.arange(1, len(history.train_loss) + 1)
    ax.semilogy(epochs, history.train_loss, label="train")
    if history.val_loss:
        ax.semilogy(epochs, history.val_loss, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_lead_summary(rows, path):
    """``rows`` are ``(lead, label, global mean ACC)`` triples."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label in sorted({r[1] for r in rows}):
        pts = sorted((r[0], r[2]) for r in rows if r[1] == label)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("lead (months)")
    ax.set_ylabel("area-weighted mean ACC")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
