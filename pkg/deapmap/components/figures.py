"""SVG charts (matplotlib) and PNG heatmaps (Pillow); regenerating from the same data gives identical bytes."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import colormaps  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from deapmap.evaluation import ComparisonReport  # noqa: E402
from deapmap.movie import VmMovie  # noqa: E402
from deapmap.phase import IsochronalMap  # noqa: E402

plt.rcParams["svg.hashsalt"] = "deapmap"
plt.rcParams["svg.fonttype"] = "none"

SVG_METADATA = {"Date": None}
PIPELINE_COLOURS = {"deap": "#c0392b", "baseline": "#7f8c8d"}
STRIP_SCALE = 4
STRIP_GAP = 4


def _save_svg(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    return path


def scatter_svg(report: ComparisonReport, path: str | Path) -> Path:
    """Baseline SSIM against DEAP SSIM per row, coloured by electrode design."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for design, marker in zip(report.designs(), "os^D"):
        points = [(r.ssim_baseline, r.ssim_deap) for r in report.ok_rows if r.array_name == design]
        if points:
            xs, ys = zip(*points)
            ax.scatter(xs, ys, marker=marker, s=28, label=design)
    ax.plot([-1, 1], [-1, 1], color="black", linewidth=0.6, linestyle="--")
    ax.set_xlim(-0.1, 1.0)
    ax.set_ylim(-0.1, 1.0)
    ax.set_xlabel("SSIM, activation map")
    ax.set_ylabel("SSIM, DEAP")
    ax.set_title("Phase variance index vs truth")
    if report.ok_rows:
        ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    return _save_svg(fig, path)


def violin_svg(report: ComparisonReport, path: str | Path) -> Path:
    """SSIM distribution per design and pipeline."""
    groups = []
    labels = []
    colours = []
    for design in report.designs():
        for pipeline in ("baseline", "deap"):
            values = [
                getattr(row, f"ssim_{pipeline}")
                for row in report.ok_rows
                if row.array_name == design and getattr(row, f"ssim_{pipeline}") is not None
            ]
            if values:
                groups.append(values)
                labels.append(f"{design}\n{pipeline}")
                colours.append(PIPELINE_COLOURS[pipeline])
    fig, ax = plt.subplots(figsize=(1.4 * max(len(groups), 2) + 1, 4))
    if groups:
        positions = np.arange(1, len(groups) + 1)
        # violins need spread; single-value groups fall back to a marker
        spread = [i for i, g in enumerate(groups) if len(g) > 1 and np.ptp(g) > 0]
        if spread:
            parts = ax.violinplot([groups[i] for i in spread], positions=positions[spread], showmedians=True)
            for body, i in zip(parts["bodies"], spread):
                body.set_facecolor(colours[i])
                body.set_alpha(0.6)
        for i, g in enumerate(groups):
            ax.scatter(np.full(len(g), positions[i]), g, s=8, color=colours[i], zorder=3)
        ax.set_xticks(positions)
        ax.set_xticklabels(labels)
    ax.set_ylabel("SSIM")
    ax.set_ylim(-0.1, 1.05)
    fig.tight_layout()
    return _save_svg(fig, path)


def isochrone_svg(iso: IsochronalMap, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    activation = np.ma.masked_invalid(iso.activation_ms)
    t0, t1 = iso.window
    levels = np.arange(t0, t1 + iso.step_ms, iso.step_ms)
    if activation.count() > 0:
        filled = ax.contourf(activation, levels=levels, cmap="jet_r")
        fig.colorbar(filled, ax=ax, label="activation (ms)")
    ax.set_aspect("equal")
    ax.invert_yaxis()
    ax.set_title(f"Isochrones, {iso.step_ms:g} ms")
    fig.tight_layout()
    return _save_svg(fig, path)


def _rgba(values: np.ndarray, vmin: float, vmax: float, cmap: str) -> np.ndarray:
    scaled = (np.asarray(values, dtype=np.float64) - vmin) / max(vmax - vmin, 1e-12)
    rgba = colormaps[cmap](np.clip(np.nan_to_num(scaled), 0.0, 1.0), bytes=True)
    rgba[~np.isfinite(values)] = (255, 255, 255, 255)
    return rgba


def heatmap_image(values: np.ndarray, vmin: float = 0.0, vmax: float = 1.0, cmap: str = "inferno", scale: int = STRIP_SCALE) -> Image.Image:
    image = Image.fromarray(_rgba(values, vmin, vmax, cmap)).convert("RGB")
    return image.resize((image.width * scale, image.height * scale), Image.NEAREST)


def heatmap_png(values: np.ndarray, path: str | Path, vmin: float = 0.0, vmax: float = 1.0, cmap: str = "inferno") -> Path:
    path = Path(path)
    heatmap_image(values, vmin, vmax, cmap).save(path, format="PNG")
    return path


def frame_strip_png(rows: dict[str, VmMovie], times_ms: list[float], path: str | Path) -> Path:
    """One row per movie, one column per timestamp; rows share a common cell grid."""
    tiles = []
    for movie in rows.values():
        row = []
        for t in times_ms:
            index = int(round((t - movie.t0_ms) / movie.dt_ms))
            index = min(max(index, 0), movie.n_frames - 1)
            row.append(heatmap_image(movie.frames[index]))
        tiles.append(row)
    label_width = 70
    tile_w, tile_h = tiles[0][0].size
    width = label_width + len(times_ms) * (tile_w + STRIP_GAP)
    height = len(tiles) * (tile_h + STRIP_GAP)
    canvas = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(canvas)
    for r, (name, row) in enumerate(zip(rows, tiles)):
        y = r * (tile_h + STRIP_GAP)
        draw.text((4, y + tile_h // 2 - 5), name, fill="black")
        for c, tile in enumerate(row):
            canvas.paste(tile, (label_width + c * (tile_w + STRIP_GAP), y))
    path = Path(path)
    canvas.save(path, format="PNG")
    return path
