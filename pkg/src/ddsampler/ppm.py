"""Static plot emission as binary PPM (P6) files: lattice sample grids,
per-step marginal heatmaps for bridges, and 2-D scatter histograms."""

from __future__ import annotations

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.clip(rgb, 0, 255).astype(np.uint8).tobytes())


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to a dark-blue -> yellow ramp."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3.0 * v - 1.0, 0, 1)
    g = np.clip(2.0 * v - 0.3, 0, 1)
    b = np.clip(1.2 - 2.0 * v, 0.05, 1) * (0.3 + 0.7 * (1 - v))
    return (np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


_SPIN_COLOURS = np.array(
    [[40, 40, 40], [230, 230, 230], [220, 80, 60], [70, 130, 200], [90, 180, 90], [230, 190, 60]],
    dtype=np.uint8,
)


def lattice_grid_image(samples: np.ndarray, L: int, q: int, n_cols: int = 4, cell: int = 8) -> np.ndarray:
    """Tile lattice samples into a grid; one colour per spin value."""
    grids = np.asarray(samples, dtype=np.int64).reshape(-1, L, L)
    n = grids.shape[0]
    n_rows = (n + n_cols - 1) // n_cols
    pad = 2
    img = np.full(((L + pad) * n_rows + pad, (L + pad) * n_cols + pad, 3), 255, dtype=np.uint8)
    colours = _SPIN_COLOURS[np.arange(q) % len(_SPIN_COLOURS)]
    for i, grid in enumerate(grids):
        r, c = divmod(i, n_cols)
        block = colours[grid - 1]
        y = pad + r * (L + pad)
        x = pad + c * (L + pad)
        img[y : y + L, x : x + L] = block
    return upscale(img, cell)


def histogram2d_image(points: np.ndarray, bounds: float, bins: int = 64, cell: int = 4) -> np.ndarray:
    """Density heatmap of 2-D points on [-bounds, bounds]^2."""
    pts = np.asarray(points, dtype=np.float64)
    hist, _, _ = np.histogram2d(
        pts[:, 0], pts[:, 1], bins=bins, range=[[-bounds, bounds], [-bounds, bounds]]
    )
    hist = hist.T[::-1]  # image rows top-down, y increasing upward
    top = hist.max() if hist.max() > 0 else 1.0
    return upscale(heat_colormap(np.sqrt(hist / top)), cell)


def marginal_strip_image(per_step_hist: np.ndarray, cell: int = 6) -> np.ndarray:
    """1-D bridge visualisation: columns are time steps, rows are bins."""
    h = np.asarray(per_step_hist, dtype=np.float64)
    top = h.max() if h.max() > 0 else 1.0
    return upscale(heat_colormap((h / top).T[::-1]), cell)
