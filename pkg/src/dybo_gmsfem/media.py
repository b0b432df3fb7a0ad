"""Random coefficient fields ``a(x, xi) = abar(x) + sum_i a_i(x) xi_i``.

Fields are sampled at fine-cell centres and stored as flat per-cell arrays
(see :func:`dybo_gmsfem.fem.as_cell_field`).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fem import as_cell_field
from .grid import GridPair

TRIG_VARIANTS = ("diag-sin", "axis-cos", "shifted", "diag-sum")


def trig_formula(x1, x2, amplitude: float, P: float, eps: float, variant: str):
    """Closed-form oscillatory fluctuation profiles evaluated pointwise."""
    k = 2.0 * np.pi / eps
    if variant == "diag-sin":
        num = 2.0 + P * np.sin(k * (x1 - x2))
        den = 2.0 - P * np.cos(k * (x1 - x2))
    elif variant == "axis-cos":
        num = 2.0 + P * np.cos(k * x1)
        den = 2.0 - P * np.sin(k * x2)
    elif variant == "shifted":
        num = 2.0 + P * np.sin(k * (x1 - 0.5))
        den = 2.0 - P * np.cos(k * (x2 - 0.5))
    elif variant == "diag-sum":
        num = 2.0 + P * np.sin(k * (x1 - x2))
        den = 2.0 - P * np.cos(k * (x1 + x2))
    else:
        raise ValueError(f"unknown variant {variant!r}; expected one of {TRIG_VARIANTS}")
    return amplitude * num / den


def trig_field(g: GridPair, amplitude: float, P: float, eps: float, variant: str) -> np.ndarray:
    if not abs(P) < 2.0:
        raise ValueError(f"|P| must be < 2 to keep the denominator positive, got {P}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    xc = g.cell_centers
    return trig_formula(xc[:, 0], xc[:, 1], amplitude, P, eps, variant)


def high_contrast_mean(
    g: GridPair,
    n_channels: int,
    background: float,
    contrast: float,
    seed: int,
    n_inclusions: int | None = None,
) -> np.ndarray:
    """Synthetic high-contrast medium: background plus straight channels and inclusions.

    Channels are axis-aligned strips running most of the way across the
    domain; inclusions are small rectangles. Everything not covered is at
    ``background``; covered cells take ``contrast``. Deterministic in ``seed``.
    """
    if not (background > 0 and contrast > background):
        raise ValueError("need contrast > background > 0")
    if n_channels < 0:
        raise ValueError("n_channels must be non-negative")
    nf = g.nf
    a = np.full((nf, nf), float(background))
    if n_channels == 0 and not n_inclusions:
        return a.ravel()
    rng = np.random.default_rng(seed)
    n_inclusions = n_channels if n_inclusions is None else n_inclusions
    width = max(1, nf // 50)
    for _ in range(n_channels):
        horizontal = rng.integers(2) == 0
        pos = rng.integers(nf // 10, nf - nf // 10 - width + 1)
        start = rng.integers(0, max(1, nf // 10))
        stop = nf - rng.integers(0, max(1, nf // 10))
        if horizontal:
            a[pos:pos + width, start:stop] = contrast
        else:
            a[start:stop, pos:pos + width] = contrast
    for _ in range(n_inclusions):
        w = rng.integers(width, 3 * width + 1)
        hgt = rng.integers(width, 3 * width + 1)
        cx = rng.integers(0, nf - w + 1)
        cy = rng.integers(0, nf - hgt + 1)
        a[cy:cy + hgt, cx:cx + w] = contrast
    if a.min() != background:
        raise RuntimeError("generated medium has no background cells left")
    return a.ravel()


def raster_import(path, g: GridPair, scale: float = 1.0) -> np.ndarray:
    """Read a whitespace-separated matrix (top row is y = 1) onto the fine cells.

    Each raster dimension must divide the number of fine cells per side; the
    raster is replicated blockwise (nearest-cell resampling) and scaled.
    """
    path = Path(path)
    try:
        data = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed raster ({exc})") from exc
    if data.size == 0:
        raise ValueError(f"{path}: empty raster")
    if not np.all(np.isfinite(data)) or np.any(data <= 0):
        bad = np.argwhere(~(data > 0))
        raise ValueError(f"{path}: raster values must be positive; first bad entry at row/col {tuple(bad[0])}")
    rows, cols = data.shape
    nf = g.nf
    if nf % rows or nf % cols:
        raise ValueError(f"{path}: raster {rows}x{cols} does not divide the {nf}x{nf} fine grid")
    field = np.repeat(np.repeat(data[::-1], nf // rows, axis=0), nf // cols, axis=1)
    return scale * field.ravel()


@dataclass
class CoefficientModel:
    """Mean field plus ``r`` fluctuation fields, all per fine cell."""

    abar: np.ndarray
    fluct: list

    def __post_init__(self):
        self.abar = np.asarray(self.abar, dtype=float).ravel()
        self.fluct = [np.asarray(f, dtype=float).ravel() for f in self.fluct]
        for i, f in enumerate(self.fluct):
            if f.shape != self.abar.shape:
                raise ValueError(f"fluctuation {i} has {f.size} cells, mean has {self.abar.size}")
        margin = self.abar - sum((np.abs(f) for f in self.fluct), np.zeros_like(self.abar))
        if np.any(margin <= 0):
            c = int(np.argmin(margin))
            raise ValueError(
                f"coefficient not uniformly positive: abar - sum|a_i| = {margin[c]:.4g} at cell {c}"
            )

    @property
    def r(self) -> int:
        return len(self.fluct)

    @property
    def a_min(self) -> float:
        return float(np.min(self.abar - sum(np.abs(f) for f in self.fluct)))

    @property
    def a_max(self) -> float:
        return float(np.max(self.abar + sum(np.abs(f) for f in self.fluct)))

    def check(self, g: GridPair) -> "CoefficientModel":
        as_cell_field(self.abar, g, "abar")
        for i, f in enumerate(self.fluct):
            as_cell_field(f, g, f"a_{i + 1}")
        return self

    def sample(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return self.abar + sum(x * f for x, f in zip(xi, self.fluct))


# Fluctuation specs (amplitude, P, eps, variant) of the two reference setups.
EXAMPLE1_FLUCTUATIONS = [
    (0.04, 1.6, 1 / 8, "diag-sin"),
    (0.08, 1.5, 1 / 7, "axis-cos"),
    (0.16, 1.4, 1 / 6, "shifted"),
]
EXAMPLE2_FLUCTUATIONS = [
    (0.02, P, eps, "diag-sum") for P, eps in zip((1.4, 1.5, 1.6, 1.7), (1 / 9, 1 / 8, 1 / 7, 1 / 6))
]
