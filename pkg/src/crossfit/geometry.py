"""Coordinate grids, optic-disc translation alignment, and sinusoidal embeddings.

Everything here is plain float64 numpy: position embeddings are constants of
the geometry, never trained, so none of it touches the autodiff tape. The
grid convention is corner-aligned: an axis with n > 1 cells spans [-1, 1]
endpoint to endpoint; a single-cell axis sits at 0.

Aligned grids are pure translations of regular grids. A Grid carries its
accumulated per-axis offset explicitly, so translation-related checks can be
stated exactly instead of through floating-point subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, ShapeError

__all__ = [
    "RelCoord", "Grid", "regular_grid", "align_grid", "downsample_grid",
    "denormalize", "sinusoidal_pe", "aligned_position_embeddings",
    "regular_position_embedding",
]


@dataclass(frozen=True)
class RelCoord:
    """Optic-disc center relative to image extent; both components in [0, 1]."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ContractError(f"relative coordinate ({self.x}, {self.y}) outside [0,1]^2")


class Grid:
    """H x W x 2 coordinate field: channel 0 is x (columns), channel 1 is y (rows)."""

    __slots__ = ("coords", "aligned", "offset")

    def __init__(self, coords: np.ndarray, aligned: bool, offset: np.ndarray):
        self.coords = coords
        self.aligned = aligned
        self.offset = offset  # (2,): the translation applied on top of regular

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[0], self.coords.shape[1]


def _axis_coords(n: int) -> np.ndarray:
    if n < 1:
        raise ContractError(f"grid extent must be >= 1, got {n}")
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def _regular_coords(h: int, w: int) -> np.ndarray:
    xs = _axis_coords(w)
    ys = _axis_coords(h)
    coords = np.empty((h, w, 2))
    coords[:, :, 0] = xs[None, :]
    coords[:, :, 1] = ys[:, None]
    return coords


def regular_grid(h: int, w: int) -> Grid:
    return Grid(_regular_coords(h, w), aligned=False, offset=np.zeros(2))


def align_grid(g: Grid, od_fixed: RelCoord, od_moving: RelCoord) -> Grid:
    """Translate by twice the optic-disc displacement.

    The factor 2 converts a displacement in [0,1] relative units to the
    [-1,1] span of the grid. Offsets accumulate, so aligning an already
    aligned grid composes translations. Coordinates may leave [-1,1].
    """
    delta = np.array([2.0 * (od_moving.x - od_fixed.x),
                      2.0 * (od_moving.y - od_fixed.y)])
    offset = g.offset + delta
    h, w = g.shape
    coords = _regular_coords(h, w) + offset[None, None, :]
    return Grid(coords, aligned=True, offset=offset)


def downsample_grid(g: Grid, h: int, w: int) -> Grid:
    """Bilinear resample of the coordinate field at corner-aligned targets.

    Every grid here is regular-plus-translation, and bilinear interpolation
    reproduces affine fields exactly, so the resample collapses to the
    closed form: the coarse regular grid carrying the same offset.
    """
    H, W = g.shape
    if h > H or w > W:
        raise ShapeError(f"cannot downsample {H}x{W} grid to {h}x{w}")
    coords = _regular_coords(h, w) + g.offset[None, None, :]
    return Grid(coords, aligned=g.aligned, offset=g.offset.copy())


def denormalize(g: Grid) -> np.ndarray:
    """Map normalized coordinates to positions in [0, extent-1] per axis.

    Out-of-range coordinates of aligned grids produce out-of-range positions;
    the sinusoids downstream accept any real, so nothing is clamped.
    """
    h, w = g.shape
    pos = np.empty_like(g.coords)
    pos[:, :, 0] = (g.coords[:, :, 0] + 1.0) / 2.0 * (w - 1)
    pos[:, :, 1] = (g.coords[:, :, 1] + 1.0) / 2.0 * (h - 1)
    return pos


def sinusoidal_pe(positions: np.ndarray, d_t: int) -> np.ndarray:
    """Two-axis sine/cosine embedding, (h, w, 2) positions -> (h*w, d_t) rows.

    The first d_t/2 channels encode x, the last d_t/2 encode y. Within each
    half, channel pair (2i, 2i+1) holds sin and cos of pos / 10000^(2i / (d_t/2)).
    Row i*w + j describes cell (i, j) (row-major, matching feature flatten).
    """
    if d_t % 4 != 0:
        raise ContractError(f"embedding width must be divisible by 4, got {d_t}")
    if positions.ndim != 3 or positions.shape[2] != 2:
        raise ShapeError(f"positions must be (h, w, 2), got {positions.shape}")
    h, w, _ = positions.shape
    half = d_t // 2
    freqs = np.arange(half // 2)
    inv_denom = 10000.0 ** (-2.0 * freqs / half)          # (half/2,)
    out = np.empty((h * w, d_t))
    for axis, base in ((0, 0), (1, half)):
        angles = positions[:, :, axis].reshape(-1, 1) * inv_denom[None, :]
        out[:, base + 0:base + half:2] = np.sin(angles)
        out[:, base + 1:base + half:2] = np.cos(angles)
    return out


def regular_position_embedding(h: int, w: int, d_t: int) -> np.ndarray:
    """Embedding of the plain corner-aligned grid (both fields identical)."""
    return sinusoidal_pe(denormalize(regular_grid(h, w)), d_t)


def aligned_position_embeddings(od1: RelCoord, od2: RelCoord, H: int, W: int,
                                h: int, w: int, d_t: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-field embeddings: field 2 keeps the regular grid, field 1 gets the
    optic-disc-aligned grid built at image resolution H x W, then downsampled
    to the feature resolution h x w.

    With od1 == od2 the translation is exactly zero and the two returned
    arrays are bit-for-bit identical.
    """
    pe2 = regular_position_embedding(h, w, d_t)
    g = align_grid(regular_grid(H, W), od1, od2)
    pe1 = sinusoidal_pe(denormalize(downsample_grid(g, h, w)), d_t)
    return pe1, pe2
