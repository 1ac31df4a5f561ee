"""Depth-map containers, surface normals and the edge-aware boundary weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

EDGE_WEIGHT = 5.0
BOUNDARY_KERNEL = 5

# 5-tap Gaussian, sigma 1.4
_GAUSS_SIGMA = 1.4
_GAUSS_TAPS = np.exp(-(np.arange(-2, 3) ** 2) / (2.0 * _GAUSS_SIGMA**2))
_GAUSS_TAPS /= _GAUSS_TAPS.sum()


@dataclass
class DepthMap:
    """H x W depth grid in meters with a per-pixel validity mask.

    Use :meth:`from_values` to build one from raw sensor data: pixels that are
    non-finite or non-positive get ``valid=False``.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError(f"depth values must be 2-D, got shape {self.values.shape}")

    @classmethod
    def from_values(cls, values) -> DepthMap:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(values) & (values > 0)
        return cls(values, valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def equals(self, other: DepthMap) -> bool:
        """Same shape, same validity and bit-identical values on valid pixels."""
        if self.shape != other.shape or not np.array_equal(self.valid, other.valid):
            return False
        a = self.values[self.valid]
        b = other.values[other.valid]
        return a.tobytes() == b.tobytes()


def as_depth_map(obj) -> DepthMap:
    if isinstance(obj, DepthMap):
        return obj
    return DepthMap.from_values(obj)


@dataclass
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class WeightMask:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]


@dataclass
class NormalField:
    """Un-normalized normals ``[-dx, -dy, 1]`` stored as an H x W x 3 array.

    ``usable`` is False where a pixel or one of the neighbours its forward
    differences read from is invalid.
    """

    vectors: np.ndarray
    usable: np.ndarray = field(default=None)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 3:
            raise ValueError(f"normal field must be H x W x 3, got {self.vectors.shape}")
        if self.usable is None:
            self.usable = np.all(np.isfinite(self.vectors), axis=2)
        self.usable = np.asarray(self.usable, dtype=bool)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def validate(depth: DepthMap) -> list[str]:
    """Return human-readable invariant violations; empty when the map is well formed."""
    problems = []
    values = np.asarray(depth.values)
    valid = np.asarray(depth.valid)
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        return [f"shape {values.shape} is not a non-empty 2-D grid"]
    if values.shape != valid.shape:
        return [f"values shape {values.shape} != valid shape {valid.shape}"]
    with np.errstate(invalid="ignore"):
        bad = valid & ~(np.isfinite(values) & (values > 0))
    for r, c in zip(*np.nonzero(bad)):
        problems.append(f"pixel ({r}, {c}) marked valid with value {values[r, c]!r}")
    return problems


def forward_differences(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences along x (columns) and y (rows), last column/row replicated."""
    h, w = values.shape
    gx = np.zeros_like(values)
    gy = np.zeros_like(values)
    if w > 1:
        gx[:, :-1] = values[:, 1:] - values[:, :-1]
        gx[:, -1] = gx[:, -2]
    if h > 1:
        gy[:-1, :] = values[1:, :] - values[:-1, :]
        gy[-1, :] = gy[-2, :]
    return gx, gy


def forward_differences_adjoint(grad_x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Transpose of :func:`forward_differences`, for backpropagation."""
    h, w = grad_x.shape
    out = np.zeros_like(grad_x)
    if w > 1:
        gx = grad_x.copy()
        gx[:, -2] += gx[:, -1]
        out[:, 1:] += gx[:, :-1]
        out[:, :-1] -= gx[:, :-1]
    if h > 1:
        gy = grad_y.copy()
        gy[-2, :] += gy[-1, :]
        out[1:, :] += gy[:-1, :]
        out[:-1, :] -= gy[:-1, :]
    return out


def normal_support(valid: np.ndarray) -> np.ndarray:
    """Pixels whose forward-difference stencil touches only valid pixels."""
    h, w = valid.shape
    ok = valid.copy()
    if w > 1:
        right = np.empty_like(valid)
        right[:, :-1] = valid[:, 1:]
        right[:, -1] = valid[:, -2]
        ok &= right
    if h > 1:
        down = np.empty_like(valid)
        down[:-1, :] = valid[1:, :]
        down[-1, :] = valid[-2, :]
        ok &= down
    return ok


def compute_normals(depth: DepthMap) -> NormalField:
    depth = as_depth_map(depth)
    usable = normal_support(depth.valid)
    values = np.where(depth.valid, depth.values, 0.0)
    gx, gy = forward_differences(values)
    gx[~usable] = 0.0
    gy[~usable] = 0.0
    vectors = np.stack([-gx, -gy, np.ones_like(gx)], axis=2)
    return NormalField(vectors, usable)


def _fill_invalid(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    # nearest-valid fill keeps sensor holes from producing spurious edges
    if valid.all():
        return values.copy()
    idx = ndimage.distance_transform_edt(~valid, return_distances=False, return_indices=True)
    return values[tuple(idx)]


def _smooth(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 2, mode="edge")
    h, w = img.shape
    rows = sum(_GAUSS_TAPS[k] * padded[:, k : k + w] for k in range(5))
    return sum(_GAUSS_TAPS[k] * rows[k : k + h, :] for k in range(5))


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(img, 1, mode="edge")
    h, w = img.shape

    def at(dy, dx):
        return p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1))
    gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1))
    return gx, gy


def gradient_magnitude(depth: DepthMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smoothed Sobel gradients (gx, gy, magnitude) as used by :func:`canny_edges`.

    Depth is shifted by its minimum valid value first, so the result does not
    depend on a constant depth offset.
    """
    depth = as_depth_map(depth)
    if not depth.valid.any():
        zeros = np.zeros(depth.shape)
        return zeros, zeros.copy(), zeros.copy()
    base = depth.values[depth.valid].min()
    shifted = np.where(depth.valid, depth.values - base, 0.0)
    smoothed = _smooth(_fill_invalid(shifted, depth.valid))
    gx, gy = _sobel(smoothed)
    mag = np.hypot(gx, gy)
    mag[~depth.valid] = 0.0
    return gx, gy, mag


# neighbour offsets (dy, dx) along the gradient, per quantized direction
_NMS_OFFSETS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def _non_max_suppression(gx, gy, mag):
    h, w = mag.shape
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    p = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in _NMS_OFFSETS.items():
        ahead = p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        behind = p[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        # strict against the pixel behind, non-strict ahead: a plateau keeps one pixel
        keep |= (sector == s) & (mag > behind) & (mag >= ahead)
    return keep & (mag > 0)


def canny_edges(depth: DepthMap, low: float | None = None, high: float | None = None) -> BinaryMask:
    """Canny edges of the depth values.

    ``low``/``high`` default to 0.1 and 0.2 of the largest gradient magnitude.
    Invalid pixels never become edges and do not link weak edges together.
    """
    depth = as_depth_map(depth)
    h, w = depth.shape
    if h < 5 or w < 5 or not depth.valid.any():
        return BinaryMask(np.zeros((h, w), dtype=bool))
    gx, gy, mag = gradient_magnitude(depth)
    peak = mag.max()
    if low is None:
        low = 0.1 * peak
    if high is None:
        high = 0.2 * peak
    if not 0 <= low <= high:
        raise ValueError(f"need 0 <= low <= high, got low={low}, high={high}")

    thin = _non_max_suppression(gx, gy, mag) & depth.valid
    weak = thin & (mag >= low)
    strong = weak & (mag >= high)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return BinaryMask(np.zeros((h, w), dtype=bool))
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[labels[strong]] = True
    seeded[0] = False
    return BinaryMask(seeded[labels])


def dilate(mask: BinaryMask, kernel: int) -> BinaryMask:
    """Square ``kernel x kernel`` dilation; the window is clipped at the border."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {kernel}")
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    r = kernel // 2
    h, w = bits.shape
    p = np.pad(bits, r, mode="constant", constant_values=False)
    rows = np.zeros((h + 2 * r, w), dtype=bool)
    for dx in range(kernel):
        rows |= p[:, dx : dx + w]
    out = np.zeros((h, w), dtype=bool)
    for dy in range(kernel):
        out |= rows[dy : dy + h, :]
    return BinaryMask(out)


def boundary_weight_mask(
    gt: DepthMap,
    low: float | None = None,
    high: float | None = None,
    kernel: int = BOUNDARY_KERNEL,
) -> WeightMask:
    edges = dilate(canny_edges(gt, low, high), kernel)
    return WeightMask(np.where(edges.bits, EDGE_WEIGHT, 1.0))
