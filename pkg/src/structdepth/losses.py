"""Training losses for depth regression, each with an analytic gradient.

Every loss is reduced by a mean over the pixels (or pairs) that contribute,
so values do not grow with resolution. Gradients are taken with respect to
the predicted depth values; invalid pixels receive zero gradient.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import (
    WeightMask,
    as_depth_map,
    compute_normals,
    forward_differences_adjoint,
)

DEFAULT_SPACINGS = (1, 2, 4, 8, 16)
DEFAULT_LAMBDAS = (1.0, 1.0, 1.0, 0.5)
DEFAULT_GAMMA = 2.0
DEFAULT_TAU = 0.02
DEFAULT_GRID = 16
BERHU_C_FRACTION = 0.2


class EmptyOverlapError(ValueError):
    def __init__(self, what="depth maps"):
        super().__init__(f"empty overlap: no jointly-valid pixels between {what}")


class Stage(enum.IntEnum):
    I = 1  # noqa: E741
    II = 2
    III = 3


def _pair(pred, gt):
    pred = as_depth_map(pred)
    gt = as_depth_map(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def _weight_array(weights, shape):
    if weights is None:
        return None
    w = weights.weights if isinstance(weights, WeightMask) else np.asarray(weights, dtype=np.float64)
    if w.shape != shape:
        raise ValueError(f"weight mask shape {w.shape} does not match depth shape {shape}")
    return w


# ---------------------------------------------------------------- BerHu


def berhu_threshold(residuals: np.ndarray) -> float:
    return BERHU_C_FRACTION * float(np.max(np.abs(residuals)))


def berhu_penalty(x, c):
    """Reversed Huber |x|_b: L1 up to ``c``, (x^2 + c^2) / 2c beyond."""
    ax = np.abs(x)
    if c == 0:
        return ax.astype(np.float64)
    return np.where(ax <= c, ax, (x * x + c * c) / (2.0 * c))


def _berhu_flat(res, w):
    # res: residuals pred - gt over jointly-valid pixels; w: weights or None
    n = res.size
    c = berhu_threshold(res)
    if c == 0.0:
        return 0.0, np.zeros(n)
    ax = np.abs(res)
    l2 = ax > c
    terms = np.where(l2, (res * res + c * c) / (2.0 * c), ax)
    grad = np.where(l2, res / c, np.sign(res))
    # c = 0.2 * max|r| also moves with the arg-max pixel
    dterm_dc = np.where(l2, 0.5 - (res * res) / (2.0 * c * c), 0.0)
    if w is not None:
        terms = terms * w
        grad = grad * w
        dterm_dc = dterm_dc * w
    k = int(np.argmax(ax))
    grad[k] += BERHU_C_FRACTION * np.sign(res[k]) * dterm_dc.sum()
    return float(terms.sum() / n), grad / n


def berhu(pred, gt, weights: WeightMask | None = None) -> float:
    return berhu_with_grad(pred, gt, weights)[0]


def berhu_with_grad(pred, gt, weights: WeightMask | None = None) -> tuple[float, np.ndarray]:
    pred, gt = _pair(pred, gt)
    w = _weight_array(weights, pred.shape)
    mask = pred.valid & gt.valid
    if not mask.any():
        raise EmptyOverlapError()
    res = pred.values[mask] - gt.values[mask]
    value, g = _berhu_flat(res, None if w is None else w[mask])
    grad = np.zeros(pred.shape)
    grad[mask] = g
    return value, grad


def berhu_batch(preds, gts, weights=None) -> float:
    """BerHu over several maps with a single threshold shared by the whole batch."""
    residuals, ws = [], []
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = _pair(p, g)
        mask = p.valid & g.valid
        residuals.append(p.values[mask] - g.values[mask])
        if weights is not None:
            ws.append(_weight_array(weights[i], p.shape)[mask])
    res = np.concatenate(residuals) if residuals else np.zeros(0)
    if res.size == 0:
        raise EmptyOverlapError()
    return _berhu_flat(res, np.concatenate(ws) if weights is not None else None)[0]


# ---------------------------------------------------- gradient loss


def _resolve_spacings(spacings, shape):
    extent = max(shape)
    if spacings is None:
        return tuple(s for s in DEFAULT_SPACINGS if s < extent)
    spacings = tuple(int(s) for s in spacings)
    for s in spacings:
        if s < 1 or s >= extent:
            raise ValueError(f"spacing {s} must be in [1, {extent - 1}] for a {shape} map")
    return spacings


def _ratio_diff(a, b):
    # (b - a) / |b + a| and its partials; depths are positive so the sum is too
    den = b + a
    g = (b - a) / den
    dg_da = -2.0 * b / (den * den)
    dg_db = 2.0 * a / (den * den)
    return g, dg_da, dg_db


def scale_invariant_gradient(pred, gt, spacings=None, weights=None) -> float:
    return scale_invariant_gradient_with_grad(pred, gt, spacings, weights)[0]


def scale_invariant_gradient_with_grad(pred, gt, spacings=None, weights=None):
    """Multi-spacing normalized-difference loss.

    At spacing ``s`` a pixel contributes the x term if its neighbour ``s``
    columns to the right is valid in both maps, and the y term likewise
    ``s`` rows down. A pixel counts once per spacing if it has at least one
    term; the loss is the mean over those (spacing, pixel) entries.
    """
    pred, gt = _pair(pred, gt)
    w = _weight_array(weights, pred.shape)
    spacings = _resolve_spacings(spacings, pred.shape)
    joint = pred.valid & gt.valid
    p = np.where(joint, pred.values, 1.0)
    t = np.where(joint, gt.values, 1.0)
    h, wd = p.shape

    total = 0.0
    count = 0
    grad = np.zeros_like(p)
    for s in spacings:
        entry = np.zeros((h, wd), dtype=bool)
        sq = np.zeros((h, wd))
        dsq = []
        if s < wd:
            ok = joint[:, :-s] & joint[:, s:]
            gp, dpa, dpb = _ratio_diff(p[:, :-s], p[:, s:])
            gt_, _, _ = _ratio_diff(t[:, :-s], t[:, s:])
            diff = np.where(ok, gp - gt_, 0.0)
            sq[:, :-s] += diff * diff
            entry[:, :-s] |= ok
            dsq.append(("x", diff, dpa, dpb))
        if s < h:
            ok = joint[:-s, :] & joint[s:, :]
            gp, dpa, dpb = _ratio_diff(p[:-s, :], p[s:, :])
            gt_, _, _ = _ratio_diff(t[:-s, :], t[s:, :])
            diff = np.where(ok, gp - gt_, 0.0)
            sq[:-s, :] += diff * diff
            entry[:-s, :] |= ok
            dsq.append(("y", diff, dpa, dpb))
        wt = np.ones((h, wd)) if w is None else w
        total += float((sq * wt).sum())
        count += int(entry.sum())
        for axis, diff, dpa, dpb in dsq:
            if axis == "x":
                coef = 2.0 * diff * wt[:, :-s]
                grad[:, :-s] += coef * dpa
                grad[:, s:] += coef * dpb
            else:
                coef = 2.0 * diff * wt[:-s, :]
                grad[:-s, :] += coef * dpa
                grad[s:, :] += coef * dpb
    if count == 0:
        raise EmptyOverlapError()
    grad[~joint] = 0.0
    return total / count, grad / count


# ------------------------------------------------------- normal loss


def normal_loss_terms(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ``1 - cos`` between the two normal fields, and the mask where it is defined."""
    pred, gt = _pair(pred, gt)
    n_hat = compute_normals(pred)
    n = compute_normals(gt)
    mask = n_hat.usable & n.usable & pred.valid & gt.valid
    a = n.vectors
    b = n_hat.vectors
    cos = (a * b).sum(axis=2) / (np.linalg.norm(a, axis=2) * np.linalg.norm(b, axis=2))
    # rounding can push cos a hair outside [-1, 1]
    return np.where(mask, np.clip(1.0 - cos, 0.0, 2.0), 0.0), mask


def normal_loss(pred, gt, weights=None) -> float:
    return normal_loss_with_grad(pred, gt, weights)[0]


def normal_loss_with_grad(pred, gt, weights=None):
    pred, gt = _pair(pred, gt)
    w = _weight_array(weights, pred.shape)
    terms, mask = normal_loss_terms(pred, gt)
    n = int(mask.sum())
    if n == 0:
        raise EmptyOverlapError()
    wt = np.ones(pred.shape) if w is None else w
    value = float((terms * wt)[mask].sum() / n)

    a = compute_normals(gt).vectors
    b = compute_normals(pred).vectors
    na = np.linalg.norm(a, axis=2, keepdims=True)
    nb = np.linalg.norm(b, axis=2, keepdims=True)
    cos = (a * b).sum(axis=2, keepdims=True) / (na * nb)
    dcos_db = a / (na * nb) - cos * b / (nb * nb)
    # term = 1 - cos and b = (-gx, -gy, 1), so d term / d gx = +d cos / d b_x
    coef = np.where(mask, wt, 0.0) / n
    d_gx = coef * dcos_db[..., 0]
    d_gy = coef * dcos_db[..., 1]
    grad = forward_differences_adjoint(d_gx, d_gy)
    grad[~pred.valid] = 0.0
    return value, grad


# --------------------------------------------------- relative losses


@dataclass(frozen=True)
class SamplePoint:
    row: int
    col: int
    depth_gt: float
    depth_pred: float


@dataclass(frozen=True)
class OrdinalPair:
    a: SamplePoint
    b: SamplePoint
    relation: int


def _block_edges(n, parts):
    base, rem = divmod(n, parts)
    sizes = [base] * (parts - rem) + [base + 1] * rem
    return np.concatenate([[0], np.cumsum(sizes)])


def sample_grid_points(gt, pred, rows: int = DEFAULT_GRID, cols: int = DEFAULT_GRID, rng=None) -> list[SamplePoint]:
    """One random jointly-valid pixel from each cell of a ``rows x cols`` grid.

    Cells are visited in row-major order; a cell with no valid pixel is skipped.
    """
    gt, pred = _pair(gt, pred)
    h, w = gt.shape
    if rows < 1 or cols < 1 or h < rows or w < cols:
        raise ValueError(f"cannot split a {h}x{w} image into {rows}x{cols} blocks")
    rng = np.random.default_rng(rng)
    joint = gt.valid & pred.valid
    re = _block_edges(h, rows)
    ce = _block_edges(w, cols)
    points = []
    for bi in range(rows):
        for bj in range(cols):
            block = joint[re[bi] : re[bi + 1], ce[bj] : ce[bj + 1]]
            rr, cc = np.nonzero(block)
            if rr.size == 0:
                continue
            k = int(rng.integers(rr.size))
            r, c = int(re[bi] + rr[k]), int(ce[bj] + cc[k])
            points.append(SamplePoint(r, c, float(gt.values[r, c]), float(pred.values[r, c])))
    return points


def ordinal_relation(d1: float, d2: float, tau: float = DEFAULT_TAU) -> int:
    if not (d1 > 0 and d2 > 0):
        raise ValueError(f"depths must be positive, got {d1}, {d2}")
    if abs(d1 - d2) / max(d1, d2) < tau:
        return 0
    return 1 if d1 > d2 else -1


def ordinal_pairs(points, tau: float = DEFAULT_TAU) -> list[OrdinalPair]:
    return [OrdinalPair(a, b, ordinal_relation(a.depth_gt, b.depth_gt, tau)) for a, b in itertools.combinations(points, 2)]


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _pair_arrays(points, tau):
    if len(points) < 2:
        raise ValueError(f"need at least 2 points to form pairs, got {len(points)}")
    gt = np.array([p.depth_gt for p in points], dtype=np.float64)
    pred = np.array([p.depth_pred for p in points], dtype=np.float64)
    i, j = np.triu_indices(len(points), k=1)
    r = np.array([ordinal_relation(gt[a], gt[b], tau) for a, b in zip(i, j)], dtype=np.float64)
    return pred, i, j, r


def gfrl(points, gamma: float = DEFAULT_GAMMA, tau: float = DEFAULT_TAU) -> float:
    return gfrl_with_grad(points, gamma, tau)[0]


def gfrl_pair_term(r: int, diff: float, gamma: float = DEFAULT_GAMMA) -> float:
    """Loss of one pair with relation ``r`` and predicted difference ``d1 - d2``."""
    if r == 0:
        return diff * diff
    z = -r * diff
    return float(_sigmoid(z) ** gamma * _softplus(z))


def gfrl_with_grad(points, gamma: float = DEFAULT_GAMMA, tau: float = DEFAULT_TAU):
    """Focal ranking loss averaged over all unordered point pairs.

    The gradient is returned per point, in the order of ``points``.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    pred, i, j, r = _pair_arrays(points, tau)
    diff = pred[i] - pred[j]
    z = -r * diff
    sp = _softplus(z)
    sig = _sigmoid(z)
    ranked = r != 0
    terms = np.where(ranked, sig**gamma * sp, diff * diff)
    # d/dz [sig^g * softplus(z)] = sig^g * (g * (1 - sig) * softplus + sig)
    dz = sig**gamma * (gamma * (1.0 - sig) * sp + sig)
    dterm_ddiff = np.where(ranked, -r * dz, 2.0 * diff)
    npairs = diff.size
    grad = np.zeros(len(points))
    np.add.at(grad, i, dterm_ddiff)
    np.add.at(grad, j, -dterm_ddiff)
    return float(np.mean(terms)), grad / npairs


def relative_loss(points, tau: float = DEFAULT_TAU) -> float:
    """Plain pairwise ranking loss, i.e. the focal variant with no modulation."""
    pred, i, j, r = _pair_arrays(points, tau)
    diff = pred[i] - pred[j]
    terms = np.where(r != 0, _softplus(-r * diff), diff * diff)
    return float(np.mean(terms))


def points_gradient_to_map(points, grad, shape) -> np.ndarray:
    out = np.zeros(shape)
    for p, g in zip(points, grad):
        out[p.row, p.col] += g
    return out


# ------------------------------------------------------------ total


@dataclass
class LossBreakdown:
    berhu: float
    gradient: float
    normal: float
    gfrl: float
    total: float
    stage: Stage
    weights: tuple[float, float, float, float] = field(default=DEFAULT_LAMBDAS)

    def as_dict(self) -> dict:
        return {
            "berhu": self.berhu,
            "gradient": self.gradient,
            "normal": self.normal,
            "gfrl": self.gfrl,
            "total": self.total,
            "stage": int(self.stage),
            "weights": list(self.weights),
        }


def stage_total(components, stage, lambdas=DEFAULT_LAMBDAS) -> float:
    """Weighted sum of (berhu, gradient, normal, gfrl) with the terms of later stages masked out."""
    stage = Stage(stage)
    active = {Stage.I: 1, Stage.II: 2, Stage.III: 4}[stage]
    return float(sum(lam * v for lam, v in list(zip(lambdas, components))[:active]))


def total_loss(
    pred,
    gt,
    stage=Stage.III,
    lambdas=DEFAULT_LAMBDAS,
    gamma: float = DEFAULT_GAMMA,
    edge_weights: WeightMask | None = None,
    rng=None,
    *,
    tau: float = DEFAULT_TAU,
    spacings=None,
    grid: int = DEFAULT_GRID,
    weight_all_terms: bool = False,
) -> LossBreakdown:
    """Evaluate all four terms and combine them according to the training stage.

    ``edge_weights`` scales the BerHu per-pixel terms; with
    ``weight_all_terms`` it also scales the gradient and normal terms. The
    sampling grid shrinks to the image size for images smaller than ``grid``.
    """
    pred, gt = _pair(pred, gt)
    stage = Stage(stage)
    lambdas = tuple(float(x) for x in lambdas)
    if len(lambdas) != 4:
        raise ValueError("expected four loss weights")
    rng = np.random.default_rng(rng)

    lb = berhu(pred, gt, edge_weights)
    other_w = edge_weights if weight_all_terms else None
    lg = scale_invariant_gradient(pred, gt, spacings, other_w) if max(pred.shape) > 1 else 0.0
    ln = normal_loss(pred, gt, other_w)
    points = sample_grid_points(gt, pred, min(grid, gt.height), min(grid, gt.width), rng)
    lr = gfrl(points, gamma, tau) if len(points) >= 2 else 0.0

    total = stage_total((lb, lg, ln, lr), stage, lambdas)
    return LossBreakdown(lb, lg, ln, lr, total, stage, lambdas)
