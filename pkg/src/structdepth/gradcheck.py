"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocks, losses

GRADCHECK_TOL = 1e-4
DEFAULT_EPS = 1e-4
# entries where both gradients are below this are compared absolutely
MAGNITUDE_FLOOR = 1e-6

BLOCK_NAMES = ("sab", "gcb", "losses")


@dataclass
class GradcheckReport:
    block: str
    seed: int
    eps: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = GRADCHECK_TOL) -> bool:
        return self.max_error < tol

    def as_dict(self) -> dict:
        return {
            "block": self.block,
            "seed": self.seed,
            "eps": self.eps,
            "errors": dict(self.errors),
            "max_error": self.max_error,
            "passed": self.passed(),
        }


def numerical_gradient(f, arr: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr``, perturbed in place."""
    grad = np.zeros(arr.shape)
    flat = grad.reshape(-1)
    for i in range(arr.size):
        old = arr.flat[i]
        arr.flat[i] = old + eps
        fp = f()
        arr.flat[i] = old - eps
        fm = f()
        arr.flat[i] = old
        flat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), MAGNITUDE_FLOOR)
    return float(np.max(np.abs(a - n) / scale))


def _as_arrays(params):
    # scalar biases become 0-d arrays so they can be perturbed in place
    for name in blocks.param_names(params):
        value = getattr(params, name)
        if not isinstance(value, np.ndarray):
            setattr(params, name, np.array(float(value)))
    return params


def check_sab(seed: int = 0, eps: float = DEFAULT_EPS) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 5))
    h, w = (int(v) for v in rng.integers(4, 9, size=2))
    d_next = rng.normal(size=(c, h, w))
    gcb_feat = rng.normal(size=(c, h, w))
    params = _as_arrays(blocks.SabParams.random(c, rng))
    up_out = rng.normal(size=(c, h, w))
    up_att = rng.normal(size=(h, w))

    def objective():
        out, att, _ = blocks.sab_forward(d_next, gcb_feat, params)
        return float((out * up_out).sum() + (att * up_att).sum())

    _, _, cache = blocks.sab_forward(d_next, gcb_feat, params)
    grads = blocks.sab_backward(up_out, cache, up_att)
    report = GradcheckReport("sab", seed, eps)
    report.errors["d_next"] = relative_error(grads.d_next, numerical_gradient(objective, d_next, eps))
    report.errors["gcb_feat"] = relative_error(grads.gcb_feat, numerical_gradient(objective, gcb_feat, eps))
    for name in blocks.param_names(params):
        num = numerical_gradient(objective, getattr(params, name), eps)
        report.errors[name] = relative_error(getattr(grads, name), num)
    return report


def check_gcb(seed: int = 0, eps: float = DEFAULT_EPS) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 5))
    ratio = 2 if c % 2 == 0 and c >= 4 else 1
    h, w = (int(v) for v in rng.integers(4, 9, size=2))
    x = rng.normal(size=(c, h, w))
    params = _as_arrays(blocks.GcbParams.random(c, ratio, rng))
    upstream = rng.normal(size=(c, h, w))

    def objective():
        out, _ = blocks.gcb_forward(x, params)
        return float((out * upstream).sum())

    _, cache = blocks.gcb_forward(x, params)
    grads = blocks.gcb_backward(upstream, cache)
    report = GradcheckReport("gcb", seed, eps)
    report.errors["x"] = relative_error(grads.x, numerical_gradient(objective, x, eps))
    for name in blocks.param_names(params):
        num = numerical_gradient(objective, getattr(params, name), eps)
        report.errors[name] = relative_error(getattr(grads, name), num)
    return report


def _berhu_inputs(rng, size=8, clearance=1e-3):
    """Random maps whose residuals stay clear of the BerHu junction and of ties for the maximum."""
    gt = rng.uniform(1.0, 5.0, (size, size))
    while True:
        res = rng.normal(0.0, 0.5, (size, size))
        a = np.sort(np.abs(res).ravel())
        c = losses.BERHU_C_FRACTION * a[-1]
        if np.min(np.abs(a - c)) > clearance and a[-1] - a[-2] > clearance:
            break
    return gt + res, gt


def check_losses(seed: int = 0, eps: float = DEFAULT_EPS) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    report = GradcheckReport("losses", seed, eps)

    pred, gt = _berhu_inputs(rng)
    gt_map = losses.as_depth_map(gt)
    report.errors["berhu"] = relative_error(
        losses.berhu_with_grad(pred, gt_map)[1],
        numerical_gradient(lambda: losses.berhu(pred, gt_map), pred, eps),
    )
    weights = np.where(rng.random(gt.shape) < 0.3, 5.0, 1.0)
    report.errors["berhu_weighted"] = relative_error(
        losses.berhu_with_grad(pred, gt_map, weights)[1],
        numerical_gradient(lambda: losses.berhu(pred, gt_map, weights), pred, eps),
    )

    gt = rng.uniform(1.0, 5.0, (8, 8))
    pred = gt * rng.uniform(0.7, 1.3, (8, 8))
    gt_map = losses.as_depth_map(gt)
    report.errors["gradient"] = relative_error(
        losses.scale_invariant_gradient_with_grad(pred, gt_map)[1],
        numerical_gradient(lambda: losses.scale_invariant_gradient(pred, gt_map), pred, eps),
    )
    report.errors["normal"] = relative_error(
        losses.normal_loss_with_grad(pred, gt_map)[1],
        numerical_gradient(lambda: losses.normal_loss(pred, gt_map), pred, eps),
    )

    n = 12
    depth_gt = rng.uniform(1.0, 5.0, n)
    depth_gt[1] = depth_gt[0] * 1.005  # guarantees some "equal" pairs
    depth_pred = rng.uniform(1.0, 5.0, n)

    def gfrl_at(values):
        pts = [losses.SamplePoint(0, i, float(depth_gt[i]), float(values[i])) for i in range(n)]
        return losses.gfrl_with_grad(pts)

    report.errors["gfrl"] = relative_error(
        gfrl_at(depth_pred)[1],
        numerical_gradient(lambda: gfrl_at(depth_pred)[0], depth_pred, eps),
    )
    return report


_CHECKS = {"sab": check_sab, "gcb": check_gcb, "losses": check_losses}


def gradcheck(block: str, seed: int = 0, epsilon: float = DEFAULT_EPS) -> GradcheckReport:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    try:
        check = _CHECKS[block]
    except KeyError:
        raise ValueError(f"unknown block {block!r}; choose from {', '.join(BLOCK_NAMES)}") from None
    return check(seed, epsilon)
