"""Finite-difference verification of every recorded backward rule.

`check` compares analytic gradients from a fresh tape against central
differences for each parameter of a scalar-valued closure; `run_suite`
is the canned battery over all tensor primitives, layer ops, and the
three training losses, kept at 4x4(x4) spatial scale so the full sweep
stays well under a minute.

Checks demand float64 parameters: at 1e-4 step sizes the truncation
error of the central difference is ~1e-8 relative, far below the 1e-5
acceptance threshold, while float32 rounding alone would swamp it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import layers, losses, ndtensor as nd
from .errors import ParameterError
from .ndtensor import Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the scalar f() w.r.t. param.

    Perturbs param.data in place (restoring it) and evaluates f with
    recording disabled, so the probe leaves no trace on any tape.
    """
    if param.data.dtype != np.float64:
        raise ParameterError("finite differences need float64 parameters")
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    with nd.no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            upper = f().item()
            flat[i] = saved - h
            lower = f().item()
            flat[i] = saved
            grad[i] = (upper - lower) / (2.0 * h)
    return grad.reshape(param.shape)


def check(f: Callable[[], Tensor], params: Dict[str, Tensor],
          h: float = 1e-4, tol: float = 1e-5) -> List[CheckResult]:
    """Compare tape gradients of f() against central differences.

    Relative error per element is |a - n| / max(1, |a|, |n|); each
    result reports the worst element for one named parameter.
    """
    for name, p in params.items():
        if not isinstance(p, Tensor):
            raise ParameterError(f"parameter {name} is not a tensor")
        if p.data.dtype != np.float64:
            raise ParameterError(f"parameter {name} must be float64 for checking")
        if not p.requires_grad:
            raise ParameterError(f"parameter {name} does not require gradients")

    with nd.Tape():
        loss = f()
        nd.backward(loss)
        analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                    for name, p in params.items()}
    nd.zero_grads(list(params.values()))

    results = []
    for name, p in params.items():
        numeric = numeric_gradient(f, p, h=h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic[name]), np.abs(numeric)))
        rel = np.abs(analytic[name] - numeric) / denom
        results.append(CheckResult(name=name, max_rel_error=float(rel.max()), tol=tol))
    return results


# ---------------------------------------------------------------------------
# canned suite

def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64, requires_grad=True)


def _distinct(rng, shape, gap=0.37):
    """Values with pairwise gaps far above the FD step, for max/pool kinks."""
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n).astype(np.float64) * gap).reshape(shape),
                  requires_grad=True)


def _away_from_zero(rng, shape, margin=0.2):
    mag = rng.uniform(margin, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, dtype=np.float64, requires_grad=True)


class _FrozenUniform:
    """rng stand-in replaying one fixed draw, so dropout masks stay put
    across the many probe evaluations of a finite-difference run."""

    def __init__(self, rng, shape):
        self._draw = rng.random(shape)

    def random(self, shape):
        assert tuple(shape) == self._draw.shape
        return self._draw.copy()


def _suite_cases(rng) -> Dict[str, tuple]:
    cases: Dict[str, tuple] = {}

    def add_case(name, params, f):
        cases[name] = (f, params)

    # --- tensor primitives -------------------------------------------------
    x = _t(rng, (3, 4), 0.5, 1.5)
    y = _t(rng, (3, 4), 0.5, 1.5)
    add_case("add", {"x": x, "y": y}, lambda: nd.sum_(nd.add(x, y)))
    add_case("sub", {"x": x, "y": y}, lambda: nd.sum_(nd.mul(nd.sub(x, y), y)))
    add_case("mul", {"x": x, "y": y}, lambda: nd.sum_(nd.mul(x, y)))
    add_case("div", {"x": x, "y": y}, lambda: nd.sum_(nd.div(x, y)))
    add_case("log", {"x": x}, lambda: nd.sum_(nd.log(x)))
    add_case("exp", {"x": x}, lambda: nd.sum_(nd.exp(nd.mul(x, -0.5))))
    add_case("pow", {"x": x}, lambda: nd.sum_(nd.pow_(x, 3.0)))
    xc = _away_from_zero(rng, (16,), margin=0.05)
    add_case("clamp", {"x": xc}, lambda: nd.sum_(nd.mul(nd.clamp(xc, -0.9, 0.9), xc)))
    xr = _t(rng, (4, 3, 2))
    add_case("sum", {"x": xr}, lambda: nd.sum_(nd.mul(nd.sum_(xr, axes=(1,)), 0.5)))
    add_case("mean", {"x": xr},
             lambda: nd.sum_(nd.mul(nd.mean(xr, axes=(0, 2)), nd.mean(xr, axes=(0, 2)))))
    xm = _distinct(rng, (4, 3, 2))
    add_case("max", {"x": xm}, lambda: nd.sum_(nd.max_(xm, axes=(0, 2))))
    a = _t(rng, (3, 4))
    b = _t(rng, (4, 2))
    add_case("matmul", {"a": a, "b": b}, lambda: nd.sum_(nd.exp(nd.mul(nd.matmul(a, b), 0.3))))
    xs = _t(rng, (2, 6))

    def structural():
        v = nd.transpose(nd.reshape(xs, (3, 4)), (1, 0))
        v = nd.pad_constant(v, ((1, 0), (0, 1)))
        w = nd.concat([v, v], axis=1)
        return nd.sum_(nd.mul(w[1:4, 2:6], 1.5))

    add_case("reshape_transpose_pad_concat_slice", {"x": xs}, structural)

    # --- layers, 2D then 3D ------------------------------------------------
    x2 = _t(rng, (2, 2, 4, 4))
    w2 = _t(rng, (3, 2, 3, 3), -0.5, 0.5)
    b2 = _t(rng, (3,), -0.1, 0.1)
    add_case("conv2d", {"x": x2, "w": w2, "b": b2},
             lambda: nd.sum_(layers.conv(x2, w2, b2, padding=layers.same_padding(3, 2))))
    w2s = _t(rng, (2, 2, 2, 2), -0.5, 0.5)
    add_case("conv2d_stride2", {"x": x2, "w": w2s},
             lambda: nd.sum_(layers.conv(x2, w2s, stride=2)))
    x3 = _t(rng, (1, 2, 4, 4, 4))
    w3 = _t(rng, (2, 2, 3, 3, 3), -0.3, 0.3)
    add_case("conv3d", {"x": x3, "w": w3},
             lambda: nd.sum_(layers.conv(x3, w3, padding=layers.same_padding(3, 3))))
    xu2 = _t(rng, (2, 3, 2, 2))
    wu2 = _t(rng, (3, 2, 2, 2), -0.5, 0.5)
    bu2 = _t(rng, (2,), -0.1, 0.1)
    add_case("upconv2d", {"x": xu2, "w": wu2, "b": bu2},
             lambda: nd.sum_(nd.mul(layers.upconv(xu2, wu2, bu2), 0.7)))
    xu3 = _t(rng, (1, 2, 2, 2, 2))
    wu3 = _t(rng, (2, 2, 1, 2, 2), -0.5, 0.5)
    add_case("upconv3d", {"x": xu3, "w": wu3},
             lambda: nd.sum_(nd.mul(layers.upconv(xu3, wu3, stride=(1, 2, 2)), 0.7)))
    xp2 = _distinct(rng, (2, 2, 4, 4))
    add_case("maxpool2d", {"x": xp2}, lambda: nd.sum_(layers.maxpool(xp2, 2)))
    xp3 = _distinct(rng, (1, 2, 4, 4, 4))
    add_case("maxpool3d", {"x": xp3}, lambda: nd.sum_(layers.maxpool(xp3, (1, 2, 2))))

    xb = _t(rng, (2, 3, 4, 4), -2.0, 2.0)
    gb = _t(rng, (3,), 0.5, 1.5)
    bb = _t(rng, (3,), -0.5, 0.5)

    def bn_train():
        rm = Tensor(np.zeros(3), dtype=np.float64)
        rv = Tensor(np.ones(3), dtype=np.float64)
        return nd.sum_(nd.mul(layers.batchnorm(xb, gb, bb, rm, rv, training=True), 0.3))

    add_case("batchnorm_train", {"x": xb, "gamma": gb, "beta": bb}, bn_train)

    rm_eval = Tensor(rng.uniform(-0.5, 0.5, size=3), dtype=np.float64)
    rv_eval = Tensor(rng.uniform(0.5, 1.5, size=3), dtype=np.float64)
    add_case("batchnorm_eval", {"x": xb, "gamma": gb, "beta": bb},
             lambda: nd.sum_(nd.mul(
                 layers.batchnorm(xb, gb, bb, rm_eval, rv_eval, training=False), 0.3)))

    xrl = _away_from_zero(rng, (2, 3, 4, 4))
    add_case("relu", {"x": xrl}, lambda: nd.sum_(nd.mul(layers.relu(xrl), xrl)))
    xsm = _t(rng, (2, 4, 4, 4), -2.0, 2.0)
    add_case("softmax", {"x": xsm},
             lambda: nd.sum_(nd.mul(layers.softmax_channels(xsm), xsm)))
    xd = _t(rng, (2, 3, 4, 4))
    frozen = _FrozenUniform(rng, xd.shape)
    add_case("dropout", {"x": xd},
             lambda: nd.sum_(nd.mul(layers.dropout(xd, 0.5, training=True, rng=frozen), xd)))

    # --- losses through softmax --------------------------------------------
    logits2 = _t(rng, (2, 4, 4, 4), -1.5, 1.5)
    targets2 = rng.integers(0, 4, size=(2, 4, 4))
    cfg = losses.LossConfig(class_weights=(0.5, 1.5, 1.0, 1.0))
    add_case("loss_ce", {"logits": logits2},
             lambda: losses.cross_entropy_loss(layers.softmax_channels(logits2), targets2, cfg))
    add_case("loss_dice", {"logits": logits2},
             lambda: losses.dice_loss(layers.softmax_channels(logits2), targets2, cfg))
    add_case("loss_dice_ce", {"logits": logits2},
             lambda: losses.combined_loss(layers.softmax_channels(logits2), targets2, cfg))
    logits3 = _t(rng, (1, 4, 4, 4, 4), -1.5, 1.5)
    targets3 = rng.integers(0, 4, size=(1, 4, 4, 4))
    add_case("loss_dice_ce_3d", {"logits": logits3},
             lambda: losses.combined_loss(layers.softmax_channels(logits3), targets3, cfg))

    return cases


def run_suite(seed: int = 0, h: float = 1e-4, tol: float = 1e-5) -> List[CheckResult]:
    """Full battery; results are named "<case>:<param>" in a stable order."""
    rng = np.random.default_rng(seed)
    results: List[CheckResult] = []
    for case_name, (f, params) in _suite_cases(rng).items():
        for r in check(f, params, h=h, tol=tol):
            results.append(CheckResult(name=f"{case_name}:{r.name}",
                                       max_rel_error=r.max_rel_error, tol=r.tol))
    return results
