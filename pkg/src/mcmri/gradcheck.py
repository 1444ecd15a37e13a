"""Central finite-difference checks of every tape operator.

Errors are norm-wise: ``||g_tape - g_fd|| / max(||g_tape||, ||g_fd||)`` per
differentiated tensor, in double precision with perturbation ``1e-6``.
Each graph output is reduced to a scalar by a fixed random weighting so
every output entry contributes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kspace
from .autodiff import Parameter, Tape, Tensor

EPS = 1e-6
OP_TOL = 1e-5
NET_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def weighted_sum(tape: Tape, x: Tensor, w: np.ndarray) -> Tensor:
    """Record the scalar ``sum(w * x)`` on ``tape``."""
    return tape._record("weighted_sum", (x,), np.array(np.sum(w * x.data)), lambda g: (float(g) * w,))


def check_graph(name, build, leaves, tol=OP_TOL, seed=0, scalar_out=False) -> list[CheckResult]:
    """Compare tape gradients of ``build(tape, *leaves)`` with finite differences.

    ``build`` returns a Tensor.  Unless ``scalar_out`` is set, the output is
    contracted with a fixed Gaussian weight array first.
    """
    probe = build(Tape(), *leaves)
    w = None if scalar_out else np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar_node(tape):
        out = build(tape, *leaves)
        return out if scalar_out else weighted_sum(tape, out, w)

    def f():
        return float(scalar_node(Tape()).data)

    for t in leaves:
        if isinstance(t, Parameter):
            t.zero_grad()
        else:
            t.grad = None
    tape = Tape()
    tape.backward(scalar_node(tape))
    results = []
    for i, t in enumerate(leaves):
        if not t.requires_grad:
            continue
        ad = t.grad if t.grad is not None else np.zeros(t.shape)
        ad = np.array(ad, dtype=np.float64)
        fd = numeric_grad(f, t.data)
        results.append(CheckResult(f"{name}:{t.name or i}", relative_error(ad, fd), tol))
    return results


def _leaf(rng, shape, name, scale=1.0, avoid_zero=0.0):
    a = scale * rng.standard_normal(shape)
    if avoid_zero:
        a = np.where(np.abs(a) < avoid_zero, np.sign(a + 1e-300) * (avoid_zero + np.abs(a)), a)
    return Tensor(a, requires_grad=True, name=name)


def op_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    x = _leaf(rng, (1, 2, 4, 4), "x")
    k = Parameter(rng.standard_normal((3, 2, 3, 3)), "kernel")
    b = Parameter(rng.standard_normal(3), "bias")
    out += check_graph("conv2d", lambda t, x, k, b: t.conv2d(x, k, b), [x, k, b], seed=seed)

    x = _leaf(rng, (2, 3, 4, 4), "x", avoid_zero=1e-3)
    out += check_graph("leaky_relu", lambda t, x: t.leaky_relu(x, 0.2), [x], seed=seed)

    x, y = _leaf(rng, (1, 2, 4, 4), "x"), _leaf(rng, (1, 2, 4, 4), "y")
    out += check_graph("add", lambda t, x, y: t.add(x, y), [x, y], seed=seed)

    a, c = _leaf(rng, (2, 1, 4, 4), "a"), _leaf(rng, (2, 3, 4, 4), "b")
    out += check_graph("concat_channels", lambda t, a, c: t.concat_channels([a, c]), [a, c], seed=seed)

    x = _leaf(rng, (1, 5, 4, 4), "x")
    out += check_graph("slice_channels", lambda t, x: t.slice_channels(x, 1, 4), [x], seed=seed)

    x = _leaf(rng, (1, 3, 4, 4), "x")
    gt = rng.random((1, 3, 4, 4))
    masks = np.stack([kspace.make_mask("random2d", 4, 4, 0.5, 0.1, seed=s).grid for s in range(3)])
    yv = np.where(masks, kspace.fft2(gt), 0)
    for lam in (0.0, 1.0, 1e6):
        out += check_graph(f"df_layer(lam={lam:g})", lambda t, x: t.df_layer(x, yv, masks, lam), [x], seed=seed)

    p, q = _leaf(rng, (2, 3, 4, 4), "pred"), _leaf(rng, (2, 3, 4, 4), "target")
    out += check_graph("mse_loss", lambda t, p, q: t.mse_loss(p, q), [p, q], seed=seed, scalar_out=True)
    return out


def network_suite(seed: int = 0, kind: str = "DFSN", blocks: int = 1, size: int = 8, lam: float = 1.0) -> list[CheckResult]:
    """Whole-network check: loss of one block stack w.r.t. every parameter.

    The default ``lam=1`` keeps every parameter observable.  With a large
    weight the last bias only moves the sampled DC term, whose gradient then
    shrinks like ``1/(lam+1)`` and drops below finite-difference resolution.
    """
    from .models import ModelSpec, build_model, forward_reconstruct
    from .training import simulate, xavier_init

    rng = np.random.default_rng(seed)
    model = xavier_init(build_model(ModelSpec(kind, blocks, contrasts=3, lam=lam), dtype=np.float64), seed)
    for p in model.parameters():
        if p.name.endswith(".bias"):
            p.data[...] = 0.1 * rng.standard_normal(p.shape)
    gt = rng.random((1, 3, size, size))
    masks = np.stack([kspace.make_mask("cartesian1d", size, size, 0.5, 0.1, seed=s).grid for s in range(3)])
    y, zf = simulate(gt, masks)
    params = model.parameters()
    objective = lambda: _net_loss(model, zf, y, masks, gt)

    model.zero_grad()
    tape = Tape()
    out = forward_reconstruct(model, zf, y, masks, tape=tape)
    tape.backward(tape.mse_loss(out, gt))
    results = []
    for p in params:
        fd = numeric_grad(lambda: float(objective()), p.data)
        results.append(CheckResult(f"{model.spec.label}:{p.name}", relative_error(p.grad, fd), NET_TOL))
    return results


def _net_loss(model, zf, y, masks, gt):
    from .models import forward_reconstruct

    tape = Tape()
    out = forward_reconstruct(model, zf, y, masks, tape=tape)
    return tape.mse_loss(out, gt).data


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_suite(seed) + network_suite(seed)


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'rel.err':>10}  {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:10.2e}  {r.tol:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
