"""A small tape-based reverse-mode differentiation engine.

Activations are 4D arrays ``(batch, channels, H, W)``.  Operations are
methods of :class:`Tape`; each call evaluates eagerly and appends one node to
the tape.  :meth:`Tape.backward` walks the nodes in exact reverse order.

Only the operators needed by the reconstruction networks are provided:
3x3 same-padded convolution, leaky ReLU, addition, channel concatenation and
slicing, the closed-form data-fidelity layer and the reconstruction loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kspace


class ShapeError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class Tensor:
    """A value recorded on (or fed into) a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf; ``grad`` accumulates across backward calls."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, C*9, H*W)`` with zero padding of one pixel."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 9, H, W), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, 3 * i + j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(B, C * 9, H * W)


def _conv_taps(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 cross-correlation without materialising im2col.

    All nine taps go through one matmul on the flattened padded image; the
    tap outputs are then summed at their row-major offsets.  Rows are padded
    to ``W + 2`` so each offset is a contiguous slice.
    """
    B, C, H, W = x.shape
    Co = kernel.shape[0]
    Wp = W + 2
    n = H * Wp
    xp = np.zeros((B, C, H + 3, Wp), dtype=x.dtype)
    xp[:, :, 1:H + 1, 1:W + 1] = x
    xf = xp.reshape(B, C, -1)
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 0, 1).reshape(9 * Co, C))
    out = np.empty((B, Co, n), dtype=np.result_type(x, kernel))
    for b in range(B):
        z = (taps @ xf[b]).reshape(9, Co, -1)
        o = out[b]
        o[...] = bias[:, None]
        for i in range(3):
            for j in range(3):
                s = i * Wp + j
                o += z[3 * i + j, :, s:s + n]
    return out.reshape(B, Co, H, Wp)[..., :W]


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    B, C, H, W = shape
    d = dcols.reshape(B, C, 9, H, W)
    xp = np.zeros((B, C, H + 2, W + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, :, i:i + H, j:j + W] += d[:, :, 3 * i + j]
    return xp[:, :, 1:-1, 1:-1]


class Tape:
    """Records operations in execution order for one forward/backward pass.

    A tape is not thread-safe; use one tape per worker.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.parameters: dict[int, Parameter] = {}
        self._outputs: set[int] = set()

    def __len__(self):
        return len(self.nodes)

    # -- recording helpers

    @staticmethod
    def _as_tensor(x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(x)

    def _record(self, op, inputs, out_data, vjp, name="") -> Tensor:
        for t in inputs:
            if isinstance(t, Parameter):
                self.parameters.setdefault(id(t), t)
        out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs), name=name or op)
        if id(out) in self._outputs:
            raise TapeStateError(f"operation output recorded twice ({op})")
        self._outputs.add(id(out))
        self.nodes.append(_Node(op, tuple(inputs), out, vjp))
        return out

    # -- operators

    def conv2d(self, x, kernel: Tensor, bias: Tensor) -> Tensor:
        """Same-padded 3x3 cross-correlation plus per-channel bias."""
        x = self._as_tensor(x)
        B, C, H, W = x.shape
        Co, Ci, kh, kw = kernel.shape
        if (kh, kw) != (3, 3):
            raise ShapeError(f"kernel must be 3x3, got {kh}x{kw}")
        if Ci != C:
            raise ShapeError(f"kernel expects {Ci} input channels, input has {C}")
        if bias.shape != (Co,):
            raise ShapeError(f"bias shape {bias.shape} != ({Co},)")
        out = np.ascontiguousarray(_conv_taps(x.data, kernel.data, bias.data))
        wmat = kernel.data.reshape(Co, Ci * 9)
        need_x = x.requires_grad
        xdata = x.data

        def vjp(g):
            cols = _im2col(xdata)
            g = g.reshape(B, Co, H * W)
            dw = np.zeros_like(wmat)
            for b in range(B):
                dw += g[b] @ cols[b].T
            db = g.sum(axis=(0, 2))
            dx = _col2im(np.matmul(wmat.T, g), (B, C, H, W)) if need_x else None
            return dx, dw.reshape(kernel.shape), db

        return self._record("conv2d", (x, kernel, bias), out, vjp)

    def leaky_relu(self, x, slope: float = 0.2) -> Tensor:
        if not 0.0 <= slope <= 1.0:
            raise ValueError(f"slope must lie in [0, 1], got {slope}")
        x = self._as_tensor(x)
        scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
        return self._record("leaky_relu", (x,), x.data * scale, lambda g: (g * scale,))

    def add(self, x, y) -> Tensor:
        x, y = self._as_tensor(x), self._as_tensor(y)
        if x.shape != y.shape:
            raise ShapeError(f"add: shapes {x.shape} and {y.shape} differ")
        return self._record("add", (x, y), x.data + y.data, lambda g: (g, g))

    def concat_channels(self, parts) -> Tensor:
        parts = [self._as_tensor(p) for p in parts]
        if not parts:
            raise ShapeError("concat of zero tensors")
        ref = parts[0].shape
        for p in parts:
            if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
                raise ShapeError(f"concat: incompatible shapes {ref} and {p.shape}")
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def vjp(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

        return self._record("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=1), vjp)

    def slice_channels(self, x, start: int, stop: int) -> Tensor:
        x = self._as_tensor(x)
        C = x.shape[1]
        if not 0 <= start < stop <= C:
            raise ShapeError(f"slice [{start}:{stop}] out of range for {C} channels")

        def vjp(g):
            dx = np.zeros_like(x.data)
            dx[:, start:stop] = g
            return (dx,)

        return self._record("slice", (x,), x.data[:, start:stop].copy(), vjp)

    def df_layer(self, x, y_values: np.ndarray, mask: np.ndarray, lam=kspace.DEFAULT_LAMBDA) -> Tensor:
        """Closed-form data fidelity applied per (batch, contrast) plane.

        ``y_values`` is complex with shape ``(B, L, H, W)``; ``mask`` has
        shape ``(L, H, W)`` or ``(B, L, H, W)``.  ``lam`` is a scalar or one
        value per contrast.  Measurements and weights are constants.
        Computation runs in double precision; the output keeps the input dtype.
        """
        x = self._as_tensor(x)
        if y_values.shape[-3:] != x.shape[-3:] or y_values.shape[0] not in (1, x.shape[0]):
            raise ShapeError(f"df_layer: measurements {y_values.shape} do not match input {x.shape}")
        if np.shape(mask)[-3:] != x.shape[-3:]:
            raise ShapeError(f"df_layer: mask {np.shape(mask)} does not match input {x.shape}")
        lam = np.asarray(lam, dtype=np.float64)
        if lam.ndim == 1:
            if lam.shape[0] != x.shape[1]:
                raise ShapeError(f"df_layer: {lam.shape[0]} weights for {x.shape[1]} contrasts")
            lam = lam[:, None, None]
        spec = kspace.fidelity_spectrum(x.data, y_values, mask, lam)
        out = kspace.ifft2(spec).real.astype(x.data.dtype)
        dtype = x.data.dtype

        def vjp(g):
            return (kspace.data_fidelity_vjp(g, mask, lam).astype(dtype),)

        return self._record("df_layer", (x,), out, vjp)

    def mse_loss(self, pred, target) -> Tensor:
        """``(1/L) * sum_i ||pred_i - target_i||^2``, averaged over the batch.

        The reduction is accumulated in double precision.
        """
        pred, target = self._as_tensor(pred), self._as_tensor(target)
        if pred.shape != target.shape:
            raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
        B, L = pred.shape[:2]
        diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
        value = np.array(np.sum(diff * diff) / (L * B))
        scale = 2.0 / (L * B)

        def vjp(g):
            gd = (scale * float(g)) * diff
            return gd.astype(pred.data.dtype), (-gd).astype(target.data.dtype)

        return self._record("mse_loss", (pred, target), value, vjp)

    # -- reverse pass

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(parameter) into every parameter's ``grad``.

        Leaf tensors created with ``requires_grad=True`` also receive
        gradients.  Returns a mapping from parameter name to its accumulated
        gradient.
        """
        if not self.nodes:
            raise TapeStateError("backward called before any forward operation")
        if id(loss) not in self._outputs:
            raise TapeStateError("loss tensor was not produced on this tape")
        if loss.data.size != 1:
            raise TapeStateError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None or not node.output.requires_grad:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in self._outputs:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=t.data.dtype)
                else:
                    t.grad += gi
        return {p.name: p.grad for p in self.parameters.values()}
