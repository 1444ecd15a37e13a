"""Unrolled multi-contrast reconstruction networks.

Three architectures share one inference block layout: four 3x3 conv layers
(leaky ReLU after all but the last), a global residual shortcut and a
closed-form data-fidelity stage.

* ``DIRN``: ``L`` independent single-contrast subnetworks.
* ``DFSN``: one shared stack mapping the ``L``-channel estimate to ``L``
  residual channels.
* ``DISN``: DFSN with dense connections; block ``k >= 2`` consumes the
  channel concatenation of the outputs of blocks ``1..k-1`` and its shortcut
  adds the output of block ``k-1``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kspace
from .autodiff import Parameter, Tape, Tensor

KINDS = ("DIRN", "DFSN", "DISN")
CHECKPOINT_MAGIC = b"CKP1"


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    blocks: int
    contrasts: int = 3
    feature_maps: int = 32
    conv_layers_per_block: int = 4
    leaky_slope: float = 0.2
    lam: float = kspace.DEFAULT_LAMBDA

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ModelSpecError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.blocks < 1 or self.contrasts < 1:
            raise ModelSpecError("blocks and contrasts must be >= 1")
        if self.conv_layers_per_block < 2:
            raise ModelSpecError("need at least 2 conv layers per block")
        if self.feature_maps < self.contrasts:
            raise ModelSpecError("feature_maps must be >= contrasts")
        if not 0.0 <= self.leaky_slope <= 1.0:
            raise ModelSpecError(f"leaky_slope out of range: {self.leaky_slope}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ModelSpecError(f"lam must be finite and nonnegative: {self.lam}")

    @property
    def label(self) -> str:
        return f"{self.kind}-{self.blocks}B"


def block_channel_plan(spec: ModelSpec, k: int) -> list[tuple[int, int]]:
    """``(in, out)`` channels of each conv layer of block ``k`` (1-based)."""
    F, L = spec.feature_maps, spec.contrasts
    if spec.kind == "DIRN":
        c_in, c_out = 1, 1
    elif spec.kind == "DFSN":
        c_in, c_out = L, L
    else:
        c_in, c_out = L * max(k - 1, 1), L
    n = spec.conv_layers_per_block
    return [(c_in, F)] + [(F, F)] * (n - 2) + [(F, c_out)]


class Model:
    """Parameter container for one architecture; forward passes own their tape."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        subnets = [f"c{i}." for i in range(spec.contrasts)] if spec.kind == "DIRN" else [""]
        for prefix in subnets:
            for k in range(1, spec.blocks + 1):
                for j, (ci, co) in enumerate(block_channel_plan(spec, k)):
                    base = f"{prefix}block{k}.conv{j}"
                    self._add(f"{base}.weight", (co, ci, 3, 3))
                    self._add(f"{base}.bias", (co,))

    def _add(self, name, shape):
        self.params[name] = Parameter(np.zeros(shape, dtype=self.dtype), name=name)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ModelSpecError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def astype(self, dtype) -> "Model":
        other = Model(self.spec, dtype)
        other.load_state_dict(self.state_dict())
        return other

    def __repr__(self):
        return f"Model({self.spec.label}, params={count_params(self)})"


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    """Construct an all-zero model; see :func:`mcmri.training.xavier_init`."""
    return Model(spec, dtype)


def count_params(model: Model | ModelSpec) -> int:
    if isinstance(model, ModelSpec):
        model = Model(model, np.float32)
    return int(sum(p.data.size for p in model.params.values()))


def count_params_closed_form(spec: ModelSpec) -> int:
    """Parameter count from the layer arithmetic alone, without building."""
    F, L, N = spec.feature_maps, spec.contrasts, spec.blocks
    mid = (spec.conv_layers_per_block - 2) * (F * 9 * F + F)

    def block(c_in, c_out):
        return (c_in * 9 * F + F) + mid + (F * 9 * c_out + c_out)

    if spec.kind == "DIRN":
        return L * N * block(1, 1)
    if spec.kind == "DFSN":
        return N * block(L, L)
    return sum(block(L * max(k - 1, 1), L) for k in range(1, N + 1))


def _feature_unit(tape, model, prefix, k, x):
    """Conv stack of one block; returns the residual."""
    spec = model.spec
    h = x
    n = spec.conv_layers_per_block
    for j in range(n):
        w = model.params[f"{prefix}block{k}.conv{j}.weight"]
        b = model.params[f"{prefix}block{k}.conv{j}.bias"]
        h = tape.conv2d(h, w, b)
        if j < n - 1:
            h = tape.leaky_relu(h, spec.leaky_slope)
    return h


def forward_reconstruct(
    model: Model,
    zero_filled,
    y_values: np.ndarray,
    mask: np.ndarray,
    tape: Tape | None = None,
    record: list | None = None,
) -> Tensor:
    """Run all inference blocks.

    Parameters
    ----------
    zero_filled : array or Tensor, shape (B, L, H, W)
        Network input.
    y_values : complex array, shape (B, L, H, W)
        Measured k-space (zero off the mask).
    mask : bool array, shape (L, H, W) or (B, L, H, W)
    tape : Tape, optional
        Tape to record on; a fresh one is used when omitted.
    record : list, optional
        If given, one dict per block is appended with the data-fidelity input
        (``"pre_dc"``) and the block output (``"out"``), both ``(B, L, H, W)``
        arrays.  For DIRN the per-contrast chains are concatenated.
    """
    spec = model.spec
    tape = tape if tape is not None else Tape()
    x0 = zero_filled if isinstance(zero_filled, Tensor) else Tensor(np.asarray(zero_filled, dtype=model.dtype))
    if x0.data.ndim != 4 or x0.shape[1] != spec.contrasts:
        raise ModelSpecError(f"input shape {x0.shape} does not carry {spec.contrasts} contrasts")
    if y_values.shape[1] != spec.contrasts:
        raise ModelSpecError(f"measurements carry {y_values.shape[1]} contrasts, model expects {spec.contrasts}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[None]
    L = spec.contrasts

    if spec.kind == "DIRN":
        chains = [tape.slice_channels(x0, i, i + 1) for i in range(L)]
        for k in range(1, spec.blocks + 1):
            pre, post = [], []
            for i in range(L):
                r = _feature_unit(tape, model, f"c{i}.", k, chains[i])
                s = tape.add(chains[i], r)
                chains[i] = tape.df_layer(s, y_values[:, i:i + 1], mask[:, i:i + 1], spec.lam)
                pre.append(s.data)
                post.append(chains[i].data)
            if record is not None:
                record.append({"pre_dc": np.concatenate(pre, 1), "out": np.concatenate(post, 1)})
        return tape.concat_channels(chains)

    outputs = []
    x = x0
    for k in range(1, spec.blocks + 1):
        if spec.kind == "DISN" and k >= 2:
            inp = outputs[0] if k == 2 else tape.concat_channels(outputs)
        else:
            inp = x
        r = _feature_unit(tape, model, "", k, inp)
        s = tape.add(x, r)
        x = tape.df_layer(s, y_values, mask, spec.lam)
        outputs.append(x)
        if record is not None:
            record.append({"pre_dc": s.data, "out": x.data})
    return x


def reconstruct(model: Model, zero_filled, y_values, mask) -> np.ndarray:
    """Inference convenience wrapper returning a float64 array."""
    return forward_reconstruct(model, zero_filled, y_values, mask).data.astype(np.float64)


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """``CKP1`` | u32 header length | JSON header | float32 blobs."""
    names = list(model.params)
    offsets, offset = [], 0
    for n in names:
        offsets.append(offset)
        offset += model.params[n].data.size * 4
    header = {
        "spec": asdict(model.spec),
        "params": [
            {"name": n, "shape": list(model.params[n].shape), "offset": o}
            for n, o in zip(names, offsets)
        ],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    model = Model(ModelSpec(**header["spec"]), dtype)
    body = raw[8 + hlen:]
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=entry["offset"]).reshape(shape)
        model.params[entry["name"]].data[...] = arr
    return model, header.get("extra", {})
