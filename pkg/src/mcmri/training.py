"""Xavier initialisation, ADAM and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kspace
from .autodiff import Tape
from .imaging import AugmentationPolicy, SliceDataset, augment_array
from .models import Model, forward_reconstruct, save_checkpoint

logger = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when a loss or objective becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    augmentation: AugmentationPolicy = field(default_factory=lambda: AugmentationPolicy(True, True, 0))
    checkpoint_every: int = 0
    random_masks: bool = False

    def validate(self) -> None:
        if self.iterations < 0 or self.batch_size < 1 or self.lr < 0 or self.epsilon <= 0:
            raise ValueError(f"invalid training config {self}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------- init/optim


def xavier_init(model: Model, seed: int) -> Model:
    """Uniform Glorot init on ``(-a, a)``, ``a = sqrt(6 / (fan_in + fan_out))``.

    Fans count channels times the 3x3 receptive field.  Biases are zeroed.
    Each parameter gets its own child stream keyed by its position, so the
    draw is independent of iteration order elsewhere.
    """
    seqs = np.random.SeedSequence(seed).spawn(len(model.params))
    for ss, (name, p) in zip(seqs, model.params.items()):
        if name.endswith(".bias"):
            p.data[...] = 0
            continue
        co, ci, kh, kw = p.shape
        a = np.sqrt(6.0 / ((ci + co) * kh * kw))
        p.data[...] = np.random.default_rng(ss).uniform(-a, a, size=p.shape)
    return model


class AdamState:
    def __init__(self, params):
        self.m = {p.name: np.zeros(p.shape, dtype=np.float64) for p in params}
        self.v = {p.name: np.zeros(p.shape, dtype=np.float64) for p in params}
        self.t = 0


def adam_step(params, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected ADAM update of every parameter in place."""
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        m, v = state.m[p.name], state.v[p.name]
        if g.shape != m.shape:
            raise ValueError(f"{p.name}: gradient shape {g.shape} != state shape {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g, dtype=np.float64)
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        p.data -= step.astype(p.data.dtype)


# -------------------------------------------------------------- simulation


def simulate(images: np.ndarray, masks: np.ndarray):
    """Measurements and zero-filled inputs for a ``(B, L, H, W)`` batch.

    ``masks`` is ``(L, H, W)`` or ``(B, L, H, W)``.  Returns ``(y, zf)``
    where ``y`` is complex.
    """
    y = np.where(masks, kspace.fft2(images), 0)
    zf = kspace.ifft2(y).real
    return y, zf


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    seconds: float


def _batch_stream(n, batch_size, rng):
    """Seeded shuffles concatenated end to end."""
    perm = rng.permutation(n)
    pos = 0
    while True:
        idx = []
        while len(idx) < batch_size:
            if pos == n:
                perm, pos = rng.permutation(n), 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(perm[pos:pos + take])
            pos += take
        yield np.array(idx)


def train(
    model: Model,
    dataset: SliceDataset,
    masks,
    cfg: TrainConfig,
    out_dir=None,
    mask_factory=None,
    log_every: int = 100,
) -> TrainResult:
    """Fit ``model`` on the training split of ``dataset``.

    Parameters
    ----------
    masks : sequence of SamplingMask or bool array (L, H, W)
        Fixed per-contrast masks for the whole run.
    mask_factory : callable, optional
        ``mask_factory(rng) -> (L, H, W)`` bool array, used per sample when
        ``cfg.random_masks`` is set.
    out_dir : path, optional
        Where ``loss.csv`` and periodic checkpoints are written.
    """
    cfg.validate()
    train_ds = dataset.subset("train") if "train" in dataset.splits else dataset
    if len(train_ds) == 0:
        raise ValueError("training split is empty")
    data = train_ds.stack()
    L, H, W = data.shape[1:]
    mask_arr = np.stack([getattr(m, "grid", m) for m in masks]).astype(bool)
    if mask_arr.shape != (L, H, W):
        raise ValueError(f"masks of shape {mask_arr.shape} do not match images {(L, H, W)}")
    if cfg.random_masks and mask_factory is None:
        raise ValueError("random_masks requires a mask_factory")
    cfg.augmentation.validate(H, W)

    batch_seq, aug_seq, mask_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    batch_rng = np.random.default_rng(batch_seq)
    aug_rng = np.random.default_rng(aug_seq)
    mask_rng = np.random.default_rng(mask_seq)
    stream = _batch_stream(len(data), cfg.batch_size, batch_rng)
    state = AdamState(model.parameters())
    params = model.parameters()
    out_dir = Path(out_dir) if out_dir else None
    losses: list[float] = []
    csv_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out_dir / "loss.csv", "w", newline="")
        writer = csv.writer(csv_fh)
        writer.writerow(["iteration", "loss"])

    t0 = time.perf_counter()
    try:
        for it in range(1, cfg.iterations + 1):
            idx = next(stream)
            batch = np.stack([augment_array(data[i], cfg.augmentation, aug_rng) for i in idx])
            if cfg.random_masks:
                batch_masks = np.stack([mask_factory(mask_rng) for _ in idx])
            else:
                batch_masks = mask_arr
            y, zf = simulate(batch, batch_masks)
            tape = Tape()
            out = forward_reconstruct(model, zf.astype(model.dtype), y, batch_masks, tape=tape)
            loss = tape.mse_loss(out, batch.astype(model.dtype))
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalAbort(
                    f"non-finite loss {value} at iteration {it}; batch ids {idx.tolist()}, "
                    f"max |param| {max(float(np.abs(p.data).max()) for p in params):.3g}"
                )
            model.zero_grad()
            tape.backward(loss)
            adam_step(params, state, cfg)
            losses.append(value)
            if csv_fh:
                writer.writerow([it, repr(value)])
            if log_every and it % log_every == 0:
                recent = np.mean(losses[-log_every:])
                logger.info("%s iter %d loss %.6f (%.1fs)", model.spec.label, it, recent, time.perf_counter() - t0)
            if out_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"checkpoint_{it:06d}.ckp", {"iteration": it})
    finally:
        if csv_fh:
            csv_fh.close()
    return TrainResult(model, losses, time.perf_counter() - t0)


def write_manifest(path, **fields) -> None:
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True, default=str))
