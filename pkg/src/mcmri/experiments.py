"""Desk-scale experiment drivers shared by the command line and the tests.

Seed splitting
--------------
One integer seed drives a run.  ``np.random.SeedSequence(seed).spawn(4)``
yields four children, in order: phantom data, masks, weight init and
training (batching, augmentation, random masks).  Integer seeds are drawn
from each child with ``generate_state(1)[0]``; the mask child is spawned
once more, one grandchild per contrast.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import fcsa, kspace, metrics
from .imaging import AugmentationPolicy, SliceDataset, make_phantom_dataset, shift_contrasts
from .models import ModelSpec, build_model, count_params, count_params_closed_form, reconstruct
from .training import TrainConfig, simulate, train, xavier_init

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Seeds:
    data: int
    masks: tuple[int, ...]
    init: int
    train: int

    def to_dict(self) -> dict:
        return {"data": self.data, "masks": list(self.masks), "init": self.init, "train": self.train}


def derive_seeds(seed: int, contrasts: int) -> Seeds:
    data, mask, init, tr = np.random.SeedSequence(seed).spawn(4)
    as_int = lambda ss: int(ss.generate_state(1)[0])
    return Seeds(as_int(data), tuple(as_int(s) for s in mask.spawn(contrasts)), as_int(init), as_int(tr))


def make_masks(kind, H, W, ratio, center_fraction, seeds) -> list[kspace.SamplingMask]:
    return [kspace.make_mask(kind, H, W, ratio, center_fraction, seed=s) for s in seeds]


def mask_array(masks) -> np.ndarray:
    return np.stack([getattr(m, "grid", m) for m in masks]).astype(bool)


def measurements(stack: np.ndarray, masks) -> list[kspace.KSpaceMeasurements]:
    return [kspace.undersample(plane, m) for plane, m in zip(stack, masks)]


def fit(kind, blocks, dataset, masks, cfg: TrainConfig, init_seed, out_dir=None, spec_kw=None):
    """Build, initialise and train one network.  Returns ``(model, TrainResult)``."""
    spec = ModelSpec(kind, blocks, contrasts=dataset.shape[0], **(spec_kw or {}))
    spec.validate()
    model = xavier_init(build_model(spec), init_seed)
    if count_params(model) != count_params_closed_form(spec):
        raise AssertionError("parameter count disagrees with closed form")
    return model, train(model, dataset, masks, cfg, out_dir=out_dir)


def deep_reconstruct(model, stacks: np.ndarray, masks, batch: int = 4) -> np.ndarray:
    """Simulate measurements for ``(N, L, H, W)`` truths and run ``model``."""
    marr = mask_array(masks)
    out = []
    for i in range(0, len(stacks), batch):
        y, zf = simulate(stacks[i:i + batch], marr)
        out.append(reconstruct(model, zf.astype(model.dtype), y, marr))
    return np.concatenate(out)


def zero_fill_stack(stacks: np.ndarray, masks) -> np.ndarray:
    return simulate(stacks, mask_array(masks))[1]


def worker_count() -> int:
    """Slice-level workers: ``MCMRI_THREADS`` if set, else the CPU count."""
    env = os.environ.get("MCMRI_THREADS")
    return max(1, int(env) if env else (os.cpu_count() or 1))


def parallel_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]`` on a thread pool; results keep input order."""
    items = list(items)
    workers = min(worker_count() if workers is None else workers, len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def fcsa_stack(stacks: np.ndarray, masks, cfg: fcsa.FcsaConfig, workers: int | None = None) -> np.ndarray:
    solve = lambda s: fcsa.fcsa_mt_solve(measurements(s, masks), cfg).image
    return np.stack(parallel_map(solve, stacks, workers))


def mean_psnr(recon: np.ndarray, truth: np.ndarray) -> float:
    """Per-contrast PSNR averaged over contrasts and items."""
    return float(np.mean([metrics.psnr(r, t) for rs, ts in zip(recon, truth) for r, t in zip(rs, ts)]))


# ------------------------------------------------------------------ shift


def shift_grid(shift_range: int) -> list[tuple[int, int]]:
    r = range(-shift_range, shift_range + 1)
    return [(dx, dy) for dy in r for dx in r]


def shifted(stacks: np.ndarray, dx: int, dy: int, contrast: int) -> np.ndarray:
    L = stacks.shape[1]
    sh = np.zeros((L, 2), dtype=int)
    sh[contrast] = (dy, dx)
    return np.stack([shift_contrasts(s, sh) for s in stacks])


def shift_experiment(
    dataset: SliceDataset,
    masks,
    shifts,
    train_cfg: TrainConfig,
    blocks: int,
    init_seed: int,
    fcsa_cfg: fcsa.FcsaConfig = fcsa.FcsaConfig(),
    shift_max_px: int = 2,
    contrast: int = 1,
    out_dir=None,
) -> list[dict]:
    """PSNR of shift-trained DISN and FCSA-MT when one contrast is misregistered.

    The shifted test stack is itself the reference, so only the loss of
    shared structure is measured.  Returns one row per (method, dx, dy).
    """
    aug = replace(train_cfg.augmentation, shift_max_px=shift_max_px)
    model, _ = fit("DISN", blocks, dataset, masks, replace(train_cfg, augmentation=aug), init_seed, out_dir)
    test = dataset.subset("test").stack()
    rows = []
    for dx, dy in shifts:
        truth = shifted(test, dx, dy, contrast)
        for method, recon in (
            ("DISN", deep_reconstruct(model, truth, masks)),
            ("FCSA-MT", fcsa_stack(truth, masks, fcsa_cfg)),
        ):
            p = mean_psnr(recon, truth)
            rows.append({"method": method, "dx": dx, "dy": dy, "psnr_db": p})
            logger.info("shift (%d,%d) %s %.3f dB", dx, dy, method, p)
    return rows


# ------------------------------------------------------------ block sweep


def block_sweep(dataset, masks, blocks_list, train_cfg: TrainConfig, init_seed: int, kind: str = "DISN") -> list[dict]:
    if not blocks_list:
        raise ValueError("blocks list is empty")
    test = dataset.subset("test").stack()
    zf = mean_psnr(zero_fill_stack(test, masks), test)
    rows = []
    for nb in blocks_list:
        model, res = fit(kind, nb, dataset, masks, train_cfg, init_seed)
        p = mean_psnr(deep_reconstruct(model, test, masks), test)
        rows.append({"blocks": nb, "psnr_db": p, "zero_fill_db": zf, "params": count_params(model),
                     "train_seconds": res.seconds})
        logger.info("%s-%dB %.3f dB", kind, nb, p)
    return rows


def phantom_dataset(n_train, n_test, size, contrasts, seed) -> SliceDataset:
    return make_phantom_dataset(n_train, size, size, contrasts, seed=seed, n_test=n_test)


def default_augmentation(flips=True, rotations=True, shift_max_px=0) -> AugmentationPolicy:
    return AugmentationPolicy(flips, rotations, shift_max_px)
