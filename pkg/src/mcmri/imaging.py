"""Multi-contrast image stacks, dataset ingestion, augmentation and phantoms."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import io

NORM_EPS = 1e-6


class IngestionError(ValueError):
    """A dataset directory is incomplete or inconsistent."""


class DimensionMismatchError(IngestionError):
    pass


@dataclass(frozen=True)
class MultiContrastImage:
    """Stack of ``L`` co-registered real images, shape ``(L, H, W)``."""

    data: np.ndarray
    contrast_names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DimensionMismatchError(f"expected (L, H, W) stack, got shape {data.shape}")
        L, H, W = data.shape
        if L < 1 or H < 8 or W < 8 or H % 2 or W % 2:
            raise DimensionMismatchError(f"stack must have L>=1 and even H, W >= 8; got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image stack contains non-finite values")
        names = tuple(self.contrast_names) or tuple(f"c{i}" for i in range(L))
        if len(names) != L:
            raise ValueError(f"{len(names)} contrast names for {L} contrasts")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "contrast_names", names)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_contrasts(self) -> int:
        return self.data.shape[0]

    def replace(self, data: np.ndarray) -> "MultiContrastImage":
        return MultiContrastImage(data, self.contrast_names)


def normalize_stack(data: np.ndarray) -> np.ndarray:
    """Divide by the stack-wide maximum; an all-zero stack is returned as is."""
    data = np.asarray(data, dtype=np.float64)
    peak = data.max()
    if peak <= 0:
        return data.copy()
    return data / peak


@dataclass(frozen=True)
class SliceDataset:
    images: tuple[MultiContrastImage, ...]
    ids: tuple[str, ...]
    splits: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.images) == len(self.ids) == len(self.splits)):
            raise ValueError("images, ids and splits must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise IngestionError("dataset identifiers must be unique")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise DimensionMismatchError(f"non-uniform stack shapes: {sorted(shapes)}")
        for im, ident in zip(self.images, self.ids):
            lo, hi = float(im.data.min()), float(im.data.max())
            if lo < -NORM_EPS or hi > 1.0 + NORM_EPS:
                raise IngestionError(f"{ident!r}: intensities [{lo:.4g}, {hi:.4g}] not normalised to [0, 1]")
        bad = set(self.splits) - {"train", "test"}
        if bad:
            raise ValueError(f"unknown split tags {bad}")

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[tuple[MultiContrastImage, str]]:
        return iter(zip(self.images, self.ids))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images[0].shape

    @property
    def contrast_names(self) -> tuple[str, ...]:
        return self.images[0].contrast_names

    def subset(self, split: str) -> "SliceDataset":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return SliceDataset(
            tuple(self.images[i] for i in keep),
            tuple(self.ids[i] for i in keep),
            tuple(self.splits[i] for i in keep),
        )

    def stack(self) -> np.ndarray:
        """All items as one ``(N, L, H, W)`` array."""
        return np.stack([im.data for im in self.images])


def _read_slice(path: Path) -> np.ndarray:
    if path.suffix == ".f32":
        return io.read_f32_image(path)
    return io.read_png_gray(path)


def load_dataset(root_path, manifest=None) -> SliceDataset:
    """Load ``<root>/<contrast>/<id>.png`` (or ``.f32``) slices.

    ``manifest`` is a mapping with keys ``contrasts``, ``train`` and
    ``test``; when omitted, ``<root>/manifest.json`` is read.  Each stack is
    divided by its own maximum.  Items are ordered by identifier.
    """
    root = Path(root_path)
    if manifest is None:
        manifest = json.loads((root / "manifest.json").read_text())
    contrasts = list(manifest["contrasts"])
    split_of = {i: "train" for i in manifest.get("train", [])}
    for i in manifest.get("test", []):
        if i in split_of:
            raise IngestionError(f"identifier {i!r} listed in both train and test")
        split_of[i] = "test"

    files = {}
    for c in contrasts:
        cdir = root / c
        if not cdir.is_dir():
            raise IngestionError(f"missing contrast directory {cdir}")
        files[c] = {p.stem: p for p in cdir.iterdir() if p.suffix in (".png", ".f32")}

    all_ids = set().union(*(f.keys() for f in files.values()))
    wanted = set(split_of) if split_of else all_ids
    for ident in sorted(wanted | all_ids):
        missing = [c for c in contrasts if ident not in files[c]]
        if missing:
            raise IngestionError(f"identifier {ident!r} has no file for contrast(s) {missing}")

    ids = sorted(wanted)
    images = []
    for ident in ids:
        planes = [_read_slice(files[c][ident]) for c in contrasts]
        shapes = {p.shape for p in planes}
        if len(shapes) != 1:
            raise DimensionMismatchError(f"identifier {ident!r}: contrast shapes differ {shapes}")
        images.append(MultiContrastImage(normalize_stack(np.stack(planes)), tuple(contrasts)))
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DimensionMismatchError(f"non-uniform dimensions across items: {sorted(shapes)}")
    splits = tuple(split_of.get(i, "train") for i in ids)
    return SliceDataset(tuple(images), tuple(ids), splits)


# ----------------------------------------------------------------- phantoms

# Tissue-class intensity bands; each contrast maps classes onto the bands in
# its own order, so the same anatomy looks different per contrast.
_BANDS = ((0.15, 0.3), (0.35, 0.5), (0.55, 0.7), (0.75, 0.95))
_CLASS_ORDER = ((0, 1, 2, 3), (3, 2, 1, 0), (1, 3, 0, 2), (2, 0, 3, 1))


def _ellipse_params(rng):
    n = int(rng.integers(6, 11))
    params = [
        # head outline and brain region, then interior structures
        (0.0, 0.0, rng.uniform(0.80, 0.92), rng.uniform(0.85, 0.95), rng.uniform(-0.2, 0.2)),
        (0.0, 0.0, rng.uniform(0.62, 0.74), rng.uniform(0.70, 0.82), rng.uniform(-0.2, 0.2)),
    ]
    for _ in range(n - 2):
        cy, cx = rng.uniform(-0.5, 0.5, size=2)
        ay, ax = rng.uniform(0.06, 0.3, size=2)
        params.append((cy, cx, ay, ax, rng.uniform(0, np.pi)))
    return params


def _paint(params, values, H, W):
    """``values[c, j]`` is the intensity of ellipse ``j`` in contrast ``c``."""
    L = values.shape[0]
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    img = np.zeros((L, H, W))
    for j, (cy, cx, ay, ax, th) in enumerate(params):
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(th) + dx * np.sin(th)
        v = -dy * np.sin(th) + dx * np.cos(th)
        inside = (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
        img[:, inside] = values[:, j, None]
    return img


def make_phantom_stack(rng, H: int, W: int, L: int) -> np.ndarray:
    params = _ellipse_params(rng)
    n = len(params)
    labels = np.concatenate([[0, 1], rng.integers(0, len(_BANDS), size=n - 2)])
    values = np.empty((L, n))
    for c in range(L):
        order = _CLASS_ORDER[c % len(_CLASS_ORDER)]
        for j in range(n):
            lo, hi = _BANDS[order[labels[j]]]
            values[c, j] = rng.uniform(lo, hi)
    return _paint(params, values, H, W)


def make_phantom_dataset(
    count: int, H: int, W: int, L: int, seed: int, n_test: int = 0
) -> SliceDataset:
    """Random-ellipse phantoms whose contrasts share one geometry.

    ``count`` training stacks are generated, followed by ``n_test`` test
    stacks.  Every ellipse has an independent intensity per contrast, so
    region boundaries, and hence edge maps, coincide across contrasts.
    """
    if count < 1 or n_test < 0:
        raise ValueError("count must be >= 1 and n_test >= 0")
    if H % 2 or W % 2:
        raise ValueError(f"H and W must be even, got {H}x{W}")
    names = tuple(("pd", "t1", "t2")[c] if L == 3 else f"c{c}" for c in range(L))
    total = count + n_test
    width = max(4, len(str(total)))
    seqs = np.random.SeedSequence(seed).spawn(total)
    images, ids, splits = [], [], []
    for k, ss in enumerate(seqs):
        stack = make_phantom_stack(np.random.default_rng(ss), H, W, L)
        images.append(MultiContrastImage(normalize_stack(stack), names))
        ids.append(f"phantom_{k:0{width}d}")
        splits.append("train" if k < count else "test")
    return SliceDataset(tuple(images), tuple(ids), tuple(splits))


def write_dataset(ds: SliceDataset, root, fmt: str = "png") -> Path:
    """Write a dataset in the directory layout read by :func:`load_dataset`."""
    root = Path(root)
    for c in ds.contrast_names:
        (root / c).mkdir(parents=True, exist_ok=True)
    for im, ident in ds:
        for c, plane in zip(im.contrast_names, im.data):
            if fmt == "png":
                io.write_png_gray(root / c / f"{ident}.png", plane)
            else:
                io.write_f32_image(root / c / f"{ident}.f32", plane)
    manifest = {
        "contrasts": list(ds.contrast_names),
        "train": [i for i, s in zip(ds.ids, ds.splits) if s == "train"],
        "test": [i for i, s in zip(ds.ids, ds.splits) if s == "test"],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


# ------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    flips: bool = False
    rotations90: bool = False
    shift_max_px: int = 0

    def validate(self, H: int, W: int) -> None:
        if self.shift_max_px < 0 or self.shift_max_px > min(H, W) / 8:
            raise ValueError(f"shift_max_px={self.shift_max_px} outside [0, min(H,W)/8]")


def sample_shifts(rng, L: int, shift_max_px: int) -> np.ndarray:
    return rng.integers(-shift_max_px, shift_max_px + 1, size=(L, 2))


def shift_contrasts(data: np.ndarray, shifts) -> np.ndarray:
    """Circularly shift contrast ``c`` by ``shifts[c] = (dy, dx)`` pixels."""
    return np.stack([np.roll(plane, tuple(int(s) for s in sh), axis=(0, 1))
                     for plane, sh in zip(data, shifts)])


def augment_array(data: np.ndarray, policy: AugmentationPolicy, rng) -> np.ndarray:
    out = data
    if policy.flips:
        if rng.random() < 0.5:
            out = out[:, ::-1, :]
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
    if policy.rotations90 and out.shape[1] == out.shape[2]:
        out = np.rot90(out, k=int(rng.integers(4)), axes=(1, 2))
    if policy.shift_max_px > 0:
        out = shift_contrasts(out, sample_shifts(rng, out.shape[0], policy.shift_max_px))
    return np.ascontiguousarray(out)


def augment(image: MultiContrastImage, policy: AugmentationPolicy, rng) -> MultiContrastImage:
    """Random flip/rotation shared by all contrasts, then per-contrast shifts.

    Rotations are only drawn for square images.  Every transform permutes
    pixels, so the value range is preserved exactly.
    """
    policy.validate(*image.shape[1:])
    return image.replace(augment_array(image.data, policy, rng))
