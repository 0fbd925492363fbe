"""Datasets: synthetic textured-foreground images, CIFAR-10 binary batches,
mirror/shift augmentation and the TSR1 tensor container."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# -- TSR1 container ---------------------------------------------------------------

MAGIC = b"TSR1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode_tsr(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"{name!r}: unsupported dtype {arr.dtype} (need float32/float64)")
        if not 1 <= arr.ndim <= 255:
            raise FormatError(f"{name!r}: ndim {arr.ndim} out of range")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_tsr(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, expected TSR1")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos, out = 8, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(dims)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise FormatError(f"{name!r}: truncated payload")
            out[name] = np.frombuffer(buf, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError) as e:
        raise FormatError(f"corrupt TSR1 stream: {e}") from e
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes")
    return out


def write_tsr(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tsr(entries))


def read_tsr(path) -> dict[str, np.ndarray]:
    return decode_tsr(Path(path).read_bytes())


# -- datasets ------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray  # (C, H, W)
    label: int
    mask: np.ndarray | None = None  # (1, H, W)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    masks: np.ndarray | None = None  # (N, 1, H, W) in {0, 1}
    classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), None if self.masks is None else self.masks[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        masks = None if self.masks is None else self.masks[idx]
        return Dataset(self.images[idx], self.labels[idx], masks, self.classes)

    def split(self, frac: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle, then (first 1 - frac, last frac)."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_hold = int(round(frac * len(self)))
        return self.subset(np.sort(order[n_hold:])), self.subset(np.sort(order[:n_hold]))

    def to_tsr(self) -> dict[str, np.ndarray]:
        out = {"images": self.images.astype(np.float32), "labels": self.labels.astype(np.float32)}
        if self.masks is not None:
            out["masks"] = self.masks.astype(np.float32)
        return out

    @classmethod
    def from_tsr(cls, entries: dict, classes: int | None = None) -> "Dataset":
        labels = entries["labels"].astype(np.int64)
        k = classes if classes is not None else int(labels.max()) + 1
        return cls(entries["images"].astype(np.float32), labels, entries.get("masks"), k)


def class_texture(label: int, classes: int, size: int) -> np.ndarray:
    """Oriented stripe pattern over the whole grid, values in [0.25, 1]."""
    theta = np.pi * label / classes
    period = 4.0 if label % 2 == 0 else 3.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = 2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period
    return 0.625 + 0.375 * np.cos(phase)


def gen_synthetic(n: int, size: int = 16, classes: int = 4, fg_frac: float = 0.1,
                  clutter: float = 0.5, seed: int = 0, channels: int = 3) -> Dataset:
    """Uniform-noise clutter plus one square patch of the class texture.

    The patch side is ``round(sqrt(fg_frac) * size)`` and its position is
    uniform over the grid; ``clutter`` scales the background noise amplitude.
    """
    if not 2 <= classes <= 16:
        raise ValueError(f"classes must lie in 2..16, got {classes}")
    if not 0 < fg_frac <= 0.5:
        raise ValueError(f"fg_frac must lie in (0, 0.5], got {fg_frac}")
    if not 0 <= clutter <= 1:
        raise ValueError(f"clutter must lie in [0, 1], got {clutter}")
    rng = np.random.default_rng(seed)
    side = max(1, int(round(np.sqrt(fg_frac) * size)))
    textures = [class_texture(c, classes, size) for c in range(classes)]
    labels = rng.integers(0, classes, size=n)
    images = (clutter * rng.random((n, channels, size, size))).astype(np.float32)
    masks = np.zeros((n, 1, size, size), np.float32)
    corners = rng.integers(0, size - side + 1, size=(n, 2))
    for i in range(n):
        r, c = corners[i]
        masks[i, 0, r:r + side, c:c + side] = 1
        patch = textures[labels[i]][r:r + side, c:c + side]
        images[i, :, r:r + side, c:c + side] = patch
    return Dataset(images, labels.astype(np.int64), masks, classes)


def template_classify(image: np.ndarray, classes: int) -> int:
    """Nearest class texture over the nonzero pixels (valid when clutter = 0)."""
    size = image.shape[-1]
    plane = image[0]
    support = plane != 0
    errs = [np.abs(plane - class_texture(c, classes, size))[support].sum() for c in range(classes)]
    return int(np.argmin(errs))


# -- CIFAR-10 -------------------------------------------------------------------

CIFAR_RECORD = 3073


def load_cifar10_binary(path, max_n: int | None = None) -> Dataset:
    """Read one ``data_batch_*.bin`` file, or every ``*.bin`` batch in a directory."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("data_batch_*.bin")) or sorted(path.glob("*.bin"))
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 .bin files in {path}")
        parts = [load_cifar10_binary(f) for f in files]
        ds = Dataset(np.concatenate([p.images for p in parts]),
                     np.concatenate([p.labels for p in parts]), None, 10)
        return ds if max_n is None else ds.subset(np.arange(min(max_n, len(ds))))
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}")
    recs = raw.reshape(-1, CIFAR_RECORD)
    if max_n is not None:
        recs = recs[:max_n]
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} > 9")
    images = (recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(images, labels, None, 10)


# -- augmentation ----------------------------------------------------------------

def shift_mirror(image: np.ndarray, dy: int, dx: int, mirror: bool, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop back at offset (pad + dy, pad + dx), optionally flip horizontally."""
    if mirror:
        image = image[..., ::-1]
    _, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(padded[:, pad + dy:pad + dy + h, pad + dx:pad + dx + w])


def augment(sample: Sample, rng: np.random.Generator, pad: int = 4) -> Sample:
    """50% mirror plus pad-and-random-crop; the mask gets the same transform."""
    mirror = bool(rng.random() < 0.5)
    dy, dx = (int(v) for v in rng.integers(-pad, pad + 1, size=2))
    mask = None if sample.mask is None else shift_mirror(sample.mask, dy, dx, mirror, pad)
    return Sample(shift_mirror(sample.image, dy, dx, mirror, pad), sample.label, mask)


def augment_batch(images, masks, rng, pad: int = 4):
    out = np.empty_like(images)
    out_masks = None if masks is None else np.empty_like(masks)
    for i in range(len(images)):
        s = augment(Sample(images[i], 0, None if masks is None else masks[i]), rng, pad)
        out[i] = s.image
        if out_masks is not None:
            out_masks[i] = s.mask
    return out, out_masks
