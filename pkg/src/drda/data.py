"""Synthetic domain pairs with controlled isometric shift, and IDX digit files."""
from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParseError
from .files import atomic_write_bytes

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    domain_tag: str = "source"
    seed: int | None = None
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ContractError("a domain needs at least one sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ContractError("labels must have one entry per sample")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.features, None, self.num_classes, self.domain_tag, self.seed, self.image_shape)


@dataclass(frozen=True)
class ShiftSpec:
    rotation_angle: float = 0.0
    translation: tuple[float, ...] = ()
    class_priors: tuple[float, ...] | None = None
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.class_priors is not None:
            p = np.asarray(self.class_priors, dtype=np.float64)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ContractError("class_priors must be a probability vector")
        if self.noise_scale < 0:
            raise ContractError("noise_scale must be nonnegative")


def rotation_matrix(angle: float, dim: int) -> np.ndarray:
    """Rotation by ``angle`` in the plane of the first two coordinates."""
    R = np.eye(dim)
    if dim >= 2:
        c, s = np.cos(angle), np.sin(angle)
        R[:2, :2] = [[c, -s], [s, c]]
    return R


def shift_points(X: np.ndarray, shift: ShiftSpec, pivot: np.ndarray) -> np.ndarray:
    """Rotate about ``pivot`` then translate: x -> R (x - pivot) + pivot + t."""
    X = np.asarray(X, dtype=np.float64)
    dim = X.shape[1]
    t = np.zeros(dim)
    if len(shift.translation):
        if len(shift.translation) != dim:
            raise ContractError(f"translation has {len(shift.translation)} entries, data has dim {dim}")
        t = np.asarray(shift.translation, dtype=np.float64)
    R = rotation_matrix(shift.rotation_angle, dim)
    return (X - pivot) @ R.T + pivot + t


def _class_counts(n: int, priors: np.ndarray) -> np.ndarray:
    raw = n * priors
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def _draw_centers(k: int, dim: int, rng: np.random.Generator, radius: float, min_sep: float) -> np.ndarray:
    for _ in range(10_000):
        C = rng.uniform(-radius, radius, (k, dim))
        gaps = np.linalg.norm(C[:, None] - C[None, :], axis=-1) + np.eye(k) * 1e9
        if gaps.min() >= min_sep:
            return C
    raise ContractError("could not place well-separated cluster centers; lower spread or k")


def gen_gaussian_blobs(k: int = 5, n: int = 2000, dim: int = 2, spread: float = 0.35,
                       shift: ShiftSpec = ShiftSpec(), seed: int = 0,
                       center_radius: float = 3.0, min_separation: float = 2.5
                       ) -> tuple[DomainDataset, DomainDataset]:
    if k < 2 or n < k:
        raise ContractError("need k >= 2 and n >= k")
    priors_t = np.full(k, 1.0 / k) if shift.class_priors is None else np.asarray(shift.class_priors, float)
    if priors_t.shape != (k,):
        raise ContractError("class_priors must have k entries")
    rng_c = np.random.default_rng([seed, 0])
    centers = _draw_centers(k, dim, rng_c, center_radius, min_separation)
    pivot = centers.mean(axis=0)
    centers_t = shift_points(centers, shift, pivot)

    def sample(ctrs, priors, stream, extra_noise):
        rng = np.random.default_rng([seed, stream])
        labels = np.repeat(np.arange(k), _class_counts(n, priors))
        labels = labels[rng.permutation(n)]
        X = ctrs[labels] + spread * rng.standard_normal((n, dim))
        if extra_noise > 0:
            X = X + extra_noise * rng.standard_normal((n, dim))
        return X, labels

    Xs, ys = sample(centers, np.full(k, 1.0 / k), 1, 0.0)
    Xt, yt = sample(centers_t, priors_t, 2, shift.noise_scale)
    return (DomainDataset(Xs, ys, k, "source", seed), DomainDataset(Xt, yt, k, "target", seed))


def _moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_outer = (n + 1) // 2
    n_inner = n // 2
    t_out = np.linspace(0.0, np.pi, n_outer)
    t_in = np.linspace(0.0, np.pi, n_inner)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    X = np.concatenate([outer, inner])
    y = np.concatenate([np.zeros(n_outer, np.int64), np.ones(n_inner, np.int64)])
    if noise > 0:
        X = X + noise * rng.standard_normal(X.shape)
    perm = rng.permutation(n)
    return X[perm], y[perm]


def gen_two_moons_pair(n: int = 1000, noise_scale: float = 0.1, shift: ShiftSpec = ShiftSpec(),
                       seed: int = 0) -> tuple[DomainDataset, DomainDataset]:
    if n < 2:
        raise ContractError("two moons needs n >= 2")
    Xs, ys = _moons(n, noise_scale, np.random.default_rng([seed, 1]))
    Xt, yt = _moons(n, noise_scale, np.random.default_rng([seed, 2]))
    # pivot: centroid of the noiseless moons
    pivot = np.array([0.5, 0.25])
    Xt = shift_points(Xt, shift, pivot)
    if shift.noise_scale > 0:
        Xt = Xt + shift.noise_scale * np.random.default_rng([seed, 3]).standard_normal(Xt.shape)
    return DomainDataset(Xs, ys, 2, "source", seed), DomainDataset(Xt, yt, 2, "target", seed)


# ---------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise ParseError(f"{what}: file too short for an IDX header", len(raw) if raw else 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{what}: truncated dimension header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise ParseError(f"{what}: truncated payload, expected {size} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, domain_tag: str = "source") -> DomainDataset:
    """Pixels scaled to [0, 1] and flattened row-major; the image shape is kept on the dataset."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"image count {images.shape[0]} != label count {labels.shape[0]}", 4)
    if images.shape[0] == 0:
        raise ParseError("IDX files contain no samples", 4)
    feats = images.astype(np.float64) / 255.0
    shape = tuple(images.shape[1:])
    feats = feats.reshape(images.shape[0], -1)
    return DomainDataset(feats, labels.astype(np.int64), num_classes, domain_tag, None, shape)


def _idx_bytes(array: np.ndarray, magic: int) -> bytes:
    return struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.astype(np.uint8).tobytes()


def write_idx(dataset: DomainDataset, images_path, labels_path, image_shape: tuple[int, int] | None = None) -> None:
    """Write pixel features in [0, 1] as IDX ubyte files (values are rounded to k/255)."""
    if dataset.labels is None:
        raise ContractError("IDX label file needs labels")
    shape = image_shape or dataset.image_shape
    if shape is None or int(np.prod(shape)) != dataset.dim:
        raise ContractError("image_shape is required and must match the feature width")
    pixels = np.rint(np.clip(dataset.features, 0.0, 1.0) * 255.0).reshape((len(dataset), *shape))
    atomic_write_bytes(images_path, _idx_bytes(pixels, IDX_IMAGES_MAGIC))
    atomic_write_bytes(labels_path, _idx_bytes(dataset.labels, IDX_LABELS_MAGIC))


def pad_images(images: np.ndarray, size: int = 28) -> np.ndarray:
    """Zero-pad (n, h, w) images to (n, size, size), centred."""
    n, h, w = images.shape
    if h > size or w > size:
        raise ContractError(f"images of {h}x{w} do not fit in {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((n, size, size), dtype=images.dtype)
    out[:, top:top + h, left:left + w] = images
    return out


def usps_to_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Convert 16x16 USPS digits (floats in [0, 1] or [-1, 1], or uint8) to 28x28 IDX files."""
    imgs = np.asarray(images)
    if imgs.ndim == 2:
        imgs = imgs.reshape(-1, 16, 16)
    if imgs.dtype != np.uint8:
        imgs = imgs.astype(np.float64)
        if imgs.min() < 0:
            imgs = (imgs + 1.0) / 2.0
        imgs = np.rint(np.clip(imgs, 0.0, 1.0) * 255.0).astype(np.uint8)
    padded = pad_images(imgs, 28)
    atomic_write_bytes(images_path, _idx_bytes(padded, IDX_IMAGES_MAGIC))
    atomic_write_bytes(labels_path, _idx_bytes(np.asarray(labels), IDX_LABELS_MAGIC))


# ---------------------------------------------------------------- CSV


def to_csv(dataset: DomainDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"x_{j}" for j in range(dataset.dim)])
    labels = dataset.labels if dataset.labels is not None else np.full(len(dataset), -1)
    for y, row in zip(labels, dataset.features):
        w.writerow([int(y)] + [repr(float(v)) for v in row])
    return buf.getvalue()


def from_csv(text: str, num_classes: int, domain_tag: str = "source") -> DomainDataset:
    rows = list(csv.reader(io.StringIO(text)))
    body = rows[1:]
    labels = np.array([int(r[0]) for r in body])
    feats = np.array([[float(v) for v in r[1:]] for r in body])
    return DomainDataset(feats, None if np.all(labels < 0) else labels, num_classes, domain_tag)
