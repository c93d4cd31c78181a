"""Dataset ingestion: IDX image files, synthetic generators, and the
binary complementary-dataset format.

Complementary dataset file (little-endian)::

    8 bytes   b"ATCLCDAT"
    u32       K
    u32       n
    u32       d
    u32       mode (0 = scl, 1 = mcl)
    n records:
        d x f32   features
        u32       ordinary label (evaluation only)
        u32       m = |complementary set|
        m x u32   complementary classes, ascending
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from atcl.labels import ComplementaryDataset, make_complementary_dataset
from atcl.rng import stream

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "ATCL_DATA_DIR"


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: file shorter than its {header}-byte header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: expected {size} payload bytes, found {len(raw) - header}")
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, data


def load_idx_images(path) -> np.ndarray:
    dims, data = _parse_idx(_read_bytes(path), IMAGES_MAGIC, 3, path)
    n, rows, cols = dims
    return (data.reshape(n, rows * cols).astype(np.float32) / 255.0).astype(np.float32)


def load_idx_labels(path) -> np.ndarray:
    _, data = _parse_idx(_read_bytes(path), LABELS_MAGIC, 1, path)
    return data.astype(np.int64)


def load_idx(images_path, labels_path) -> tuple:
    """Ordinary dataset ``(x, y)`` with pixels scaled to ``[0, 1]`` by 1/255."""
    x = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    if len(x) != len(y):
        raise IdxCountMismatchError(f"{len(x)} images but {len(y)} labels")
    return x, y


def write_idx_images(path, images: np.ndarray):
    """Write a ``[n, rows, cols]`` uint8 array as an IDX image file."""
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


@dataclass(frozen=True)
class SyntheticSpec:
    K: int
    n: int
    d: int
    separation: float
    sigma: float
    seed: int = 0
    style: str = "gaussian"
    density: float = 0.3

    def __post_init__(self):
        if not self.separation > 0:
            raise ValueError(f"separation must be > 0, got {self.separation}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.style == "gaussian" and self.d < self.K:
            raise ValueError("gaussian style needs d >= K for orthogonal class directions")


def class_means(spec: SyntheticSpec) -> np.ndarray:
    rng = stream(spec.seed, "synthetic", "means")
    if spec.style == "gaussian":
        # orthonormal directions: every pair of means sits exactly `separation` apart
        q, _ = np.linalg.qr(rng.standard_normal((spec.d, spec.K)))
        return 0.5 + spec.separation / np.sqrt(2) * q.T
    templates = (rng.random((spec.K, spec.d)) < spec.density).astype(np.float64)
    return 0.5 + spec.separation * (templates - 0.5)


def gen_synthetic(spec: SyntheticSpec, split: str = "train") -> tuple:
    """Balanced clusters around :func:`class_means`, clipped to ``[0, 1]``.

    ``gaussian`` places means along orthonormal directions around the cube
    centre; ``prototype`` uses random binary templates (pixel density
    ``density``) with contrast ``separation``, which behaves like
    thresholdable digit images under L-inf perturbations.  Different
    ``split`` names draw different samples around the same means.
    """
    means = class_means(spec)
    rng = stream(spec.seed, "synthetic", split)
    y = np.arange(spec.n) % spec.K
    y = y[rng.permutation(spec.n)]
    x = means[y] + spec.sigma * rng.standard_normal((spec.n, spec.d))
    return np.clip(x, 0.0, 1.0).astype(np.float32), y.astype(np.int64)


def _find_idx_files(data_dir) -> dict | None:
    if data_dir is None:
        return None
    root = Path(data_dir)
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    found = {}
    for key, stem in names.items():
        for candidate in (root / stem, root / (stem + ".gz")):
            if candidate.exists():
                found[key] = candidate
                break
        else:
            return None
    return found


def load_dataset(data_cfg, seed: int = 0) -> dict:
    """Ordinary train/test arrays according to a :class:`DataConfig`.

    ``source="auto"`` uses IDX files from ``data_dir`` (or ``$ATCL_DATA_DIR``)
    when all four are present and falls back to the synthetic generator.
    Returns ``{"train": (x, y), "test": (x, y), "source": str}``.
    """
    data_dir = data_cfg.data_dir or os.environ.get(DATA_DIR_ENV)
    files = _find_idx_files(data_dir) if data_cfg.source in ("auto", "idx") else None
    if data_cfg.source == "idx" and files is None:
        raise FileNotFoundError(f"IDX files not found under {data_dir!r}")
    if files is not None:
        xtr, ytr = load_idx(files["train_images"], files["train_labels"])
        xte, yte = load_idx(files["test_images"], files["test_labels"])
        rng = stream(seed, "subset")
        tr = rng.permutation(len(xtr))[: data_cfg.n_train]
        te = rng.permutation(len(xte))[: data_cfg.n_test]
        return {"train": (xtr[tr], ytr[tr]), "test": (xte[te], yte[te]), "source": f"idx:{data_dir}"}
    s = data_cfg.synthetic
    if data_cfg.source == "auto":
        log.info("no IDX files found; using the synthetic %s generator", s.style)
    base = dict(K=data_cfg.K, d=s.d, separation=s.separation, sigma=s.sigma,
                seed=seed, style=s.style, density=s.density)
    train = gen_synthetic(SyntheticSpec(n=data_cfg.n_train, **base), "train")
    test = gen_synthetic(SyntheticSpec(n=data_cfg.n_test, **base), "test")
    return {"train": train, "test": test, "source": f"synthetic:{s.style}"}


def complementary_from_config(x, y, data_cfg, seed: int) -> ComplementaryDataset:
    return make_complementary_dataset(x, y, data_cfg.K, data_cfg.cl_mode, seed, data_cfg.mcl_size)


_DS_MAGIC = b"ATCLCDAT"


def save_complementary(path, ds: ComplementaryDataset):
    n, K = ds.cl_mask.shape
    d = ds.x.shape[1] if ds.x.ndim == 2 else 0
    parts = [_DS_MAGIC, struct.pack("<4I", K, n, d, 0 if ds.mode == "scl" else 1)]
    for i in range(n):
        cls = np.flatnonzero(ds.cl_mask[i]).astype("<u4")
        parts.append(np.asarray(ds.x[i], dtype="<f4").tobytes())
        parts.append(struct.pack("<2I", int(ds.y[i]), len(cls)))
        parts.append(cls.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_complementary(path) -> ComplementaryDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != _DS_MAGIC:
        raise IdxMagicError(f"{path}: not a complementary dataset file")
    if len(raw) < 24:
        raise IdxTruncatedError(f"{path}: truncated header")
    K, n, d, mode = struct.unpack("<4I", raw[8:24])
    x = np.zeros((n, d), dtype=np.float32)
    y = np.zeros(n, dtype=np.int64)
    mask = np.zeros((n, K), dtype=bool)
    off = 24
    try:
        for i in range(n):
            x[i] = np.frombuffer(raw, dtype="<f4", count=d, offset=off)
            off += 4 * d
            y[i], m = struct.unpack_from("<2I", raw, off)
            off += 8
            mask[i, np.frombuffer(raw, dtype="<u4", count=m, offset=off)] = True
            off += 4 * m
    except (ValueError, struct.error) as exc:
        raise IdxTruncatedError(f"{path}: truncated at record {i}") from exc
    return ComplementaryDataset(x, mask, y, "scl" if mode == 0 else "mcl")
