"""Task streams: the synthetic sinusoid generator and the two MNIST transforms.

Also holds the IDX reader and the HTTP fetcher for the MNIST files.
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import os
import shutil
import struct
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FetchError, IngestionError, IntegrityError
from .numcore import STREAM_ENCODER, RngStream

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# synthetic benchmark

LATENT_DIM = 24
BLOCK_DIM = 8
FREQUENCY = 8.0


@dataclass
class SyntheticSpec:
    encoder: np.ndarray  # [24, 2], unit-norm rows
    kind: str = "classification"
    n_tasks: int = 3
    block_dim: int = BLOCK_DIM
    frequency: float = FREQUENCY

    @classmethod
    def from_seed(cls, seed: int, kind: str = "classification") -> "SyntheticSpec":
        if kind not in ("classification", "regression"):
            raise ConfigError(f"synthetic kind must be classification or regression, got {kind!r}")
        g = RngStream(seed, STREAM_ENCODER).generator
        enc = g.standard_normal((LATENT_DIM, 2))
        enc /= np.linalg.norm(enc, axis=1, keepdims=True)
        return cls(enc, kind)


def synthetic_signal(spec: SyntheticSpec, t: int, X: np.ndarray) -> np.ndarray:
    """Mean of ``sin(w * z_i)`` over task ``t``'s latent block, in [-1, 1]."""
    if not 0 <= t < spec.n_tasks:
        raise ConfigError(f"synthetic task index must be in [0, {spec.n_tasks}), got {t}")
    z = X @ spec.encoder.T
    block = z[:, t * spec.block_dim:(t + 1) * spec.block_dim]
    return np.sin(spec.frequency * block).mean(axis=1)


def synthetic_batch(spec: SyntheticSpec, t: int, n: int, rng: RngStream):
    X = rng.uniform((n, 2), -1.0, 1.0)
    s = synthetic_signal(spec, t, X)
    if spec.kind == "classification":
        return X, (s > 0).astype(np.int64)
    return X, s


# --------------------------------------------------------------------------
# IDX files

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# SHA-256 of the decompressed canonical files; compressed bytes vary with the
# gzip implementation, the payload does not.
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}

DEFAULT_URL_BASE = "https://ossci-datasets.s3.amazonaws.com/mnist/"


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IngestionError(f"corrupt gzip stream: {exc}", path) from exc
    return raw


def parse_idx(raw: bytes, expected_magic: int, path=None) -> np.ndarray:
    if len(raw) < 4:
        raise IngestionError("truncated IDX header", path, len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IngestionError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path, 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError("truncated IDX dimension header", path, len(raw))
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IngestionError(f"truncated IDX payload: need {count} bytes", path, len(raw))
    if len(raw) - header > count:
        raise IngestionError("trailing bytes after IDX payload", path, header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx_file(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    return parse_idx(_read_maybe_gzip(path), expected_magic, path)


def _locate(data_dir: Path, stem: str) -> Path:
    for name in (stem + ".gz", stem):
        p = data_dir / name
        if p.exists():
            return p
    raise IngestionError(f"missing MNIST file {stem}[.gz]", data_dir / stem)


@dataclass
class MnistData:
    train_images: np.ndarray  # [N, 784] float64 in [0, 1]
    train_labels: np.ndarray  # [N] int64
    test_images: np.ndarray
    test_labels: np.ndarray


def _load_pair(data_dir: Path, img_stem: str, lbl_stem: str):
    img_path, lbl_path = _locate(data_dir, img_stem), _locate(data_dir, lbl_stem)
    images = read_idx_file(img_path, IMAGES_MAGIC)
    labels = read_idx_file(lbl_path, LABELS_MAGIC)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise IngestionError(f"expected [N, 28, 28] images, got {images.shape}", img_path, 4)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", lbl_path, 4
        )
    return images.reshape(len(images), 784) / 255.0, labels.astype(np.int64)


def load_mnist_idx(path) -> MnistData:
    """Load the four MNIST IDX files (plain or gzip) from a directory."""
    data_dir = Path(path)
    tr_x, tr_y = _load_pair(data_dir, MNIST_FILES["train_images"], MNIST_FILES["train_labels"])
    te_x, te_y = _load_pair(data_dir, MNIST_FILES["test_images"], MNIST_FILES["test_labels"])
    return MnistData(tr_x, tr_y, te_x, te_y)


def _payload_digest(path: Path) -> str:
    return hashlib.sha256(_read_maybe_gzip(path)).hexdigest()


def fetch_mnist(url_base: str = DEFAULT_URL_BASE, dest_dir="data/mnist", digests=None, timeout=60.0):
    """Download the four gzip files into ``dest_dir`` unless already valid.

    Files whose payload digest does not match are renamed to
    ``*.quarantine`` and an :class:`IntegrityError` is raised.
    """
    digests = MNIST_SHA256 if digests is None else digests
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    if not url_base.endswith("/"):
        url_base += "/"
    paths = []
    for stem in MNIST_FILES.values():
        target = dest / (stem + ".gz")
        existing = [p for p in (target, dest / stem) if p.exists()]
        if existing and _payload_digest(existing[0]) == digests[stem]:
            paths.append(existing[0])
            continue
        url = url_base + stem + ".gz"
        tmp = target.with_suffix(".gz.part")
        log.info("fetching %s", url)
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as fh:
                shutil.copyfileobj(resp, fh)
        except (urllib.error.URLError, OSError) as exc:
            tmp.unlink(missing_ok=True)
            raise FetchError(f"failed to fetch {url}: {exc}") from exc
        digest = _payload_digest(tmp)
        if digest != digests[stem]:
            bad = target.with_suffix(".gz.quarantine")
            os.replace(tmp, bad)
            raise IntegrityError(f"digest mismatch for {url}: got {digest}; quarantined as {bad}")
        os.replace(tmp, target)
        paths.append(target)
    return paths


# --------------------------------------------------------------------------
# task streams


@dataclass
class TaskStream:
    """Endless seeded minibatch stream for one task.

    Finite datasets are visited in a fresh seeded shuffle per pass; the
    synthetic kind draws new points every batch.
    """

    task_index: int
    kind: str  # synthetic-clf | synthetic-reg | shuffled-labels | permuted-pixels
    batch_size: int
    rng: RngStream
    images: np.ndarray | None = None
    labels: np.ndarray | None = None
    label_perm: np.ndarray | None = None
    pixel_perm: np.ndarray | None = None
    synthetic: SyntheticSpec | None = None
    _order: np.ndarray | None = field(default=None, repr=False)
    _pos: int = 0

    def transform(self, images: np.ndarray, labels: np.ndarray):
        if self.pixel_perm is not None:
            images = images[:, self.pixel_perm]
        if self.label_perm is not None:
            labels = self.label_perm[labels]
        return images, labels

    def next_batch(self, n: int | None = None):
        n = self.batch_size if n is None else n
        if self.synthetic is not None:
            return synthetic_batch(self.synthetic, self.task_index, n, self.rng)
        N = len(self.labels)
        picked = []
        need = n
        while need > 0:
            if self._order is None or self._pos >= N:
                self._order = self.rng.generator.permutation(N)
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            picked.append(take)
            self._pos += len(take)
            need -= len(take)
        idx = np.concatenate(picked)
        return self.transform(self.images[idx], self.labels[idx])

    def __iter__(self):
        while True:
            yield self.next_batch()


def label_permutation(t: int, perm_seed: int) -> np.ndarray:
    if t == 0:
        return np.arange(10)
    return RngStream(perm_seed, 100).substream(t).generator.permutation(10)


def pixel_permutation(t: int, perm_seed: int) -> np.ndarray:
    if t == 0:
        return np.arange(784)
    return RngStream(perm_seed, 101).substream(t).generator.permutation(784)


def shuffled_label_stream(data: MnistData, t: int, perm_seed: int, B: int, rng: RngStream | None = None):
    if t < 0:
        raise ConfigError("task index must be >= 0")
    rng = rng if rng is not None else RngStream(perm_seed, 2).substream(t)
    return TaskStream(t, "shuffled-labels", B, rng, data.train_images, data.train_labels,
                      label_perm=label_permutation(t, perm_seed))


def permuted_pixel_stream(data: MnistData, t: int, perm_seed: int, B: int, rng: RngStream | None = None):
    if t < 0:
        raise ConfigError("task index must be >= 0")
    rng = rng if rng is not None else RngStream(perm_seed, 2).substream(t)
    return TaskStream(t, "permuted-pixels", B, rng, data.train_images, data.train_labels,
                      pixel_perm=pixel_permutation(t, perm_seed))


def synthetic_stream(spec: SyntheticSpec, t: int, B: int, rng: RngStream):
    kind = "synthetic-clf" if spec.kind == "classification" else "synthetic-reg"
    return TaskStream(t, kind, B, rng, synthetic=spec)
