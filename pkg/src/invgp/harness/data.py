"""Datasets: IDX ingestion, deterministic rotation, and task loaders.

MNIST-format files are read when present under the data root (env var
INVGP_DATA_ROOT or the config's data_root).  When they are absent the
harness falls back to a deterministic substitute built from sklearn's
bundled 8x8 digits, upsampled to 28x28 and expanded with small affine
jitters; provenance records which source was used.
"""

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..augment import warp_batch
from ..numcore import RngStream, draw_array

DATA_ROOT_ENV = "INVGP_DATA_ROOT"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class BadMagic(Exception):
    """An IDX file does not start with the expected magic number."""


class TruncatedFile(Exception):
    """An IDX file ends before the promised payload."""


class CountMismatch(Exception):
    """Image and label files disagree on the number of records."""


@dataclass
class Dataset:
    """Inputs in [0,1] with integer labels and recorded provenance.

    ``targets`` carries real-valued regression responses when the task
    has them; classification tasks leave it None and use ``labels``.
    """

    inputs: np.ndarray
    labels: np.ndarray
    split: str
    provenance: dict = field(default_factory=dict)
    image_shape: tuple = None
    targets: np.ndarray = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("inputs must be a nonempty N x D array")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise CountMismatch(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        lo, hi = self.inputs.min(), self.inputs.max()
        if lo < -1e-9 or hi > 1 + 1e-9:
            raise ValueError(f"inputs must lie in [0,1], found [{lo}, {hi}]")

    @property
    def N(self):
        return self.inputs.shape[0]


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFile(f"{path}: wanted {n} bytes, got {len(data)}")
    return data


def _read_idx_images(path):
    with _open_maybe_gzip(path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, path))
        if magic != 0x00000803:
            raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x00000803")
        raw = _read_exact(fh, n * rows * cols, path)
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.astype(float) / 255.0, (rows, cols)


def _read_idx_labels(path):
    with _open_maybe_gzip(path) as fh:
        magic, n = struct.unpack(">II", _read_exact(fh, 8, path))
        if magic != 0x00000801:
            raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x00000801")
        raw = _read_exact(fh, n, path)
    return np.frombuffer(raw, dtype=np.uint8).astype(int)


def load_idx(images_path, labels_path, split="train"):
    """Parse an IDX image/label file pair into a Dataset."""
    inputs, shape = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if inputs.shape[0] != labels.shape[0]:
        raise CountMismatch(
            f"{inputs.shape[0]} images vs {labels.shape[0]} labels")
    return Dataset(inputs, labels, split,
                   provenance={"source": f"{images_path} + {labels_path}"},
                   image_shape=shape)


def write_idx(images, labels, images_path, labels_path):
    """Write float images in [0,1] (N, H, W) and labels as IDX files."""
    images = np.asarray(images, dtype=float)
    n, rows, cols = images.shape
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# deterministic image transforms
# ---------------------------------------------------------------------------

def _rotation_mats(angles_rad, shifts=None):
    c, s = np.cos(angles_rad), np.sin(angles_rad)
    mats = np.zeros((len(angles_rad), 2, 3))
    mats[:, 0, 0] = c
    mats[:, 0, 1] = -s
    mats[:, 1, 0] = s
    mats[:, 1, 1] = c
    if shifts is not None:
        mats[:, :, 2] = shifts
    return mats


def make_rotated(ds, alpha_true, seed):
    """Rotate every image by an independent angle uniform in +-alpha_true.

    ``alpha_true`` is in degrees.  The draws come from a counter-based
    stream, so the same seed always produces the identical dataset; the
    drawn angles are kept in the provenance for audit.
    """
    if ds.image_shape is None:
        raise ValueError("make_rotated needs image-shaped inputs")
    H, W = ds.image_shape
    stream = RngStream(seed, ("make_rotated",))
    u = draw_array(stream, "uniform01", (ds.N,))
    angles = (2.0 * u - 1.0) * float(alpha_true)
    imgs = ds.inputs.reshape(ds.N, H, W)
    out = warp_batch(imgs, _rotation_mats(np.deg2rad(angles)))
    prov = dict(ds.provenance)
    prov.update(alpha_true=float(alpha_true), rotation_seed=int(seed),
                angles_degrees=angles)
    return Dataset(np.clip(out.reshape(ds.N, H * W), 0.0, 1.0),
                   ds.labels, ds.split, prov, ds.image_shape)


def _upsample(images, side):
    """Bilinear resize of (B, H, W) images to (B, side, side)."""
    B = images.shape[0]
    axis = np.linspace(-1.0, 1.0, side)
    gx, gy = np.meshgrid(axis, axis)
    grid = np.broadcast_to(np.stack([gx, gy], axis=-1), (B, side, side, 2))
    return ad.bilinear_sample(images, grid)


def _jitter_expand(images, labels, n, stream, max_angle=12.0, max_shift=0.12):
    """Grow a pool to n samples with small random rotations and shifts."""
    pool = images.shape[0]
    idx = np.arange(n) % pool
    u = draw_array(stream, "uniform01", (n, 3))
    angles = np.deg2rad((2 * u[:, 0] - 1) * max_angle)
    shifts = (2 * u[:, 1:] - 1) * max_shift
    out = warp_batch(images[idx], _rotation_mats(angles, shifts))
    return np.clip(out, 0.0, 1.0), labels[idx]


# ---------------------------------------------------------------------------
# task sources
# ---------------------------------------------------------------------------

def toy_symmetric_fn(X):
    """A smooth function symmetric under swapping the two coordinates."""
    return np.sin(X[:, 0] + X[:, 1]) + 0.5 * X[:, 0] * X[:, 1]


def load_toy_symmetric(n_train=50, n_test=50, seed=0, noise=0.05):
    """Training points on the half-domain x1 >= x2, test on the mirror.

    The generating function is swap-symmetric, so an invariant model can
    transfer everything it learns to the unseen half.
    """
    stream = RngStream(seed, ("toy",))
    pts = 4.0 * draw_array(stream, "uniform01", (n_train + n_test, 2)) - 2.0
    upper = np.sort(pts, axis=1)[:, ::-1]        # x1 >= x2
    Xtr = upper[:n_train]
    Xte = np.sort(pts[n_train:], axis=1)          # x1 <= x2: mirrored half
    ytr = toy_symmetric_fn(Xtr) + noise * draw_array(
        stream.child("noise"), "standard_normal", (n_train,))
    yte = toy_symmetric_fn(Xte)
    scale = 0.25
    train = Dataset(scale * (Xtr + 2.0), np.zeros(n_train, dtype=int), "train",
                    {"source": "toy_symmetric", "seed": seed, "noise": noise},
                    targets=ytr)
    test = Dataset(scale * (Xte + 2.0), np.zeros(n_test, dtype=int), "test",
                   {"source": "toy_symmetric", "seed": seed}, targets=yte)
    return train, test


def _mnist_root(cfg):
    return cfg.data_root or os.environ.get(DATA_ROOT_ENV, "")


def _try_load_real_mnist(root, split):
    if not root:
        return None
    img_name, lbl_name = MNIST_FILES[split]
    for suffix in ("", ".gz"):
        ip = os.path.join(root, img_name + suffix)
        lp = os.path.join(root, lbl_name + suffix)
        if os.path.exists(ip) and os.path.exists(lp):
            return load_idx(ip, lp, split)
    return None


def _digit_pools(seed):
    """The bundled sklearn digits, shuffled and split into two pools."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = raw.images / 16.0
    labels = raw.target.astype(int)
    order = np.argsort(draw_array(RngStream(seed, ("digit_split",)),
                                  "uniform01", (len(labels),)))
    images, labels = images[order], labels[order]
    cut = 1200
    return (images[:cut], labels[:cut]), (images[cut:], labels[cut:])


def load_digit_images(split, n, seed, data_root=""):
    """28x28 digit images for one split: real MNIST or the substitute."""
    real = _try_load_real_mnist(data_root, split)
    if real is not None:
        if n and n < real.N:
            pick = np.argsort(draw_array(
                RngStream(seed, ("subset", split)), "uniform01", (real.N,)))[:n]
            real = Dataset(real.inputs[pick], real.labels[pick], split,
                           dict(real.provenance, subset_seed=seed),
                           real.image_shape)
        return real
    (tr_imgs, tr_lbls), (te_imgs, te_lbls) = _digit_pools(seed)
    imgs, lbls = (tr_imgs, tr_lbls) if split == "train" else (te_imgs, te_lbls)
    big = _upsample(imgs, 28)
    out, labels = _jitter_expand(big, lbls, n, RngStream(seed, ("expand", split)))
    prov = {"source": "sklearn-digits substitute (28x28 upsample + jitter)",
            "seed": seed}
    return Dataset(out.reshape(n, 28 * 28), labels, split, prov, (28, 28))


_TASK_DEFAULTS = {
    "binary_oddeven": (2000, 1000),
    "mnist10": (10000, 10000),
    "mnist_rot": (10000, 10000),
}


def load_task(cfg):
    """Materialise (train, test) Datasets for a config's task."""
    if cfg.task == "toy_symmetric":
        return load_toy_symmetric(cfg.n_train or 50, cfg.n_test or 50,
                                  seed=cfg.seed)
    dtr, dte = _TASK_DEFAULTS[cfg.task]
    n_train, n_test = cfg.n_train or dtr, cfg.n_test or dte
    root = _mnist_root(cfg)
    train = load_digit_images("train", n_train, cfg.seed, root)
    test = load_digit_images("test", n_test, cfg.seed, root)

    alpha = cfg.rotate_alpha
    if cfg.task == "mnist_rot" and alpha == 0.0:
        alpha = 180.0
    if alpha:
        train = make_rotated(train, alpha, cfg.seed)
        test = make_rotated(test, alpha, cfg.seed + 1)

    if cfg.task == "binary_oddeven":
        for ds in (train, test):
            ds.provenance["digits"] = ds.labels.copy()
            ds.labels = np.where(ds.labels % 2 == 1, 1, -1)
    return train, test
