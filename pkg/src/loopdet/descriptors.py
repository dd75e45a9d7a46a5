"""Descriptor containers, normalization, attention-score filtering and PCA reduction.

Global descriptors are single fixed-length vectors used for retrieval; local
features carry keypoint coordinates, an attention score and a compact
descriptor used for spatial verification.  Local descriptors follow the
L2-normalize -> PCA project -> L2-renormalize reduction chain.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Iterable

import numpy as np

DEFAULT_REDUCED_DIM = 40

PCA_MAGIC = b"FPCA"
PCA_VERSION = 1


class DegenerateDescriptorError(ValueError):
    """A descriptor or projection collapsed to the zero vector."""


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving direction.

    Raises :class:`DegenerateDescriptorError` on the zero vector.  Pre-scales
    by the largest magnitude so subnormal inputs do not underflow to zero.
    """
    v = np.asarray(v, dtype=np.float64)
    peak = float(np.abs(v).max()) if v.size else 0.0
    if peak == 0.0:
        raise DegenerateDescriptorError("cannot normalize zero vector")
    w = v / peak
    return w / float(np.linalg.norm(w))


@dataclass(frozen=True, eq=False)
class GlobalDescriptor:
    """Per-frame retrieval vector."""

    frame_id: int
    values: np.ndarray

    def __post_init__(self):
        if self.frame_id < 0:
            raise ValueError(f"frame_id must be non-negative, got {self.frame_id}")
        values = np.asarray(self.values)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("descriptor values must be a non-empty 1-d vector")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def normalized(self) -> "GlobalDescriptor":
        return replace(self, values=l2_normalize(self.values))


@dataclass(frozen=True, eq=False)
class LocalFeature:
    """One keypoint: pixel coordinates, attention score, descriptor vector."""

    x: float
    y: float
    score: float
    descriptor: np.ndarray

    def __post_init__(self):
        if self.score < 0:
            raise ValueError(f"attention score must be non-negative, got {self.score}")
        object.__setattr__(self, "descriptor", np.asarray(self.descriptor))


@dataclass(eq=False)
class LocalFeatureSet:
    """Ordered local features of one frame, stored column-wise for speed.

    ``coords`` is (n, 2), ``scores`` is (n,), ``descriptors`` is (n, d).
    The per-feature object view is available through :attr:`features`.
    """

    frame_id: int
    coords: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        if self.frame_id < 0:
            raise ValueError(f"frame_id must be non-negative, got {self.frame_id}")
        self.coords = np.atleast_2d(np.asarray(self.coords))
        self.scores = np.asarray(self.scores).reshape(-1)
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors))
        n = self.scores.shape[0]
        if n == 0:
            self.coords = self.coords.reshape(0, 2)
            if self.descriptors.size == 0 and self.descriptors.shape[0] != 0:
                self.descriptors = self.descriptors.reshape(0, self.descriptors.shape[-1])
        if self.coords.shape != (n, 2):
            raise ValueError(f"coords must have shape ({n}, 2), got {self.coords.shape}")
        if self.descriptors.shape[0] != n:
            raise ValueError(
                f"descriptor count {self.descriptors.shape[0]} does not match {n} features"
            )
        if n and (self.scores < 0).any():
            raise ValueError("attention scores must be non-negative")

    @classmethod
    def empty(cls, frame_id: int, dim: int) -> "LocalFeatureSet":
        return cls(
            frame_id,
            np.zeros((0, 2), dtype=np.float32),
            np.zeros(0, dtype=np.float32),
            np.zeros((0, dim), dtype=np.float32),
        )

    @classmethod
    def from_features(cls, frame_id: int, features: Iterable[LocalFeature]) -> "LocalFeatureSet":
        feats = list(features)
        if not feats:
            raise ValueError("use LocalFeatureSet.empty() for an empty set")
        dims = {f.descriptor.shape[0] for f in feats}
        if len(dims) != 1:
            raise ValueError(f"features mix descriptor dimensions: {sorted(dims)}")
        return cls(
            frame_id,
            np.array([(f.x, f.y) for f in feats]),
            np.array([f.score for f in feats]),
            np.stack([f.descriptor for f in feats]),
        )

    @property
    def features(self) -> list[LocalFeature]:
        return [
            LocalFeature(float(x), float(y), float(s), d)
            for (x, y), s, d in zip(self.coords, self.scores, self.descriptors)
        ]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return self.scores.shape[0]


def filter_by_score(fs: LocalFeatureSet, delta: float) -> LocalFeatureSet:
    """Keep features whose attention score is strictly greater than ``delta``.

    Order is preserved; ties at exactly ``delta`` are dropped.
    """
    mask = fs.scores > delta
    return LocalFeatureSet(fs.frame_id, fs.coords[mask], fs.scores[mask], fs.descriptors[mask])


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Linear reduction model: centered projection onto orthonormal components.

    ``basis`` is (raw_dim, out_dim) with orthonormal columns sorted by
    decreasing explained variance; ``eigenvalues`` holds the matching sample
    variances.  ``degenerate`` marks rank-deficient fits whose trailing
    components are an arbitrary orthonormal completion with zero variance.
    """

    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    whiten: bool = False
    degenerate: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        basis = np.asarray(self.basis, dtype=np.float64)
        eig = np.asarray(self.eigenvalues, dtype=np.float64)
        if basis.ndim != 2 or mean.shape != (basis.shape[0],) or eig.shape != (basis.shape[1],):
            raise ValueError("inconsistent PCA model shapes")
        if (eig < 0).any() or (np.diff(eig) > 1e-12).any():
            raise ValueError("eigenvalues must be non-negative and non-increasing")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def raw_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def out_dim(self) -> int:
        return self.basis.shape[1]


def fit_pca(samples, out_dim: int = DEFAULT_REDUCED_DIM, *, whiten: bool = False) -> PcaModel:
    """Fit a PCA reduction on L2-normalized raw local descriptors.

    Samples are re-normalized defensively (a no-op for already unit-norm
    rows), centered, and decomposed; the returned basis spans the top
    ``out_dim`` principal directions of the sample covariance (1/(n-1)
    normalization).  A rank-deficient covariance yields a model padded with
    an orthonormal completion, zero variance, and ``degenerate=True``.

    Raises ``ValueError`` unless the sample count exceeds ``out_dim``.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("samples must be a 2-d array (n_samples, raw_dim)")
    n, d = X.shape
    if out_dim < 1 or out_dim > d:
        raise ValueError(f"out_dim must be in [1, {d}], got {out_dim}")
    if n <= out_dim:
        raise ValueError(f"need more than {out_dim} samples, got {n}")

    norms = np.linalg.norm(X, axis=1)
    if (norms == 0.0).any():
        raise DegenerateDescriptorError("samples contain a zero descriptor")
    X = X / norms[:, None]

    mean = X.mean(axis=0)
    Xc = X - mean
    # full_matrices=False still yields min(n, d) >= out_dim right-singular rows
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    if S.shape[0] < out_dim:
        raise ValueError("insufficient singular vectors for requested out_dim")
    # rows are unit vectors, so singular values below the eps floor are noise
    tol = max(n, d) * np.finfo(np.float64).eps * max(S[0], 1.0)
    eigenvalues = (S[:out_dim] ** 2) / (n - 1)
    deficient = S[:out_dim] <= tol
    eigenvalues[deficient] = 0.0
    return PcaModel(
        mean=mean,
        basis=Vt[:out_dim].T,
        eigenvalues=eigenvalues,
        whiten=whiten,
        degenerate=bool(deficient.any()),
    )


def _project(model: PcaModel, X: np.ndarray) -> np.ndarray:
    """Center and project normalized descriptors; no re-normalization."""
    Z = (X - model.mean) @ model.basis
    if model.whiten:
        scale = np.sqrt(model.eigenvalues)
        positive = scale > 0
        Z[:, positive] /= scale[positive]
        Z[:, ~positive] = 0.0
    return Z


# projections of unit-norm inputs have O(1) coordinates; anything this small
# is numerically indistinguishable from the origin
_ZERO_PROJECTION = 1e-12


def reduce_local(model: PcaModel, f: LocalFeature) -> LocalFeature:
    """Reduce one raw local feature: L2 norm, centered projection, L2 renorm.

    Raises :class:`DegenerateDescriptorError` when the projection lands on
    the origin (norm below 1e-12); the caller is expected to drop such
    features.
    """
    raw = np.asarray(f.descriptor, dtype=np.float64)
    if raw.shape != (model.raw_dim,):
        raise ValueError(
            f"descriptor dimension {raw.shape} does not match model raw_dim {model.raw_dim}"
        )
    z = _project(model, l2_normalize(raw)[None, :])[0]
    if float(np.linalg.norm(z)) <= _ZERO_PROJECTION:
        raise DegenerateDescriptorError("projection collapsed to the origin")
    return LocalFeature(f.x, f.y, f.score, l2_normalize(z))


def reduce_features(model: PcaModel, fs: LocalFeatureSet) -> LocalFeatureSet:
    """Vectorized :func:`reduce_local` over a whole set; degenerate rows are dropped."""
    if len(fs) == 0:
        return LocalFeatureSet.empty(fs.frame_id, model.out_dim)
    X = np.asarray(fs.descriptors, dtype=np.float64)
    if X.shape[1] != model.raw_dim:
        raise ValueError(
            f"descriptor dimension {X.shape[1]} does not match model raw_dim {model.raw_dim}"
        )
    norms = np.linalg.norm(X, axis=1)
    keep = norms > 0.0
    Z = np.zeros((X.shape[0], model.out_dim))
    Z[keep] = _project(model, X[keep] / norms[keep, None])
    z_norms = np.linalg.norm(Z, axis=1)
    keep &= z_norms > _ZERO_PROJECTION
    out = Z[keep] / z_norms[keep, None]
    return LocalFeatureSet(fs.frame_id, fs.coords[keep], fs.scores[keep], out)


def save_pca_model(path, model: PcaModel) -> None:
    """Write a model as little-endian binary: FPCA header, mean, basis, eigenvalues."""
    with open(path, "wb") as f:
        f.write(PCA_MAGIC)
        f.write(struct.pack("<III", PCA_VERSION, model.raw_dim, model.out_dim))
        f.write(model.mean.astype("<f4").tobytes())
        f.write(model.basis.astype("<f4").tobytes())  # row-major (raw_dim, out_dim)
        f.write(model.eigenvalues.astype("<f4").tobytes())
        f.write(struct.pack("<B", 1 if model.whiten else 0))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(f"truncated PCA model file while reading {what}")
    return data


def load_pca_model(path) -> PcaModel:
    """Read a model written by :func:`save_pca_model`; validates magic and version."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != PCA_MAGIC:
            raise ValueError(f"bad PCA model magic {magic!r}")
        version, raw_dim, out_dim = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != PCA_VERSION:
            raise ValueError(f"unsupported PCA model version {version}")
        mean = np.frombuffer(_read_exact(f, 4 * raw_dim, "mean"), dtype="<f4").astype(np.float64)
        basis = np.frombuffer(
            _read_exact(f, 4 * raw_dim * out_dim, "basis"), dtype="<f4"
        ).astype(np.float64).reshape(raw_dim, out_dim)
        eig = np.frombuffer(_read_exact(f, 4 * out_dim, "eigenvalues"), dtype="<f4").astype(
            np.float64
        )
        (whiten,) = struct.unpack("<B", _read_exact(f, 1, "whiten flag"))
        if f.read(1):
            raise ValueError("trailing bytes after PCA model payload")
    return PcaModel(
        mean=mean,
        basis=basis,
        eigenvalues=np.maximum(eig, 0.0),
        whiten=bool(whiten),
        degenerate=bool((eig <= 0).any()),
    )
