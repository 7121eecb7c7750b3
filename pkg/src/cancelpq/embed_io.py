"""Embedding sets: the EVEC file format, synthetic identities, PCA and normalization."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _binio
from ._binio import Reader
from .exceptions import DataError, FormatError, ParameterError

EVEC_MAGIC = b"EVEC"
LBLS_MAGIC = b"LBLS"
PCAM_MAGIC = b"PCAM"


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """A labelled ``count x dim`` float32 matrix.

    Arrays are made read-only on construction so a set can be shared freely.
    """

    vectors: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float32, copy=True)
        if v.ndim != 2:
            raise ParameterError(f"vectors must be 2-D, got shape {v.shape}")
        if v.shape[1] < 1:
            raise ParameterError("dim must be positive")
        if v.size and not np.all(np.isfinite(v)):
            row = int(np.flatnonzero(~np.all(np.isfinite(v), axis=1))[0])
            raise DataError(f"vector {row} has non-finite components")
        object.__setattr__(self, "vectors", _frozen(v))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (v.shape[0],):
                raise ParameterError(f"labels length {lab.shape} does not match count {v.shape[0]}")
            if lab.size and (lab.min() < 0 or lab.max() > 0xFFFFFFFF):
                raise ParameterError("labels must be non-negative 32-bit integers")
            object.__setattr__(self, "labels", _frozen(lab.astype(np.int64)))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.count

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        if self.vectors.shape != other.vectors.shape:
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        same_labels = self.labels is None or np.array_equal(self.labels, other.labels)
        return same_labels and np.array_equal(self.vectors, other.vectors)

    __hash__ = None

    def subset(self, index) -> "EmbeddingSet":
        labels = None if self.labels is None else self.labels[index]
        return EmbeddingSet(self.vectors[index], labels)


# -- EVEC ------------------------------------------------------------------

def dumps_evec(s: EmbeddingSet) -> bytes:
    parts = [_binio.header(EVEC_MAGIC), _binio.u32(s.count, s.dim),
             _binio.array_bytes(s.vectors, "<f4")]
    if s.labels is not None:
        parts += [LBLS_MAGIC, _binio.u32(s.count), _binio.array_bytes(s.labels, "<u4")]
    return b"".join(parts)


def loads_evec(data: bytes) -> EmbeddingSet:
    r = Reader(data)
    dtype = r.header(EVEC_MAGIC)
    if dtype != np.dtype("<f4"):
        raise FormatError("EVEC payload must be 32-bit reals", 5)
    count = r.u32("count")
    dim_at = r.pos
    dim = r.u32("dim")
    if dim == 0:
        raise FormatError("dim must be positive", dim_at)
    vectors = r.array((count, dim), "<f4", "vector payload", finite=True)
    labels = None
    if r.remaining:
        r.magic(LBLS_MAGIC)
        at = r.pos
        n = r.u32("label count")
        if n != count:
            raise FormatError(f"label count {n} != vector count {count}", at)
        labels = r.array((n,), "<u4", "label payload")
    r.end()
    return EmbeddingSet(vectors, labels)


def load_evec(path) -> EmbeddingSet:
    return loads_evec(Path(path).read_bytes())


def write_evec(s: EmbeddingSet, path) -> None:
    Path(path).write_bytes(dumps_evec(s))


# -- synthetic identities --------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_identities: int
    samples_per_identity: int
    dim: int
    intra_class_noise: float
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 1 or self.samples_per_identity < 1:
            raise ParameterError("identity and sample counts must be >= 1")
        if self.dim < 2:
            raise ParameterError("dim must be >= 2")
        if not self.intra_class_noise > 0:
            raise ParameterError("intra_class_noise must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ParameterError("seed must be an unsigned 64-bit integer")


def gen_synthetic(spec: SyntheticSpec) -> EmbeddingSet:
    """Unit-norm class centers on the sphere plus Gaussian within-class noise.

    Samples are stored identity-major: all samples of identity 0 first.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.standard_normal((spec.n_identities, spec.dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    reps = np.repeat(centers, spec.samples_per_identity, axis=0)
    x = reps + spec.intra_class_noise * rng.standard_normal(reps.shape)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.n_identities), spec.samples_per_identity)
    return EmbeddingSet(x, labels)


def holdout_split(s: EmbeddingSet, seed: int = 0):
    """Remove one random sample per identity as a probe.

    Returns ``(gallery, probes)``; both keep their labels.
    """
    if s.labels is None:
        raise DataError("hold-out split needs labels")
    rng = np.random.default_rng(seed)
    probe_idx = []
    for lab in np.unique(s.labels):
        members = np.flatnonzero(s.labels == lab)
        probe_idx.append(members[rng.integers(len(members))])
    mask = np.ones(s.count, dtype=bool)
    mask[probe_idx] = False
    return s.subset(mask), s.subset(np.sort(probe_idx))


# -- PCA -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray = field(default=None)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comp = np.atleast_2d(np.asarray(self.components, dtype=np.float64))
        if comp.shape[1] != mean.shape[0]:
            raise ParameterError("components and mean disagree on input_dim")
        if comp.shape[0] > comp.shape[1]:
            raise ParameterError("output_dim must not exceed input_dim")
        ev = self.explained_variance
        ev = np.zeros(comp.shape[0]) if ev is None else np.asarray(ev, dtype=np.float64)
        object.__setattr__(self, "mean", _frozen(mean.copy()))
        object.__setattr__(self, "components", _frozen(comp.copy()))
        object.__setattr__(self, "explained_variance", _frozen(ev.copy()))

    @property
    def input_dim(self):
        return self.components.shape[1]

    @property
    def output_dim(self):
        return self.components.shape[0]

    def reconstruct(self, y):
        return np.asarray(y, dtype=np.float64) @ self.components + self.mean


def fit_pca(s: EmbeddingSet, target_dim: int) -> PcaModel:
    """Top principal directions of the mean-centered covariance, no whitening.

    Each component is sign-fixed so that its largest-magnitude entry is
    non-negative, which makes the model deterministic given the data.
    """
    if not 1 <= target_dim <= min(s.count, s.dim):
        raise ParameterError(
            f"target_dim={target_dim} must lie in [1, min(count={s.count}, dim={s.dim})]")
    x = s.vectors.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(s.count - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:target_dim]
    comps = evecs[:, order].T
    pivot = np.abs(comps).argmax(axis=1)
    signs = np.sign(comps[np.arange(target_dim), pivot])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    return PcaModel(mean, comps, np.clip(evals[order], 0.0, None))


def apply_pca(model: PcaModel, s: EmbeddingSet) -> EmbeddingSet:
    if s.dim != model.input_dim:
        raise ParameterError(f"set dim {s.dim} != model input_dim {model.input_dim}")
    y = (s.vectors.astype(np.float64) - model.mean) @ model.components.T
    return EmbeddingSet(y, s.labels)


def dumps_pca(model: PcaModel) -> bytes:
    return b"".join([
        _binio.header(PCAM_MAGIC, _binio.DTYPE_F64),
        _binio.u32(model.input_dim, model.output_dim),
        _binio.array_bytes(model.mean, "<f8"),
        _binio.array_bytes(model.components, "<f8"),
        _binio.array_bytes(model.explained_variance, "<f8"),
    ])


def loads_pca(data: bytes) -> PcaModel:
    r = Reader(data)
    if r.header(PCAM_MAGIC) != np.dtype("<f8"):
        raise FormatError("PCAM payload must be 64-bit reals", 5)
    d_in = r.u32("input_dim")
    d_out = r.u32("output_dim")
    if d_in == 0 or d_out == 0 or d_out > d_in:
        raise FormatError(f"invalid PCA shape {d_out}x{d_in}", 9)
    mean = r.array((d_in,), "<f8", "mean", finite=True)
    comps = r.array((d_out, d_in), "<f8", "components", finite=True)
    ev = r.array((d_out,), "<f8", "explained variance", finite=True)
    r.end()
    return PcaModel(mean, comps, ev)


# -- normalization ---------------------------------------------------------

def l2_normalize(s: EmbeddingSet) -> EmbeddingSet:
    x = s.vectors.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataError(f"cannot normalize zero vector at index {int(zero[0])}")
    return EmbeddingSet(x / norms[:, None], s.labels)
