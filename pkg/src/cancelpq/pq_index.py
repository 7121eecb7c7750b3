"""Product quantization: codebook training, symmetric lookup distances, Top-K scan."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _binio
from ._binio import Reader
from .embed_io import EmbeddingSet
from .exceptions import FormatError, ParameterError, StateError

PQCB_MAGIC = b"PQCB"
PQDT_MAGIC = b"PQDT"
PQIX_MAGIC = b"PQIX"

KMEANS_MAX_ITER = 25
KMEANS_TOL = 1e-3  # stop when fewer than 0.1% of assignments change
_CHUNK = 1 << 16
_SCAN_BLOCK = 1 << 15


def code_dtype(n):
    return np.uint8 if n <= 256 else np.uint16 if n <= 65536 else np.uint32


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PqCodebook:
    """Centroids of shape ``(m, n, d_sub)``."""

    centroids: np.ndarray

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float32, copy=True)
        if c.ndim != 3:
            raise ParameterError(f"centroids must be (m, n, d_sub), got {c.shape}")
        if c.shape[1] < 2:
            raise ParameterError("need at least 2 centroids per subspace")
        if not np.all(np.isfinite(c)):
            raise ParameterError("centroids must be finite")
        for j, sub in enumerate(c):
            if len(np.unique(sub, axis=0)) != len(sub):
                raise ParameterError(f"subspace {j} has duplicate centroids")
        object.__setattr__(self, "centroids", _readonly(c))

    @property
    def m(self):
        return self.centroids.shape[0]

    @property
    def n(self):
        return self.centroids.shape[1]

    @property
    def d_sub(self):
        return self.centroids.shape[2]

    @property
    def dim(self):
        return self.m * self.d_sub


@dataclass(frozen=True, eq=False)
class DistanceTable:
    """Squared centroid-pair distances, shape ``(m, n, n)``."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float32, copy=True)
        if t.ndim != 3 or t.shape[1] != t.shape[2]:
            raise ParameterError(f"table must be (m, n, n), got {t.shape}")
        object.__setattr__(self, "table", _readonly(t))

    @property
    def m(self):
        return self.table.shape[0]

    @property
    def n(self):
        return self.table.shape[1]


@dataclass(frozen=True, eq=False)
class PqCode:
    """One vector's centroid indices. ``key_id`` is set for key-bound codes."""

    codes: np.ndarray
    key_id: Optional[bytes] = None

    def __post_init__(self):
        object.__setattr__(self, "codes", _readonly(np.array(self.codes, dtype=np.int64).ravel()))

    def __len__(self):
        return len(self.codes)

    def __eq__(self, other):
        if not isinstance(other, PqCode):
            return NotImplemented
        return self.key_id == other.key_id and np.array_equal(self.codes, other.codes)

    __hash__ = None


@dataclass(frozen=True)
class CandidateList:
    ids: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.ids)


# -- training --------------------------------------------------------------

def _nearest(x32, c):
    # training-only: float32 expanded form, ||x||^2 dropped since it cannot change the argmin
    c32 = c.astype(np.float32)
    return ((c32 * c32).sum(1)[None, :] - 2.0 * (x32 @ c32.T)).argmin(1)


def _kmeanspp(x, n, rng):
    N = len(x)
    chosen = [int(rng.integers(N))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, n):
        cdf = np.cumsum(closest)
        if cdf[-1] > 0:
            idx = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), N - 1)
        else:
            free = np.setdiff1d(np.arange(N), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[chosen].copy()


def kmeans(x, n, rng, max_iter=KMEANS_MAX_ITER, tol=KMEANS_TOL):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded with the point currently farthest from its
    own centroid. Returns float64 centroids of shape ``(n, d)``.
    """
    x = np.asarray(x, dtype=np.float64)
    x32 = x.astype(np.float32)
    N = len(x)
    centers = _kmeanspp(x, n, rng)
    assign = np.full(N, -1)
    for _ in range(max_iter):
        new = _nearest(x32, centers)
        changed = np.count_nonzero(new != assign)
        assign = new
        counts = np.bincount(assign, minlength=n)
        sums = np.stack([np.bincount(assign, weights=col, minlength=n) for col in x.T], axis=1)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            err = ((x - centers[assign]) ** 2).sum(1)
            for k, idx in zip(empty, np.argsort(-err, kind="stable")):
                centers[k] = x[idx]
                assign[idx] = k
        if changed < tol * N and not empty.size:
            break
    return centers


def train_codebook(s: EmbeddingSet, m: int, n: int, seed: int = 0) -> PqCodebook:
    if m < 1 or s.dim % m:
        raise ParameterError(f"dim {s.dim} is not divisible by m={m}")
    if n < 2:
        raise ParameterError("n must be >= 2")
    if s.count < n:
        raise ParameterError(f"need at least n={n} vectors, got {s.count}")
    d_sub = s.dim // m
    x = s.vectors.astype(np.float64)
    rng = np.random.default_rng(seed)
    cents = np.empty((m, n, d_sub))
    for j in range(m):
        cents[j] = kmeans(x[:, j * d_sub:(j + 1) * d_sub], n, rng)
    return PqCodebook(cents)


# -- encoding & distances --------------------------------------------------

def _check_dim(codebook, dim):
    if dim != codebook.dim:
        raise ParameterError(f"vector dim {dim} != codebook dim {codebook.dim}")


def assign_subspace(sub, centroids):
    """argmin_k ||sub - c_k||^2 from direct differences; lowest index wins ties."""
    out = np.empty(len(sub), dtype=np.int64)
    c = centroids.astype(np.float64)
    cols = [np.ascontiguousarray(c[:, k]) for k in range(c.shape[1])]
    for start in range(0, len(sub), _CHUNK):
        blk = np.asarray(sub[start:start + _CHUNK], dtype=np.float64)
        dist = np.zeros((len(blk), len(c)))
        for k, ck in enumerate(cols):
            diff = blk[:, k:k + 1] - ck
            dist += diff * diff
        out[start:start + _CHUNK] = dist.argmin(1)
    return out


def quantize_batch(codebook: PqCodebook, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2:
        raise ParameterError("expected a 2-D batch")
    _check_dim(codebook, X.shape[1])
    d = codebook.d_sub
    x = X.astype(np.float64)
    codes = np.empty((len(X), codebook.m), dtype=code_dtype(codebook.n))
    for j in range(codebook.m):
        codes[:, j] = assign_subspace(x[:, j * d:(j + 1) * d], codebook.centroids[j])
    return codes


def quantize(codebook: PqCodebook, x) -> PqCode:
    x = np.asarray(x, dtype=np.float32).ravel()
    _check_dim(codebook, x.size)
    return PqCode(quantize_batch(codebook, x[None, :])[0])


def build_distance_table(codebook: PqCodebook) -> DistanceTable:
    c = codebook.centroids.astype(np.float64)
    diff = c[:, :, None, :] - c[:, None, :, :]
    return DistanceTable(np.einsum("jabk,jabk->jab", diff, diff))


def _as_codes(code, m, n):
    a = code.codes if isinstance(code, PqCode) else np.asarray(code, dtype=np.int64).ravel()
    if a.size != m:
        raise ParameterError(f"code length {a.size} != m={m}")
    if a.size and (a.min() < 0 or a.max() >= n):
        raise ParameterError(f"code entries must lie in [0, {n})")
    return a


def pq_distance(table: DistanceTable, a, b) -> float:
    """Sum over subspaces of table lookups, accumulated in float64 in subspace order."""
    a = _as_codes(a, table.m, table.n)
    b = _as_codes(b, table.m, table.n)
    t = table.table
    acc = np.float64(0.0)
    for j in range(table.m):
        acc += np.float64(t[j, a[j], b[j]])
    return float(acc)


def scan_distances(table, codes_t, query) -> np.ndarray:
    """Distances from one query code to every stored code.

    ``codes_t`` is the ``(m, N)`` transposed code matrix. Accumulation order
    matches :func:`pq_distance` so the two agree bit for bit.
    """
    t = table.table
    rows = [t[j, query[j]].astype(np.float64) for j in range(codes_t.shape[0])]
    N = codes_t.shape[1]
    out = np.empty(N, dtype=np.float64)
    # blocks keep the accumulator cache-resident at large N
    for start in range(0, N, _SCAN_BLOCK):
        stop = min(start + _SCAN_BLOCK, N)
        acc = np.zeros(stop - start, dtype=np.float64)
        for j, row in enumerate(rows):
            acc += row[codes_t[j, start:stop]]
        out[start:stop] = acc
    return out


def select_topk(dist, ids, K):
    """The K smallest distances, ties broken by ascending record id."""
    N = len(dist)
    if K >= N:
        pick = np.arange(N)
    else:
        kth = np.partition(dist, K - 1)[K - 1]
        pick = np.flatnonzero(dist <= kth)
    order = np.lexsort((ids[pick], dist[pick]))[:K]
    pick = pick[order]
    return CandidateList(ids[pick].copy(), dist[pick].copy())


@dataclass(frozen=True, eq=False)
class PqIndex:
    codebook: PqCodebook
    table: DistanceTable
    codes: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        codes = np.array(self.codes, dtype=code_dtype(self.codebook.n)).reshape(-1, self.codebook.m)
        ids = np.array(self.ids, dtype=np.int64).ravel()
        if len(codes) != len(ids):
            raise ParameterError("codes and ids differ in length")
        if self.table.table.shape != (self.codebook.m, self.codebook.n, self.codebook.n):
            raise ParameterError("table shape does not match codebook")
        object.__setattr__(self, "codes", _readonly(codes))
        object.__setattr__(self, "ids", _readonly(ids))
        object.__setattr__(self, "codes_t", _readonly(np.ascontiguousarray(codes.T)))

    def __len__(self):
        return len(self.ids)


def build_index(codebook: PqCodebook, table: DistanceTable, s: EmbeddingSet,
                ids=None, use_labels=False) -> PqIndex:
    if s.count:
        _check_dim(codebook, s.dim)
    if ids is None:
        ids = s.labels if use_labels else np.arange(s.count)
    codes = quantize_batch(codebook, s.vectors) if s.count else np.empty((0, codebook.m))
    return PqIndex(codebook, table, codes, ids)


def topk_filter(index: PqIndex, query_code, K: int) -> CandidateList:
    if K < 1:
        raise ParameterError("K must be >= 1")
    if len(index) == 0:
        raise StateError("cannot search an empty index")
    q = _as_codes(query_code, index.codebook.m, index.codebook.n)
    return select_topk(scan_distances(index.table, index.codes_t, q), index.ids, K)


# -- serialization ---------------------------------------------------------

def dumps_codebook(cb: PqCodebook) -> bytes:
    return (_binio.header(PQCB_MAGIC) + _binio.u32(cb.m, cb.n, cb.d_sub)
            + _binio.array_bytes(cb.centroids, "<f4"))


def _read_codebook(r: Reader) -> PqCodebook:
    r.header(PQCB_MAGIC)
    at = r.pos
    m, n, d = r.u32("m"), r.u32("n"), r.u32("d_sub")
    if min(m, d) < 1 or n < 2:
        raise FormatError(f"invalid codebook shape ({m}, {n}, {d})", at)
    return PqCodebook(r.array((m, n, d), "<f4", "centroids", finite=True))


def loads_codebook(data: bytes) -> PqCodebook:
    r = Reader(data)
    cb = _read_codebook(r)
    r.end()
    return cb


def dumps_table(t: DistanceTable) -> bytes:
    return _binio.header(PQDT_MAGIC) + _binio.u32(t.m, t.n) + _binio.array_bytes(t.table, "<f4")


def _read_table(r: Reader) -> DistanceTable:
    r.header(PQDT_MAGIC)
    at = r.pos
    m, n = r.u32("m"), r.u32("n")
    if m < 1 or n < 2:
        raise FormatError(f"invalid table shape ({m}, {n})", at)
    return DistanceTable(r.array((m, n, n), "<f4", "distance table", finite=True))


def loads_table(data: bytes) -> DistanceTable:
    r = Reader(data)
    t = _read_table(r)
    r.end()
    return t


def dump_codes(codes, ids) -> bytes:
    return (_binio.u32(len(ids)) + _binio.array_bytes(codes, "<u4")
            + _binio.array_bytes(ids, "<u4"))


def read_codes(r: Reader, m, n):
    N = r.u32("record count")
    at = r.pos
    codes = r.array((N, m), "<u4", "codes")
    if codes.size and codes.max() >= n:
        raise FormatError("code entry out of range", at)
    ids = r.array((N,), "<u4", "record ids")
    return codes, ids


def dumps_index(index: PqIndex) -> bytes:
    return b"".join([_binio.header(PQIX_MAGIC), dumps_codebook(index.codebook),
                     dumps_table(index.table), dump_codes(index.codes, index.ids)])


def loads_index(data: bytes) -> PqIndex:
    r = Reader(data)
    r.header(PQIX_MAGIC)
    cb = _read_codebook(r)
    table = _read_table(r)
    codes, ids = read_codes(r, cb.m, cb.n)
    r.end()
    return PqIndex(cb, table, codes, ids)
