"""Key-bound protection of a PQ index: permuted codebooks and projected sub-vectors.

A key holds one permutation and one ``d_sub x d_sub`` projection per
subspace. The permutation relabels centroids (old index ``k`` moves to
position ``perm[k]``) and the distance table is conjugated to match, so
lookup distances are unchanged. The projection ``I + G``, with ``G`` drawn
from ``N(0, sigma_proj^2)``, jitters each sub-vector before quantization.
"""

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _binio
from ._binio import Reader
from .embed_io import EmbeddingSet
from .exceptions import AuthorizationError, FormatError, ParameterError, StateError
from .pq_index import (
    CandidateList,
    DistanceTable,
    PqCode,
    PqCodebook,
    _as_codes,
    _read_codebook,
    _read_table,
    assign_subspace,
    code_dtype,
    dump_codes,
    dumps_codebook,
    dumps_table,
    read_codes,
    scan_distances,
    select_topk,
)

CKEY_MAGIC = b"CKEY"
CPQI_MAGIC = b"CPQI"
DEFAULT_SIGMA_PROJ = 2e-3


def _readonly(a):
    a.setflags(write=False)
    return a


def seed_bytes(seed) -> bytes:
    """Normalize a key seed to 32 bytes. Integers are encoded big-endian."""
    if isinstance(seed, (bytes, bytearray)):
        if len(seed) != 32:
            raise ParameterError("byte seeds must be exactly 32 bytes")
        return bytes(seed)
    seed = int(seed)
    if not 0 <= seed < 2**256:
        raise ParameterError("integer seed must fit in 256 bits")
    return seed.to_bytes(32, "big")


def _stream(seed: bytes, j: int, tag: bytes) -> np.random.Generator:
    digest = hashlib.sha256(seed + j.to_bytes(4, "little") + tag).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))


def fisher_yates(n, rng):
    perm = np.arange(n)
    draws = rng.integers(0, np.arange(n, 1, -1))
    for i, r in zip(range(n - 1, 0, -1), draws):
        perm[i], perm[r] = perm[r], perm[i]
    return perm


@dataclass(frozen=True, eq=False)
class CancelKey:
    m: int
    n: int
    d_sub: int
    sigma_proj: float
    perms: np.ndarray
    projs: np.ndarray
    key_id: bytes = b""

    def __post_init__(self):
        perms = np.array(self.perms, dtype=np.int64).reshape(self.m, self.n)
        projs = np.array(self.projs, dtype=np.float32).reshape(self.m, self.d_sub, self.d_sub)
        ref = np.arange(self.n)
        for j, p in enumerate(perms):
            if not np.array_equal(np.sort(p), ref):
                raise ParameterError(f"perm {j} is not a bijection on [0, {self.n})")
        if not np.all(np.isfinite(projs)):
            raise ParameterError("projection matrices must be finite")
        if self.sigma_proj < 0:
            raise ParameterError("sigma_proj must be >= 0")
        object.__setattr__(self, "sigma_proj", float(np.float32(self.sigma_proj)))
        object.__setattr__(self, "perms", _readonly(perms))
        object.__setattr__(self, "projs", _readonly(projs))
        object.__setattr__(self, "key_id", hashlib.blake2b(self._material(), digest_size=16).digest())

    def _material(self) -> bytes:
        return (_binio.u32(self.m, self.n, self.d_sub) + struct.pack("<f", self.sigma_proj)
                + _binio.array_bytes(self.perms, "<u4") + _binio.array_bytes(self.projs, "<f4"))

    @property
    def inverse_perms(self):
        return np.argsort(self.perms, axis=1)

    def __eq__(self, other):
        return isinstance(other, CancelKey) and self.key_id == other.key_id

    def __hash__(self):
        return hash(self.key_id)


def keygen(seed, m: int, n: int, d_sub: int, sigma_proj: float = DEFAULT_SIGMA_PROJ,
           permute: bool = True) -> CancelKey:
    """Derive a key from a 256-bit secret.

    Each subspace draws from its own stream keyed on (seed, subspace, purpose),
    so keys are reproducible and no generator is shared between calls.
    ``permute=False`` keeps identity permutations (projection-only ablation).
    """
    if min(m, n, d_sub) < 1:
        raise ParameterError("m, n and d_sub must be positive")
    if not sigma_proj >= 0:
        raise ParameterError("sigma_proj must be >= 0")
    sb = seed_bytes(seed)
    perms = np.empty((m, n), dtype=np.int64)
    projs = np.empty((m, d_sub, d_sub), dtype=np.float32)
    eye = np.eye(d_sub)
    for j in range(m):
        perms[j] = fisher_yates(n, _stream(sb, j, b"perm")) if permute else np.arange(n)
        if sigma_proj == 0:
            projs[j] = eye
        else:
            projs[j] = eye + sigma_proj * _stream(sb, j, b"proj").standard_normal((d_sub, d_sub))
    return CancelKey(m, n, d_sub, sigma_proj, perms, projs)


def identity_key(m, n, d_sub) -> CancelKey:
    return CancelKey(m, n, d_sub, 0.0, np.tile(np.arange(n), (m, 1)),
                     np.broadcast_to(np.eye(d_sub), (m, d_sub, d_sub)))


def log2_bruteforce_cost(n: int, m: int) -> float:
    """log2 of (n!)^m, the number of codebook orderings an attacker must try."""
    return m * math.lgamma(n + 1) / math.log(2)


@dataclass(frozen=True, eq=False)
class ProtectedCodebook:
    codebook: PqCodebook
    table: DistanceTable
    key_id: bytes

    @property
    def centroids(self):
        return self.codebook.centroids

    @property
    def m(self):
        return self.codebook.m

    @property
    def n(self):
        return self.codebook.n

    @property
    def d_sub(self):
        return self.codebook.d_sub

    @property
    def dim(self):
        return self.codebook.dim


def _check_shapes(key, m, n, d_sub):
    if (key.m, key.n, key.d_sub) != (m, n, d_sub):
        raise ParameterError(
            f"key shape {(key.m, key.n, key.d_sub)} does not match codebook {(m, n, d_sub)}")


def protect(codebook, table: DistanceTable, key: CancelKey) -> ProtectedCodebook:
    """Permute centroids and conjugate the distance table.

    ``codebook`` may itself be a ProtectedCodebook, which composes keys.
    """
    if isinstance(codebook, ProtectedCodebook):
        codebook = codebook.codebook
    _check_shapes(key, codebook.m, codebook.n, codebook.d_sub)
    if table.table.shape != (codebook.m, codebook.n, codebook.n):
        raise ParameterError("table shape does not match codebook")
    inv = key.inverse_perms
    rows = np.arange(codebook.m)[:, None]
    cents = codebook.centroids[rows, inv]
    t = table.table[rows[:, :, None], inv[:, :, None], inv[:, None, :]]
    return ProtectedCodebook(PqCodebook(cents), DistanceTable(t), key.key_id)


def _authorize(pcb, key):
    if key.key_id != pcb.key_id:
        raise AuthorizationError("key does not match the protected codebook")


def project(key: CancelKey, X) -> np.ndarray:
    """Apply each subspace's projection: row vector ``x_j`` becomes ``x_j @ R_j``."""
    X = np.asarray(X, dtype=np.float32)
    sub = X.astype(np.float64).reshape(len(X), key.m, key.d_sub)
    return np.einsum("imd,mde->ime", sub, key.projs.astype(np.float64)).reshape(len(X), -1)


def secure_quantize_batch(pcb: ProtectedCodebook, key: CancelKey, X) -> np.ndarray:
    _authorize(pcb, key)
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != pcb.dim:
        raise ParameterError(f"expected vectors of dim {pcb.dim}")
    y = project(key, X)
    d = pcb.d_sub
    codes = np.empty((len(X), pcb.m), dtype=code_dtype(pcb.n))
    for j in range(pcb.m):
        codes[:, j] = assign_subspace(y[:, j * d:(j + 1) * d], pcb.centroids[j])
    return codes


def secure_quantize(pcb: ProtectedCodebook, key: CancelKey, x) -> PqCode:
    x = np.asarray(x, dtype=np.float32).ravel()
    return PqCode(secure_quantize_batch(pcb, key, x[None, :])[0], key.key_id)


@dataclass(frozen=True, eq=False)
class ProtectedIndex:
    pcb: ProtectedCodebook
    codes: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        codes = np.array(self.codes, dtype=code_dtype(self.pcb.n)).reshape(-1, self.pcb.m)
        ids = np.array(self.ids, dtype=np.int64).ravel()
        if len(codes) != len(ids):
            raise ParameterError("codes and ids differ in length")
        if codes.size and codes.max() >= self.pcb.n:
            raise ParameterError("code entry out of range")
        object.__setattr__(self, "codes", _readonly(codes))
        object.__setattr__(self, "ids", _readonly(ids))
        object.__setattr__(self, "codes_t", _readonly(np.ascontiguousarray(codes.T)))

    @property
    def key_id(self):
        return self.pcb.key_id

    def __len__(self):
        return len(self.ids)

    def code(self, i) -> PqCode:
        return PqCode(self.codes[i], self.key_id)


def build_protected_index(s: EmbeddingSet, pcb: ProtectedCodebook, key: CancelKey,
                          ids=None) -> ProtectedIndex:
    _authorize(pcb, key)
    if ids is None:
        ids = np.arange(s.count)
    if s.count == 0:
        return ProtectedIndex(pcb, np.empty((0, pcb.m)), ids)
    return ProtectedIndex(pcb, secure_quantize_batch(pcb, key, s.vectors), ids)


def cancelable_topk(pindex: ProtectedIndex, query_code: PqCode, K: int) -> CandidateList:
    if not isinstance(query_code, PqCode) or query_code.key_id != pindex.key_id:
        raise AuthorizationError("query code was not produced under this index's key")
    if K < 1:
        raise ParameterError("K must be >= 1")
    if len(pindex) == 0:
        raise StateError("cannot search an empty index")
    q = _as_codes(query_code, pindex.pcb.m, pindex.pcb.n)
    return select_topk(scan_distances(pindex.pcb.table, pindex.codes_t, q), pindex.ids, K)


def revoke_and_reissue(s: EmbeddingSet, codebook: PqCodebook, table: DistanceTable,
                       new_seed, sigma_proj: float = DEFAULT_SIGMA_PROJ):
    """Issue a fresh key and rebuild the protected index under it."""
    key = keygen(new_seed, codebook.m, codebook.n, codebook.d_sub, sigma_proj)
    pcb = protect(codebook, table, key)
    return key, build_protected_index(s, pcb, key)


def reconstruct(pcb: ProtectedCodebook, code) -> np.ndarray:
    """Concatenate the permuted centroids a code points at."""
    c = _as_codes(code, pcb.m, pcb.n)
    return pcb.centroids[np.arange(pcb.m), c].reshape(-1).astype(np.float64)


# -- serialization ---------------------------------------------------------

def dumps_key(key: CancelKey) -> bytes:
    return b"".join([
        _binio.header(CKEY_MAGIC), _binio.u32(key.m, key.n, key.d_sub),
        struct.pack("<f", key.sigma_proj), key.key_id,
        _binio.array_bytes(key.perms, "<u4"), _binio.array_bytes(key.projs, "<f4"),
    ])


def loads_key(data: bytes) -> CancelKey:
    r = Reader(data)
    r.header(CKEY_MAGIC)
    at = r.pos
    m, n, d = r.u32("m"), r.u32("n"), r.u32("d_sub")
    if min(m, n, d) < 1:
        raise FormatError(f"invalid key shape ({m}, {n}, {d})", at)
    sigma = r.f32("sigma_proj")
    id_at = r.pos
    key_id = r.take(16, "key_id")
    perm_at = r.pos
    perms = r.array((m, n), "<u4", "permutations")
    projs = r.array((m, d, d), "<f4", "projections", finite=True)
    r.end()
    try:
        key = CancelKey(m, n, d, sigma, perms, projs)
    except ParameterError as exc:
        raise FormatError(str(exc), perm_at) from exc
    if key.key_id != key_id:
        raise FormatError("key_id does not match key material", id_at)
    return key


def dumps_protected_index(pindex: ProtectedIndex) -> bytes:
    return b"".join([_binio.header(CPQI_MAGIC), pindex.key_id,
                     dumps_codebook(pindex.pcb.codebook), dumps_table(pindex.pcb.table),
                     dump_codes(pindex.codes, pindex.ids)])


def loads_protected_index(data: bytes) -> ProtectedIndex:
    r = Reader(data)
    r.header(CPQI_MAGIC)
    key_id = r.take(16, "key_id")
    cb = _read_codebook(r)
    table = _read_table(r)
    codes, ids = read_codes(r, cb.m, cb.n)
    r.end()
    return ProtectedIndex(ProtectedCodebook(cb, table, key_id), codes, ids)
