"""A small leveled CKKS-style scheme over Z[X]/(X^N + 1) in RNS form.

Only what one encrypted inner product needs: encode, encrypt, add,
multiply with relinearization, rescale, decrypt. Vectors are packed into
coefficients, not slots. A query ``a`` goes in ascending order and a
database vector ``b`` in reversed, negated order (``b_0 - sum b_i X^(N-i)``),
so the constant coefficient of their product is ``<a, b> * scale^2``.

All RNS primes stay below 2**31 so residue products fit in int64.
Parameters are for correctness at desk scale and carry no security claim.
"""

import hashlib
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Tuple

import numpy as np

from . import _binio
from ._binio import Reader
from .exceptions import CapacityError, FormatError, KeyMismatchError, ParameterError

CKT_MAGIC = b"CKT1"
ENCODE_BOUND = 2.0
ERROR_STD = 3.2


def _is_prime(n):
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17):
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in (2, 3, 5, 7, 11, 13, 17):  # deterministic below 3.4e14
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def ntt_primes(ring_degree, count, bits, below=True, exclude=()):
    """Primes ``p = 1 mod 2N`` just below (or just above) ``2**bits``."""
    step = 2 * ring_degree
    if below:
        p = ((1 << bits) - 1) // step * step + 1
    else:
        p = ((1 << bits) // step + 1) * step + 1
    found = []
    while len(found) < count:
        if not 0 < p < 1 << 31:
            raise ParameterError("ran out of word-sized NTT primes")
        if _is_prime(p) and p not in exclude:
            found.append(p)
        p = p - step if below else p + step
    return found


@dataclass(frozen=True)
class HeParams:
    """Ring degree, coefficient-modulus chain and scale.

    The chain is ``(base, rescale_1, ..., rescale_L)``; ``special`` is the
    extra key-switching prime. ``levels`` is the number of rescales available.
    """

    ring_degree: int = 4096
    coeff_moduli: Tuple[int, ...] = ()
    special_modulus: int = 0
    scale: float = 2.0 ** 30

    def __post_init__(self):
        N = self.ring_degree
        if N < 2 or N & (N - 1):
            raise ParameterError("ring_degree must be a power of two")
        chain = tuple(self.coeff_moduli)
        special = self.special_modulus
        if not chain:
            base = ntt_primes(N, 2, 31, below=True)
            chain = (base[0],) + tuple(ntt_primes(N, 2, 30, below=False))
            special = special or base[1]
        elif not special:
            special = ntt_primes(N, 1, 31, below=True, exclude=chain)[0]
        allm = chain + (special,)
        if len(set(allm)) != len(allm):
            raise ParameterError("moduli must be pairwise distinct")
        for q in allm:
            if not (_is_prime(q) and q % (2 * N) == 1 and q < 1 << 31):
                raise ParameterError(f"{q} is not a word-sized prime = 1 mod 2N")
        if len(chain) < 2:
            raise ParameterError("need at least one rescale prime")
        if not 0 < self.scale < min(chain):
            raise ParameterError("scale must be below the smallest modulus")
        object.__setattr__(self, "coeff_moduli", chain)
        object.__setattr__(self, "special_modulus", special)

    @property
    def levels(self):
        return len(self.coeff_moduli) - 1

    @property
    def max_dim(self):
        return self.ring_degree // 2

    def moduli(self, level):
        return self.coeff_moduli[:level + 1]


# -- NTT -------------------------------------------------------------------

class _NttTables:
    """Negacyclic NTT for one prime, as a bit-reversed iterative butterfly."""

    def __init__(self, q, N):
        self.q, self.N = q, N
        psi = self._root(q, N)
        psi_inv = pow(psi, q - 2, q)
        self.psi = self._powers(psi, N, q)
        self.psi_inv_n = self._powers(psi_inv, N, q) * pow(N, q - 2, q) % q
        bits = N.bit_length() - 1
        self.bitrev = np.array([int(format(i, f"0{bits}b")[::-1], 2) for i in range(N)])
        omega = psi * psi % q
        omega_inv = pow(omega, q - 2, q)
        self.fwd = self._stage_twiddles(omega)
        self.inv = self._stage_twiddles(omega_inv)

    @staticmethod
    def _root(q, N):
        for g in range(2, q):
            psi = pow(g, (q - 1) // (2 * N), q)
            if pow(psi, N, q) == q - 1:
                return psi
        raise ParameterError(f"no primitive 2N-th root mod {q}")

    @staticmethod
    def _powers(base, count, q):
        out = np.empty(count, dtype=np.int64)
        acc = 1
        for i in range(count):
            out[i] = acc
            acc = acc * base % q
        return out

    def _stage_twiddles(self, omega):
        q, N = self.q, self.N
        tw = []
        length = 2
        while length <= N:
            w = pow(omega, N // length, q)
            tw.append(self._powers(w, length // 2, q))
            length *= 2
        return tw


@lru_cache(maxsize=None)
def _tables(q, N):
    return _NttTables(q, N)


class _RnsNtt:
    """Per-prime tables stacked so one butterfly pass covers every residue row."""

    def __init__(self, moduli, N):
        ts = [_tables(q, N) for q in moduli]
        self.N = N
        self.q = np.array(moduli, dtype=np.int64)[:, None]
        self.psi = np.stack([t.psi for t in ts])
        self.psi_inv_n = np.stack([t.psi_inv_n for t in ts])
        self.bitrev = ts[0].bitrev
        self.fwd = [np.stack(ws)[:, None, :] for ws in zip(*(t.fwd for t in ts))]
        self.inv = [np.stack(ws)[:, None, :] for ws in zip(*(t.inv for t in ts))]

    def _butterflies(self, a, twiddles):
        q3 = self.q[:, :, None]
        a = np.ascontiguousarray(a[..., self.bitrev])
        lead = a.shape[:-1]
        for w in twiddles:
            h = w.shape[-1]
            blk = a.reshape(*lead[:-1], lead[-1], -1, 2 * h)
            u = blk[..., :h]
            v = blk[..., h:] * w % q3
            s = u + v
            d = u - v
            blk[..., :h] = np.where(s >= q3, s - q3, s)
            blk[..., h:] = np.where(d < 0, d + q3, d)
        return a

    def forward(self, a):
        return self._butterflies(a * self.psi % self.q, self.fwd)

    def inverse(self, a):
        return self._butterflies(a, self.inv) * self.psi_inv_n % self.q


@lru_cache(maxsize=None)
def _rns(moduli, N):
    return _RnsNtt(moduli, N)


def _ntt(x, moduli):
    return _rns(tuple(moduli), x.shape[-1]).forward(x)


def _intt(x, moduli):
    return _rns(tuple(moduli), x.shape[-1]).inverse(x)


def _qcol(moduli):
    return np.array(moduli, dtype=np.int64)[:, None]


def _reduce_signed(coeffs, moduli):
    """Signed integer coefficients (length N) to RNS residues, shape (L, N)."""
    c = np.asarray(coeffs, dtype=np.int64)
    return c[None, :] % _qcol(moduli)


# -- ring elements ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RingPoly:
    """Residues of one polynomial modulo each active prime, shape ``(L, N)``."""

    residues: np.ndarray
    moduli: Tuple[int, ...]

    def _check(self, other):
        if self.moduli != other.moduli:
            raise ParameterError("polynomials live over different moduli")

    def __add__(self, other):
        self._check(other)
        return RingPoly((self.residues + other.residues) % _qcol(self.moduli), self.moduli)

    def __sub__(self, other):
        self._check(other)
        return RingPoly((self.residues - other.residues) % _qcol(self.moduli), self.moduli)

    def __mul__(self, other):
        self._check(other)
        prod = _ntt(self.residues, self.moduli) * _ntt(other.residues, self.moduli)
        return RingPoly(_intt(prod % _qcol(self.moduli), self.moduli), self.moduli)

    def is_zero(self):
        return not self.residues.any()

    def coefficients(self, index=None):
        """Centered integer coefficients, recombined by CRT."""
        res = self.residues if index is None else self.residues[:, np.atleast_1d(index)]
        Q = math.prod(self.moduli)
        acc = [0] * res.shape[1]
        for q, row in zip(self.moduli, res):
            qh = Q // q
            t = qh * pow(qh, -1, q)
            for k, r in enumerate(row.tolist()):
                acc[k] += r * t
        out = []
        for v in acc:
            v %= Q
            out.append(v - Q if v > Q // 2 else v)
        return out


def _check_encodable(v, params):
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size > params.max_dim:
        raise CapacityError(f"dim {v.size} exceeds capacity {params.max_dim}")
    if v.size and not np.all(np.abs(v) <= ENCODE_BOUND):
        raise ParameterError(f"components must lie in [-{ENCODE_BOUND}, {ENCODE_BOUND}]")
    return v


def encode(v, params: HeParams, scale=None, level=None) -> RingPoly:
    """Ascending coefficient packing: ``round(v_i * scale)`` at ``X^i``."""
    v = _check_encodable(v, params)
    scale = params.scale if scale is None else scale
    level = params.levels if level is None else level
    coeffs = np.zeros(params.ring_degree, dtype=np.int64)
    coeffs[:v.size] = np.rint(v * scale)
    return RingPoly(_reduce_signed(coeffs, params.moduli(level)), params.moduli(level))


def encode_reversed(v, params: HeParams, scale=None, level=None) -> RingPoly:
    """Reversed packing: ``v_0 - sum_i v_i X^(N-i)``."""
    v = _check_encodable(v, params)
    scale = params.scale if scale is None else scale
    level = params.levels if level is None else level
    N = params.ring_degree
    coeffs = np.zeros(N, dtype=np.int64)
    scaled = np.rint(v * scale).astype(np.int64)
    if v.size:
        coeffs[0] = scaled[0]
        coeffs[N - np.arange(1, v.size)] = -scaled[1:]
    return RingPoly(_reduce_signed(coeffs, params.moduli(level)), params.moduli(level))


def decode(p: RingPoly, scale: float, dim: int) -> np.ndarray:
    return np.array(p.coefficients(np.arange(dim)), dtype=np.float64) / scale


def decode_inner(p: RingPoly, scale: float) -> float:
    """The designated (constant) coefficient holding the packed inner product."""
    return p.coefficients(0)[0] / scale


# -- keys ------------------------------------------------------------------

def _ternary(rng, N):
    return rng.integers(-1, 2, N)


def _gaussian(rng, N):
    return np.rint(rng.normal(0.0, ERROR_STD, N)).astype(np.int64)


def _uniform(rng, moduli, N):
    return np.stack([rng.integers(0, q, N) for q in moduli])


@dataclass(frozen=True, eq=False)
class SecretKey:
    params: HeParams
    s: np.ndarray  # signed ternary coefficients
    fingerprint: bytes

    def poly(self, moduli):
        return RingPoly(_reduce_signed(self.s, moduli), moduli)

    def ntt(self, moduli):
        cache = self.__dict__.setdefault("_ntt_cache", {})
        if moduli not in cache:
            cache[moduli] = _ntt(self.poly(moduli).residues, moduli)
        return cache[moduli]


@dataclass(frozen=True, eq=False)
class PublicKey:
    params: HeParams
    b: RingPoly
    a: RingPoly
    fingerprint: bytes

    @cached_property
    def ntt(self):
        return _ntt(np.stack([self.b.residues, self.a.residues]), self.b.moduli)


@dataclass(frozen=True, eq=False)
class RelinKey:
    """Per-level key-switching keys ``{level: [(b_i, a_i), ...]}`` over ``Q_level * P``."""

    params: HeParams
    keys: dict = field(repr=False)
    fingerprint: bytes = b""

    def ntt(self, level):
        cache = self.__dict__.setdefault("_ntt_cache", {})
        if level not in cache:
            ext = self.params.moduli(level) + (self.params.special_modulus,)
            cache[level] = [_ntt(np.stack([b.residues, a.residues]), ext) for b, a in self.keys[level]]
        return cache[level]


def _fingerprint(pk_b: RingPoly):
    return hashlib.blake2b(pk_b.residues.tobytes(), digest_size=16).digest()


def keygen(params: HeParams, rng: np.random.Generator):
    """Returns ``(public, secret, relin)`` keys sharing one fingerprint."""
    N = params.ring_degree
    top = params.moduli(params.levels)
    s = _ternary(rng, N)
    a = RingPoly(_uniform(rng, top, N), top)
    e = RingPoly(_reduce_signed(_gaussian(rng, N), top), top)
    s_top = RingPoly(_reduce_signed(s, top), top)
    b = RingPoly(np.zeros_like(a.residues), top) - a * s_top + e
    fp = _fingerprint(b)
    sk = SecretKey(params, s, fp)
    pk = PublicKey(params, b, a, fp)
    P = params.special_modulus
    rk = {}
    for level in range(1, params.levels + 1):
        Q = params.moduli(level)
        ext = Q + (P,)
        s_ext = sk.poly(ext)
        s2 = s_ext * s_ext
        Qprod = math.prod(Q)
        pairs = []
        for i, qi in enumerate(Q):
            qh = Qprod // qi
            g = qh * pow(qh, -1, qi)  # CRT basis element: 1 mod q_i, 0 mod q_j
            pg = np.array([[(P * g) % p] for p in ext], dtype=np.int64)
            ai = RingPoly(_uniform(rng, ext, N), ext)
            ei = RingPoly(_reduce_signed(_gaussian(rng, N), ext), ext)
            bi = RingPoly(np.zeros_like(ai.residues), ext) - ai * s_ext + ei
            bi = RingPoly((bi.residues + s2.residues * pg) % _qcol(ext), ext)
            pairs.append((bi, ai))
        rk[level] = pairs
    return pk, sk, RelinKey(params, rk, fp)


# -- ciphertexts -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Ciphertext:
    """Components ``(c0, c1[, c2])`` stacked as ``(k, L, N)`` residues."""

    parts: np.ndarray
    level: int
    scale: float
    moduli: Tuple[int, ...]
    fingerprint: bytes = b""

    @property
    def size(self):
        return self.parts.shape[0]


def encrypt(pk: PublicKey, p: RingPoly, rng: np.random.Generator, scale=None) -> Ciphertext:
    params = pk.params
    top = params.moduli(params.levels)
    if p.moduli != top:
        raise ParameterError("plaintext must be encoded at the top level")
    N = params.ring_degree
    u = _reduce_signed(_ternary(rng, N), top)
    e0 = _reduce_signed(_gaussian(rng, N), top)
    e1 = _reduce_signed(_gaussian(rng, N), top)
    qc = _qcol(top)
    c = _intt(pk.ntt * _ntt(u, top) % qc, top)
    c0 = (c[0] + e0 + p.residues) % qc
    c1 = (c[1] + e1) % qc
    return Ciphertext(np.stack([c0, c1]), params.levels, params.scale if scale is None else scale,
                      top, pk.fingerprint)


def decrypt(sk: SecretKey, c: Ciphertext) -> RingPoly:
    """``c0 + c1 s (+ c2 s^2)``. A wrong key yields noise, not an error."""
    qc = _qcol(c.moduli)
    s_hat = sk.ntt(c.moduli)
    acc = np.zeros_like(c.parts[0])
    power = np.ones_like(s_hat)
    parts_hat = _ntt(c.parts, c.moduli)
    for k in range(c.size):
        acc = (acc + parts_hat[k] * power) % qc
        power = power * s_hat % qc
    return RingPoly(_intt(acc, c.moduli), c.moduli)


def _same_frame(c1: Ciphertext, c2: Ciphertext):
    if c1.fingerprint != c2.fingerprint:
        raise KeyMismatchError("ciphertexts were produced under different keys")
    if c1.level != c2.level or c1.moduli != c2.moduli:
        raise ParameterError("ciphertext levels differ")
    if abs(c1.scale - c2.scale) > math.ulp(max(c1.scale, c2.scale)):
        raise ParameterError(f"scale mismatch {c1.scale} vs {c2.scale}")


def add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    _same_frame(c1, c2)
    k = max(c1.size, c2.size)
    a = np.zeros((k,) + c1.parts.shape[1:], dtype=np.int64)
    a[:c1.size] += c1.parts
    a[:c2.size] += c2.parts
    return Ciphertext(a % _qcol(c1.moduli), c1.level, c1.scale, c1.moduli, c1.fingerprint)


def multiply(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Tensor product; the result has three components and squared scale."""
    _same_frame(c1, c2)
    if c1.size != 2 or c2.size != 2:
        raise ParameterError("relinearize before multiplying again")
    if c1.level < 1:
        raise ParameterError("no level left for a multiplication")
    mods = c1.moduli
    qc = _qcol(mods)
    x = _ntt(c1.parts, mods)
    y = _ntt(c2.parts, mods)
    d0 = x[0] * y[0] % qc
    d1 = (x[0] * y[1] % qc + x[1] * y[0] % qc) % qc
    d2 = x[1] * y[1] % qc
    parts = _intt(np.stack([d0, d1, d2]), mods)
    return Ciphertext(parts, c1.level, c1.scale * c2.scale, mods, c1.fingerprint)


def relinearize(rk: RelinKey, c: Ciphertext) -> Ciphertext:
    """Fold ``c2`` back into ``(c0, c1)`` by RNS-digit key switching through ``P``."""
    if c.size == 2:
        return c
    if rk.fingerprint != c.fingerprint:
        raise KeyMismatchError("relinearization key does not match ciphertext")
    if c.level not in rk.keys:
        raise ParameterError(f"no relinearization key for level {c.level}")
    Q = c.moduli
    P = rk.params.special_modulus
    ext = Q + (P,)
    qext = _qcol(ext)
    digits = _ntt(c.parts[2][:, None, :] % qext, ext)
    acc = np.zeros((2, len(ext), c.parts.shape[-1]), dtype=np.int64)
    for digit, key in zip(digits, rk.ntt(c.level)):
        acc = (acc + digit * key) % qext
    out = []
    Pinv = np.array([[pow(P, -1, q)] for q in Q], dtype=np.int64)
    qc = _qcol(Q)
    for acc in _intt(acc, ext):
        r = acc[-1]
        r = np.where(r > P // 2, r - P, r)  # round to nearest when dividing by P
        out.append((acc[:-1] - r[None, :] % qc) % qc * Pinv % qc)
    c0 = (c.parts[0] + out[0]) % qc
    c1 = (c.parts[1] + out[1]) % qc
    return Ciphertext(np.stack([c0, c1]), c.level, c.scale, Q, c.fingerprint)


def multiply_relin(rk: RelinKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    return relinearize(rk, multiply(c1, c2))


def rescale(c: Ciphertext) -> Ciphertext:
    """Divide by the last prime of the active chain and drop it."""
    if c.level < 1:
        raise ParameterError("level exhausted")
    mods = c.moduli
    q_last = mods[-1]
    keep = mods[:-1]
    qc = _qcol(keep)
    last = c.parts[:, -1, :]
    last = np.where(last > q_last // 2, last - q_last, last)
    inv = np.array([[pow(q_last, -1, q)] for q in keep], dtype=np.int64)
    parts = (c.parts[:, :-1, :] - last[:, None, :] % qc) % qc * inv % qc
    return Ciphertext(parts, c.level - 1, c.scale / q_last, keep, c.fingerprint)


# -- serialization ---------------------------------------------------------

def dumps_ciphertext(c: Ciphertext) -> bytes:
    return b"".join([
        _binio.header(CKT_MAGIC),
        _binio.u32(c.parts.shape[-1], c.level), struct.pack("<d", c.scale),
        _binio.u32(c.size, len(c.moduli)),
        struct.pack(f"<{len(c.moduli)}Q", *c.moduli),
        c.fingerprint.ljust(16, b"\0")[:16],
        _binio.array_bytes(c.parts, "<u8"),
    ])


def loads_ciphertext(data: bytes) -> Ciphertext:
    r = Reader(data)
    r.header(CKT_MAGIC)
    at = r.pos
    N, level = r.u32("ring degree"), r.u32("level")
    scale = r.f64("scale")
    k, L = r.u32("component count"), r.u32("modulus count")
    if N < 2 or N & (N - 1) or k not in (2, 3) or L != level + 1:
        raise FormatError("inconsistent ciphertext header", at)
    moduli = struct.unpack(f"<{L}Q", r.take(8 * L, "moduli"))
    fp = r.take(16, "fingerprint")
    parts_at = r.pos
    parts = r.array((k, L, N), "<u8", "residues")
    r.end()
    if np.any(parts >= np.array(moduli, dtype=np.uint64)[None, :, None]):
        raise FormatError("residue not reduced", parts_at)
    return Ciphertext(parts.astype(np.int64), level, scale, tuple(moduli), fp)
