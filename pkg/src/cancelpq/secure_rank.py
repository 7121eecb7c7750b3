"""Cipher-space re-ranking between a query user, an image owner and a cloud provider.

Every hand-off between roles is serialized into a framed ``CPQM`` message and
parsed back on the receiving side, so no Python object crosses a role
boundary. The cloud provider only ever holds ciphertexts, the evaluation key
and the protected PQ index; the secret key never leaves the image owner.

Two interchangeable backends implement the homomorphic part:

``sim``
    Keyed masking over float32 payloads. It computes in the clear
    internally and only models the data flow, serialization and key
    separation of the protocol, so results are exact up to float32 rounding.
``ckks_lite``
    The lattice scheme in :mod:`cancelpq.ckks_lite`.
"""

import hashlib
import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional

import numpy as np

from . import ckks_lite
from .cancelable import CancelKey, ProtectedCodebook, ProtectedIndex, cancelable_topk, secure_quantize
from .exceptions import CapacityError, DataError, FormatError, KeyMismatchError, ParameterError
from .pq_index import PqCode
from ._binio import Reader

MSG_MAGIC = b"CPQM"


class Role(IntEnum):
    QU = 0
    IO = 1
    CSP = 2


class Kind(IntEnum):
    EncQuery = 0
    CandidateIds = 1
    EncScores = 2
    Result = 3


# -- ciphertext containers -------------------------------------------------

def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _read_bytes(r: Reader, what):
    return r.take(r.u32(what + " length"), what)


@dataclass(frozen=True)
class CipherVector:
    backend: str
    payload: bytes
    dim: int
    fingerprint: bytes
    packing: str = "query"  # or "record"; ckks_lite packs the two operands differently

    def __post_init__(self):
        if not self.payload:
            raise ParameterError("empty ciphertext payload")

    def to_bytes(self) -> bytes:
        return b"".join([_pack_bytes(self.backend.encode()), struct.pack("<IB", self.dim, self.packing == "record"),
                         self.fingerprint, _pack_bytes(self.payload)])

    @classmethod
    def read(cls, r: Reader):
        backend = _read_bytes(r, "backend name").decode()
        dim = r.u32("dim")
        packing = "record" if r.u8("packing") else "query"
        fp = r.take(16, "fingerprint")
        return cls(backend, _read_bytes(r, "payload"), dim, fp, packing)


@dataclass(frozen=True)
class CipherScore:
    backend: str
    payload: bytes
    fingerprint: bytes

    def to_bytes(self) -> bytes:
        return _pack_bytes(self.backend.encode()) + self.fingerprint + _pack_bytes(self.payload)

    @classmethod
    def read(cls, r: Reader):
        backend = _read_bytes(r, "backend name").decode()
        fp = r.take(16, "fingerprint")
        return cls(backend, _read_bytes(r, "payload"), fp)


@dataclass(frozen=True)
class HeKey:
    """One part of a backend key set. ``material`` is backend-specific."""

    backend: str
    kind: str  # "public" | "secret" | "eval"
    fingerprint: bytes
    material: object = field(repr=False)


# -- backends --------------------------------------------------------------

class HeBackend:
    name = ""
    score_tolerance = 0.0

    @property
    def max_dim(self):
        raise NotImplementedError

    def keygen(self, dim, seed):
        raise NotImplementedError

    def check_key(self, key: HeKey, kind, obj=None):
        if key.backend != self.name or key.kind != kind:
            raise KeyMismatchError(f"expected a {self.name} {kind} key")
        if obj is not None:
            if obj.backend != self.name:
                raise KeyMismatchError(f"ciphertext from backend {obj.backend!r}, expected {self.name!r}")
            if obj.fingerprint != key.fingerprint:
                raise KeyMismatchError("ciphertext and key belong to different key sets")

    def encrypt_vector(self, pub: HeKey, v, rng, packing="query") -> CipherVector:
        raise NotImplementedError

    def decrypt_vector(self, sec: HeKey, cv: CipherVector) -> np.ndarray:
        raise NotImplementedError

    def inner_product(self, evk: HeKey, cq: CipherVector, cx: CipherVector) -> CipherScore:
        raise NotImplementedError

    def decrypt_score(self, sec: HeKey, cs: CipherScore) -> float:
        raise NotImplementedError

    def _check_pair(self, evk, cq, cx):
        self.check_key(evk, "eval", cq)
        self.check_key(evk, "eval", cx)
        if cq.dim != cx.dim:
            raise ParameterError(f"dim mismatch {cq.dim} vs {cx.dim}")


def _mask(key: bytes, nonce: bytes, count: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(key + nonce, digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=seed)).integers(0, 2**32, count, dtype=np.uint32)


class SimBackend(HeBackend):
    """Keyed XOR masking of float32 bit patterns; exact at float32 precision."""

    name = "sim"
    score_tolerance = 0.0
    NONCE = 16

    def __init__(self, max_dim=1 << 16):
        self._max_dim = max_dim

    @property
    def max_dim(self):
        return self._max_dim

    def keygen(self, dim, seed):
        if not 1 <= dim <= self.max_dim:
            raise CapacityError(f"dim {dim} outside sim capacity {self.max_dim}")
        secret = hashlib.sha256(b"cancelpq-sim-secret" + int(seed).to_bytes(32, "big")).digest()
        mask_key = hashlib.blake2b(secret, person=b"sim-mask", digest_size=32).digest()
        fp = hashlib.blake2b(mask_key, person=b"sim-fprint", digest_size=16).digest()
        return (HeKey(self.name, "public", fp, mask_key), HeKey(self.name, "secret", fp, secret),
                HeKey(self.name, "eval", fp, mask_key))

    @staticmethod
    def _mask_key(key: HeKey):
        if key.kind == "secret":
            return hashlib.blake2b(key.material, person=b"sim-mask", digest_size=32).digest()
        return key.material

    def _seal(self, key, values, nonce):
        bits = np.asarray(values, dtype="<f4").view("<u4")
        return nonce + (bits ^ _mask(key, nonce, bits.size)).tobytes()

    def _open(self, key, payload, count):
        nonce, body = payload[:self.NONCE], payload[self.NONCE:]
        if len(body) != 4 * count:
            raise FormatError("sim payload has the wrong length")
        bits = np.frombuffer(body, dtype="<u4") ^ _mask(key, nonce, count)
        return bits.view("<f4")

    def encrypt_vector(self, pub, v, rng, packing="query"):
        self.check_key(pub, "public")
        v = np.asarray(v, dtype=np.float32).ravel()
        if v.size > self.max_dim:
            raise CapacityError(f"dim {v.size} exceeds {self.max_dim}")
        nonce = rng.bytes(self.NONCE)
        return CipherVector(self.name, self._seal(pub.material, v, nonce), v.size, pub.fingerprint, packing)

    def decrypt_vector(self, sec, cv):
        self.check_key(sec, "secret", cv)
        return self._open(self._mask_key(sec), cv.payload, cv.dim).astype(np.float64)

    def inner_product(self, evk, cq, cx):
        self._check_pair(evk, cq, cx)
        q = self._open(evk.material, cq.payload, cq.dim).astype(np.float64)
        x = self._open(evk.material, cx.payload, cx.dim).astype(np.float64)
        nonce = hashlib.blake2b(cq.payload[:self.NONCE] + cx.payload[:self.NONCE],
                                digest_size=self.NONCE).digest()
        return CipherScore(self.name, self._seal(evk.material, [np.dot(q, x)], nonce), evk.fingerprint)

    def decrypt_score(self, sec, cs):
        self.check_key(sec, "secret", cs)
        return float(self._open(self._mask_key(sec), cs.payload, 1)[0])


class CkksLiteBackend(HeBackend):
    name = "ckks_lite"
    score_tolerance = 1e-2

    def __init__(self, params: Optional[ckks_lite.HeParams] = None):
        self.params = params or ckks_lite.HeParams()

    @property
    def max_dim(self):
        return self.params.max_dim

    def keygen(self, dim, seed):
        if not 1 <= dim <= self.max_dim:
            raise CapacityError(f"dim {dim} exceeds ring capacity {self.max_dim} (ring_degree / 2)")
        pk, sk, rk = ckks_lite.keygen(self.params, np.random.default_rng(seed))
        fp = pk.fingerprint
        return (HeKey(self.name, "public", fp, pk), HeKey(self.name, "secret", fp, sk),
                HeKey(self.name, "eval", fp, rk))

    def encrypt_vector(self, pub, v, rng, packing="query"):
        self.check_key(pub, "public")
        v = np.asarray(v, dtype=np.float64).ravel()
        enc = ckks_lite.encode if packing == "query" else ckks_lite.encode_reversed
        ct = ckks_lite.encrypt(pub.material, enc(v, self.params), rng)
        return CipherVector(self.name, ckks_lite.dumps_ciphertext(ct), v.size, pub.fingerprint, packing)

    def decrypt_vector(self, sec, cv):
        self.check_key(sec, "secret", cv)
        ct = ckks_lite.loads_ciphertext(cv.payload)
        coeffs = ckks_lite.decrypt(sec.material, ct)
        if cv.packing == "query":
            return ckks_lite.decode(coeffs, ct.scale, cv.dim)
        N = self.params.ring_degree
        idx = np.concatenate([[0], N - np.arange(1, cv.dim)]).astype(np.int64)
        vals = np.array(coeffs.coefficients(idx), dtype=np.float64) / ct.scale
        vals[1:] *= -1
        return vals

    def inner_product(self, evk, cq, cx):
        self._check_pair(evk, cq, cx)
        if cq.packing != "query" or cx.packing != "record":
            raise ParameterError("inner product needs a query-packed and a record-packed operand")
        a = ckks_lite.loads_ciphertext(cq.payload)
        b = ckks_lite.loads_ciphertext(cx.payload)
        out = ckks_lite.rescale(ckks_lite.multiply_relin(evk.material, a, b))
        return CipherScore(self.name, ckks_lite.dumps_ciphertext(out), evk.fingerprint)

    def decrypt_score(self, sec, cs):
        self.check_key(sec, "secret", cs)
        ct = ckks_lite.loads_ciphertext(cs.payload)
        return ckks_lite.decode_inner(ckks_lite.decrypt(sec.material, ct), ct.scale)


BACKENDS = {"sim": SimBackend, "ckks_lite": CkksLiteBackend}


def get_backend(name, **kwargs) -> HeBackend:
    try:
        return BACKENDS[name](**kwargs)
    except KeyError:
        raise ParameterError(f"unknown backend {name!r}; choose from {sorted(BACKENDS)}") from None


def he_keygen(backend: HeBackend, dim: int, seed: int):
    """``(public, secret, eval)`` keys for vectors of length ``dim``."""
    return backend.keygen(dim, seed)


def encrypt_vector(backend, pub, v, rng=None, packing="query"):
    rng = rng if rng is not None else np.random.default_rng(int.from_bytes(os.urandom(8), "little"))
    return backend.encrypt_vector(pub, v, rng, packing)


def encrypted_inner_product(backend, evk, cq, cx):
    return backend.inner_product(evk, cq, cx)


def decrypt_score(backend, sec, cs):
    return backend.decrypt_score(sec, cs)


# -- protocol messages -----------------------------------------------------

@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    sender: Role
    receiver: Role
    body: bytes

    def to_bytes(self) -> bytes:
        return MSG_MAGIC + struct.pack("<BBBI", self.kind, self.sender, self.receiver, len(self.body)) + self.body

    @classmethod
    def from_bytes(cls, data: bytes):
        r = Reader(data)
        r.magic(MSG_MAGIC)
        at = r.pos
        kind, sender, receiver, n = struct.unpack("<BBBI", r.take(7, "message header"))
        try:
            kind, sender, receiver = Kind(kind), Role(sender), Role(receiver)
        except ValueError as exc:
            raise FormatError(str(exc), at) from exc
        body = r.take(n, "message body")
        r.end()
        return cls(kind, sender, receiver, body)


class Channel:
    """In-process transport. Records every frame for later audit."""

    def __init__(self, record=True):
        self.record = record
        self.transcript: List[bytes] = []

    def send(self, msg: ProtocolMessage) -> bytes:
        frame = msg.to_bytes()
        if self.record:
            self.transcript.append(frame)
        return frame

    def deliver(self, frame: bytes, expect_to: Role, expect_kind: Kind) -> ProtocolMessage:
        msg = ProtocolMessage.from_bytes(frame)
        if msg.receiver != expect_to or msg.kind != expect_kind:
            raise FormatError(f"unexpected {msg.kind.name} message for {msg.receiver.name}")
        return msg

    def messages_to(self, role: Role):
        return [ProtocolMessage.from_bytes(f) for f in self.transcript if f[6] == role]

    def dump(self, path):
        with open(path, "wb") as fh:
            for frame in self.transcript:
                fh.write(frame)


def read_transcript(path) -> List[ProtocolMessage]:
    data = open(path, "rb").read()
    out, pos = [], 0
    while pos < len(data):
        n = struct.unpack_from("<I", data, pos + 7)[0]
        out.append(ProtocolMessage.from_bytes(data[pos:pos + 11 + n]))
        pos += 11 + n
    return out


def _encode_ids(ids) -> bytes:
    ids = np.asarray(ids, dtype="<u4")
    return struct.pack("<I", ids.size) + ids.tobytes()


def _decode_ids(r: Reader):
    return r.array((r.u32("id count"),), "<u4", "ids").astype(np.int64)


# -- roles -----------------------------------------------------------------

@dataclass
class RerankResult:
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)

    @property
    def top(self):
        return int(self.ids[0])


def rank_scores(ids, scores):
    """Descending score, ties by ascending id."""
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((ids, -scores))
    return RerankResult(ids[order], scores[order])


class QueryUser:
    """Holds the public HE key and, for coarse filtering, a cancelable key with its codebook."""

    def __init__(self, backend: HeBackend, public_key: HeKey, cancel_key: Optional[CancelKey] = None,
                 pcb: Optional[ProtectedCodebook] = None, rng=None):
        backend.check_key(public_key, "public")
        self.backend = backend
        self._pub = public_key
        self._cancel_key = cancel_key
        self._pcb = pcb
        self._rng = rng if rng is not None else np.random.default_rng()

    def query_message(self, v, K=0) -> ProtocolMessage:
        """EncQuery body: K, optional key-bound PQ code, then the encrypted query."""
        parts = [struct.pack("<I", K)]
        if K:
            if self._cancel_key is None:
                raise ParameterError("coarse filtering needs a cancelable key")
            code = secure_quantize(self._pcb, self._cancel_key, v)
            parts += [code.key_id, _encode_ids(code.codes)]
        cv = self.backend.encrypt_vector(self._pub, v, self._rng, "query")
        parts.append(cv.to_bytes())
        return ProtocolMessage(Kind.EncQuery, Role.QU, Role.CSP, b"".join(parts))


class CloudProvider:
    """Sees ciphertexts, the evaluation key and the protected index. Nothing else."""

    def __init__(self, backend: HeBackend, eval_key: HeKey, store, pindex: Optional[ProtectedIndex] = None):
        backend.check_key(eval_key, "eval")
        self.backend = backend
        self._evk = eval_key
        self.store = store
        self.pindex = pindex
        self.he_ops = 0
        self.last_candidates = None

    def handle_query(self, msg: ProtocolMessage, candidate_ids=None):
        r = Reader(msg.body)
        K = r.u32("K")
        if K:
            if self.pindex is None:
                raise ParameterError("no protected index for coarse filtering")
            key_id = r.take(16, "key_id")
            code = PqCode(_decode_ids(r), key_id)
            self.last_candidates = cancelable_topk(self.pindex, code, K)
            candidate_ids = self.last_candidates.ids
        elif candidate_ids is None:
            raise ParameterError("no candidate ids supplied")
        cq = CipherVector.read(r)
        r.end()
        candidate_ids = np.asarray(candidate_ids, dtype=np.int64)
        missing = [int(c) for c in candidate_ids if int(c) not in self.store]
        if missing:
            raise DataError(f"candidate ids not in encrypted store: {missing[:5]}")
        scores = []
        for cid in candidate_ids:
            scores.append(self.backend.inner_product(self._evk, cq, self.store[int(cid)]))
            self.he_ops += 1
        ids_msg = ProtocolMessage(Kind.CandidateIds, Role.CSP, Role.IO, _encode_ids(candidate_ids))
        body = struct.pack("<I", len(scores)) + b"".join(_pack_bytes(s.to_bytes()) for s in scores)
        return ids_msg, ProtocolMessage(Kind.EncScores, Role.CSP, Role.IO, body)


class ImageOwner:
    """Trusted party: holds the secret key, encrypts the gallery, decrypts and ranks."""

    def __init__(self, backend: HeBackend, secret_key: HeKey, public_key: HeKey, rng=None):
        backend.check_key(secret_key, "secret")
        backend.check_key(public_key, "public")
        self.backend = backend
        self._sec = secret_key
        self._pub = public_key
        self._rng = rng if rng is not None else np.random.default_rng()

    def encrypt_gallery(self, vectors, ids=None, lazy=False):
        """``{id: CipherVector}`` for the cloud provider.

        With ``lazy=True`` records are encrypted on first access; used for
        dummy-vector scale benchmarks where encrypting every row up front
        would dominate the run. ``vectors`` then only needs ``len`` and row
        indexing, so rows can be generated on demand.
        """
        ids = np.arange(len(vectors)) if ids is None else np.asarray(ids)
        if lazy:
            return _LazyStore(self, vectors, ids)
        vectors = np.asarray(vectors)
        return {int(i): self.backend.encrypt_vector(self._pub, v, self._rng, "record")
                for i, v in zip(ids, vectors)}

    def handle_scores(self, ids_msg: ProtocolMessage, scores_msg: ProtocolMessage):
        ids = _decode_ids(Reader(ids_msg.body))
        r = Reader(scores_msg.body)
        n = r.u32("score count")
        if n != len(ids):
            raise FormatError(f"{n} scores for {len(ids)} candidates")
        scores = [self.backend.decrypt_score(self._sec, CipherScore.read(Reader(_read_bytes(r, "score"))))
                  for _ in range(n)]
        r.end()
        result = rank_scores(ids, scores)
        body = _encode_ids(result.ids) + np.asarray(result.scores, dtype="<f8").tobytes()
        return result, ProtocolMessage(Kind.Result, Role.IO, Role.QU, body)


class _LazyStore:
    def __init__(self, owner, vectors, ids):
        self._owner = owner
        self._rows = {int(i): k for k, i in enumerate(ids)}
        self._vectors = vectors
        self._cache = {}

    def __contains__(self, i):
        return i in self._rows

    def __len__(self):
        return len(self._rows)

    def __getitem__(self, i):
        if i not in self._cache:
            o = self._owner
            self._cache[i] = o.backend.encrypt_vector(o._pub, self._vectors[self._rows[i]], o._rng, "record")
        return self._cache[i]


@dataclass
class Roles:
    qu: QueryUser
    csp: CloudProvider
    io: ImageOwner
    channel: Channel = field(default_factory=Channel)


def setup_roles(backend: HeBackend, gallery, ids=None, seed=0, pindex=None, cancel_key=None,
                record=True, lazy=False) -> Roles:
    """Generate HE keys and hand each role only its own share."""
    dim = len(gallery[0])
    pub, sec, evk = he_keygen(backend, dim, seed)
    ss = np.random.SeedSequence(seed).spawn(2)
    io = ImageOwner(backend, sec, pub, np.random.default_rng(ss[0]))
    store = io.encrypt_gallery(gallery, ids, lazy=lazy)
    csp = CloudProvider(backend, evk, store, pindex)
    pcb = pindex.pcb if pindex is not None else None
    qu = QueryUser(backend, pub, cancel_key, pcb, np.random.default_rng(ss[1]))
    return Roles(qu, csp, io, Channel(record))


def rerank(roles: Roles, query, candidate_ids) -> RerankResult:
    """Score a fixed candidate set under encryption and rank it at the image owner."""
    return _run(roles, roles.qu.query_message(query, 0), candidate_ids)


def secure_search(roles: Roles, query, K: int) -> RerankResult:
    """Coarse cancelable Top-K at the cloud provider, then encrypted re-ranking."""
    if K < 1:
        raise ParameterError("K must be >= 1")
    return _run(roles, roles.qu.query_message(query, K), None)


def _run(roles, query_msg, candidate_ids):
    ch = roles.channel
    frame = ch.send(query_msg)
    ids_msg, scores_msg = roles.csp.handle_query(ch.deliver(frame, Role.CSP, Kind.EncQuery), candidate_ids)
    ids_frame, scores_frame = ch.send(ids_msg), ch.send(scores_msg)
    result, result_msg = roles.io.handle_scores(ch.deliver(ids_frame, Role.IO, Kind.CandidateIds),
                                                ch.deliver(scores_frame, Role.IO, Kind.EncScores))
    ch.deliver(ch.send(result_msg), Role.QU, Kind.Result)
    return result


def audit_transcript(frames, plaintexts, secrets, to=Role.CSP, window=16):
    """Count leaks of plaintext or secret-key bytes into frames addressed to ``to``.

    Every aligned ``window``-byte slice of a plaintext float32 vector, or of
    a secret key, that occurs at any offset of any such frame counts as one
    leak. Frame slices are indexed once so large transcripts stay cheap.
    """
    seen = set()
    n_frames = 0
    for frame in frames:
        if frame[6] != to:
            continue
        n_frames += 1
        seen.update(frame[i:i + window] for i in range(len(frame) - window + 1))

    def hits(blobs):
        return sum(b[i:i + window] in seen for b in blobs for i in range(0, len(b) - window + 1, 4))

    raw = [np.asarray(v, dtype="<f4").tobytes() for v in plaintexts]
    return {"plaintext": hits(raw), "secret": hits(secrets), "frames": n_frames}


def secret_key_bytes(key: HeKey) -> bytes:
    """Raw secret material, for audits only."""
    if key.kind != "secret":
        raise ParameterError("not a secret key")
    m = key.material
    return m if isinstance(m, bytes) else np.asarray(m.s, dtype="<i8").tobytes()
