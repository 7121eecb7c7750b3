"""End-to-end pipeline runs, parameter sweeps and report files.

One run goes: load or synthesize embeddings, hold out one probe per
identity, normalize, fit PCA on the gallery only, normalize again, train a
PQ codebook, protect it under a fresh key, then for every probe do a
cancelable Top-K filter followed by encrypted re-ranking of the K
candidates. Run ``r`` uses seed ``key_seed + r`` for k-means, the cancelable
key and the HE keys.
"""

import json
import time
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .cancelable import (build_protected_index, cancelable_topk, keygen, protect, secure_quantize,
                         secure_quantize_batch)
from .embed_io import (SyntheticSpec, apply_pca, fit_pca, gen_synthetic, holdout_split,
                       l2_normalize, load_evec)
from .exceptions import DataError, ParameterError
from .pq_index import build_distance_table, train_codebook
from .secure_rank import get_backend, rerank, setup_roles


@dataclass
class PipelineConfig:
    data_path: Optional[str] = None
    n_identities: int = 500
    samples_per_identity: int = 20
    input_dim: int = 512
    intra_class_noise: float = 0.1
    data_seed: int = 42
    pca_dim: int = 128
    m: int = 64
    n: int = 64
    K: int = 5
    sigma_proj: float = 2e-3
    permute: bool = True
    key_seed: int = 0
    backend: str = "sim"
    runs: int = 5
    max_queries: int = 0  # 0 means every probe
    lazy_encrypt: bool = False
    out_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.pca_dim < 1 or self.m < 1 or self.pca_dim % self.m:
            raise ParameterError(f"pca_dim={self.pca_dim} must be a positive multiple of m={self.m}")
        if self.n < 2:
            raise ParameterError("n must be >= 2")
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if self.runs < 1:
            raise ParameterError("runs must be >= 1")
        if self.sigma_proj < 0:
            raise ParameterError("sigma_proj must be >= 0")
        if self.max_queries < 0:
            raise ParameterError("max_queries must be >= 0")
        if self.backend not in ("sim", "ckks_lite"):
            raise ParameterError(f"unknown backend {self.backend!r}")
        return self

    def replace(self, **changes) -> "PipelineConfig":
        return PipelineConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: Dict) -> "PipelineConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        """Read a flat JSON object; ``overrides`` that are not None win."""
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise DataError(f"config {path} must be a JSON object")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)


@dataclass
class BenchReport:
    config: Dict
    run_seeds: List[int]
    recall_coarse: List[float]
    recall_rerank: List[float]
    n_database: int
    n_queries: int
    filter_ms_mean: float
    filter_ms_median: float
    rerank_ms_mean: float
    rerank_ms_median: float
    total_ms_mean: float
    total_ms_median: float
    he_ops_per_query: List[int]
    label: str = ""

    @property
    def recall_at_1_coarse(self):
        return float(np.mean(self.recall_coarse))

    @property
    def recall_at_1_rerank(self):
        return float(np.mean(self.recall_rerank))

    @property
    def bookkeeping_fraction(self):
        parts = self.filter_ms_mean + self.rerank_ms_mean
        return (self.total_ms_mean - parts) / self.total_ms_mean if self.total_ms_mean else 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def recall_at_1(predicted_labels, true_labels) -> float:
    """Fraction of queries whose top-ranked record has the query's label."""
    p = np.asarray(predicted_labels)
    t = np.asarray(true_labels)
    if p.shape != t.shape:
        raise ParameterError(f"{p.size} results for {t.size} queries")
    if p.size == 0:
        raise DataError("no queries")
    return float(np.mean(p == t))


# -- data preparation ------------------------------------------------------

def _data_key(cfg):
    return (cfg.data_path, cfg.n_identities, cfg.samples_per_identity, cfg.input_dim,
            cfg.intra_class_noise, cfg.data_seed, cfg.pca_dim)


def prepare_data(cfg: PipelineConfig, cache: Optional[dict] = None):
    """``(gallery, probes)``: held-out split, PCA fitted on the gallery, unit rows."""
    key = ("data",) + _data_key(cfg)
    if cache is not None and key in cache:
        return cache[key]
    if cfg.data_path:
        raw = load_evec(cfg.data_path)
    else:
        raw = gen_synthetic(SyntheticSpec(cfg.n_identities, cfg.samples_per_identity, cfg.input_dim,
                                          cfg.intra_class_noise, cfg.data_seed))
    gallery, probes = holdout_split(l2_normalize(raw), cfg.data_seed)
    if cfg.pca_dim != gallery.dim:
        pca = fit_pca(gallery, cfg.pca_dim)
        gallery, probes = apply_pca(pca, gallery), apply_pca(pca, probes)
    out = (l2_normalize(gallery), l2_normalize(probes))
    if cache is not None:
        cache[key] = out
    return out


def _codebook(gallery, cfg, seed, cache):
    key = ("codebook",) + _data_key(cfg) + (cfg.m, cfg.n, seed)
    if cache is not None and key in cache:
        return cache[key]
    cb = train_codebook(gallery, cfg.m, cfg.n, seed)
    out = (cb, build_distance_table(cb))
    if cache is not None:
        cache[key] = out
    return out


class DummyVectors:
    """Random unit vectors regenerated on demand in fixed-size chunks."""

    CHUNK = 1 << 14

    def __init__(self, count, dim, seed):
        self.count, self.dim, self.seed = count, dim, seed
        self._chunk = lru_cache(maxsize=8)(self._make_chunk)

    def _make_chunk(self, c):
        rows = min(self.CHUNK, self.count - c * self.CHUNK)
        x = np.random.default_rng([self.seed, c]).standard_normal((rows, self.dim))
        return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)

    def __len__(self):
        return self.count

    def __getitem__(self, i):
        return self._chunk(i // self.CHUNK)[i % self.CHUNK]

    def chunks(self):
        for c in range((self.count + self.CHUNK - 1) // self.CHUNK):
            yield self._make_chunk(c)


class _Stacked:
    def __init__(self, head, tail):
        self.head, self.tail = head, tail

    def __len__(self):
        return len(self.head) + len(self.tail)

    def __getitem__(self, i):
        return self.head[i] if i < len(self.head) else self.tail[i - len(self.head)]


# -- running ---------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig, cache: Optional[dict] = None, n_database: Optional[int] = None,
                 label: str = "") -> BenchReport:
    """Run the full pipeline ``cfg.runs`` times and aggregate.

    ``n_database`` pads the gallery with random unit vectors up to that many
    records (scale experiments). Padded records are encrypted lazily.
    """
    cfg.validate()
    gallery, probes = prepare_data(cfg, cache)
    if cfg.max_queries:
        probes = probes.subset(slice(0, cfg.max_queries))
    if probes.count == 0 or gallery.count == 0:
        raise DataError("need a non-empty gallery and probe set")
    backend = get_backend(cfg.backend)
    lazy = cfg.lazy_encrypt
    seeds = [cfg.key_seed + r for r in range(cfg.runs)]
    rec_c, rec_r, t_filter, t_rerank, t_total, he_ops = [], [], [], [], [], []
    n_db = gallery.count
    for seed in seeds:
        cb, tb = _codebook(gallery, cfg, seed, cache)
        key = keygen(seed, cfg.m, cfg.n, cfg.pca_dim // cfg.m, cfg.sigma_proj, permute=cfg.permute)
        pcb = protect(cb, tb, key)
        pindex = build_protected_index(gallery, pcb, key)
        labels = gallery.labels
        vectors = gallery.vectors
        if n_database is not None and n_database > gallery.count:
            pindex, vectors, labels = _pad(pindex, pcb, key, gallery, n_database, seed)
            lazy = True
        n_db = len(pindex)
        roles = setup_roles(backend, vectors, seed=seed, pindex=pindex, cancel_key=key, record=False,
                            lazy=lazy)
        top_c, top_r = [], []
        for q in probes.vectors:
            t0 = time.perf_counter()
            cands = cancelable_topk(pindex, secure_quantize(pcb, key, q), cfg.K)
            t1 = time.perf_counter()
            before = roles.csp.he_ops
            result = rerank(roles, q, cands.ids)
            t2 = time.perf_counter()
            he_ops.append(roles.csp.he_ops - before)
            top_c.append(labels[cands.ids[0]])
            top_r.append(labels[result.top])
            t_filter.append(t1 - t0)
            t_rerank.append(t2 - t1)
            t_total.append(time.perf_counter() - t0)
        rec_c.append(recall_at_1(top_c, probes.labels))
        rec_r.append(recall_at_1(top_r, probes.labels))
    ms = lambda a, f: float(f(a) * 1e3)
    return BenchReport(
        config=asdict(cfg), run_seeds=seeds, recall_coarse=rec_c, recall_rerank=rec_r,
        n_database=n_db, n_queries=probes.count,
        filter_ms_mean=ms(t_filter, np.mean), filter_ms_median=ms(t_filter, np.median),
        rerank_ms_mean=ms(t_rerank, np.mean), rerank_ms_median=ms(t_rerank, np.median),
        total_ms_mean=ms(t_total, np.mean), total_ms_median=ms(t_total, np.median),
        he_ops_per_query=sorted(set(he_ops)), label=label)


def _pad(pindex, pcb, key, gallery, n_database, seed):
    dummies = DummyVectors(n_database - gallery.count, gallery.dim, seed)
    codes = [pindex.codes] + [secure_quantize_batch(pcb, key, c) for c in dummies.chunks()]
    padded = type(pindex)(pcb, np.concatenate(codes), np.arange(n_database))
    # dummy records get a label no probe can carry
    labels = np.concatenate([gallery.labels, np.full(len(dummies), -1)])
    return padded, _Stacked(gallery.vectors, dummies), labels


AXES = ("K", "M", "sigma", "scale")


@dataclass
class SweepTable:
    axis: str
    values: List
    reports: List[BenchReport] = field(default_factory=list)

    def to_dict(self):
        return {"axis": self.axis, "values": list(self.values),
                "reports": [r.to_dict() for r in self.reports]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["axis"], list(d["values"]), [BenchReport.from_dict(r) for r in d["reports"]])


def sweep(cfg: PipelineConfig, axis: str, values, cache: Optional[dict] = None) -> SweepTable:
    """One report per value with data, seeds and (where possible) codebooks shared.

    For ``sigma`` a value of 0 means permutation only. For ``scale`` each
    value is the padded database size.
    """
    if axis not in AXES:
        raise ParameterError(f"axis must be one of {AXES}")
    cache = {} if cache is None else cache
    table = SweepTable(axis, list(values))
    for v in values:
        if axis == "K":
            run_cfg = cfg.replace(K=int(v))
        elif axis == "M":
            run_cfg = cfg.replace(m=int(v))
        elif axis == "sigma":
            run_cfg = cfg.replace(sigma_proj=float(v))
        else:
            run_cfg = cfg
            if int(v) < 1:
                raise ParameterError("scale values must be positive")
        n_db = int(v) if axis == "scale" else None
        table.reports.append(run_pipeline(run_cfg, cache, n_database=n_db, label=f"{axis}={v}"))
    return table


# -- reports ---------------------------------------------------------------

TEXT_HEADER = f"{'method':<28} {'dim':>5} {'ACC':>8} {'time(ms)':>10} {'HE ops':>7}"


def _rows(r: BenchReport):
    dim = r.config.get("pca_dim")
    tag = f" [{r.label}]" if r.label else ""
    ops = ",".join(str(o) for o in r.he_ops_per_query)
    return [
        f"{('cancelable PQ' + tag):<28} {dim:>5} {100 * r.recall_at_1_coarse:>7.2f}% "
        f"{r.filter_ms_median:>10.3f} {0:>7}",
        f"{('cancelable PQ + HE' + tag):<28} {dim:>5} {100 * r.recall_at_1_rerank:>7.2f}% "
        f"{r.total_ms_median:>10.3f} {ops:>7}",
    ]


def format_text(obj) -> str:
    reports = obj.reports if isinstance(obj, SweepTable) else [obj]
    lines = [TEXT_HEADER]
    for r in reports:
        lines += _rows(r)
    return "\n".join(lines) + "\n"


def emit_report(obj, fmt: str, path) -> Path:
    """Write a BenchReport or SweepTable as ``text`` or ``structured`` (JSON)."""
    path = Path(path)
    if fmt == "text":
        path.write_text(format_text(obj))
    elif fmt == "structured":
        kind = "sweep" if isinstance(obj, SweepTable) else "report"
        path.write_text(json.dumps({"kind": kind, **obj.to_dict()}, indent=2, sort_keys=True) + "\n")
    else:
        raise ParameterError(f"format must be 'text' or 'structured', got {fmt!r}")
    return path


def load_report(path):
    d = json.loads(Path(path).read_text())
    kind = d.pop("kind", "report")
    return SweepTable.from_dict(d) if kind == "sweep" else BenchReport.from_dict(d)
