"""Score distributions for protected templates and divergence-based security checks.

Four score sets are drawn from a labelled set protected under several keys:

=================  ===================  ==============
kind               identities           keys
=================  ===================  ==============
genuine            same                 same
imposter           different            same
pseudo_genuine     same                 different
pseudo_imposter    different            different
=================  ===================  ==============

A protected template is a key-bound PQ code. Two templates are compared by
decoding them to vectors and taking the cosine. How the second template is
decoded is a choice (``mode``):

``"cross"`` (default)
    Both codes are decoded with the first template's codebook. This is what
    an adversary holding one protected database and a leaked code from
    another would compute when trying to link them.
``"own"``
    Each code is decoded with its own key's codebook. Since a protected
    codebook is a relabelling of the plain one, this undoes the permutation
    and templates become linkable across keys. Kept for comparison.
"""

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cancelable import (DEFAULT_SIGMA_PROJ, ProtectedCodebook, keygen, protect, reconstruct,
                         secure_quantize_batch)
from .embed_io import EmbeddingSet
from .exceptions import DataError, ParameterError
from .pq_index import DistanceTable, PqCodebook

KINDS = ("genuine", "imposter", "pseudo_genuine", "pseudo_imposter")
N_BINS = 64
BIN_EDGES = np.linspace(-1.0, 1.0, N_BINS + 1)
DIVERSITY_THRESHOLD = 2.0
MODES = ("cross", "own")


@dataclass
class ScoreSet:
    kind: str
    scores: np.ndarray
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown score kind {self.kind!r}")
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        if not np.all(np.isfinite(s)):
            raise DataError("scores must be finite")
        self.scores = s

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class DistStats:
    count: int
    mean: float
    variance: float
    min: float
    max: float
    histogram: tuple


def histogram(scores) -> np.ndarray:
    """64 equal bins over [-1, 1]; values outside are clipped into the end bins."""
    s = np.clip(np.asarray(scores, dtype=np.float64), -1.0, 1.0)
    return np.histogram(s, bins=BIN_EDGES)[0]


def dist_stats(s) -> DistStats:
    scores = s.scores if isinstance(s, ScoreSet) else np.asarray(s, dtype=np.float64)
    if scores.size == 0:
        raise DataError("cannot summarize an empty score set")
    mean = scores.sum() / scores.size
    var = ((scores - mean) ** 2).sum() / scores.size
    return DistStats(int(scores.size), float(mean), float(var), float(scores.min()),
                     float(scores.max()), tuple(int(c) for c in histogram(scores)))


# -- similarity ------------------------------------------------------------

def _cosine(a, b):
    num = np.einsum("ij,ij->i", a, b)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def protected_similarity(pcbA: ProtectedCodebook, codeA, pcbB: ProtectedCodebook, codeB,
                         mode="cross") -> float:
    """Cosine between two decoded protected templates. See the module docstring for ``mode``."""
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    if (pcbA.m, pcbA.n, pcbA.d_sub) != (pcbB.m, pcbB.n, pcbB.d_sub):
        raise ParameterError("codebooks differ in shape")
    a = reconstruct(pcbA, codeA)
    b = reconstruct(pcbA if mode == "cross" else pcbB, codeB)
    return float(_cosine(a[None, :], b[None, :])[0])


def _decode_rows(pcb, codes):
    return pcb.centroids[np.arange(pcb.m)[None, :], codes].reshape(len(codes), -1).astype(np.float64)


# -- pair sampling ---------------------------------------------------------

def _sample_pairs(labels, same, budget, rng):
    """Up to ``budget`` distinct unordered pairs (i < j), uniformly without replacement."""
    labels = np.asarray(labels)
    if same:
        groups = [np.flatnonzero(labels == u) for u in np.unique(labels)]
        sizes = np.array([len(g) * (len(g) - 1) // 2 for g in groups], dtype=np.int64)
        total = int(sizes.sum())
        picks = np.sort(rng.choice(total, size=min(budget, total), replace=False))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        out = []
        for p in picks:
            g = int(np.searchsorted(offsets, p, side="right") - 1)
            i, j = _unrank_pair(int(p - offsets[g]), len(groups[g]))
            out.append((groups[g][i], groups[g][j]))
        return np.array(out, dtype=np.int64).reshape(-1, 2)
    n = len(labels)
    counts = np.bincount(np.unique(labels, return_inverse=True)[1])
    total = (n * (n - 1) - int((counts * (counts - 1)).sum())) // 2
    want = min(budget, total)
    seen, out = set(), []
    while len(out) < want:
        i, j = rng.integers(n, size=2)
        if labels[i] == labels[j]:
            continue
        key = (min(i, j), max(i, j))
        if key not in seen:
            seen.add(key)
            out.append(key)
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def _unrank_pair(r, n):
    # lexicographic rank -> (i, j), i < j < n
    i = 0
    while r >= n - 1 - i:
        r -= n - 1 - i
        i += 1
    return i, i + 1 + r


def score_sets(dataset: EmbeddingSet, codebook: PqCodebook, table: DistanceTable, seeds: Sequence,
               sigma_proj: float = DEFAULT_SIGMA_PROJ, pair_budget: int = 5000, sampler_seed: int = 0,
               mode: str = "cross") -> Dict[str, ScoreSet]:
    """Protect ``dataset`` under every key seed and draw the four score sets.

    Genuine and pseudo-genuine use the same sample pairs, as do imposter and
    pseudo-imposter, so with identical keys the pseudo sets equal their plain
    counterparts exactly.
    """
    if dataset.labels is None:
        raise DataError("score sets need labels")
    labels, counts = np.unique(dataset.labels, return_counts=True)
    if len(labels) < 2:
        raise DataError("need at least 2 identities")
    if counts.max() < 2:
        raise DataError("need at least 2 samples for some identity")
    if len(seeds) < 2:
        raise ParameterError("need at least 2 key seeds")
    if pair_budget < 1:
        raise ParameterError("pair_budget must be >= 1")
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")

    pcbs, codes = [], []
    for seed in seeds:
        key = keygen(seed, codebook.m, codebook.n, codebook.d_sub, sigma_proj)
        pcb = protect(codebook, table, key)
        pcbs.append(pcb)
        codes.append(secure_quantize_batch(pcb, key, dataset.vectors))

    pair_rng, key_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(sampler_seed).spawn(2))
    same_pairs = _sample_pairs(dataset.labels, True, pair_budget, pair_rng)
    diff_pairs = _sample_pairs(dataset.labels, False, pair_budget, pair_rng)
    n_keys = len(seeds)

    def draw_keys(count):
        a = key_rng.integers(n_keys, size=count)
        b = (a + key_rng.integers(1, n_keys, size=count)) % n_keys
        return a, b

    def scores(pairs, ka, kb):
        out = np.empty(len(pairs))
        for a in np.unique(ka):
            for b in np.unique(kb[ka == a]):
                sel = (ka == a) & (kb == b)
                left = _decode_rows(pcbs[a], codes[a][pairs[sel, 0]])
                right = _decode_rows(pcbs[a] if mode == "cross" else pcbs[b], codes[b][pairs[sel, 1]])
                out[sel] = _cosine(left, right)
        return out

    ka_same, kb_same = draw_keys(len(same_pairs))
    ka_diff, kb_diff = draw_keys(len(diff_pairs))
    base = {"seeds": [int(s) for s in seeds], "sigma_proj": float(sigma_proj), "mode": mode,
            "sampler_seed": int(sampler_seed), "count": int(dataset.count)}
    return {
        "genuine": ScoreSet("genuine", scores(same_pairs, ka_same, ka_same),
                            dict(base, pairing="same identity, same key")),
        "imposter": ScoreSet("imposter", scores(diff_pairs, ka_diff, ka_diff),
                             dict(base, pairing="different identity, same key")),
        "pseudo_genuine": ScoreSet("pseudo_genuine", scores(same_pairs, ka_same, kb_same),
                                   dict(base, pairing="same identity, different keys")),
        "pseudo_imposter": ScoreSet("pseudo_imposter", scores(diff_pairs, ka_diff, kb_diff),
                                    dict(base, pairing="different identity, different keys")),
    }


# -- divergence and verdicts -----------------------------------------------

def _scores(s):
    a = s.scores if isinstance(s, ScoreSet) else np.asarray(s, dtype=np.float64)
    if a.size == 0:
        raise DataError("empty score set")
    return a


def jsd(p_scores, q_scores) -> float:
    """Jensen-Shannon divergence (natural log) of add-one smoothed 64-bin histograms."""
    p = histogram(p_scores) + 1.0
    q = histogram(q_scores) + 1.0
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    return float(0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m)))


def pooled_sd(a, b) -> float:
    return float(np.sqrt((np.var(a) + np.var(b)) / 2))


def standardized_gap(a, b) -> float:
    sd = pooled_sd(a, b)
    diff = float(np.mean(a) - np.mean(b))
    if sd == 0:
        return 0.0 if diff == 0 else float(np.sign(diff) * np.inf)
    return diff / sd


def bootstrap_threshold(s, n_boot=200, quantile=0.95, seed=0) -> float:
    """95th percentile of JSD between two random halves of one score set."""
    a = _scores(s)
    if a.size < 2:
        raise DataError("need at least 2 scores to split")
    rng = np.random.default_rng(seed)
    half = a.size // 2
    vals = np.empty(n_boot)
    for b in range(n_boot):
        perm = rng.permutation(a.size)
        vals[b] = jsd(a[perm[:half]], a[perm[half:2 * half]])
    return float(np.quantile(vals, quantile))


@dataclass
class UnlinkabilityReport:
    mean_gap: float
    standardized_gap: float
    jsd: float
    threshold: float
    verdict: str


@dataclass
class DiversityReport:
    mean_genuine: float
    mean_pseudo: float
    standardized_gap: float
    threshold: float
    verdict: str


def unlinkability_report(pg, pi, threshold: Optional[float] = None, seed=0) -> UnlinkabilityReport:
    """Compare pseudo-genuine and pseudo-imposter scores.

    The default threshold comes from :func:`bootstrap_threshold` on ``pi``.
    """
    a, b = _scores(pg), _scores(pi)
    tau = bootstrap_threshold(b, seed=seed) if threshold is None else float(threshold)
    d = jsd(a, b)
    return UnlinkabilityReport(float(abs(a.mean() - b.mean())), standardized_gap(a, b), d, tau,
                               "unlinkable" if d <= tau else "linkable")


def diversity_report(g, pg, threshold: float = DIVERSITY_THRESHOLD) -> DiversityReport:
    a, b = _scores(g), _scores(pg)
    gap = standardized_gap(a, b)
    return DiversityReport(float(a.mean()), float(b.mean()), gap, float(threshold),
                           "diverse" if gap >= threshold else "not diverse")


# -- emitters --------------------------------------------------------------

ASSUMPTION = ("protected templates are compared as cosine of PQ reconstructions; "
              "mode={mode}")


def report_records(sets: Dict[str, ScoreSet]) -> List[dict]:
    out = []
    for kind in KINDS:
        if kind not in sets:
            continue
        st = dist_stats(sets[kind])
        out.append({"kind": kind, "count": st.count, "mean": st.mean, "variance": st.variance,
                    "bins": list(st.histogram), "provenance": sets[kind].provenance})
    return out


def write_structured(path, sets, unlink: Optional[UnlinkabilityReport] = None,
                     diversity: Optional[DiversityReport] = None):
    doc = {"score_sets": report_records(sets),
           "unlinkability": asdict(unlink) if unlink else None,
           "diversity": asdict(diversity) if diversity else None}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def write_histogram_csv(path, sets):
    """One row per bin: lower edge, upper edge, then a count column per kind."""
    kinds = [k for k in KINDS if k in sets]
    hists = [histogram(sets[k].scores) for k in kinds]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", *kinds])
        for b in range(N_BINS):
            w.writerow([f"{BIN_EDGES[b]:.5f}", f"{BIN_EDGES[b + 1]:.5f}", *(int(h[b]) for h in hists)])


def format_text(sets, unlink=None, diversity=None) -> str:
    mode = next(iter(sets.values())).provenance.get("mode", "cross") if sets else "cross"
    lines = [ASSUMPTION.format(mode=mode), "",
             f"{'kind':<16} {'count':>7} {'mean':>9} {'var':>9} {'min':>8} {'max':>8}"]
    for kind in KINDS:
        if kind in sets:
            st = dist_stats(sets[kind])
            lines.append(f"{kind:<16} {st.count:>7d} {st.mean:>9.4f} {st.variance:>9.5f} "
                         f"{st.min:>8.4f} {st.max:>8.4f}")
    if unlink:
        lines.append(f"\nunlinkability: JSD={unlink.jsd:.5f} threshold={unlink.threshold:.5f} "
                     f"|mean gap|={unlink.mean_gap:.4f} -> {unlink.verdict}")
    if diversity:
        lines.append(f"diversity: standardized gap={diversity.standardized_gap:.3f} "
                     f"threshold={diversity.threshold:.1f} -> {diversity.verdict}")
    return "\n".join(lines) + "\n"
