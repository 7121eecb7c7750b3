"""Command-line entry point: ``cancelpq <subcommand> ...``.

Exit codes: 0 success, 2 bad parameters, 3 bad data or file format,
4 key or authorization failure.
"""

import argparse
import json
import sys
from pathlib import Path

from . import bench, cancelable, embed_io, pq_index, sec_eval, secure_rank
from .exceptions import AuthorizationError, CancelPQError, DataError, ParameterError

PCA_FILE = "pca.pcam"
CODEBOOK_FILE = "codebook.pqcb"
TABLE_FILE = "table.pqdt"
INDEX_FILE = "index.cpqi"


def _config(args) -> bench.PipelineConfig:
    over = {"key_seed": args.seed}
    for name in ("pca_dim", "m", "n", "K", "sigma_proj", "backend", "runs", "max_queries"):
        over[name] = getattr(args, name, None)
    if args.config:
        cfg = bench.PipelineConfig.load(args.config, **over)
    else:
        cfg = bench.PipelineConfig(**{k: v for k, v in over.items() if v is not None})
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _out(args, default):
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _prep(s, model_dir):
    """Normalize, project with the stored PCA and normalize again."""
    s = embed_io.l2_normalize(s)
    pca_path = Path(model_dir) / PCA_FILE
    if pca_path.exists():
        s = embed_io.l2_normalize(embed_io.apply_pca(embed_io.loads_pca(pca_path.read_bytes()), s))
    return s


def _load_model(model_dir):
    d = Path(model_dir)
    return (pq_index.loads_codebook((d / CODEBOOK_FILE).read_bytes()),
            pq_index.loads_table((d / TABLE_FILE).read_bytes()))


def _check_key_path(key_path, index_dir):
    key_dir = Path(key_path).resolve().parent
    index_dir = Path(index_dir).resolve()
    if key_dir == index_dir or index_dir in key_dir.parents:
        raise AuthorizationError(f"refusing to write key {key_path} inside index directory {index_dir}")


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args, cfg):
    spec = embed_io.SyntheticSpec(args.identities, args.samples, args.dim, args.noise,
                                  args.seed if args.seed is not None else 42)
    s = embed_io.gen_synthetic(spec)
    out = Path(args.out or "data.evec")
    if args.probes:
        gallery, probes = embed_io.holdout_split(s, spec.seed)
        embed_io.write_evec(gallery, out)
        embed_io.write_evec(probes, args.probes)
        print(f"wrote {gallery.count} gallery vectors to {out} and {probes.count} probes to {args.probes}")
    else:
        embed_io.write_evec(s, out)
        print(f"wrote {s.count} x {s.dim} vectors to {out}")


def cmd_fit(args, cfg):
    out = _out(args, "model")
    s = embed_io.l2_normalize(embed_io.load_evec(args.data))
    if cfg.pca_dim != s.dim:
        pca = embed_io.fit_pca(s, cfg.pca_dim)
        (out / PCA_FILE).write_bytes(embed_io.dumps_pca(pca))
        s = embed_io.l2_normalize(embed_io.apply_pca(pca, s))
    cb = pq_index.train_codebook(s, cfg.m, cfg.n, cfg.key_seed)
    (out / CODEBOOK_FILE).write_bytes(pq_index.dumps_codebook(cb))
    (out / TABLE_FILE).write_bytes(pq_index.dumps_table(pq_index.build_distance_table(cb)))
    print(f"fitted PCA {s.dim}-d, PQ m={cfg.m} n={cfg.n} into {out}")


def _protect(args, cfg, seed):
    out = Path(args.out or "index")
    _check_key_path(args.key_out, out)
    out.mkdir(parents=True, exist_ok=True)
    cb, tb = _load_model(args.model)
    s = _prep(embed_io.load_evec(args.data), args.model)
    key = cancelable.keygen(seed, cb.m, cb.n, cb.d_sub, cfg.sigma_proj, permute=not args.no_permute)
    pindex = cancelable.build_protected_index(s, cancelable.protect(cb, tb, key), key)
    Path(args.key_out).write_bytes(cancelable.dumps_key(key))
    (out / INDEX_FILE).write_bytes(cancelable.dumps_protected_index(pindex))
    return key, pindex


def cmd_protect(args, cfg):
    key, pindex = _protect(args, cfg, cfg.key_seed)
    print(f"protected {len(pindex)} records under key {key.key_id.hex()}")


def cmd_revoke(args, cfg):
    old = None
    if args.old_key:
        old = cancelable.loads_key(Path(args.old_key).read_bytes())
    key, pindex = _protect(args, cfg, cfg.key_seed)
    if old is not None and old.key_id == key.key_id:
        raise ParameterError("new seed reproduces the revoked key; choose a different --seed")
    print(f"reissued {len(pindex)} records under key {key.key_id.hex()}"
          + (f" (revoked {old.key_id.hex()})" if old else ""))


def cmd_query(args, cfg):
    pindex = cancelable.loads_protected_index(Path(args.index).read_bytes())
    key = cancelable.loads_key(Path(args.key).read_bytes())
    q = _prep(embed_io.load_evec(args.data), args.model)
    codes = cancelable.secure_quantize_batch(pindex.pcb, key, q.vectors)
    results = []
    for c in codes:
        cl = cancelable.cancelable_topk(pindex, pq_index.PqCode(c, key.key_id), cfg.K)
        results.append({"ids": cl.ids.tolist(), "distances": cl.distances.tolist()})
    out = Path(args.out or "candidates.json")
    out.write_text(json.dumps({"K": cfg.K, "queries": results}, indent=1) + "\n")
    print(f"wrote Top-{cfg.K} candidates for {len(results)} queries to {out}")


def cmd_rerank(args, cfg):
    cands = json.loads(Path(args.candidates).read_text())["queries"]
    q = _prep(embed_io.load_evec(args.data), args.model)
    g = _prep(embed_io.load_evec(args.gallery), args.model)
    if len(cands) != q.count:
        raise DataError(f"{len(cands)} candidate lists for {q.count} queries")
    backend = secure_rank.get_backend(cfg.backend)
    roles = secure_rank.setup_roles(backend, g.vectors, seed=cfg.key_seed, lazy=cfg.lazy_encrypt)
    out = []
    for v, c in zip(q.vectors, cands):
        r = secure_rank.rerank(roles, v, c["ids"])
        row = {"ids": r.ids.tolist(), "scores": r.scores.tolist()}
        if g.labels is not None:
            row["label"] = int(g.labels[r.top])
        out.append(row)
    path = Path(args.out or "results.json")
    path.write_text(json.dumps({"backend": backend.name, "results": out}, indent=1) + "\n")
    if args.transcript:
        roles.channel.dump(args.transcript)
    if q.labels is not None and g.labels is not None:
        pred = [row["label"] for row in out]
        print(f"recall@1 {bench.recall_at_1(pred, q.labels):.4f}")
    print(f"re-ranked {len(out)} queries with {roles.csp.he_ops} encrypted inner products -> {path}")


def cmd_eval_security(args, cfg):
    out = _out(args, "security")
    cb, tb = _load_model(args.model)
    s = _prep(embed_io.load_evec(args.data), args.model)
    seeds = [int(x) for x in args.seeds.split(",")]
    sets = sec_eval.score_sets(s, cb, tb, seeds, cfg.sigma_proj, args.budget,
                               cfg.key_seed, args.mode)
    u = sec_eval.unlinkability_report(sets["pseudo_genuine"], sets["pseudo_imposter"])
    d = sec_eval.diversity_report(sets["genuine"], sets["pseudo_genuine"])
    text = sec_eval.format_text(sets, u, d)
    (out / "security.txt").write_text(text)
    sec_eval.write_structured(out / "security.json", sets, u, d)
    sec_eval.write_histogram_csv(out / "histograms.csv", sets)
    print(text, end="")


def cmd_bench(args, cfg):
    out = _out(args, cfg.out_dir)
    rep = bench.run_pipeline(cfg)
    bench.emit_report(rep, "text", out / "bench.txt")
    bench.emit_report(rep, "structured", out / "bench.json")
    print(bench.format_text(rep), end="")


def cmd_sweep(args, cfg):
    out = _out(args, cfg.out_dir)
    values = [float(v) if args.axis == "sigma" else int(float(v)) for v in args.values.split(",") if v]
    table = bench.sweep(cfg, args.axis, values)
    bench.emit_report(table, "text", out / f"sweep_{args.axis}.txt")
    bench.emit_report(table, "structured", out / f"sweep_{args.axis}.json")
    print(bench.format_text(table), end="")


# -- parser ----------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with pipeline settings")
    common.add_argument("--seed", type=int, help="seed for keys, k-means and data")
    common.add_argument("--out", help="output file or directory")

    p = argparse.ArgumentParser(prog="cancelpq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "synthesize a labelled embedding set")
    sp.add_argument("--identities", type=int, default=500)
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--dim", type=int, default=512)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--probes", help="also hold out one probe per identity into this file")

    sp = add("fit", cmd_fit, "fit PCA and a PQ codebook on a gallery")
    sp.add_argument("--data", required=True)
    sp.add_argument("--pca-dim", dest="pca_dim", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--n", type=int)

    for name, func, help_ in (("protect", cmd_protect, "issue a key and build a protected index"),
                              ("revoke", cmd_revoke, "reissue the protected index under a new key")):
        sp = add(name, func, help_)
        sp.add_argument("--model", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--key-out", dest="key_out", required=True)
        sp.add_argument("--sigma-proj", dest="sigma_proj", type=float)
        sp.add_argument("--no-permute", dest="no_permute", action="store_true")
        if name == "revoke":
            sp.add_argument("--old-key", dest="old_key")

    sp = add("query", cmd_query, "coarse Top-K search with a key")
    sp.add_argument("--index", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--K", type=int)

    sp = add("rerank", cmd_rerank, "encrypted re-ranking of candidate lists")
    sp.add_argument("--candidates", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="query vectors")
    sp.add_argument("--gallery", required=True)
    sp.add_argument("--backend", choices=sorted(secure_rank.BACKENDS))
    sp.add_argument("--transcript", help="write framed protocol messages here")

    sp = add("eval-security", cmd_eval_security, "score distributions, diversity and unlinkability")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--seeds", default="1,2,3,4,5")
    sp.add_argument("--sigma-proj", dest="sigma_proj", type=float)
    sp.add_argument("--budget", type=int, default=5000)
    sp.add_argument("--mode", choices=sec_eval.MODES, default="cross")

    for name, func, help_ in (("bench", cmd_bench, "run the full pipeline"),
                              ("sweep", cmd_sweep, "run the pipeline over one parameter axis")):
        sp = add(name, func, help_)
        sp.add_argument("--pca-dim", dest="pca_dim", type=int)
        sp.add_argument("--m", type=int)
        sp.add_argument("--n", type=int)
        sp.add_argument("--K", type=int)
        sp.add_argument("--sigma-proj", dest="sigma_proj", type=float)
        sp.add_argument("--backend", choices=sorted(secure_rank.BACKENDS))
        sp.add_argument("--runs", type=int)
        sp.add_argument("--max-queries", dest="max_queries", type=int)
        if name == "sweep":
            sp.add_argument("--axis", choices=bench.AXES, required=True)
            sp.add_argument("--values", required=True, help="comma-separated")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except CancelPQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
