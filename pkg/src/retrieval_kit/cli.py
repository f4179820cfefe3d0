"""Command-line entry point: ``retrieval-kit <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 numerical failure.
Settings resolve as CLI flag > ``--config`` JSON value > built-in default,
and the effective settings are echoed into every JSON document written.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .core import EvalConfig, load_dataset, save_manifest, write_embeddings
from .distkernel import TileSpec, compute_distances
from .errors import DivergenceError, RetrievalKitError, StorageError, ValidationError
from .losses import LossParams, gradcheck_suite
from .metrics import (REPORT_SCHEMA_VERSION, MetricsReport, dump_json, estimate_reranked_unconstrained,
                      evaluate, reports_to_csv, write_text)
from .rerank import RerankParams

EVAL_DEFAULTS = {"metric": "euclidean", "k": [1, 10, 20, 50], "constrained": "none",
                 "tile_query": 1024, "tile_gallery": 4096, "spill_dir": None, "model": None,
                 "cross_domain": False}
RERANK_DEFAULTS = dict(EVAL_DEFAULTS, k1=20, k2=6, lambda_value=0.3, estimate=False,
                       constrained="both")
SYNTH_DEFAULTS = {"n_products": 32, "n_train_products": 1024, "raw_dim": 48, "embed_dim": 16,
                  "hidden_dim": 64, "shop_per_product": 4, "street_per_product": 2,
                  "shop_noise": 0.1, "street_noise": 0.25, "n_categories": 4, "clutter_dims": 16,
                  "clutter_scale": 1.0, "distortion": 0.3}
TRAIN_DEFAULTS = dict(SYNTH_DEFAULTS, epochs=120, base_lr=1e-4, P=16, K=4, warmup_epochs=10,
                      accumulation_steps=1, loss="quadruplet", optimizer="adam",
                      triplet_margin=0.3, g1=1.0, g2=0.5, center_weight=0.0005,
                      label_smoothing=0.1, cross_seed=None, cross_distortion=None)
GRADCHECK_DEFAULTS = {"points": 50, "step": 1e-4, "tolerance": 1e-4}
REPORT_DEFAULTS = {"figures": True}


# -- plumbing -------------------------------------------------------------

def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise StorageError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed config ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return cfg


def _resolve(args, defaults):
    """Merge defaults, config-file values and explicit flags (in rising precedence)."""
    file_cfg = _read_config(args.config)
    section = file_cfg.get(args.command, {})
    eff = dict(defaults)
    eff["seed"] = 0
    eff["threads"] = 1
    for src in (file_cfg, section):
        for k, v in src.items():
            key = k.replace("-", "_")
            if key in eff:
                eff[key] = v
    for k in list(eff):
        v = getattr(args, k, None)
        if v is not None:
            eff[k] = v
    return eff


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise StorageError(f"{p}: no such file")


def _document(command, eff, **body):
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "command": command, "config": eff}
    doc.update(body)
    doc["metadata"] = {"created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                       "version": __version__}
    return doc


class _OutputDir:
    """Stage outputs in a temporary sibling directory and move them in on success."""

    def __init__(self, path):
        self.path = Path(path)

    def __enter__(self):
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.path.name}.", dir=self.path.parent))
        except OSError as exc:
            raise StorageError(f"{self.path}: {exc.strerror or exc}") from exc
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        try:
            if not self.path.exists():
                os.replace(self.tmp, self.path)
            else:
                for f in sorted(self.tmp.iterdir()):
                    os.replace(f, self.path / f.name)
                shutil.rmtree(self.tmp, ignore_errors=True)
        except OSError as exc:
            raise StorageError(f"{self.path}: {exc.strerror or exc}") from exc
        return False


def _eval_config(eff, constrained, rerank=None):
    return EvalConfig(distance_metric=eff["metric"], k_values=tuple(eff["k"]),
                      constrained=constrained, rerank=rerank)


def _modes(value):
    return ["none", "by_category"] if value == "both" else [value]


def _load_eval_inputs(eff, args):
    _require(args.manifest, args.embeddings, eff.get("model"))
    data = load_dataset(args.manifest, args.embeddings)
    queries, gallery = data.split_domains()
    if eff.get("model"):
        from .toytrain import ToyEmbedder, embed
        model = ToyEmbedder.load(eff["model"])
        queries = embed(model, queries.matrix).with_records(queries.records)
        gallery = embed(model, gallery.matrix).with_records(gallery.records)
    elif eff["metric"] == "cosine":
        from .core import l2_normalize
        queries, gallery = l2_normalize(queries), l2_normalize(gallery)
    return queries, gallery


def _stores(queries, gallery, eff, spill, need_square):
    tiles = TileSpec(eff["tile_query"], eff["tile_gallery"])
    kw = {"tiles": tiles, "workers": eff["threads"]}

    def make(a, b, name):
        if spill:
            return compute_distances(a, b, eff["metric"], backing="disk",
                                     path=Path(spill) / f"{name}.dist", **kw)
        return compute_distances(a, b, eff["metric"], **kw)

    qg = make(queries, gallery, "query_gallery")
    if not need_square:
        return qg, None, None
    return qg, make(queries, queries, "query_query"), make(gallery, gallery, "gallery_gallery")


def _summary(reports, title=None):
    lines = [title] if title else []
    for rep in reports:
        tag = rep.protocol + (" (re-ranked)" if rep.reranked else "") + ("*" if rep.estimated else "")
        vals = "  ".join(f"{m}={v:.4f}" for m, v in rep.overall.items())
        lines.append(f"{tag:<40} {vals}  [n={rep.n_queries_total}, skipped={rep.n_queries_skipped}]")
    return "\n".join(lines)


# -- subcommands ------------------------------------------------------------

def cmd_eval(args):
    eff = _resolve(args, EVAL_DEFAULTS)
    queries, gallery = _load_eval_inputs(eff, args)
    store, _, _ = _stores(queries, gallery, eff, eff["spill_dir"], need_square=False)
    reports = []
    for mode in _modes(eff["constrained"]):
        protocol = "cross_domain" if eff["cross_domain"] else None
        reports.append(evaluate(queries, gallery, store, _eval_config(eff, mode),
                                protocol=protocol, workers=eff["threads"]))
    doc = _document("eval", eff, reports=[r.to_dict() for r in reports])
    with _OutputDir(args.out) as out:
        write_text(out / "report.json", dump_json(doc))
        write_text(out / "report.csv", reports_to_csv(reports))
    print(_summary(reports))
    return 0


def cmd_rerank(args):
    eff = _resolve(args, RERANK_DEFAULTS)
    params = RerankParams(int(eff["k1"]), int(eff["k2"]), float(eff["lambda_value"]))
    queries, gallery = _load_eval_inputs(eff, args)
    qg, qq, gg = _stores(queries, gallery, eff, eff["spill_dir"], need_square=True)
    modes = _modes(eff["constrained"])
    if eff["estimate"] and "by_category" not in modes:
        modes.append("by_category")
    if eff["estimate"] and "none" not in modes:
        modes.insert(0, "none")
    runs = {}
    for mode in modes:
        before = evaluate(queries, gallery, qg, _eval_config(eff, mode), workers=eff["threads"])
        after = evaluate(queries, gallery, qg, _eval_config(eff, mode, params),
                         rerank_stores=(qq, gg), workers=eff["threads"])
        runs[before.protocol] = {"before": before, "after": after}
    body = {"runs": {p: {"before": r["before"].to_dict(), "after": r["after"].to_dict()}
                     for p, r in runs.items()}}
    reports = [r[k] for r in runs.values() for k in ("before", "after")]
    if eff["estimate"]:
        cons = runs["constrained_by_category"]
        est = estimate_reranked_unconstrained(cons["after"], cons["before"],
                                              runs["unconstrained"]["before"])
        body["estimate"] = est.to_dict()
        if "unconstrained" in runs:
            body["estimate"]["true_reranked_unconstrained"] = runs["unconstrained"]["after"].overall
        reports.append(MetricsReport("unconstrained", est.values, estimated=True, reranked=True,
                                     n_queries_total=runs["unconstrained"]["before"].n_queries_total))
    doc = _document("rerank", eff, **body)
    with _OutputDir(args.out) as out:
        write_text(out / "rerank.json", dump_json(doc))
        write_text(out / "rerank.csv", reports_to_csv(reports))
    print(_summary(reports))
    if eff["estimate"]:
        print("estimate* " + "  ".join(f"{m}={v:.4f}" for m, v in body["estimate"]["values"].items()))
    return 0


def _synth_config(eff, seed=None, distortion=None):
    from .toytrain import SynthConfig
    kw = {k: eff[k] for k in SYNTH_DEFAULTS}
    kw["seed"] = eff["seed"] if seed is None else seed
    if distortion is not None:
        kw["distortion"] = distortion
    return SynthConfig(**kw)


def cmd_synth(args):
    from .toytrain import generate_synthetic
    eff = _resolve(args, SYNTH_DEFAULTS)
    data = generate_synthetic(_synth_config(eff))
    test = data.test_set()
    with _OutputDir(args.out) as out:
        write_embeddings(data.train, out / "train_raw.emb")
        save_manifest(data.train.records, out / "train.jsonl")
        write_embeddings(test, out / "test_raw.emb")
        save_manifest(test.records, out / "test.jsonl")
        write_text(out / "synth.json", dump_json(_document("synth", eff)))
    print(f"wrote {data.train.n_rows} training rows and {test.n_rows} test rows to {args.out}")
    return 0


def cmd_train_toy(args):
    from .toytrain import (EmbeddingSet, TrainConfig, cross_domain_data, default_model,
                           evaluate_model, generate_synthetic, train)
    eff = _resolve(args, TRAIN_DEFAULTS)
    scfg = _synth_config(eff)
    tcfg = TrainConfig(epochs=eff["epochs"], base_lr=eff["base_lr"], P=eff["P"], K=eff["K"],
                       warmup_epochs=eff["warmup_epochs"],
                       accumulation_steps=eff["accumulation_steps"], loss=eff["loss"],
                       optimizer=eff["optimizer"], seed=eff["seed"])
    lcfg = LossParams(triplet_margin=eff["triplet_margin"], g1=eff["g1"], g2=eff["g2"],
                      center_weight=eff["center_weight"], label_smoothing=eff["label_smoothing"])
    data = generate_synthetic(scfg)
    model0 = default_model(scfg, eff["seed"])
    raw_report = evaluate(data.queries, data.gallery,
                          compute_distances(data.queries, data.gallery), EvalConfig())
    result = train(data, model0, tcfg, lcfg, evaluate_fn=lambda m: evaluate_model(m, data).overall)
    final = evaluate_model(result.model, data)
    summary = {"held_out": final.to_dict(), "raw_baseline": raw_report.to_dict(),
               "skipped_batches": result.skipped_batches}
    if eff["cross_seed"] is not None or eff["cross_distortion"] is not None:
        data_b = cross_domain_data(scfg, eff["cross_seed"], eff["cross_distortion"])
        summary["cross_domain"] = evaluate_model(result.model, data_b, cross=True).to_dict()
    test = data.test_set()
    from .toytrain import embed
    embedded = EmbeddingSet(embed(result.model, test.matrix).matrix, test.records, normalized=True)
    doc = _document("train-toy", eff, summary=summary, log=result.log)
    with _OutputDir(args.out) as out:
        result.model.save(out / "model.bin")
        write_embeddings(embedded, out / "test.emb")
        write_embeddings(test, out / "test_raw.emb")
        save_manifest(test.records, out / "test.jsonl")
        write_text(out / "train_log.json", dump_json(doc))
    print(f"held-out mAP={final.overall['mAP']:.4f} Acc@1={final.overall['Acc@1']:.4f} "
          f"(raw baseline mAP={raw_report.overall['mAP']:.4f})")
    return 0


def cmd_gradcheck(args):
    eff = _resolve(args, GRADCHECK_DEFAULTS)
    results = gradcheck_suite(n_points=int(eff["points"]), seed=eff["seed"], step=eff["step"],
                              tolerance=eff["tolerance"])
    ok = all(r["passed"] for r in results.values())
    doc = _document("gradcheck", eff, passed=ok, losses=results)
    text = dump_json(doc)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_text(args.out, text)
    for name, r in results.items():
        print(f"{name:<20} {'PASS' if r['passed'] else 'FAIL'}  max_rel_err={r['max_rel_error']:.2e} "
              f"checked={r['n_checked']} excluded={r['n_excluded']}")
    if not ok:
        raise DivergenceError("finite-difference check failed")
    return 0


def _reports_from_doc(doc):
    if "reports" in doc:
        return [MetricsReport.from_dict(r) for r in doc["reports"]]
    if "runs" in doc:
        out = []
        for run in doc["runs"].values():
            out += [MetricsReport.from_dict(run["before"]), MetricsReport.from_dict(run["after"])]
        return out
    if "summary" in doc:
        s = doc["summary"]
        return [MetricsReport.from_dict(s[k]) for k in ("raw_baseline", "held_out", "cross_domain")
                if k in s]
    raise ValidationError("document holds no metrics reports")


def table_rows(report, unconstrained=None):
    """Rows of a per-category table: categories, then the aggregate lines."""
    names = list(report.overall)
    rows = [[c, str(v["n_queries"])] + [f"{v['metrics'][m]:.4f}" for m in names]
            for c, v in sorted(report.per_category.items())]
    simple = report.category_average()
    weighted = report.category_average(weighted=True)
    rows.append(["Average over categories", str(report.n_queries_total)]
                + [f"{simple[m]:.4f}" for m in names])
    rows.append(["Weighted average over categories", str(report.n_queries_total)]
                + [f"{weighted[m]:.4f}" for m in names])
    if unconstrained is not None:
        star = "*" if unconstrained.estimated else ""
        rows.append([f"Unconstrained retrieval{star}", str(unconstrained.n_queries_total)]
                    + [f"{unconstrained.overall[m]:.4f}{star}" for m in names])
    return ["category", "n_queries"] + names, rows


def _format_table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    return "\n".join([fmt.format(*header)] + [fmt.format(*r) for r in rows])


def cmd_report(args):
    from . import plotting
    eff = _resolve(args, REPORT_DEFAULTS)
    _require(args.input)
    try:
        doc = json.loads(Path(args.input).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.input}: malformed JSON ({exc.msg})") from None
    reports = _reports_from_doc(doc)
    if "estimate" in doc:
        reports.append(MetricsReport("unconstrained", doc["estimate"]["values"], estimated=True,
                                     reranked=True))
    uncon = [r for r in reports if r.protocol == "unconstrained"]
    blocks = []
    for i, rep in enumerate(reports):
        if not rep.per_category:
            continue
        match = [u for u in uncon if u.reranked == rep.reranked and not u.estimated]
        est = [u for u in uncon if u.estimated] if rep.reranked else []
        ref = (est or match or [None])[0] if rep.protocol != "unconstrained" else None
        header, rows = table_rows(rep, ref)
        title = f"[{rep.protocol}{', re-ranked' if rep.reranked else ''}]"
        blocks.append(title + "\n" + _format_table(header, rows))
    text = "\n\n".join(blocks) + "\n"
    with _OutputDir(args.out) as out:
        write_text(out / "table.txt", text)
        write_text(out / "table.csv", reports_to_csv(reports))
        if eff["figures"]:
            plotting.plot_acc_curve(reports, out / "acc_at_k.png")
            for i, rep in enumerate(reports):
                if rep.per_category:
                    tag = rep.protocol + ("_reranked" if rep.reranked else "")
                    plotting.plot_category_metrics(rep, out / f"categories_{i:02d}_{tag}.png")
            if "runs" in doc:
                for p, run in doc["runs"].items():
                    plotting.plot_rerank_comparison(MetricsReport.from_dict(run["before"]),
                                                    MetricsReport.from_dict(run["after"]),
                                                    out / f"rerank_{p}.png")
            if "log" in doc and doc["log"]:
                plotting.plot_training_log(doc["log"], out / "training.png")
    print(text, end="")
    return 0


# -- parser -----------------------------------------------------------------

def _add_eval_inputs(p):
    p.add_argument("--manifest", required=True, help="JSON-lines manifest")
    p.add_argument("--embeddings", required=True, help="EMB1 embedding file")
    p.add_argument("--model", help="embed raw features with this toy model first")
    p.add_argument("--metric", choices=["euclidean", "cosine"])
    p.add_argument("--k", type=int, nargs="+", help="Acc@k cut-offs")
    p.add_argument("--tile-query", type=int, dest="tile_query")
    p.add_argument("--tile-gallery", type=int, dest="tile_gallery")
    p.add_argument("--spill-dir", dest="spill_dir", help="keep distance matrices on disk here")
    p.add_argument("--cross-domain", dest="cross_domain", action="store_const", const=True,
                   help="tag the reports as cross-domain")
    p.add_argument("--out", required=True, help="output directory")


def _add_synth_options(p):
    for name, typ in (("n-products", int), ("n-train-products", int), ("raw-dim", int),
                      ("embed-dim", int), ("hidden-dim", int), ("shop-per-product", int),
                      ("street-per-product", int), ("shop-noise", float), ("street-noise", float),
                      ("n-categories", int), ("clutter-dims", int), ("clutter-scale", float),
                      ("distortion", float)):
        p.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))


def build_parser():
    parser = argparse.ArgumentParser(prog="retrieval-kit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default option values")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (output is identical for any N)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate retrieval metrics")
    _add_eval_inputs(p)
    p.add_argument("--constrained", choices=["none", "by_category", "both"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rerank", parents=[common], help="k-reciprocal re-ranking before/after")
    _add_eval_inputs(p)
    p.add_argument("--constrained", choices=["none", "by_category", "both"])
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p.add_argument("--lambda", type=float, dest="lambda_value")
    p.add_argument("--estimate", action="store_const", const=True,
                   help="also estimate re-ranked unconstrained metrics from per-category runs")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic street/shop dataset")
    _add_synth_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-toy", parents=[common], help="train the toy embedder")
    _add_synth_options(p)
    for name, typ in (("epochs", int), ("base-lr", float), ("P", int), ("K", int),
                      ("warmup-epochs", int), ("accumulation-steps", int),
                      ("triplet-margin", float), ("g1", float), ("g2", float),
                      ("center-weight", float), ("label-smoothing", float),
                      ("cross-seed", int), ("cross-distortion", float)):
        p.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    p.add_argument("--loss", choices=["triplet", "quadruplet"])
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--points", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", parents=[common], help="render a JSON report as tables and figures")
    p.add_argument("--input", required=True)
    p.add_argument("--no-figures", dest="figures", action="store_const", const=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RetrievalKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DivergenceError.exit_code


if __name__ == "__main__":
    sys.exit(main())
