"""Command-line pipeline: ``adstitch <subcommand> [options]``.

Every subcommand reads line-delimited records, writes line-delimited outputs
and prints a one-line JSON summary. Failures print a one-line JSON error to
standard error and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .core import POSITIONS, AdAsset, AssetCatalog, AssetKind, NotFoundError, Query
from .crosscheck import filter_catalog, load_rules, RuleSet
from .diversity import diversity_report
from .dpp import HashingEmbedder, select_catalog
from .ingestion import (
    catalog_records,
    extract_assets,
    load_catalog,
    load_pages,
    parse_asset_records,
    read_jsonl,
    write_jsonl,
)
from .quality import Judgment, gate
from .service import AdServer, load_config, run_network
from .simulator import (
    EpisodeLog,
    OnlinePolicy,
    WorldSpec,
    ab_compare,
    business_metrics,
    prestitch_policy,
    simulate,
    synthetic_world,
    world_from_catalog,
)
from .stitcher import (
    FeatureCache,
    JointExample,
    Mode,
    featurize,
    fresh_models,
    load_models,
    save_models,
)

EXIT_ERROR = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Error reported as ``{"error": kind, "message": ..., "input": ...}``."""

    def __init__(self, message: str, kind: str = "UsageError", source: str | None = None):
        super().__init__(message)
        self.kind = kind
        self.source = source


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, ensure_ascii=False))


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise CliError(f"missing required input: {what}")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input file not found: {p}", "FileNotFoundError", str(p))
    return p


def _settings(args, **overrides):
    cfg = load_config(getattr(args, "config", None),
                      overrides={k: v for k, v in overrides.items() if v is not None})
    return cfg


def _catalog(args, cfg) -> tuple[list, AssetCatalog]:
    pages = _require(args.pages or cfg.paths.get("pages"), "--pages")
    assets = _require(args.assets or cfg.paths.get("assets"), "--assets")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = load_catalog(pages, assets)
    for w in caught:
        print(json.dumps({"warning": str(w.message)}), file=sys.stderr)
    return result


def _models(path: str | None, hash_bits: int):
    return load_models(_require(path, "--checkpoint")) if path else fresh_models(hash_bits)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_ingest(args) -> None:
    cfg = _settings(args)
    pages = load_pages(_require(args.pages or cfg.paths.get("pages"), "--pages"))
    known = {p.url for p in pages}
    assets: list[AdAsset] = []
    if not args.no_extract:
        for page in pages:
            assets.extend(extract_assets(page, cfg.system))
    if args.adcopy:
        src = _require(args.adcopy, "--adcopy")
        for lineno, asset in parse_asset_records(src):
            if asset.page_url not in known:
                raise CliError(f"{src}:{lineno}: asset references unknown page {asset.page_url}",
                               "NotFoundError", str(src))
            assets.append(asset)
    n = write_jsonl(args.out, (a.to_record() for a in assets))
    _emit({"command": "ingest", "pages": len(pages), "assets": n, "out": args.out})


def cmd_filter(args) -> None:
    cfg = _settings(args)
    pages, catalog = _catalog(args, cfg)
    rules_path = args.rules or cfg.paths.get("rules")
    rules = load_rules(_require(rules_path, "--rules")) if rules_path else RuleSet.empty()
    kept, rejected = filter_catalog(catalog, pages, rules)
    n_kept = write_jsonl(args.out, catalog_records(kept))
    n_rej = 0
    if args.rejected:
        n_rej = write_jsonl(args.rejected, ({"asset": a.to_record(), **v.to_record()} for a, v in rejected))
    _emit({"command": "filter", "kept": n_kept, "rejected": len(rejected), "rejected_written": n_rej})


def cmd_select(args) -> None:
    cfg = _settings(args, T=args.titles, D=args.descriptions)
    _, catalog = _catalog(args, cfg)
    s = cfg.system
    chosen = select_catalog(catalog, s.T, s.D, HashingEmbedder(s.embed_dim), s.kernel_jitter, s.dpp_epsilon)
    n = write_jsonl(args.out, catalog_records(chosen))
    _emit({"command": "select", "T": s.T, "D": s.D, "assets_in": catalog.n_assets(), "assets_out": n})


def cmd_diversity(args) -> None:
    cfg = _settings(args)
    _, catalog = _catalog(args, cfg)
    records = []
    for url in catalog:
        entry = catalog[url]
        for kind, pool in ((AssetKind.TITLE, entry.titles), (AssetKind.DESCRIPTION, entry.descriptions)):
            if len(pool) < 2:
                continue
            rep = diversity_report([a.text for a in pool])
            records.append({"page_url": url, "kind": kind.value, **rep.to_record()})
    if args.out:
        write_jsonl(args.out, records)
    summary = {"command": "diversity", "groups": len(records)}
    if records:
        for key in ("pairwise_bleu", "self_bleu", "distinct_n"):
            summary[f"mean_{key}"] = float(np.mean([r[key] for r in records]))
    _emit(summary)


def cmd_gate(args) -> int:
    src = _require(args.judgments, "--judgments")
    judgments = []
    for lineno, rec in read_jsonl(src):
        try:
            judgments.append(Judgment.from_record(rec))
        except ValueError as exc:
            raise CliError(f"{src}:{lineno}: {exc}", "ValidationError", str(src)) from None
    report = gate(judgments, args.threshold, args.confidence)
    _emit({"command": "gate", **report.to_record()})
    return EXIT_ERROR if args.strict and not report.passed else 0


def _training_events(path: Path, catalog: AssetCatalog, hash_bits: int, objective: str):
    """One :class:`JointExample` per logged ad (click objective: shown ads only)."""
    index = catalog.asset_index()
    cache = FeatureCache()
    label_key = "clicked" if objective == "click" else "shown"
    for lineno, rec in read_jsonl(path):
        try:
            query = Query(rec["query"])
            ad = rec["ad"]
            label = int(rec[label_key])
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{path}:{lineno}: bad training record ({exc})", "ValidationError", str(path)) from None
        if objective == "click" and not rec.get("shown", True):
            continue
        features = {}
        for pos in POSITIONS:
            aid = ad.get(pos.value)
            if aid is None:
                continue
            asset = index.get(aid)
            if asset is None:
                raise CliError(f"{path}:{lineno}: unknown asset id {aid}", "NotFoundError", str(path))
            features[pos] = featurize(asset, query, pos, hash_bits, cache=cache)
        if features:
            yield JointExample(features, label)


def cmd_train(args) -> None:
    cfg = _settings(args, learning_rate=args.learning_rate, batch_size=args.batch_size,
                    hash_bits=args.hash_bits, objective=args.objective)
    s = cfg.system
    _, catalog = _catalog(args, cfg)
    models = _models(args.checkpoint or cfg.paths.get("checkpoint"), s.hash_bits)
    bits = next(iter(models.values())).hash_bits
    learner = OnlinePolicy(models, joint=args.joint)
    pending: list[JointExample] = []
    n_events = 0
    for ex in _training_events(_require(args.log, "--log"), catalog, bits, s.objective):
        pending.append(ex)
        n_events += 1
        if len(pending) >= s.batch_size:
            learner.learn(pending, s.learning_rate)
            pending = []
    if pending:
        learner.learn(pending, s.learning_rate)
    save_models(models, args.out)
    _emit({"command": "train", "examples": n_events, "out": args.out, "joint": args.joint,
           "updates_seen": {p.value: models[p].updates_seen for p in POSITIONS}})


def _world(args, cfg):
    spec = WorldSpec.from_file(_require(args.world, "--world")) if args.world else WorldSpec()
    if args.seed is not None:
        spec = WorldSpec(**{**spec.to_record(), "seed": args.seed})
    if args.pages or args.assets or cfg.paths.get("pages"):
        pages, catalog = _catalog(args, cfg)
        return world_from_catalog(pages, catalog, spec)
    return synthetic_world(spec)


def cmd_simulate(args) -> None:
    cfg = _settings(args, learning_rate=args.learning_rate, objective=args.objective)
    s = cfg.system
    world = _world(args, cfg)
    models = _models(args.checkpoint or cfg.paths.get("checkpoint"), world.hash_bits)
    if next(iter(models.values())).hash_bits != world.hash_bits:
        raise CliError("checkpoint hash_bits differ from the world's", "ValidationError")
    mode = Mode(args.mode)
    if args.policy == "prestitch":
        if args.train:
            raise CliError("the prestitch policy cannot be trained")
        policy = prestitch_policy(models, world.catalog, args.m, seed=s.rng_seed, trial_scale=s.trial_scale)
    else:
        policy = OnlinePolicy(models, mode, trial_scale=s.trial_scale, joint=args.joint)
    events = []

    def record_event(e):
        if e.ad is not None:
            q = world.query(e.page_index, e.query_index)
            events.append({"page_url": world.urls[e.page_index], "query": q.raw,
                           "ad": {p.value: a.id for p, a in e.ad.items()},
                           "shown": bool(e.shown), "clicked": bool(e.clicked)})

    log = simulate(world, policy, args.srpv, train=args.train, seed=s.rng_seed,
                   batch_size=s.batch_size, learning_rate=s.learning_rate,
                   objective=s.objective, on_event=record_event if args.events_out else None)
    if args.out:
        write_jsonl(args.out, [log.to_record()])
    if args.events_out:
        write_jsonl(args.events_out, events)
    if args.checkpoint_out:
        save_models(models, args.checkpoint_out)
    m = business_metrics(log)
    summary = {"command": "simulate", "srpv": log.srpv, "impressions": log.impressions,
               "clicks": log.clicks, "quick_backs": log.quick_backs, "revenue": log.revenue,
               "rpm": m.rpm, "iy": m.iy, "ctr": m.ctr, "qbr": m.qbr}
    if args.table:
        print(_table(["metric", "value"], [[k, summary[k]] for k in ("srpv", "rpm", "iy", "ctr", "qbr")]))
    else:
        _emit(summary)


def _load_log(path: str) -> EpisodeLog:
    src = _require(path, "episode log")
    recs = [rec for _, rec in read_jsonl(src)]
    if len(recs) != 1:
        raise CliError(f"{src}: expected exactly one episode record, found {len(recs)}", "ValidationError", str(src))
    return EpisodeLog.from_record(recs[0])


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_ab(args) -> None:
    report = ab_compare(_load_log(args.treatment), _load_log(args.control),
                        alpha=args.alpha, n_boot=args.n_boot, seed=args.seed)
    rec = report.to_record()
    if args.out:
        write_jsonl(args.out, [rec])
    if args.table:
        rows = [[name, d["treatment"], d["control"], d["delta_pct"], d["p_value"], d["significant"]]
                for name, d in rec.items()]
        print(_table(["metric", "treatment", "control", "delta_%", "p", "significant"], rows))
    else:
        _emit({"command": "ab", **{f"{k}_delta_pct": v["delta_pct"] for k, v in rec.items()},
               **{f"{k}_significant": v["significant"] for k, v in rec.items()}})


def cmd_serve(args) -> None:
    cfg = _settings(args)
    _, catalog = _catalog(args, cfg)
    ckpt = args.checkpoint or cfg.paths.get("checkpoint")
    server = AdServer(catalog, config=cfg.system, checkpoint=_require(ckpt, "--checkpoint") if ckpt else None)
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        run_network(server, host or "127.0.0.1", int(port))
        return
    src = open(_require(args.requests, "--requests"), encoding="utf-8") if args.requests else sys.stdin
    dst = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        n = server.serve_stream(src, dst, include_latency=not args.omit_latency)
    finally:
        if src is not sys.stdin:
            src.close()
        if dst is not sys.stdout:
            dst.close()
    if args.out:
        _emit({"command": "serve", "requests": n, "out": args.out})


def cmd_checkpoint(args) -> None:
    if args.action == "init":
        save_models(fresh_models(args.hash_bits), args.path)
        _emit({"command": "checkpoint", "action": "init", "path": args.path, "hash_bits": args.hash_bits})
        return
    models = load_models(_require(args.path, "checkpoint path"))
    info = {"command": "checkpoint", "action": args.action, "path": args.path,
            "hash_bits": next(iter(models.values())).hash_bits,
            "updates_seen": {p.value: m.updates_seen for p, m in models.items()}}
    if args.action == "verify":
        tmp = Path(args.path).with_name(Path(args.path).name + ".verify")
        try:
            save_models(models, tmp)
            info["bit_exact"] = tmp.read_bytes() == Path(args.path).read_bytes()
        finally:
            tmp.unlink(missing_ok=True)
        if not info["bit_exact"]:
            raise CliError(f"{args.path}: round-trip is not bit-exact", "CheckpointError", args.path)
    _emit(info)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adstitch", description="Ad asset pipeline and stitching engine.")
    p.add_argument("--version", action="version", version=f"adstitch {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, catalog=True):
        sp.add_argument("--config", help="flat key = value config file")
        if catalog:
            sp.add_argument("--pages", help="landing page records")
            sp.add_argument("--assets", help="asset records")

    sp = sub.add_parser("ingest", help="extract and split asset candidates")
    common(sp, catalog=False)
    sp.add_argument("--pages")
    sp.add_argument("--adcopy", help="asset or ad-copy records to split and add")
    sp.add_argument("--no-extract", action="store_true", help="skip extraction from pages")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("filter", help="cross-check assets against their landing pages")
    common(sp)
    sp.add_argument("--rules")
    sp.add_argument("--out", required=True)
    sp.add_argument("--rejected")
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("select", help="k-DPP MAP selection of diverse assets")
    common(sp)
    sp.add_argument("--titles", type=int)
    sp.add_argument("--descriptions", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("diversity", help="diversity metrics per page and asset kind")
    common(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diversity)

    sp = sub.add_parser("gate", help="quality gate over human judgments")
    sp.add_argument("--judgments", required=True)
    sp.add_argument("--threshold", type=float, default=0.9)
    sp.add_argument("--confidence", type=float, default=0.975)
    sp.add_argument("--strict", action="store_true", help="exit 1 when the gate fails")
    sp.set_defaults(func=cmd_gate)

    sp = sub.add_parser("train", help="train position models from an event log")
    common(sp)
    sp.add_argument("--log", required=True)
    sp.add_argument("--checkpoint", help="start from this checkpoint instead of fresh models")
    sp.add_argument("--out", required=True)
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--hash-bits", type=int)
    sp.add_argument("--objective", choices=("click", "win"))
    sp.add_argument("--joint", action="store_true", help="train the five positions as one additive model")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("simulate", help="run a policy in a simulated world")
    common(sp)
    sp.add_argument("--world", help="world spec JSON")
    sp.add_argument("--seed", type=int, help="override the world seed")
    sp.add_argument("--srpv", type=int, default=10_000)
    sp.add_argument("--policy", choices=("online", "prestitch"), default="online")
    sp.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.EXPLOIT.value)
    sp.add_argument("--m", type=int, default=5, help="prestitched ads per page")
    sp.add_argument("--train", action="store_true")
    sp.add_argument("--learning-rate", type=float)
    sp.add_argument("--objective", choices=("click", "win"))
    sp.add_argument("--joint", action="store_true", help="train the five positions as one additive model")
    sp.add_argument("--checkpoint")
    sp.add_argument("--checkpoint-out")
    sp.add_argument("--out", help="episode log output")
    sp.add_argument("--events-out", help="per-SRPV event records (train input)")
    sp.add_argument("--table", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("ab", help="compare two episode logs")
    sp.add_argument("--treatment", required=True)
    sp.add_argument("--control", required=True)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--n-boot", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--table", action="store_true")
    sp.set_defaults(func=cmd_ab)

    sp = sub.add_parser("serve", help="stitch ads for request records")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--requests", help="request records (default: stdin)")
    sp.add_argument("--out", help="response records (default: stdout)")
    sp.add_argument("--listen", help="HOST:PORT for line-delimited network mode")
    sp.add_argument("--omit-latency", action="store_true", help="leave latency out of responses")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("checkpoint", help="create, inspect or verify a model checkpoint")
    sp.add_argument("action", choices=("init", "inspect", "verify"))
    sp.add_argument("path")
    sp.add_argument("--hash-bits", type=int, default=22)
    sp.set_defaults(func=cmd_checkpoint)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return int(args.func(args) or 0)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        if exc.source:
            err["input"] = exc.source
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_USAGE if exc.kind == "UsageError" else EXIT_ERROR
    except (ValueError, KeyError, OSError) as exc:
        msg = str(exc.args[0]) if isinstance(exc, NotFoundError) and exc.args else str(exc)
        err = {"error": type(exc).__name__, "message": msg}
        src = getattr(exc, "filename", None)
        if src:
            err["input"] = str(src)
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
