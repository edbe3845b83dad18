"""Command-line entry point: synth, compress, cluster, train, eval, bench, ablate.

Every subcommand resolves its options as built-in defaults, then a flat JSON
``--config`` file, then explicit flags (flags win), and writes that resolved
mapping into each artifact it produces.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .cluster import induce_catalog, kmeans_fit
from .compressor import compress
from .datalog import (DataError, Meta, SynthConfig, UserSequence, generate_synthetic, load_catalog,
                      load_events, partition_history_recent, split, synth_meta, write_catalog,
                      write_events)
from .evalmetrics import METRICS, config_hash, evaluate, parse_protocol
from .model import CauseModel, ModelConfig
from .perfbench import PUBLISHED_REFERENCE, compression_report, cost_ratio, flop_cost, time_forward
from .training import TrainConfig, train

log = logging.getLogger("cause")

DEFAULTS = {
    "seed": 0, "out": "out", "config": None, "verbose": False,
    # data
    "data": None, "catalog": None, "format": "jsonl", "actions": None,
    # synth
    "users": 64, "items": 256, "cats": 8, "num_actions": 3, "events": 256,
    "strength": 0.8, "drift": 0.05, "concentration": 0.3,
    # model
    "iLen": 64, "V": 8, "G": 32, "layers": 3, "dim": 64, "heads": 8, "mode": "interleaved",
    "tau": 0.1, "no_align": False, "no_action_loss": False, "no_history": False,
    "no_item_category": False, "dtype": "float32",
    # training
    "lr": 5e-3, "negatives": 200, "epochs": 50, "batch_size": 32, "patience": 10, "windows": 1,
    # evaluation
    "protocol": "full", "split": "test", "checkpoint": None,
    # cluster
    "k": 8,
    # bench
    "L": None, "batch": 4, "warmup": 2, "reps": 7, "csv": False,
}

# ---------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--config", help="flat JSON file of option values (flags override it)")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="root seed for every random stream")
    p.add_argument("-v", "--verbose", action="store_true")


def _data(p, catalog=True):
    p.add_argument("--data", help="event log (jsonl or tsv)")
    if catalog:
        p.add_argument("--catalog", help="item catalog overriding the categories in the event log")
    p.add_argument("--format", choices=["jsonl", "tsv"])
    p.add_argument("--actions", help="comma-separated action ids to keep, others are dropped")


def _model(p):
    p.add_argument("--iLen", type=int, help="recent events per sequence (default 64)")
    p.add_argument("--V", type=int, help="max history buckets (default 8)")
    p.add_argument("--G", type=int, help="max items per bucket (default 32)")
    p.add_argument("--layers", type=int, help="transformer blocks (default 3)")
    p.add_argument("--dim", type=int, help="hidden size D (default 64)")
    p.add_argument("--heads", type=int, help="attention heads (default 8)")
    p.add_argument("--mode", choices=["interleaved", "merged"])
    p.add_argument("--tau", type=float, help="InfoNCE temperature (default 0.1)")
    p.add_argument("--no-align", dest="no_align", action="store_true", help="drop W_align, b_align")
    p.add_argument("--no-action-loss", dest="no_action_loss", action="store_true")
    p.add_argument("--no-history", dest="no_history", action="store_true")
    p.add_argument("--no-item-category", dest="no_item_category", action="store_true",
                   help="item tokens carry no category embedding")
    p.add_argument("--dtype", choices=["float32", "float64"])


def _train(p):
    p.add_argument("--lr", type=float, help="Adam learning rate (default 5e-3)")
    p.add_argument("--negatives", type=int, help="sampled negatives K (default 200)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int, help="epochs without validation gain before stopping")
    p.add_argument("--windows", type=int, help="training windows per user")


def _protocol(p):
    p.add_argument("--protocol", help="full | sampled:K")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cause", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sup = argparse.SUPPRESS

    p = sub.add_parser("synth", help="write a synthetic event log", argument_default=sup)
    _common(p)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--cats", type=int)
    p.add_argument("--num-actions", dest="num_actions", type=int)
    p.add_argument("--events", type=int, help="events per user")
    p.add_argument("--strength", type=float, help="long-range interest strength in [0, 1]")
    p.add_argument("--drift", type=float, help="recency drift in [0, 1]")
    p.add_argument("--concentration", type=float, help="Dirichlet concentration of user mixtures")
    p.add_argument("--format", choices=["jsonl", "tsv"])

    p = sub.add_parser("compress", help="write bucket plans and a compression report", argument_default=sup)
    _common(p)
    _data(p)
    p.add_argument("--iLen", type=int)
    p.add_argument("--V", type=int)
    p.add_argument("--G", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)

    p = sub.add_parser("cluster", help="induce a catalog by k-means over trained item embeddings",
                       argument_default=sup)
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint directory")
    p.add_argument("--k", type=int, help="number of clusters (default 8)")

    p = sub.add_parser("train", help="train a model and write a checkpoint", argument_default=sup)
    _common(p)
    _data(p)
    _model(p)
    _train(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint", argument_default=sup)
    _common(p)
    _data(p)
    _protocol(p)
    p.add_argument("--checkpoint", help="trained checkpoint directory")
    p.add_argument("--split", choices=["val", "test"])

    p = sub.add_parser("bench", help="cost model and forward timing", argument_default=sup)
    _common(p)
    p.add_argument("--L", type=int, action="append", help="padded sequence length; repeatable")
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--cats", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--csv", action="store_true", help="also write bench.csv")

    p = sub.add_parser("ablate", help="train the full model and three ablations, compare", argument_default=sup)
    _common(p)
    _data(p)
    _model(p)
    _train(p)
    _protocol(p)
    p.add_argument("--split", choices=["val", "test"], help="split the comparison metrics come from")
    return parser


def resolve(command: str, explicit: dict) -> dict:
    """Defaults <- config file <- explicit flags; unknown config keys are rejected."""
    allowed = set(explicit) | set(_accepted_keys(command))
    cfg = {k: DEFAULTS[k] for k in allowed if k in DEFAULTS}
    if explicit.get("config"):
        path = Path(explicit["config"])
        try:
            loaded = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a flat JSON object")
        unknown = sorted(set(loaded) - allowed - {"command"})
        if unknown:
            raise ValueError(f"{path}: unknown config keys for '{command}': {', '.join(unknown)}")
        nested = [k for k, v in loaded.items() if isinstance(v, dict)]
        if nested:
            raise ValueError(f"{path}: config must be flat, nested values under {nested}")
        loaded.pop("command", None)
        cfg.update(loaded)
    cfg.update(explicit)
    cfg.pop("config", None)
    cfg.pop("verbose", None)
    return dict(sorted(cfg.items()))


def recorded(cfg: dict) -> dict:
    """The config as embedded in artifacts; the output location does not affect content."""
    return {k: v for k, v in cfg.items() if k != "out"}


_KEYS_CACHE: dict[str, list[str]] = {}


def _accepted_keys(command: str) -> list[str]:
    if not _KEYS_CACHE:
        parser = build_parser()
        for action in parser._subparsers._group_actions:  # one _SubParsersAction
            for name, sp in action.choices.items():
                _KEYS_CACHE[name] = [a.dest for a in sp._actions if a.dest != "help"]
    return _KEYS_CACHE[command]


# ---------------------------------------------------------------- helpers

def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg):
    if not cfg.get("data"):
        raise ValueError("--data is required")
    seqs, catalog, meta = load_events(cfg["data"], cfg["format"])
    if cfg.get("catalog"):
        catalog = load_catalog(cfg["catalog"])
        missing = [e.item_id for s in seqs for e in s.events if e.item_id not in catalog.categories_of]
        if missing:
            raise ValueError(f"catalog {cfg['catalog']} lacks item {missing[0]}")
    if cfg.get("actions"):
        keep = {int(a) for a in str(cfg["actions"]).split(",") if a.strip()}
        filtered = [UserSequence(s.user_id, tuple(e for e in s.events if e.action_id in keep)) for s in seqs]
        seqs = [s for s in filtered if s.events]
        if not seqs:
            raise ValueError(f"no events left after keeping actions {sorted(keep)}")
    return seqs, catalog, meta


def model_config(cfg, catalog, meta) -> ModelConfig:
    return ModelConfig(item_vocab=catalog.num_items, action_vocab=meta.actions, user_vocab=meta.users,
                       category_vocab=catalog.num_categories, hidden_dim=cfg["dim"], num_layers=cfg["layers"],
                       num_heads=cfg["heads"], max_recent=cfg["iLen"], V_max=cfg["V"], G_max=cfg["G"],
                       temperature=cfg["tau"], assembly_mode=cfg["mode"], use_align=not cfg["no_align"],
                       use_action_head=not cfg["no_action_loss"], use_history=not cfg["no_history"],
                       use_item_category=not cfg["no_item_category"], seed=cfg["seed"], dtype=cfg["dtype"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(learning_rate=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       negatives=cfg["negatives"], temperature=cfg["tau"], seed=cfg["seed"],
                       patience=cfg["patience"], windows_per_user=cfg["windows"])


def _joined(a: list[UserSequence], b: list[UserSequence]) -> list[UserSequence]:
    extra = {s.user_id: s.events for s in b}
    return [UserSequence(s.user_id, s.events + extra.get(s.user_id, ())) for s in a]


def _write_log(path: Path, rows, run_config) -> None:
    lines = [json.dumps({"run_config": run_config}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in rows]
    path.write_text("".join(line + "\n" for line in lines))


def _csv_text(header, rows, run_config) -> str:
    buf = io.StringIO()
    buf.write("# run_config " + json.dumps(run_config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg) -> int:
    sc = SynthConfig(num_users=cfg["users"], num_items=cfg["items"], num_categories=cfg["cats"],
                     num_actions=cfg["num_actions"], events_per_user=cfg["events"],
                     long_range_interest_strength=cfg["strength"], recency_drift=cfg["drift"],
                     interest_concentration=cfg["concentration"], seed=cfg["seed"])
    seqs, catalog = generate_synthetic(sc)
    out = _out(cfg)
    meta = synth_meta(sc)
    meta = Meta(meta.users, meta.items, meta.actions, meta.categories, {"run_config": recorded(cfg)})
    ext = "tsv" if cfg["format"] == "tsv" else "jsonl"
    write_events(out / f"events.{ext}", seqs, catalog, cfg["format"], meta)
    write_catalog(out / "catalog.jsonl", catalog, {"run_config": recorded(cfg)})
    log.info("wrote %d users to %s", len(seqs), out)
    return 0


def cmd_compress(cfg) -> int:
    seqs, catalog, _ = _load_data(cfg)
    out = _out(cfg)
    lines = ["#meta " + json.dumps({"run_config": recorded(cfg)}, sort_keys=True)]
    for s in seqs:
        history, _ = partition_history_recent(s, cfg["iLen"])
        plan = compress(history, catalog, cfg["V"], cfg["G"])
        lines.append(json.dumps(plan.to_json(s.user_id), sort_keys=True))
    (out / "plans.jsonl").write_text("".join(line + "\n" for line in lines))
    report = compression_report(seqs, catalog, cfg["V"], cfg["G"], cfg["iLen"], H=cfg["layers"], D=cfg["dim"])
    report["run_config"] = recorded(cfg)
    _dump(out / "compression_report.json", report)
    agg = report["aggregate"]
    print(f"users={len(seqs)} mean_total_slen={agg['mean_total_slen']:.1f} "
          f"mean_uncompressed_slen={agg['mean_uncompressed_slen']:.1f} mean_flop_ratio={agg['mean_flop_ratio']:.3f}")
    return 0


def cmd_cluster(cfg) -> int:
    if not cfg.get("checkpoint"):
        raise ValueError("--checkpoint is required")
    model = CauseModel.load(cfg["checkpoint"])
    emb = model.params["E_item"].data.astype(np.float64)
    res = kmeans_fit(emb, cfg["k"], seed=cfg["seed"])
    out = _out(cfg)
    write_catalog(out / "catalog.jsonl", induce_catalog(res), {"run_config": recorded(cfg)})
    sizes = np.bincount(res.assignment, minlength=cfg["k"]).tolist()
    _dump(out / "cluster.json", {"run_config": recorded(cfg), "inertia": res.inertia, "iterations": res.iterations_run,
                                 "cluster_sizes": sizes})
    print(f"k={cfg['k']} inertia={res.inertia:.6f} iterations={res.iterations_run} sizes={sizes}")
    return 0


def _fit(cfg, seqs, catalog, meta, log_path=None):
    sp = split(seqs)
    mc = model_config(cfg, catalog, meta)
    res = train(mc, train_config(cfg), sp.train, catalog, sp.val)
    if log_path is not None:
        _write_log(log_path, res.log, recorded(cfg))
    return sp, mc, res


def cmd_train(cfg) -> int:
    seqs, catalog, meta = _load_data(cfg)
    out = _out(cfg)
    _, _, res = _fit(cfg, seqs, catalog, meta, out / "train_log.jsonl")
    res.model.save(out / "checkpoint", {"run_config": recorded(cfg), "best_epoch": res.best_epoch,
                                        "best_val_ndcg10": res.best_val})
    if cfg.get("catalog"):
        write_catalog(out / "checkpoint" / "catalog.jsonl", catalog, {"run_config": recorded(cfg)})
    print(f"best_epoch={res.best_epoch} val_N@10={res.best_val:.6f} checkpoint={out / 'checkpoint'}")
    return 0


def _evaluate(cfg, model, sp, catalog):
    if cfg["split"] == "val":
        context, target = sp.train, sp.val
    else:
        context, target = _joined(sp.train, sp.val), sp.test
    return evaluate(model, context, target, catalog, protocol=cfg["protocol"], seed=cfg["seed"],
                    config=recorded(cfg))


def cmd_eval(cfg) -> int:
    if not cfg.get("checkpoint"):
        raise ValueError("--checkpoint is required")
    parse_protocol(cfg["protocol"])
    seqs, catalog, _ = _load_data(cfg)
    ck = Path(cfg["checkpoint"])
    if not cfg.get("catalog") and (ck / "catalog.jsonl").exists():
        catalog = load_catalog(ck / "catalog.jsonl")
    model = CauseModel.load(ck, catalog)
    rep = _evaluate(cfg, model, split(seqs), catalog)
    out = _out(cfg)
    _dump(out / "eval.json", {**rep.to_json(), "run_config": recorded(cfg)})
    (out / "eval.csv").write_text(_csv_text(rep.csv_header().split(","), [rep.csv_row().split(",")], recorded(cfg)))
    print(" ".join(f"{m}={rep.metrics[m]:.6f}" for m in METRICS) + f" users={rep.users}")
    return 0


def cmd_bench(cfg) -> int:
    lengths = cfg.get("L") or [256, 1024]
    if any(L < 8 for L in lengths):
        raise ValueError("--L must be >= 8")
    mc = ModelConfig(item_vocab=cfg["items"], action_vocab=3, user_vocab=16, category_vocab=cfg["cats"],
                     hidden_dim=cfg["dim"], num_layers=cfg["layers"], num_heads=cfg["heads"],
                     max_recent=max(lengths) // 2, seed=cfg["seed"], dtype=cfg["dtype"])
    costs, timings = [], []
    for L in lengths:
        costs.append(flop_cost(cfg["layers"], L, cfg["dim"]).to_json())
        t = time_forward(mc, L, batch=cfg["batch"], warmup=cfg["warmup"], reps=cfg["reps"], seed=cfg["seed"],
                         dtype=cfg["dtype"])
        timings.append(t.to_json())
        print(f"L={L} mean_ms={t.mean_ms:.2f} std_ms={t.std_ms:.2f} flops={costs[-1]['total']}")
    pairs = []
    for i in range(1, len(lengths)):
        a, b = lengths[i - 1], lengths[i]
        pairs.append({"L_small": a, "L_big": b, "flop_ratio": cost_ratio(b, a, cfg["layers"], cfg["dim"]),
                      "measured_ratio": timings[i]["mean_ms"] / timings[i - 1]["mean_ms"]})
    reference = dict(PUBLISHED_REFERENCE)
    reference["flop_ratio_4096_vs_1024"] = cost_ratio(4096, 1024, cfg["layers"], cfg["dim"])
    reference["flop_ratio_1024_vs_268"] = cost_ratio(1024, 268, cfg["layers"], cfg["dim"])
    out = _out(cfg)
    _dump(out / "bench.json", {"config": recorded(cfg), "cost_breakdown": costs, "timing_stats": timings,
                               "ratios": pairs, "published_reference": reference})
    if cfg["csv"]:
        rows = [[c["L"], c["total"], t["mean_ms"], t["std_ms"], t["min_ms"]] for c, t in zip(costs, timings)]
        (out / "bench.csv").write_text(_csv_text(["L", "flops", "mean_ms", "std_ms", "min_ms"], rows, recorded(cfg)))
    return 0


ABLATIONS = (
    ("full", {}),
    ("w/o align", {"no_align": True}),
    ("w/o action", {"no_action_loss": True}),
    ("w/o history", {"no_history": True}),
)


def cmd_ablate(cfg) -> int:
    parse_protocol(cfg["protocol"])
    seqs, catalog, meta = _load_data(cfg)
    out = _out(cfg)
    rows = []
    for name, flags in ABLATIONS:
        run = {**cfg, **flags}
        t0 = time.perf_counter()
        sp, _, res = _fit(run, seqs, catalog, meta)
        seconds = time.perf_counter() - t0
        rep = _evaluate(run, res.model, sp, catalog)
        rows.append({"variant": name, "val_N@10": res.best_val, "best_epoch": res.best_epoch,
                     "test": rep.metrics, "config_hash": config_hash(recorded(run)), "train_seconds": seconds})
        print(f"{name:12s} val_N@10={res.best_val:.6f} test_N@10={rep.metrics['N@10']:.6f} "
              f"MRR={rep.metrics['MRR']:.6f}")
    best = max(rows, key=lambda r: r["val_N@10"])["variant"]
    _dump(out / "ablate.json", {"run_config": recorded(cfg), "rows": rows, "best_variant": best})
    header = ["variant", "val_N@10", *[f"test_{m}" for m in METRICS], "best_epoch", "train_seconds"]
    table = [[r["variant"], f"{r['val_N@10']:.6f}", *[f"{r['test'][m]:.6f}" for m in METRICS],
              r["best_epoch"], f"{r['train_seconds']:.1f}"] for r in rows]
    (out / "ablate.csv").write_text(_csv_text(header, table, recorded(cfg)))
    return 0


COMMANDS = {"synth": cmd_synth, "compress": cmd_compress, "cluster": cmd_cluster, "train": cmd_train,
            "eval": cmd_eval, "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    explicit = {k: v for k, v in vars(ns).items() if k != "command"}
    logging.basicConfig(level=logging.INFO if explicit.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, explicit)
        cfg["command"] = ns.command
        return COMMANDS[ns.command](cfg)
    except (ValueError, KeyError, DataError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cause {ns.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
