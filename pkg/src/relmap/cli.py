"""Command-line entry point: ``python -m relmap {train,eval,infer,detect-audit,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data
from .errors import ConfigError, RelmapError
from .metrics import RunRecord, config_hash, emit_report, mean_std
from .supervised import TrainConfig, evaluate, run_supervised
from .unsupervised import UnsupervisedConfig, run_unsupervised

log = logging.getLogger("relmap")

EXPERIMENTS = ("split-mnist", "permuted-mnist")
MODES = ("supervised", "unsupervised", "fuzzy")
RECORD = "record.jsonl"
TIMINGS = "timings.jsonl"
FINAL = "final.ckpt"
PARTIAL = "partial.ckpt"

# run-config key -> type; every key may also appear in a config file
OPTIONS = {
    "experiment": str, "mode": str, "tasks": int, "epochs": int, "batch": int, "lr_w": float,
    "lr_m": float, "mu": float, "beta": float, "sparsity": str, "sparsity_coeff": float,
    "map_mean": float, "map_sd": float, "ramp": int, "tau": float, "window": int, "p_threshold": float,
    "dwell": int, "min_effect": float, "arm_below": float, "gauss": float, "max_tasks": int,
    "seeds": int, "seed_base": int, "data_dir": str, "out": str, "train_limit": int, "test_limit": int,
}
DEFAULTS = {
    "experiment": "split-mnist", "mode": "supervised", "tasks": 5, "epochs": 20, "batch": 128,
    "lr_w": 0.002, "lr_m": 0.002, "mu": 0.05, "beta": 80.0, "sparsity": None, "sparsity_coeff": None,
    "map_mean": None, "map_sd": None,
    "ramp": 20, "tau": 0.99999, "window": 20, "p_threshold": 1e-5, "dwell": 40, "min_effect": 0.2,
    "arm_below": 0.2, "gauss": 0.0,
    "max_tasks": 20, "seeds": 1, "seed_base": 0, "data_dir": None, "out": "runs",
    "train_limit": None, "test_limit": None,
}


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment.  Unknown keys are an error."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = OPTIONS[key](value)
        except ValueError:
            raise ConfigError(f"{path}:{n}: bad value for {key}: {value!r}") from None
    return out


def resolve_config(file_values: dict, flags: dict) -> dict:
    """Defaults, then the config file, then explicit flags; validated before any compute."""
    cfg = dict(DEFAULTS)
    cfg.update(file_values)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {cfg['experiment']!r}")
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg['mode']!r}")
    if cfg["experiment"] == "split-mnist" and cfg["tasks"] != 5:
        raise ConfigError("split-mnist always has 5 tasks")
    if cfg["seeds"] < 1:
        raise ConfigError("seeds must be at least 1")
    if cfg["mode"] != "fuzzy":
        cfg["ramp"] = 0
    trainer_config(cfg, cfg["seed_base"])  # raises ConfigError on bad trainer values
    if cfg["mode"] == "fuzzy" and cfg["ramp"] < 1:
        raise ConfigError("fuzzy mode needs --ramp >= 1")
    return cfg


def trainer_config(cfg: dict, seed: int) -> TrainConfig:
    common = dict(epochs=cfg["epochs"], batch_size=cfg["batch"], lr_w=cfg["lr_w"], lr_m=cfg["lr_m"],
                  mu=cfg["mu"], beta=cfg["beta"], seed=seed, gauss_coeff=cfg["gauss"])
    # unset map and sparsity settings fall back to the trainer's own defaults
    common.update({k: cfg[k] for k in ("sparsity", "sparsity_coeff", "map_mean", "map_sd")
                   if cfg[k] is not None})
    if cfg["mode"] == "supervised":
        return TrainConfig(**common)
    return UnsupervisedConfig(**common, window=cfg["window"], p_threshold=cfg["p_threshold"],
                              dwell=cfg["dwell"], min_effect=cfg["min_effect"],
                              arm_below=cfg["arm_below"] if cfg["arm_below"] > 0 else None,
                              tau=cfg["tau"], max_tasks=cfg["max_tasks"])


def run_config(cfg: dict, seed: int) -> dict:
    """The per-seed config stored in the record; excludes paths so moving data does not change ids."""
    out = {k: v for k, v in cfg.items() if k not in ("data_dir", "out", "seeds", "seed_base")}
    out["seed"] = seed
    return out


def run_id(cfg: dict, seed: int) -> str:
    return f"{cfg['experiment']}-{cfg['mode']}-s{seed}-{config_hash(run_config(cfg, seed))[:8]}"


def build_stream(cfg: dict, seed: int, train=None, test=None) -> data.TaskStream:
    if train is None:
        train, test = data.load_mnist(data.data_dir(cfg["data_dir"]))
    kw = dict(batch_size=cfg["batch"], train_limit=cfg["train_limit"], test_limit=cfg["test_limit"])
    if cfg["experiment"] == "split-mnist":
        stream = data.make_split(train, test, seed=seed, **kw)
    else:
        stream = data.make_permuted(train, test, tasks=cfg["tasks"], seed=seed, **kw)
    if cfg["mode"] == "fuzzy":
        stream = data.fuzzy_schedule(stream, cfg["ramp"])
    return stream


# -- train ---------------------------------------------------------------------


def _train_one(cfg: dict, seed: int, out: Path, force: bool, corpus) -> Path:
    rid = run_id(cfg, seed)
    run_dir = out / rid
    rec_path, ck_path, part_path = run_dir / RECORD, run_dir / FINAL, run_dir / PARTIAL
    if rec_path.exists() and ck_path.exists() and not force:
        if RunRecord.load(rec_path).finished:
            print(f"{rid}: already complete, skipping (use --force to retrain)")
            return run_dir
    resume = None
    if force or not (part_path.exists() and rec_path.exists()) or cfg["mode"] != "supervised":
        if run_dir.exists():
            for p in (rec_path, run_dir / TIMINGS, ck_path, part_path):
                p.unlink(missing_ok=True)
    else:
        resume = checkpoint.load(part_path)
    run_dir.mkdir(parents=True, exist_ok=True)
    rc = run_config(cfg, seed)
    record = RunRecord(rid, rc, rec_path, run_dir / TIMINGS)
    tcfg = trainer_config(cfg, seed)
    stream = build_stream(cfg, seed, *corpus)

    if cfg["mode"] == "supervised":
        net = None
        if resume is not None:
            net, meta, _ = resume
            events = RunRecord.load(rec_path).events[:meta["record_events"]]
            rec_path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in events), encoding="utf-8")
            record.events = events
            log.info("%s: resuming after task %d", rid, net.completed[-1])
        else:
            record.start(mode=cfg["mode"], experiment=cfg["experiment"], seed=seed)

        def on_task_end(n, t):
            checkpoint.save(part_path, n, meta={"run_id": rid, "record_events": len(record.events),
                                                "config": rc})

        res = run_supervised(stream, tcfg, record, net=net, on_task_end=on_task_end)
        record.append("run_end", mean_accuracy=res.mean_accuracy,
                      final_accuracies=[float(a) for a in res.final_accuracies])
        net, summary = res.net, f"mean accuracy {res.mean_accuracy:.4f}"
    else:
        record.start(mode=cfg["mode"], experiment=cfg["experiment"], seed=seed)
        res = run_unsupervised(stream, tcfg, record)
        net = res.net
        summary = (f"{len(res.detections)} detections at {[d.batch for d in res.detections]} "
                   f"(true {res.boundaries}); mean accuracy {res.mean_accuracy:.4f}, "
                   f"label-free {res.mean_inferred_accuracy:.4f}")
    checkpoint.save(ck_path, net, meta={"run_id": rid, "config": rc})
    part_path.unlink(missing_ok=True)
    print(f"{rid}: {summary}")
    return run_dir


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in OPTIONS}
    cfg = resolve_config(file_values, flags)
    out = Path(cfg["out"])
    root = data.data_dir(cfg["data_dir"])
    corpus = data.load_mnist(root)
    accs = []
    for i in range(cfg["seeds"]):
        run_dir = _train_one(cfg, cfg["seed_base"] + i, out, args.force, corpus)
        end = RunRecord.load(run_dir / RECORD).of("run_end")[-1]
        accs.append(end["mean_accuracy"])
    if len(accs) > 1:
        m, s = mean_std(accs)
        print(f"mean accuracy over {len(accs)} seeds: {100 * m:.2f} +/- {100 * s:.2f}")
    return 0


# -- eval / infer --------------------------------------------------------------


def _load_run(path):
    path = Path(path)
    ck = path / FINAL if path.is_dir() else path
    net, meta, _ = checkpoint.load(ck)
    cfg = dict(DEFAULTS)
    cfg.update(meta.get("config", {}))
    return net, cfg, meta


def _stream_for(cfg, args):
    if getattr(args, "data_dir", None):
        cfg["data_dir"] = args.data_dir
    return build_stream(cfg, cfg["seed"])


def _eval_tasks(net, cfg, path):
    """Detected task ids in test-set order: identity for supervised runs, the stored alignment otherwise."""
    if cfg["mode"] == "supervised":
        return {t: t for t in net.completed}
    rec = Path(path) / RECORD if Path(path).is_dir() else Path(path).with_name(RECORD)
    if rec.exists():
        ends = RunRecord.load(rec).of("run_end")
        if ends:
            return {int(k): v for k, v in ends[-1]["alignment"].items()}
    return {t: t for t in net.completed}


def cmd_eval(args) -> int:
    net, cfg, _ = _load_run(args.checkpoint)
    stream = _stream_for(cfg, args)
    mapping = _eval_tasks(net, cfg, args.checkpoint)
    accs = []
    for t in range(len(stream)):
        k = mapping.get(t)
        a = evaluate(net, k, stream.tasks[t].test) if k is not None else float("nan")
        accs.append(a)
        print(f"task {t}: accuracy {a:.4f}" + ("" if k == t else f" (mask {k})"))
    print(f"mean accuracy: {np.nanmean(accs):.4f}")
    return 0


def cmd_infer(args) -> int:
    net, cfg, _ = _load_run(args.checkpoint)
    stream = _stream_for(cfg, args)
    mapping = _eval_tasks(net, cfg, args.checkpoint)
    xs, ys, ts = [], [], []
    for t, task in enumerate(stream.tasks):
        x, y = task.test.take(np.arange(len(task.test)))
        xs.append(x), ys.append(y), ts.append(np.full(len(y), t))
    rng = np.random.default_rng([cfg["seed"], 0x1F3])
    order = rng.permutation(sum(len(y) for y in ys))
    x, y, truth = np.concatenate(xs)[order], np.concatenate(ys)[order], np.concatenate(ts)[order]
    ids, logits, _ = net.task_logit_max(x, net.completed)
    inv = {k: t for t, k in mapping.items()}
    pred = np.array([inv.get(int(i), -1) for i in ids])
    n = len(stream)
    conf = np.zeros((n, n + 1), dtype=np.int64)
    np.add.at(conf, (truth, np.where(pred < 0, n, pred)), 1)
    print("confusion (rows: true task, columns: inferred task" + (", last: unmatched)" if (pred < 0).any() else ")"))
    cols = n + 1 if (pred < 0).any() else n
    print("      " + " ".join(f"{j:>6d}" for j in range(cols)))
    for i in range(n):
        print(f"{i:>5d} " + " ".join(f"{c:>6d}" for c in conf[i, :cols]))
    print(f"task-ID accuracy: {np.mean(pred == truth):.4f}")
    print(f"class accuracy with inferred task: {np.mean(logits.argmax(axis=1) == y):.4f}")
    return 0


# -- detect-audit / report -----------------------------------------------------


def _record_paths(paths):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted(p.rglob(RECORD))
            if not found:
                raise FileNotFoundError(f"no {RECORD} under {p}")
            out.extend(found)
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"{p} does not exist")
    return out


def audit(record: RunRecord) -> dict:
    """Match detections to ground-truth boundaries in order; latency is in batches."""
    stream = record.of("stream")
    if not stream:
        raise ConfigError(f"run {record.run_id} is not an unsupervised run")
    truth = stream[0]["boundaries"]
    window = record.config.get("window", DEFAULTS["window"])
    found = [e["batch"] for e in record.of("detection")]
    rows, used = [], set()
    for b in truth:
        after = [d for d in found if d >= b and d not in used]
        d = after[0] if after else None
        if d is not None:
            used.add(d)
        rows.append({"boundary": b, "detected": d, "latency": None if d is None else d - b})
    spurious = [d for d in found if d not in used]
    ok = (len(found) == len(truth) and not spurious
          and all(r["latency"] is not None and r["latency"] <= 2 * window for r in rows))
    return {"rows": rows, "spurious": spurious, "window": window, "ok": ok}


def cmd_detect_audit(args) -> int:
    status = 0
    for path in _record_paths(args.records):
        rec = RunRecord.load(path)
        res = audit(rec)
        print(f"{rec.run_id}: {len(rec.of('detection'))} detections, {len(res['rows'])} true boundaries")
        for r in res["rows"]:
            lat = "missed" if r["latency"] is None else f"latency {r['latency']} batches"
            print(f"  boundary at batch {r['boundary']}: {lat}")
        for d in res["spurious"]:
            print(f"  spurious detection at batch {d}")
        print(f"  within 2 windows ({2 * res['window']} batches), no extras: {'yes' if res['ok'] else 'no'}")
        status |= 0 if res["ok"] else 1
    return status


def cmd_report(args) -> int:
    records = [RunRecord.load(p) for p in _record_paths(args.records)]
    paths = emit_report(records, args.out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relmap", description="Relevance-map continual learning experiments.",
                                allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", allow_abbrev=False,
                       help="train one or more seeds and write records and checkpoints")
    t.add_argument("--config", help="flat key = value file; flags override it")
    t.add_argument("--experiment", choices=EXPERIMENTS)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--tasks", type=int, help="number of permuted tasks (split-mnist is always 5)")
    t.add_argument("--epochs", type=int, help="epochs per task (default 20)")
    t.add_argument("--batch", type=int)
    t.add_argument("--lr-w", type=float, dest="lr_w")
    t.add_argument("--lr-m", type=float, dest="lr_m")
    t.add_argument("--mu", type=float, help="prune threshold")
    t.add_argument("--beta", type=float, help="pseudo-round tightness, at least 80")
    t.add_argument("--sparsity", choices=("none", "l1", "l0"),
                   help="map penalty (default l1 when supervised, none otherwise)")
    t.add_argument("--sparsity-coeff", type=float, dest="sparsity_coeff",
                   help="default 1e-5 when supervised, 0 otherwise")
    t.add_argument("--map-mean", type=float, dest="map_mean",
                   help="mean of the initial map values (default 0.5 when supervised, 0.3 otherwise)")
    t.add_argument("--map-sd", type=float, dest="map_sd",
                   help="spread of the initial map values (default 0.05 when supervised, 0.2 otherwise)")
    t.add_argument("--ramp", type=int, help="fuzzy transition length in batches")
    t.add_argument("--tau", type=float, help="confidence above which a finished task claims a sample")
    t.add_argument("--window", type=int, help="detector window in batches")
    t.add_argument("--p-threshold", type=float, dest="p_threshold")
    t.add_argument("--dwell", type=int)
    t.add_argument("--min-effect", type=float, dest="min_effect",
                   help="smallest rise in the novelty mean that counts as a switch")
    t.add_argument("--arm-below", type=float, dest="arm_below",
                   help="only fire while the reference mean is below this; 0 disables")
    t.add_argument("--gauss", type=float, help="Gaussian-noise regulariser weight")
    t.add_argument("--max-tasks", type=int, dest="max_tasks")
    t.add_argument("--seeds", type=int, help="run seeds seed_base .. seed_base + n - 1")
    t.add_argument("--seed-base", type=int, dest="seed_base")
    t.add_argument("--train-limit", type=int, dest="train_limit", help="subsample the training images")
    t.add_argument("--test-limit", type=int, dest="test_limit", help="subsample the test images")
    t.add_argument("--data-dir", dest="data_dir")
    t.add_argument("--out", help="parent directory for run directories (default runs)")
    t.add_argument("--force", action="store_true", help="retrain runs that already exist")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "per-task test accuracy of a checkpoint"),
                                 ("infer", cmd_infer, "task inference on a shuffled test pool")):
        e = sub.add_parser(name, allow_abbrev=False, help=helptext)
        e.add_argument("checkpoint", help="checkpoint file or run directory")
        e.add_argument("--data-dir", dest="data_dir")
        e.set_defaults(func=func)

    a = sub.add_parser("detect-audit", allow_abbrev=False,
                       help="compare detections with ground-truth boundaries")
    a.add_argument("records", nargs="+", help="record files or directories to search")
    a.set_defaults(func=cmd_detect_audit)

    r = sub.add_parser("report", allow_abbrev=False, help="write summary.csv and SVG charts")
    r.add_argument("records", nargs="+", help="record files or directories to search")
    r.add_argument("--out", default="report")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RelmapError, FileNotFoundError, KeyError) as exc:
        print(f"relmap {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
