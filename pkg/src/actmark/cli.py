"""``actmark`` command-line interface.

Every command writes a run manifest (JSON) recording the resolved
configuration, the arguments, SHA-256 digests of inputs and outputs, and the
command's result. ``actmark replay MANIFEST`` re-executes the run into a
scratch directory and checks that every output is bitwise identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import scipy

from . import storage
from .attacks import PruneSpec, evaluate, finetune_attack, overwrite_attack, prune
from .blackbox import DetectionPolicy, detect
from .data import DATA_DIR_ENV, default_data_dir, export_mnist_subset
from .errors import WatermarkError
from .nn import init_mlp
from .oracle import ModelOracle, SubprocessOracle, serve
from .pipeline import (ExperimentConfig, derive_seed, embed_hidden, embed_keys, layer_dims,
                       load_data, owner_secret, train_baseline)
from .whitebox import embed, extract

MANIFEST_VERSION = 1
CSV_FIELDS = ["attack", "param", "metric", "value"]

# which argparse destinations name files a command reads or writes
INPUT_ARGS = ("model", "marked", "unmarked", "secret", "keys")
OUTPUT_ARGS = ("out", "secret_out", "centers_out", "keys_out", "json_out", "out_csv", "model_out")


def _sha_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version
    try:
        own = version("artifact")
    except PackageNotFoundError:
        own = "unknown"
    return {"actmark": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def config_from_args(args) -> ExperimentConfig:
    factory = ExperimentConfig.full if args.full else ExperimentConfig
    fields = {"dataset": args.dataset, "data_dir": args.data_dir, "max_train": args.max_train,
              "seed": args.seed, "lambda1": args.lambda1, "lambda2": args.lambda2,
              "wm_bits": args.wm_bits, "carriers": args.carriers, "layer": args.layer,
              "key_size": args.key_size, "key_multiplier": args.key_multiplier,
              "epsilon": args.epsilon, "density_tau": args.density_tau, "fp_bound": args.fp_bound,
              "learning_rate": args.lr, "batch_size": args.batch_size,
              "hidden": args.hidden, "base_epochs": args.base_epochs,
              "embed_epochs": args.embed_epochs, "key_lr_factor": args.key_lr_factor,
              "key_max_epochs": args.key_max_epochs,
              "prune_finetune_epochs": args.prune_finetune_epochs}
    return factory(**{k: v for k, v in fields.items() if v is not None})


def _hidden(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v)


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v]


# ---------------------------------------------------------------- commands

def cmd_train(args, cfg):
    train_set, test_set = load_data(cfg)
    epochs = cfg.base_epochs if args.epochs is None else args.epochs
    model, history = train_baseline(cfg, train_set, epochs=epochs)
    storage.save_model(model, args.out)
    acc = float((model.predict(test_set.inputs) == test_set.labels).mean())
    return {"test_accuracy": acc, "epochs": epochs, "history": history}


def cmd_embed(args, cfg):
    train_set, test_set = load_data(cfg)
    epochs = cfg.embed_epochs if args.epochs is None else args.epochs
    cfg = cfg.replace(embed_epochs=epochs)
    if args.model:
        base = storage.load_model(args.model)
        secret = owner_secret(cfg, base.layer_dims[base.hidden_index(cfg.layer) + 1])
        model, centers, history = embed_hidden(cfg, base, train_set, secret)
    else:
        base = init_mlp(layer_dims(cfg, train_set), derive_seed(cfg.seed, "owner/init"))
        secret = owner_secret(cfg, base.layer_dims[base.hidden_index(cfg.layer) + 1])
        model, centers, history = embed(base, train_set, secret, cfg.train_config(epochs),
                                        warmup_epochs=1, push=cfg.push, reduction=cfg.reduction)
    storage.save_model(model, args.out)
    storage.save_secret(secret, args.secret_out)
    storage.save_centers(centers, args.centers_out, cfg.layer)
    result = extract(model, train_set, secret)
    acc = float((model.predict(test_set.inputs) == test_set.labels).mean())
    return {"test_accuracy": acc, "ber": result.ber, "history": history}


def cmd_embed_keys(args, cfg):
    train_set, test_set = load_data(cfg)
    marked, unmarked = storage.load_model(args.marked), storage.load_model(args.unmarked)
    model, keyset = embed_keys(cfg, marked, unmarked, train_set)
    storage.save_model(model, args.out)
    storage.save_keyset(keyset, args.keys_out)
    acc = float((model.predict(test_set.inputs) == test_set.labels).mean())
    return {"test_accuracy": acc, "K": keyset.K, **keyset.meta}


def cmd_extract(args, cfg):
    train_set, _ = load_data(cfg)
    result = extract(storage.load_model(args.model), train_set, storage.load_secret(args.secret))
    out = {"ber": result.ber, "mismatches": result.mismatch_count,
           "bits": result.bits.tolist()}
    _write_json(args.json_out, out)
    return out


def cmd_detect(args, cfg):
    keyset = storage.load_keyset(args.keys)
    policy = DetectionPolicy.for_keys(keyset, cfg.fp_bound)
    if args.oracle_cmd:
        with SubprocessOracle(args.oracle_cmd) as oracle:
            res = detect(oracle, keyset, policy)
    else:
        res = detect(ModelOracle(storage.load_model(args.model)), keyset, policy)
    out = {"presence": bool(res.presence), "mismatches": res.mismatches,
           "threshold": res.threshold, "K": res.K, "fp_bound": cfg.fp_bound}
    _write_json(args.json_out, out)
    return out


def cmd_attack(args, cfg):
    train_set, test_set = load_data(cfg)
    model = storage.load_model(args.model)
    secret = storage.load_secret(args.secret) if args.secret else None
    keyset = storage.load_keyset(args.keys) if args.keys else None
    policy = DetectionPolicy.for_keys(keyset, cfg.fp_bound) if keyset else None

    def report(kind, params, m):
        return evaluate(kind, params, m, test_set, secret, train_set, keyset, policy)

    reports, attacked = [], None
    if args.kind == "prune":
        for rate in args.prune_rate:
            attacked, _ = prune(model, PruneSpec(rate, cfg.prune_finetune_epochs), train_set,
                                cfg.train_config(0, f"prune-{rate}"))
            reports.append(report("prune", {"rate": rate}, attacked))
    elif args.kind == "finetune":
        epochs = 20 if args.epochs is None else args.epochs
        attacked = finetune_attack(model, train_set, epochs, cfg.train_config(0, "finetune"))
        reports.append(report("finetune", {"epochs": epochs}, attacked))
    else:
        for i in range(args.attackers):
            role = f"attacker-{i}"
            res = overwrite_attack(model, train_set, derive_seed(cfg.seed, role), cfg.wm_bits,
                                   cfg.key_size, cfg.train_config(cfg.embed_epochs, role),
                                   cfg.lambda1, cfg.lambda2, cfg.carriers, cfg.layer,
                                   cfg.rarity(), cfg.key_multiplier, cfg.key_lr_factor,
                                   cfg.key_max_epochs, cfg.push, cfg.reduction)
            rep = report("overwrite", {"attacker": i}, res.model)
            rep.extra["attacker_ber"] = extract(res.model, train_set, res.secret).ber
            rep.extra["attacker_mismatches"] = detect(
                res.model, res.keyset, DetectionPolicy.for_keys(res.keyset, cfg.fp_bound)).mismatches
            reports.append(rep)
            attacked = res.model
    rows = [row for rep in reports for row in rep.rows()]
    write_csv(args.out_csv, rows)
    if args.model_out and attacked is not None:
        storage.save_model(attacked, args.model_out)
    return {"rows": len(rows)}


def cmd_report(args, cfg):
    rows = []
    for path in sorted(Path(args.sweep_dir).glob("*.csv")):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames == CSV_FIELDS:
                rows.extend(reader)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "combined.csv", rows)
    tables = {}
    for kind in sorted({r["attack"] for r in rows}):
        table = {}
        for r in rows:
            if r["attack"] == kind:
                table.setdefault(r["param"], {})[r["metric"]] = r["value"]
        metrics = sorted({m for cells in table.values() for m in cells})
        path = out / f"{kind}_table.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", *metrics])
            for param in sorted(table, key=_param_key):
                w.writerow([param, *(table[param].get(m, "") for m in metrics)])
        tables[kind] = path.name
    return {"rows": len(rows), "tables": tables}


def cmd_verify(args, cfg):
    from .verify import run_all, write_outputs
    variants = ["synthetic"] if args.synthetic_only else ["synthetic", "mnist"]
    results = {}
    for variant in variants:
        vcfg = cfg.replace(dataset=variant)
        criteria = run_all(vcfg, log=lambda msg, v=variant: print(f"[{v}] {msg}", file=sys.stderr,
                                                                    flush=True))
        if args.out_dir:
            write_outputs(criteria, Path(args.out_dir), variant)
        results[variant] = [c.as_row() for c in criteria]
        for c in criteria:
            print(c.line(variant), flush=True)
    failed = sum(not r["passed"] for rows in results.values() for r in rows)
    return {"failed": failed, "criteria": results}


def _param_key(p: str):
    try:
        return (0, float(p.split("=", 1)[1]))
    except (IndexError, ValueError):
        return (1, p)


def write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in CSV_FIELDS})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write_json(path, obj):
    if path:
        storage.write_atomic(path, (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode())


# ---------------------------------------------------------------- manifests

COMMANDS = {"train": cmd_train, "embed": cmd_embed, "embed-keys": cmd_embed_keys,
            "extract": cmd_extract, "detect": cmd_detect, "attack": cmd_attack,
            "report": cmd_report}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def run_command(args) -> tuple[dict, dict]:
    """Execute a manifest-tracked command; returns ``(result, manifest)``."""
    cfg = config_from_args(args)
    handler = COMMANDS[args.command]
    inputs = {k: {"path": str(getattr(args, k)), "sha256": _sha_file(getattr(args, k))}
              for k in INPUT_ARGS if getattr(args, k, None)}
    started = time.time()
    result = _jsonable(handler(args, cfg))
    outputs = {k: {"path": str(getattr(args, k)), "sha256": _sha_file(getattr(args, k))}
               for k in OUTPUT_ARGS if getattr(args, k, None) and Path(getattr(args, k)).exists()}
    if args.command == "report":
        for name, fname in result["tables"].items():
            path = Path(args.out_dir) / fname
            outputs[f"table:{name}"] = {"path": str(path), "sha256": _sha_file(path)}
    manifest = {"manifest_version": MANIFEST_VERSION, "command": args.command,
                "args": _jsonable({k: v for k, v in vars(args).items() if k != "func"}),
                "config": cfg.as_dict(), "inputs": inputs, "outputs": outputs,
                "result": result, "versions": _versions(),
                "wall_clock": {"started": started, "seconds": time.time() - started}}
    path = args.manifest or _default_manifest(args)
    storage.write_atomic(path, (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode())
    return result, manifest


def _default_manifest(args) -> str:
    for k in OUTPUT_ARGS:
        if getattr(args, k, None):
            return str(getattr(args, k)) + ".manifest.json"
    if args.command == "report":
        return str(Path(args.out_dir) / "report.manifest.json")
    return f"actmark-{args.command}.manifest.json"


def replay(manifest_path) -> dict:
    """Re-run a recorded command into a scratch directory and compare digests."""
    manifest = json.loads(Path(manifest_path).read_text())
    problems = []
    for name, rec in manifest["inputs"].items():
        if not Path(rec["path"]).exists() or _sha_file(rec["path"]) != rec["sha256"]:
            problems.append(f"input {name} ({rec['path']}) is missing or changed")
    with tempfile.TemporaryDirectory() as tmp:
        ns = dict(manifest["args"])
        for k in OUTPUT_ARGS:
            if ns.get(k):
                ns[k] = str(Path(tmp) / f"{k}-{Path(ns[k]).name}")
        if manifest["command"] == "report":
            ns["out_dir"] = str(Path(tmp) / "report")
        ns["manifest"] = str(Path(tmp) / "replay.manifest.json")
        args = argparse.Namespace(**ns)
        if isinstance(args.hidden, list):
            args.hidden = tuple(args.hidden)
        try:
            result, fresh = run_command(args)
        except WatermarkError as exc:
            problems.append(f"re-run failed: {exc}")
            return {"identical": False, "problems": problems,
                    "outputs_checked": len(manifest["outputs"])}
        for name, rec in manifest["outputs"].items():
            new = fresh["outputs"].get(name)
            if new is None or new["sha256"] != rec["sha256"]:
                problems.append(f"output {name} differs from {rec['path']}")
        if json.dumps(result, sort_keys=True) != json.dumps(manifest["result"], sort_keys=True):
            problems.append("command result differs")
    return {"identical": not problems, "problems": problems,
            "outputs_checked": len(manifest["outputs"])}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("experiment")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dataset", choices=["mnist", "synthetic"], default="mnist")
    g.add_argument("--data-dir", default=None,
                   help=f"IDX directory (default ${DATA_DIR_ENV} or ~/.cache/actmark/mnist)")
    g.add_argument("--max-train", type=int, default=None)
    g.add_argument("--hidden", type=_hidden, default=None, help="hidden widths, e.g. 512,512")
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--base-epochs", type=int, default=None)
    g.add_argument("--embed-epochs", type=int, default=None)
    g.add_argument("--epochs", type=int, default=None, help="epochs of this command's main stage")
    g.add_argument("--lambda1", type=float, default=None)
    g.add_argument("--lambda2", type=float, default=None)
    g.add_argument("--wm-bits", type=int, default=None, help="N, bits per carrier class")
    g.add_argument("--carriers", type=int, default=None, help="s, number of carrier classes")
    g.add_argument("--layer", type=int, default=None, help="hidden layer ordinal (-1 = last)")
    g.add_argument("--key-size", type=int, default=None, help="K, trigger keys")
    g.add_argument("--key-multiplier", type=int, default=None, help="candidates per key (20)")
    g.add_argument("--key-lr-factor", type=float, default=None)
    g.add_argument("--key-max-epochs", type=int, default=None)
    g.add_argument("--epsilon", type=float, default=None, help="rarity radius (default: derived)")
    g.add_argument("--density-tau", type=float, default=None,
                   help="max training points inside the radius (inf disables)")
    g.add_argument("--fp-bound", type=float, default=None, help="false-positive bound (1e-3)")
    g.add_argument("--prune-finetune-epochs", type=int, default=None)
    g.add_argument("--full", action="store_true", help="whole-training-set settings")
    g.add_argument("--manifest", default=None, help="run manifest path")

    p = argparse.ArgumentParser(prog="actmark", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train an unmarked baseline")
    s.add_argument("--out", required=True)

    s = sub.add_parser("embed", parents=[common], help="embed the hidden-layer watermark")
    s.add_argument("--model", help="start from this trained model (default: fresh init)")
    s.add_argument("--out", required=True)
    s.add_argument("--secret-out", required=True)
    s.add_argument("--centers-out", required=True)

    s = sub.add_parser("embed-keys", parents=[common], help="add black-box trigger keys")
    s.add_argument("--marked", required=True)
    s.add_argument("--unmarked", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--keys-out", required=True)

    s = sub.add_parser("extract", parents=[common], help="white-box extraction (prints BER)")
    s.add_argument("--model", required=True)
    s.add_argument("--secret", required=True)
    s.add_argument("--json-out")

    s = sub.add_parser("detect", parents=[common],
                       help="black-box detection; exit 0 = detected, 1 = not detected")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--oracle-cmd", help="subprocess speaking the JSON-lines oracle protocol")
    s.add_argument("--keys", required=True)
    s.add_argument("--json-out")

    s = sub.add_parser("attack", parents=[common], help="run an attack and write report rows")
    s.add_argument("--kind", choices=["prune", "finetune", "overwrite"], required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--secret")
    s.add_argument("--keys")
    s.add_argument("--prune-rate", type=_floats, default=[0.5], help="comma-separated rates")
    s.add_argument("--attackers", type=int, default=1, help="overwrite: attacker count")
    s.add_argument("--out-csv", required=True)
    s.add_argument("--model-out", help="save the (last) attacked model")

    s = sub.add_parser("report", parents=[common], help="merge attack CSVs into tables")
    s.add_argument("--sweep-dir", required=True)
    s.add_argument("--out-dir", required=True)

    s = sub.add_parser("verify", parents=[common], help="run the acceptance criteria")
    s.add_argument("--synthetic-only", action="store_true")
    s.add_argument("--out-dir")

    s = sub.add_parser("replay", help="re-run a manifest and compare outputs bitwise")
    s.add_argument("manifest_path")

    s = sub.add_parser("fetch-mnist", help="write the bundled MNIST subset as IDX files")
    s.add_argument("--out", default=None)

    s = sub.add_parser("serve-oracle", help="answer oracle requests for a model on stdio")
    s.add_argument("--model", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            out = replay(args.manifest_path)
            print(json.dumps(out, indent=1))
            return 0 if out["identical"] else 1
        if args.command == "fetch-mnist":
            path = export_mnist_subset(args.out or default_data_dir())
            print(f"wrote MNIST IDX files to {path}")
            return 0
        if args.command == "serve-oracle":
            serve(storage.load_model(args.model))
            return 0
        if args.command == "verify":
            result = cmd_verify(args, config_from_args(args))
            return 0 if result["failed"] == 0 else 1
        result, _ = run_command(args)
    except (WatermarkError, OSError) as exc:
        print(f"actmark: error: {exc}", file=sys.stderr)
        return 2
    shown = {k: v for k, v in result.items() if k != "history"}
    print(json.dumps(shown, sort_keys=True))
    if args.command == "detect":
        return 0 if result["presence"] else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
