"""Command line entry point: ``actvit <subcommand> [--config run.json] ...``.

Every run writes a self-contained output directory holding the resolved
config, the seed, content hashes of its inputs and ``metrics.json``.
Exit codes: 0 ok, 1 other failure, 2 config error, 3 protocol violation,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .activation import LlmRegistry, PaddingWarning
from .baselines import ALL_AGGREGATORS, aggregator_auc, heatmap, probe_star, render_heatmap, token_probe
from .config import RunConfig, load_config
from .exceptions import ActVitError, ConfigError, NumericFailure, ProtocolViolation, UnregisteredLLMError
from .model import load, save
from .protocols import metrics_only, pair_name, run_plan
from .report import learning_curve, latency_bench, results_table
from .store import DatasetManifest, PooledDataset, read_shards, three_way_split, verify_shards, write_shards
from .synth import ToyTransformer, generate_dataset
from .training import adapt_la, evaluate, reference_mode, zero_shot_eval

log = logging.getLogger("actvit")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 1, 2, 3, 4


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


class Run:
    """Output directory bookkeeping for one invocation."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = Path(cfg.out)
        self.inputs: dict[str, str] = {}
        self.dir.mkdir(parents=True, exist_ok=True)
        _dump(self.dir / "config.json", {"command": command, "version": __version__, **cfg.to_dict()})
        (self.dir / "seed").write_text(f"{cfg.seed}\n")

    def add_input(self, path) -> None:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file() and p.name != ".lock") if path.is_dir() else [path]
        for f in files:
            self.inputs[str(f)] = git_blob_hash(f)

    def finish(self, metrics: dict) -> dict:
        combined = hashlib.sha1("".join(f"{k}\0{v}\n" for k, v in sorted(self.inputs.items())).encode()).hexdigest()
        _dump(self.dir / "inputs.json", {"files": self.inputs, "combined": combined})
        metrics = {"command": self.command, "seed": self.cfg.seed, **metrics}
        _dump(self.dir / "metrics.json", metrics)
        return metrics


# ---------------------------------------------------------------- data access

def _dataset_dir(cfg: RunConfig, llm_id: str, dataset_id: str, storage: str) -> Path:
    return Path(cfg.data_root) / llm_id / dataset_id / storage


def _available(cfg: RunConfig) -> list[tuple[str, str]]:
    root = Path(cfg.data_root)
    pairs = sorted((p.parents[2].name, p.parents[1].name) for p in root.glob("*/*/pooled/manifest.json"))
    if not pairs:
        raise ConfigError(f"no pooled datasets under {root}; run 'actvit synth' first")
    return pairs


def _load_pooled(cfg: RunConfig, run: Run, pairs) -> dict[tuple[str, str], PooledDataset]:
    want = (cfg.pool.n_layers, cfg.pool.n_tokens)
    out = {}
    for key in pairs:
        d = _dataset_dir(cfg, *key, "pooled")
        if not d.exists():
            raise ConfigError(f"dataset {pair_name(key)} not found under {cfg.data_root}")
        stored = read_shards(d)
        have = tuple(stored.manifest.pool_config[k] for k in ("n_layers", "n_tokens"))
        if have != want:
            raise ConfigError(f"{pair_name(key)} was pooled to {have}, config asks for {want}")
        out[key] = stored.to_pooled()
        run.add_input(d)
    return out


def _target(cfg: RunConfig) -> tuple[str, str]:
    if not cfg.plan.target:
        raise ConfigError("this command needs plan.target (or --target LLM/DATASET)")
    return tuple(cfg.plan.target)


def _model_path(cfg: RunConfig) -> Path:
    if not cfg.model_path:
        raise ConfigError("this command needs model_path (or --model PATH)")
    return Path(cfg.model_path)


def _records(method: str, aucs: dict[str, float]) -> list[dict]:
    out = []
    for name, value in aucs.items():
        llm_id, dataset_id = name.split("/", 1)
        out.append({"method": method, "llm_id": llm_id, "dataset_id": dataset_id, "auc": value})
    return out


def _method_name(model) -> str:
    return {"act-vit": "ACT-ViT", "act-mlp": "ACT-MLP"}[model.kind]


# ---------------------------------------------------------------- subcommands

def _synth_fingerprint(cfg: RunConfig, llm, task, storage: str) -> str:
    payload = {"seed": cfg.seed, "llm": llm.__dict__, "task": task.__dict__, "n": cfg.synth.n_samples,
               "split": cfg.synth.split.__dict__, "half": cfg.synth.half, "storage": storage,
               "pool": cfg.pool.__dict__ if storage == "pooled" else None}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def cmd_synth(cfg: RunConfig, run: Run) -> dict:
    s = cfg.synth
    storages = ["pooled", "raw"] if s.storage == "both" else [s.storage]
    registry = LlmRegistry()
    pool_cfg = cfg.pool.build()
    status = []
    for i, llm in enumerate(s.llms):
        model = ToyTransformer.random(llm.llm_id, llm.n_layers, llm.hidden_dim, llm.n_heads, llm.vocab_size,
                                      ffn_scale=llm.ffn_scale, seed=cfg.seed * 1000 + i)
        registry.register(model.descriptor)
        for task in s.tasks:
            todo = []
            for storage in storages:
                d = _dataset_dir(cfg, llm.llm_id, task.name, storage)
                fp = _synth_fingerprint(cfg, llm, task, storage)
                if verify_shards(d) and json.loads((d / "manifest.json").read_text())["metadata"].get(
                        "fingerprint") == fp:
                    print(f"{llm.llm_id}/{task.name}/{storage}: skipped, checksum match")
                    status.append({"dataset": f"{llm.llm_id}/{task.name}", "storage": storage, "status": "skipped"})
                else:
                    todo.append((storage, d, fp))
            if not todo:
                continue
            data = generate_dataset(model, task.planted(llm.n_layers), s.n_samples, seed=cfg.seed,
                                    dataset_id=task.name)
            splits = three_way_split(data.labels, s.split.val_fraction, s.split.test_fraction, s.split.seed)
            for storage, d, fp in todo:
                manifest = DatasetManifest(task.name, llm.llm_id, len(data), splits, {}, None,
                                           metadata={"fingerprint": fp, "signal_layer": data.task.signal_layer,
                                                     "signal_token_offset": data.task.signal_token_offset,
                                                     "rule": data.task.rule, "flip_p": data.task.flip_p})
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", PaddingWarning)
                    write_shards(d, data.tensors, manifest, registry=registry, token_logits=data.token_logits,
                                 token_probas=data.token_probas, half=s.half, shard_size=s.shard_size,
                                 pool_config=pool_cfg if storage == "pooled" else None)
                print(f"{llm.llm_id}/{task.name}/{storage}: written ({len(data)} samples)")
                status.append({"dataset": f"{llm.llm_id}/{task.name}", "storage": storage, "status": "written"})
    _dump(Path(cfg.data_root) / "registry.json", registry.to_dict())
    return {"datasets": status, "n_datasets": len(s.llms) * len(s.tasks)}


def cmd_train(cfg: RunConfig, run: Run) -> dict:
    plan = cfg.experiment_plan()
    available = _available(cfg)
    if plan.protocol == "single_source" and plan.target is not None:
        available = [plan.target]
    pairs = set(plan.training_pairs(available))
    if plan.target is not None:
        pairs |= {k for k in available if plan.held_out(k)} | {plan.target}
    data = _load_pooled(cfg, run, sorted(pairs))
    result = run_plan(plan, data)
    model = result.get("model")
    if model is not None:
        save(model, run.dir / "model.actm")
    metrics = metrics_only(result)
    with open(run.dir / "history.jsonl", "w") as fh:
        grids = metrics["grid"].values() if plan.protocol == "single_source" else [metrics["grid"]]
        for g in grids:
            for r in g["runs"]:
                for h in r.get("history", []):
                    fh.write(json.dumps({"point": r["point"], **h}, sort_keys=True) + "\n")
    method = "ACT-ViT" if cfg.model.kind == "act-vit" else "ACT-MLP"
    if plan.protocol == "single_source" and cfg.model.kind == "act-vit":
        method = "ACT-ViT(s)"
    if "test_auc" in metrics:
        metrics["records"] = _records(method, metrics["test_auc"])
    if "learning_curve" in metrics:
        c = metrics["learning_curve"]
        learning_curve(c["fractions"], {"ACT-ViT (LA only)": c["la_finetune"], "ACT-ViT (scratch)": c["scratch"]},
                       run.dir / "learning_curve.svg", run.dir / "learning_curve.json", title=metrics["target"])
    return metrics


def _load_model(cfg: RunConfig, run: Run):
    path = _model_path(cfg)
    run.add_input(path)
    return load(path)


def cmd_eval(cfg: RunConfig, run: Run) -> dict:
    model = _load_model(cfg, run)
    protocol = cfg.plan.protocol
    pairs = [_target(cfg)] if cfg.plan.target else sorted(model.trained_on)
    if protocol in ("leave_dataset_out", "leave_llm_out"):
        for key in pairs:
            leaked = key in model.trained_on or (protocol == "leave_llm_out" and
                                                 any(k[0] == key[0] for k in model.trained_on))
            if leaked:
                raise ProtocolViolation(f"{protocol}: {pair_name(key)} overlaps the model's training corpus; "
                                        "held-out evaluation would leak")
    data = _load_pooled(cfg, run, pairs)
    aucs = {}
    for key, ds in data.items():
        if key[0] not in model.config.llm_dims:
            raise UnregisteredLLMError(key[0])
        aucs[pair_name(key)] = evaluate(model, ds, "test")
    return {"protocol": protocol, "test_auc": aucs, "records": _records(_method_name(model), aucs)}


def cmd_zeroshot(cfg: RunConfig, run: Run) -> dict:
    key = _target(cfg)
    model = _load_model(cfg, run)
    if key in model.trained_on:
        raise ProtocolViolation(f"{pair_name(key)} was part of the training corpus; zero-shot evaluation refused")
    ds = _load_pooled(cfg, run, [key])[key]
    value = zero_shot_eval(model, ds, "test")
    return {"target": pair_name(key), "zero_shot_auc": value,
            "records": _records(_method_name(model) + " (zero-shot)", {pair_name(key): value})}


def cmd_adapt(cfg: RunConfig, run: Run) -> dict:
    key = _target(cfg)
    model = _load_model(cfg, run)
    if cfg.plan.protocol == "leave_llm_out" and any(k[0] == key[0] for k in model.trained_on):
        raise ProtocolViolation(f"leave_llm_out: the pretrained model already saw {key[0]}")
    ds = _load_pooled(cfg, run, [key])[key]
    res = adapt_la(model, key[0], ds, cfg.adapt.fraction, cfg.adapt_spec())
    save(res.model, run.dir / "model.actm")
    value = evaluate(res.model, ds, "test")
    with open(run.dir / "history.jsonl", "w") as fh:
        for h in res.history:
            fh.write(json.dumps(h, sort_keys=True) + "\n")
    return {"target": pair_name(key), "fraction": cfg.adapt.fraction, "n_train": res.n_train,
            "frozen_checksum": res.frozen_checksum, "test_auc": {pair_name(key): value},
            "records": _records(_method_name(model) + " (LA only)", {pair_name(key): value})}


def cmd_heatmap(cfg: RunConfig, run: Run) -> dict:
    pairs = [_target(cfg)] if cfg.plan.target else _available(cfg)
    probe_cfg, offsets = cfg.probe.build()
    out = {"heatmaps": {}, "records": [], "probe_star": {}}
    for key in pairs:
        d = _dataset_dir(cfg, *key, "raw")
        if not d.exists():
            raise ConfigError(f"{pair_name(key)} has no raw tensors; synthesize with storage 'raw' or 'both'")
        run.add_input(d)
        stored = read_shards(d)
        tensors = stored.activation_tensors()
        sp = stored.manifest.splits
        tr, va, te = ([tensors[i] for i in sp[s]] for s in ("train", "val", "test"))
        hm = heatmap(tr, va, te, offsets, probe_cfg)
        name = pair_name(key)
        stem = f"heatmap_{key[0]}_{key[1]}"
        _dump(run.dir / f"{stem}.json", hm.to_dict())
        render_heatmap(hm, run.dir / f"{stem}.svg", title=name)
        best = probe_star(tr, va, offsets, probe_cfg)
        out["heatmaps"][name] = {"argmax": list(hm.argmax), "file": f"{stem}.json"}
        out["probe_star"][name] = {"layer": best.layer, "token_offset": best.token_offset, "C": best.C,
                                   "val_auc": best.val_auc, "test_auc": best.score(te), "n_fits": best.n_fits}
        out["records"] += _records("Probe[*]", {name: out["probe_star"][name]["test_auc"]})
        for off in offsets:
            out["records"] += _records(f"Token[{off}]", {name: token_probe(tr, va, off, probe_cfg).score(te)})
        if stored.token_logits is not None:
            y = stored.labels[sp["test"]]
            logits = [stored.token_logits[i] for i in sp["test"]]
            probas = [stored.token_probas[i] for i in sp["test"]]
            for kind in ALL_AGGREGATORS:
                out["records"] += _records(kind.name, {name: aggregator_auc(logits, probas, y, kind)})
    return out


def cmd_bench(cfg: RunConfig, run: Run) -> dict:
    b = cfg.bench
    if cfg.model_path:
        model = _load_model(cfg, run)
        llm_id = sorted(model.config.llm_dims)[0]
    else:
        spec = cfg.model_spec()
        g = cfg.grid.build().points()[0]
        dims = {l.llm_id: l.hidden_dim for l in cfg.synth.llms}
        model = spec.build(dims, g, cfg.seed)
        llm_id = cfg.synth.llms[0].llm_id
    dim = model.config.llm_dims[llm_id]
    lp, np_ = model.config.pooled_shape
    x = np.random.default_rng(cfg.seed).normal(size=(b.batch_size, lp, np_, dim)).astype(np.float32)
    stats = latency_bench(model, x, llm_id, b.repetitions, b.warmup)
    print(f"median per-instance latency {stats['median_s'] * 1e6:.1f} us (p95 {stats['p95_s'] * 1e6:.1f} us)")
    return {"llm_id": llm_id, "latency": stats}


def cmd_report(cfg: RunConfig, run: Run) -> dict:
    if not cfg.report.inputs:
        raise ConfigError("report needs report.inputs (or --inputs DIR ...)")
    records = []
    for item in cfg.report.inputs:
        path = Path(item)
        path = path / "metrics.json" if path.is_dir() else path
        run.add_input(path)
        records += json.loads(path.read_text()).get("records", [])
    if not records:
        raise ConfigError("no result records found in the report inputs")
    table = results_table(records, show_std=cfg.report.show_std)
    (run.dir / "table.txt").write_text(table.render())
    (run.dir / "table.json").write_text(table.to_json() + "\n")
    print(table.render(), end="")
    return {"n_records": len(records), "table": table.to_dict()}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "adapt": cmd_adapt,
            "zeroshot": cmd_zeroshot, "heatmap": cmd_heatmap, "bench": cmd_bench, "report": cmd_report}


# ---------------------------------------------------------------- argument handling

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory for this run")
    common.add_argument("--reference-mode", action="store_true", default=None,
                        help="single-threaded deterministic execution")
    common.add_argument("--data-root", help="dataset root directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="actvit", description="Activation-tensor hallucination detectors.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train", "eval", "adapt", "zeroshot", "heatmap"):
            p.add_argument("--target", help="LLM/DATASET pair")
        if name in ("train", "eval", "adapt"):
            p.add_argument("--protocol")
        if name in ("eval", "adapt", "zeroshot", "bench"):
            p.add_argument("--model", dest="model_path", help="model archive")
        if name == "adapt":
            p.add_argument("--fraction", type=float)
        if name == "synth":
            p.add_argument("--n-samples", type=int)
        if name == "report":
            p.add_argument("--inputs", nargs="+", help="run directories or metrics files")
            p.add_argument("--show-std", action="store_true", default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    flags = {"seed": "seed", "out": "out", "reference_mode": "reference_mode", "data_root": "data_root",
             "model_path": "model_path"}
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "target", None):
        parts = args.target.split("/")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"--target must look like LLM/DATASET, got {args.target!r}")
        cfg.plan.target = parts
    if getattr(args, "protocol", None):
        cfg.plan.protocol = args.protocol
    if getattr(args, "fraction", None) is not None:
        cfg.adapt.fraction = args.fraction
    if getattr(args, "n_samples", None) is not None:
        cfg.synth.n_samples = args.n_samples
    if getattr(args, "inputs", None):
        cfg.report.inputs = args.inputs
    if getattr(args, "show_std", None):
        cfg.report.show_std = True
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        with reference_mode() if cfg.reference_mode else nullcontext():
            run = Run(cfg, args.command)
            run.finish(COMMANDS[args.command](cfg, run))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UnregisteredLLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ActVitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
