"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the per-criterion lines are
printed in the terminal summary. The slow criteria (3, 5, 6) take a few
minutes each on one CPU core.
"""

import json
import time
import warnings
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from actvit import cli
from actvit.activation import PoolConfig, pool_array
from actvit.baselines import DEFAULT_OFFSETS, heatmap, probe_star
from actvit.metrics import auc
from actvit.model import ActVitConfig, build_model
from actvit.protocols import ExperimentPlan, metrics_only, run_plan
from actvit.store import Corpus, PooledDataset, pooled_dataset, three_way_split
from actvit.synth import (DEFAULT_TOY_LLMS, PlantedTask, ToyTransformer, default_toy_llms, generate_dataset,
                          permute_clone)
from actvit.training import (GridSpec, ModelSpec, OptimSpec, adapt_la, evaluate, reference_mode, train,
                             warmup_cosine_lr)
from oracles import brute_pool, central_difference, pairwise_auc

RESULTS: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line; ``detail`` collects measured values."""
    detail: dict = {}
    t0 = time.perf_counter()
    try:
        yield detail
    except BaseException:
        RESULTS.append(_line("FAIL", number, title, detail, t0))
        raise
    RESULTS.append(_line("PASS", number, title, detail, t0))


def _line(status, number, title, detail, t0):
    extra = ", ".join(f"{k}={v}" for k, v in detail.items())
    return f"{status} criterion {number:2d}: {title} [{extra}{', ' if extra else ''}{time.perf_counter() - t0:.1f}s]"


def _splits(tensors, sp):
    return tuple([tensors[i] for i in sp[s]] for s in ("train", "val", "test"))


def test_c01_pooling_oracle():
    with criterion(1, "pooling equals brute-force patch max") as d:
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        for _ in range(500):
            L, N, D = rng.integers(1, 13, size=3)
            D = min(D, 8)
            lp, npool = rng.integers(1, 13, size=2)
            a = rng.uniform(-5, 5, size=(L, N, D)).astype(np.float32)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out = pool_array(a, PoolConfig(int(lp), int(npool)))
            assert out.shape == (lp, npool, D)
            assert np.array_equal(out, brute_pool(a, lp, npool))
        d["tensors"] = 500
        assert time.perf_counter() - t0 < 10


def test_c02_permuted_clone_preserves_function():
    with criterion(2, "permuted clones preserve logits and permute activations") as d:
        t0 = time.perf_counter()
        worst_logit = worst_act = 0.0
        for model in default_toy_llms(seed=0):
            rng = np.random.default_rng(model.hidden_dim)
            for _ in range(5):
                sigma = rng.permutation(model.hidden_dim)
                clone = permute_clone(model, sigma)
                for _ in range(50):
                    n = int(rng.integers(8, 33))
                    x = model.one_hot(rng.integers(0, model.vocab_size, n)) + 0.5 * rng.normal(
                        size=(n, model.vocab_size))
                    s0, l0 = model.run(x)
                    s1, l1 = clone.run(x)
                    worst_logit = max(worst_logit, float(np.abs(l1 - l0).max()))
                    worst_act = max(worst_act, float(np.abs(s1 - s0[..., sigma]).max()))
        d["max_logit_diff"] = f"{worst_logit:.1e}"
        d["max_act_diff"] = f"{worst_act:.1e}"
        assert worst_logit < 1e-5 and worst_act < 1e-5
        assert time.perf_counter() - t0 < 60


def test_c03_adapter_recovers_permuted_clone():
    with criterion(3, "LA-only adaptation on a permuted clone within 2 AUC points") as d:
        t0 = time.perf_counter()
        a = ToyTransformer.random("toy-a", n_layers=6, hidden_dim=32, seed=1)
        sigma = np.random.default_rng(5).permutation(32)
        b = permute_clone(a, sigma, "toy-a-perm")
        task = PlantedTask(signal_layer=3, signal_token_offset=-1, flip_p=0.05, min_tokens=8, max_tokens=32)
        data_a = generate_dataset(a, task, 4000, seed=0)
        data_b = generate_dataset(b, data_a.task.permuted(sigma), 4000, seed=0)
        sp = three_way_split(data_a.labels, seed=42)
        pc = PoolConfig(6, 8)
        pa = pooled_dataset(data_a.tensors, pc, sp, "linear")
        pb = pooled_dataset(data_b.tensors, pc, sp, "linear")
        cfg = ActVitConfig({"toy-a": 32}, (6, 8), (1, 1), shared_dim=32, embed_dim=64, depth=2, dropout=0.1)
        pre = train(build_model("act-vit", cfg, seed=0), Corpus([pa]), OptimSpec(lr=1e-3, epochs=15, batch_size=64))
        auc_a = evaluate(pre.model, pa)
        adapted = adapt_la(pre.model, "toy-a-perm", pb, 1.0,
                           OptimSpec(lr=1e-2, weight_decay=1e-3, epochs=15, batch_size=64))
        auc_b = evaluate(adapted.model, pb)
        gap = 100 * abs(auc_a - auc_b)
        d.update(auc_a=f"{auc_a:.4f}", auc_b=f"{auc_b:.4f}", gap_points=f"{gap:.2f}")
        assert gap <= 2.0
        assert time.perf_counter() - t0 < 300


def test_c04_planted_locality():
    with criterion(4, "heatmap argmax and Probe[*] at the planted cell in >= 9/10 trials") as d:
        model = ToyTransformer.random("toy-b", n_layers=6, hidden_dim=32, seed=1)
        hits = star_hits = 0
        for trial in range(10):
            layer, offset = 1 + trial % 4, DEFAULT_OFFSETS[trial % 6]
            task = PlantedTask(signal_layer=layer, signal_token_offset=offset, flip_p=0.05, min_tokens=8,
                               max_tokens=32, direction_seed=trial)
            ds = generate_dataset(model, task, 2000, seed=trial)
            tr, va, te = _splits(ds.tensors, three_way_split(ds.labels, seed=42))
            hits += heatmap(tr, va, te).argmax == (layer, offset)
            best = probe_star(tr, va)
            star_hits += (best.layer, best.token_offset) == (layer, offset)
        d.update(heatmap_hits=f"{hits}/10", probe_star_hits=f"{star_hits}/10")
        assert hits >= 9 and star_hits >= 9


def test_c05_full_tensor_beats_probe_on_xor():
    with criterion(5, "ACT-ViT beats Probe[*] by >= 5 points on the XOR task") as d:
        t0 = time.perf_counter()
        model = ToyTransformer.random("toy-b", n_layers=6, hidden_dim=32, seed=1)
        task = PlantedTask(name="xor", rule="xor", signal_layer=3, signal_token_offset=-1, flip_p=0.0,
                           min_tokens=8, max_tokens=8, direction_seed=1)
        ds = generate_dataset(model, task, 5000, seed=0)
        sp = three_way_split(ds.labels, seed=42)
        tr, va, te = _splits(ds.tensors, sp)
        probe = probe_star(tr, va).score(te)
        pd = pooled_dataset(ds.tensors, PoolConfig(6, 8), sp, "xor")
        cfg = ActVitConfig({"toy-b": 32}, (6, 8), (6, 1), shared_dim=32, embed_dim=64, depth=2, dropout=0.1)
        res = train(build_model("act-vit", cfg, seed=0), Corpus([pd]),
                    OptimSpec(lr=1e-3, weight_decay=1e-3, epochs=40, batch_size=64))
        vit = evaluate(res.model, pd)
        d.update(act_vit=f"{vit:.4f}", probe_star=f"{probe:.4f}", margin_points=f"{100 * (vit - probe):.2f}")
        assert 100 * (vit - probe) >= 5.0
        assert time.perf_counter() - t0 < 600


def _shared_signal_sets(seed: int):
    sets = {}
    for i, (name, n_layers, dim) in enumerate(DEFAULT_TOY_LLMS):
        model = ToyTransformer.random(name, n_layers, dim, seed=100 * seed + i)
        # the same relative depth in every model: pooled row 2 of 4
        task = PlantedTask(signal_layer={4: 2, 6: 4, 8: 5}[n_layers], signal_token_offset=-1, flip_p=0.05,
                           min_tokens=8, max_tokens=32, direction_seed=seed)
        ds = generate_dataset(model, task, 500, seed=seed, dataset_id="shared")
        p = pooled_dataset(ds.tensors, PoolConfig(4, 8), three_way_split(ds.labels, seed=42), "shared")
        sets[p.key] = p
    return sets


def test_c06_joint_training_matches_single_source():
    with criterion(6, "joint mean test AUC >= single-source - 0.5 points over 3 seeds") as d:
        grid = GridSpec(depth=[2], lr=[1e-3, 3e-3], embed_dim=[64], epochs=[30], dropout=[0.1],
                        weight_decay=[1e-3], patch_size=[(1, 1)])
        spec = ModelSpec(pooled_shape=(4, 8), shared_dim=32)
        diffs = []
        for seed in range(3):
            sets = _shared_signal_sets(seed)
            opt = OptimSpec(batch_size=64, seed=seed)
            with reference_mode():
                single = run_plan(ExperimentPlan("single_source", grid=grid, model=spec, optim=opt), sets)
                joint = run_plan(ExperimentPlan("joint_all", grid=grid, model=spec, optim=opt), sets)
            diffs.append(100 * (joint["mean_test_auc"] - single["mean_test_auc"]))
        d.update(per_seed=[round(x, 2) for x in diffs], mean_diff_points=f"{np.mean(diffs):.2f}")
        assert np.mean(diffs) >= -0.5


def test_c07_gradient_check():
    with criterion(7, "analytic gradients match central differences (rel err < 1e-4)") as d:
        cfg = ActVitConfig({"m": 6}, (4, 4), (2, 2), shared_dim=8, embed_dim=8, depth=2, n_heads=4, dropout=0.0)
        model = build_model("act-vit", cfg, seed=0).double().eval()
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.normal(size=(6, 4, 4, 6)))
        y = torch.tensor([0.0, 1.0, 1.0, 0.0, 1.0, 0.0], dtype=torch.float64)

        def loss():
            with torch.no_grad():
                return torch.nn.functional.binary_cross_entropy_with_logits(model(x, "m"), y).item()

        model.zero_grad()
        torch.nn.functional.binary_cross_entropy_with_logits(model(x, "m"), y).backward()
        groups = {"adapter": model.adapters["m"], "patch_pe": model.patch_pe, "pos_embed": model.pos_embed,
                  "head": model.head.weight}
        worst = 0.0
        for name, param in groups.items():
            for idx in rng.choice(param.numel(), size=min(20, param.numel()), replace=False):
                analytic = param.grad.view(-1)[idx].item()
                numeric = central_difference(loss, param, int(idx))
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, rel)
        d["max_rel_err"] = f"{worst:.1e}"
        assert worst < 1e-4


def test_c08_auc_oracle():
    with criterion(8, "rank AUC equals pair counting; complement symmetry exact") as d:
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 201))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = rng.integers(0, max(2, n // 4), n).astype(float)
            a = auc(scores, labels)
            assert a == pairwise_auc(scores, labels)
            assert a + auc(scores, 1 - labels) == 1.0
            # score negation mirrors the ranking; equal up to float rounding only
            assert abs(auc(-scores, labels) - (1.0 - a)) < 1e-12
        d["sets"] = 1000


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = {"data_root": str(root / "data"),
           "synth": {"n_samples": 80, "tasks": [{"name": "lin", "max_tokens": 12},
                                               {"name": "other", "max_tokens": 12, "direction_seed": 3}]},
           "grid": {"epochs": [2], "embed_dim": [16], "depth": [1]}, "adapt": {"epochs": 2}}
    path = root / "base.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["synth", "--config", str(path), "--out", str(root / "synth")]) == 0
    return root, cfg


def _cli(root, cfg, args, name, **overrides):
    path = root / f"{name}.json"
    merged = {**cfg, **overrides}
    path.write_text(json.dumps(merged))
    return cli.main([*args, "--config", str(path), "--out", str(root / name)])


def test_c09_protocol_guards(cli_workspace):
    with criterion(9, "leave-out protocols refuse leakage with exit code 3") as d:
        root, cfg = cli_workspace
        codes = {}
        codes["lodo_corpus_with_target"] = _cli(root, cfg, ["train"], "g1", plan={
            "protocol": "leave_dataset_out", "target": ["toy-b", "lin"],
            "corpus": [{"llm_id": "toy-b", "dataset_id": "lin"}, {"llm_id": "toy-a", "dataset_id": "lin"}]})
        codes["lolo_corpus_with_target_llm"] = _cli(root, cfg, ["train"], "g2", plan={
            "protocol": "leave_llm_out", "target": ["toy-c", "lin"],
            "corpus": [{"llm_id": "toy-c", "dataset_id": "other"}, {"llm_id": "toy-a", "dataset_id": "lin"}]})
        assert _cli(root, cfg, ["train", "--protocol", "leave_dataset_out", "--target", "toy-b/lin"], "lodo") == 0
        model = str(root / "lodo" / "model.actm")
        codes["lodo_eval_on_training_pair"] = _cli(
            root, cfg, ["eval", "--protocol", "leave_dataset_out", "--target", "toy-a/other", "--model", model], "g3")
        codes["zeroshot_on_training_pair"] = _cli(
            root, cfg, ["zeroshot", "--target", "toy-b/other", "--model", model], "g4")
        codes["lolo_eval_on_seen_llm"] = _cli(
            root, cfg, ["eval", "--protocol", "leave_llm_out", "--target", "toy-b/lin", "--model", model], "g5")
        codes["lolo_adapt_on_seen_llm"] = _cli(
            root, cfg, ["adapt", "--protocol", "leave_llm_out", "--target", "toy-b/lin", "--model", model], "g6")
        d["codes"] = sorted(set(codes.values()))
        assert all(c == 3 for c in codes.values()), codes
        # the legitimate held-out evaluation still runs
        assert _cli(root, cfg, ["zeroshot", "--target", "toy-b/lin", "--model", model], "ok") == 0


def _tiny_sets():
    sets = {}
    for llm, dim in (("a", 6), ("b", 10)):
        for ds in ("x", "y"):
            rng = np.random.default_rng([dim, ord(ds)])
            y = np.arange(90) % 2
            x = rng.normal(size=(90, 2, 4, dim)).astype(np.float32)
            x[:, 1, -1, 0] += 1.5 * y
            sets[(llm, ds)] = PooledDataset(llm, ds, x, y, three_way_split(y))
    return sets


def test_c10_reference_mode_determinism(cli_workspace):
    with criterion(10, "reference-mode runs give byte-identical metrics JSON") as d:
        grid = GridSpec(depth=[1], lr=[3e-3], embed_dim=[16], epochs=[3], dropout=[0.1], weight_decay=[1e-3])
        spec = ModelSpec(pooled_shape=(2, 4), shared_dim=8)
        checked = []
        for protocol, target in (("single_source", None), ("joint_all", None), ("leave_dataset_out", ("a", "x")),
                                 ("leave_llm_out", ("a", "x")), ("low_data_adapt", ("a", "x"))):
            blobs = []
            for _ in range(2):
                plan = ExperimentPlan(protocol, target, grid=grid, model=spec, optim=OptimSpec(batch_size=16, seed=3),
                                      adapt_optim=OptimSpec(lr=1e-2, epochs=2, batch_size=16, seed=3),
                                      fractions=(0.2, 1.0))
                with reference_mode():
                    blobs.append(json.dumps(metrics_only(run_plan(plan, _tiny_sets())), sort_keys=True).encode())
            assert blobs[0] == blobs[1], protocol
            checked.append(protocol)
        root, cfg = cli_workspace
        for name in ("det1", "det2"):
            assert _cli(root, cfg, ["train", "--protocol", "joint_all", "--reference-mode"], name) == 0
        assert (root / "det1" / "metrics.json").read_bytes() == (root / "det2" / "metrics.json").read_bytes()
        d["protocols"] = len(checked) + 1


def test_c11_latency(tmp_path):
    with criterion(11, "median per-instance latency < 1 ms on one core (default toy config)") as d:
        assert cli.main(["bench", "--out", str(tmp_path / "bench")]) == 0
        stats = json.loads((tmp_path / "bench" / "metrics.json").read_text())["latency"]
        d.update(median_us=f"{stats['median_s'] * 1e6:.1f}", batch=stats["batch_size"])
        assert stats["batch_size"] == 256
        assert stats["median_s"] < 1e-3


def test_c12_schedule():
    with criterion(12, "warmup-cosine: 0 at start, peak at 10%, < 1% at the end") as d:
        for total in (10, 150, 1000, 4321):
            peak = 3e-3
            lrs = [warmup_cosine_lr(s, total, peak) for s in range(total)]
            warm = round(0.1 * total)
            assert lrs[0] == 0.0
            assert lrs[warm] == peak and max(lrs) == peak
            assert lrs[-1] < 0.01 * peak
            for s in (warm + 1, (warm + total) // 2, total - 2):
                expect = peak * 0.5 * (1 + np.cos(np.pi * (s - warm) / (total - 1 - warm)))
                assert lrs[s] == pytest.approx(expect, rel=1e-12, abs=1e-18)
        d["totals"] = 4
