import numpy as np
import pytest
import torch

from actvit.archive import MODEL_MAGIC
from actvit.exceptions import ArchiveError, UnregisteredLLMError
from actvit.model import (ActMlpConfig, ActVitConfig, LinearAdapters, build_model, checksum, freeze, load,
                          patchify, save, unfreeze, unpatchify)
from oracles import loop_matmul


def _vit(**kw):
    cfg = dict(llm_dims={"a": 6, "b": 10}, pooled_shape=(4, 6), patch_size=(2, 3), shared_dim=8, embed_dim=16,
               depth=2, n_heads=4, dropout=0.0)
    cfg.update(kw)
    return build_model("act-vit", ActVitConfig(**cfg), seed=0).eval()


def _x(b, dim, shape=(4, 6), seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=(b, *shape, dim)).astype(np.float32))


def test_adapter_identity_and_zero():
    ad = LinearAdapters({"m": 5}, 5)
    x = torch.randn(3, 4, 5)
    assert torch.equal(ad(x, "m"), x)
    with torch.no_grad():
        ad["m"].zero_()
    assert torch.count_nonzero(ad(x, "m")) == 0


def test_adapter_matches_loop_matmul():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4, 5))
    w = rng.normal(size=(5, 2))
    ad = LinearAdapters({"m": 5}, 2).double()
    with torch.no_grad():
        ad["m"].copy_(torch.from_numpy(w))
    got = ad(torch.from_numpy(x), "m").detach().numpy()
    assert np.abs(got - loop_matmul(x, w)).max() < 1e-6


def test_adapter_init_identity_padded_or_random():
    ad = LinearAdapters({"small": 3, "big": 12}, 8)
    w = ad["small"].detach()
    assert torch.equal(w[:, :3], torch.eye(3)) and torch.count_nonzero(w[:, 3:]) == 0
    assert ad["big"].abs().max() <= 0.04 and ad["big"].abs().sum() > 0


def test_unregistered_llm():
    model = _vit()
    with pytest.raises(UnregisteredLLMError):
        model(_x(1, 6), "zzz")
    with pytest.raises(UnregisteredLLMError):
        freeze(model, ["adapters:zzz"])


@pytest.mark.parametrize("patch,count", [((1, 1), 800), ((4, 2), 100)])
def test_patch_counts(patch, count):
    x = torch.randn(8, 100, 3)
    p = patchify(x, patch)
    assert p.shape == (count, *patch, 3)
    assert torch.equal(unpatchify(p, (8 // patch[0], 100 // patch[1])), x)


def test_patch_non_divisible():
    with pytest.raises(ValueError):
        patchify(torch.randn(8, 100, 3), (3, 7))
    with pytest.raises(ValueError):
        ActVitConfig({"a": 4}, (8, 100), (3, 7))


def test_patch_order_is_layer_major():
    x = torch.arange(4 * 6, dtype=torch.float32).view(4, 6, 1)
    p = patchify(x, (2, 3))
    assert p[0, :, :, 0].tolist() == [[0, 1, 2], [6, 7, 8]]
    assert p[1, :, :, 0].tolist() == [[3, 4, 5], [9, 10, 11]]
    assert p[2, 0, 0, 0] == 12


def test_forward_contract():
    model = _vit()
    out = model(_x(5, 6), "a")
    assert out.shape == (5,) and torch.isfinite(out).all()
    assert model(_x(3, 10), "b").shape == (3,)
    assert torch.equal(model(_x(5, 6), "a"), out)
    with pytest.raises(ValueError):
        model(_x(2, 6, shape=(4, 5)), "a")


def test_batch_invariance():
    model = _vit()
    x = _x(7, 6)
    batched = model(x, "a")
    single = torch.cat([model(x[i:i + 1], "a") for i in range(7)])
    assert (batched - single).abs().max() < 1e-6


def test_feature_permutation_compensated_by_adapter_rows():
    model = _vit()
    x = _x(4, 10, seed=3)
    sigma = torch.from_numpy(np.random.default_rng(0).permutation(10))
    before = model(x, "b")
    with torch.no_grad():
        model.adapters["b"].copy_(model.adapters["b"][sigma])
    assert (model(x[..., sigma], "b") - before).abs().max() < 1e-5


def test_cls_readout():
    model = _vit(readout="cls")
    assert model.pos_embed.shape[0] == 2 * 2 + 1
    assert torch.isfinite(model(_x(2, 6), "a")).all()
    with pytest.raises(ValueError):
        ActVitConfig({"a": 4}, readout="max")


def test_seeded_build_is_reproducible_and_isolated():
    torch.manual_seed(123)
    state = torch.random.get_rng_state()
    a, b = _vit(), _vit()
    assert checksum(a) == checksum(b)
    assert torch.equal(state, torch.random.get_rng_state())


def test_save_load_bitwise(tmp_path):
    model = _vit()
    model.standardizer.fit("a", _x(10, 6).numpy())
    model.trained_on = {("a", "d1")}
    save(model, tmp_path / "m.actm")
    back = load(tmp_path / "m.actm")
    x = _x(3, 6)
    assert torch.equal(back(x, "a"), model(x, "a"))
    assert back.trained_on == {("a", "d1")} and back.standardizer.fitted == {"a"}
    with pytest.raises(UnregisteredLLMError):
        back(x, "c")


def test_save_load_mlp_and_double(tmp_path):
    mlp = build_model("act-mlp", ActMlpConfig({"a": 6, "b": 10}, (4, 6), (16, 8), 0.0)).eval()
    save(mlp, tmp_path / "mlp.actm")
    assert torch.equal(load(tmp_path / "mlp.actm")(_x(2, 6), "a"), mlp(_x(2, 6), "a"))
    vit = _vit().double()
    save(vit, tmp_path / "d.actm")
    back = load(tmp_path / "d.actm")
    assert next(back.parameters()).dtype == torch.float64
    assert torch.equal(back(_x(2, 6).double(), "a"), vit(_x(2, 6).double(), "a"))


def test_load_corrupted(tmp_path):
    save(_vit(), tmp_path / "m.actm")
    raw = bytearray((tmp_path / "m.actm").read_bytes())
    assert raw[:8] == MODEL_MAGIC
    raw[0:8] = b"ACTSHRD1"
    (tmp_path / "bad.actm").write_bytes(bytes(raw))
    with pytest.raises(ArchiveError):
        load(tmp_path / "bad.actm")
    (tmp_path / "short.actm").write_bytes((tmp_path / "m.actm").read_bytes()[:200])
    with pytest.raises(ArchiveError):
        load(tmp_path / "short.actm")


def _step(model, x, llm, steps=1, lr=1e-2):
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=lr)
    y = torch.tensor([0.0, 1.0] * (len(x) // 2))
    losses = []
    for _ in range(steps):
        loss = torch.nn.functional.binary_cross_entropy_with_logits(model(x, llm), y)
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    return losses


def test_freeze_backbone_trains_only_adapter():
    model = _vit().train()
    freeze(model, ["backbone", "head", "positional"])
    frozen = checksum(model, ["backbone", "head", "positional"])
    adapter = checksum(model, ["adapters:a"])
    _step(model, _x(8, 6), "a", steps=100)
    assert checksum(model, ["backbone", "head", "positional"]) == frozen
    assert checksum(model, ["adapters:a"]) != adapter


def test_only_adapter_gradients_nonzero():
    model = _vit()
    freeze(model, ["backbone", "head", "positional"])
    loss = model(_x(4, 6), "a").sum()
    loss.backward()
    for name, p in model.named_parameters():
        if name == "adapters.weights.a":
            assert p.grad is not None and p.grad.abs().sum() > 0
        else:
            assert p.grad is None or p.grad.abs().sum() == 0


def test_freeze_nothing_changes_every_group():
    model = _vit()
    groups = ["backbone", "head", "positional", "adapters:a"]
    before = {g: checksum(model, [g]) for g in groups}
    _step(model, _x(8, 6), "a")
    assert all(checksum(model, [g]) != before[g] for g in groups)


def test_freeze_all_keeps_loss_constant():
    model = _vit()
    freeze(model, ["backbone", "head", "positional", "adapters"])
    x = _x(8, 6)
    y = torch.tensor([0.0, 1.0] * 4)
    losses = {torch.nn.functional.binary_cross_entropy_with_logits(model(x, "a"), y).item() for _ in range(3)}
    assert len(losses) == 1
    unfreeze(model)
    assert all(p.requires_grad for p in model.parameters())


def test_unknown_group():
    with pytest.raises(ValueError):
        freeze(_vit(), ["encoder"])


def test_mlp_pads_to_max_dim():
    mlp = build_model("act-mlp", ActMlpConfig({"a": 6, "b": 10}, (4, 6), (16,), 0.0)).eval()
    assert mlp.body[0].in_features == 4 * 6 * 10
    assert mlp(_x(3, 6), "a").shape == (3,)
    with pytest.raises(UnregisteredLLMError):
        mlp(_x(1, 6), "c")
    with pytest.raises(ValueError):
        build_model("resnet", None)


def test_add_and_reset_llm():
    model = _vit()
    model.add_llm("c", 5)
    assert model(_x(2, 5), "c").shape == (2,)
    with torch.no_grad():
        model.adapters["c"].add_(1.0)
    model.standardizer.fit("c", _x(4, 5).numpy())
    model.reset_llm("c")
    assert torch.equal(model.adapters["c"][:, :5], torch.eye(5))
    assert "c" not in model.standardizer.fitted
