"""ACT-ViT: per-LLM linear adapters feeding a ViT over pooled activation tensors.

Pipeline for a batch of pooled tensors ``(B, L_p, N_p, D_M)`` from one LLM:

    adapter (D_M -> D', no bias)
    -> non-overlapping (p_H, p_W) patches
    -> + per-patch positional encoding (one (p_H*p_W, D') tensor shared by all patches)
    -> flatten each patch, linear to E
    -> + global positional embedding per patch index
    -> pre-norm transformer blocks
    -> mean over patch tokens (or a class token)
    -> linear head -> one logit
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
from einops import rearrange
from torch import nn

from .archive import MODEL_MAGIC, read_archive, write_archive
from .exceptions import ArchiveError, UnregisteredLLMError

GROUPS = ("backbone", "head", "positional", "adapters")


def _trunc_normal(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def _init_linear(m: nn.Linear) -> None:
    _trunc_normal(m.weight)
    if m.bias is not None:
        nn.init.zeros_(m.bias)


class LinearAdapters(nn.Module):
    """One bias-free ``(D_M, D')`` matrix per registered LLM."""

    def __init__(self, llm_dims: dict[str, int], out_dim: int):
        super().__init__()
        self.out_dim = out_dim
        self.llm_dims: dict[str, int] = {}
        self.weights = nn.ParameterDict()
        for llm_id, dim in llm_dims.items():
            self.add(llm_id, dim)

    def add(self, llm_id: str, dim: int) -> None:
        if "." in llm_id:
            raise ValueError(f"llm_id {llm_id!r} may not contain '.'")
        ref = next(iter(self.weights.values()), None)
        kwargs = {} if ref is None else {"dtype": ref.dtype}
        self.weights[llm_id] = nn.Parameter(torch.empty(dim, self.out_dim, **kwargs))
        self.llm_dims[llm_id] = dim
        self.reset(llm_id)

    @torch.no_grad()
    def reset(self, llm_id: str) -> None:
        """Identity-padded init when ``D_M <= D'``, truncated normal otherwise."""
        w = self[llm_id]
        dim = w.shape[0]
        if dim <= self.out_dim:
            w.zero_()
            w[:, :dim] = torch.eye(dim, dtype=w.dtype)
        else:
            _trunc_normal(w)

    def __getitem__(self, llm_id: str) -> nn.Parameter:
        if llm_id not in self.weights:
            raise UnregisteredLLMError(llm_id)
        return self.weights[llm_id]

    def __contains__(self, llm_id) -> bool:
        return llm_id in self.weights

    def forward(self, x: torch.Tensor, llm_id: str) -> torch.Tensor:
        w = self[llm_id]
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"{llm_id} expects {w.shape[0]} features, got {x.shape[-1]}")
        return x @ w


class InputStandardizer(nn.Module):
    """Fixed per-LLM channel mean/std, estimated over every pooled pixel.

    Stats start as the identity map; :meth:`fit` sets them from training
    data. They are buffers, never trained.
    """

    def __init__(self, llm_dims: dict[str, int]):
        super().__init__()
        self.fitted: set[str] = set()
        for llm_id, dim in llm_dims.items():
            self.add(llm_id, dim)

    def add(self, llm_id: str, dim: int, dtype=torch.float32) -> None:
        self.register_buffer(f"mean_{llm_id}", torch.zeros(dim, dtype=dtype))
        self.register_buffer(f"std_{llm_id}", torch.ones(dim, dtype=dtype))
        self.fitted.discard(llm_id)

    @torch.no_grad()
    def fit(self, llm_id: str, x) -> None:
        x = torch.as_tensor(np.asarray(x), dtype=torch.float64).reshape(-1, np.shape(x)[-1])
        mean = getattr(self, f"mean_{llm_id}")
        std = getattr(self, f"std_{llm_id}")
        mean.copy_(x.mean(0).to(mean.dtype))
        std.copy_(x.std(0, unbiased=False).clamp_min(1e-6).to(std.dtype))
        self.fitted.add(llm_id)

    def forward(self, x: torch.Tensor, llm_id: str) -> torch.Tensor:
        if f"mean_{llm_id}" not in self._buffers:
            raise UnregisteredLLMError(llm_id)
        return (x - getattr(self, f"mean_{llm_id}")) / getattr(self, f"std_{llm_id}")


def patchify(x: torch.Tensor, patch_size: tuple[int, int]) -> torch.Tensor:
    """``(..., L_p, N_p, D) -> (..., H*W, p_H, p_W, D)``, patches in layer-major order."""
    ph, pw = patch_size
    lp, np_ = x.shape[-3], x.shape[-2]
    if lp % ph or np_ % pw:
        raise ValueError(f"pooled shape ({lp}, {np_}) is not divisible by patch size {patch_size}")
    return rearrange(x, "... (h ph) (w pw) d -> ... (h w) ph pw d", ph=ph, pw=pw)


def unpatchify(patches: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    h, w = grid
    return rearrange(patches, "... (h w) ph pw d -> ... (h ph) (w pw) d", h=h, w=w)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in self.to_qkv(x).chunk(3, dim=-1))
        attn = self.drop(torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1))
        return self.proj(rearrange(attn @ v, "b h n d -> b n (h d)"))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(mlp_ratio * dim, dim)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.mlp(self.norm2(x)))


@dataclass
class ActVitConfig:
    llm_dims: dict[str, int]
    pooled_shape: tuple[int, int] = (8, 100)
    patch_size: tuple[int, int] = (1, 1)
    shared_dim: int = 64
    embed_dim: int = 128
    depth: int = 3
    n_heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.3
    readout: str = "mean"

    def __post_init__(self):
        self.pooled_shape = tuple(self.pooled_shape)
        self.patch_size = tuple(self.patch_size)
        self.llm_dims = dict(self.llm_dims)
        if self.readout not in ("mean", "cls"):
            raise ValueError(f"readout must be 'mean' or 'cls', got {self.readout!r}")
        lp, np_ = self.pooled_shape
        ph, pw = self.patch_size
        if ph < 1 or pw < 1 or lp % ph or np_ % pw:
            raise ValueError(f"pooled shape {self.pooled_shape} is not divisible by patch size {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.pooled_shape[0] // self.patch_size[0], self.pooled_shape[1] // self.patch_size[1]


@dataclass
class ActMlpConfig:
    llm_dims: dict[str, int]
    pooled_shape: tuple[int, int] = (8, 100)
    hidden: tuple[int, ...] = (128, 128)
    dropout: float = 0.3

    def __post_init__(self):
        self.pooled_shape = tuple(self.pooled_shape)
        self.hidden = tuple(self.hidden)
        self.llm_dims = dict(self.llm_dims)

    @property
    def max_dim(self) -> int:
        return max(self.llm_dims.values())


class ActVit(nn.Module):
    kind = "act-vit"

    def __init__(self, config: ActVitConfig):
        super().__init__()
        self.config = config
        c = config
        ph, pw = c.patch_size
        n_patches = c.grid[0] * c.grid[1]
        self.standardizer = InputStandardizer(c.llm_dims)
        self.adapters = LinearAdapters(c.llm_dims, c.shared_dim)
        self.patch_pe = nn.Parameter(torch.empty(ph * pw, c.shared_dim))
        self.patch_proj = nn.Linear(ph * pw * c.shared_dim, c.embed_dim)
        n_tokens = n_patches + (c.readout == "cls")
        self.pos_embed = nn.Parameter(torch.empty(n_tokens, c.embed_dim))
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.embed_dim)) if c.readout == "cls" else None
        self.drop = nn.Dropout(c.dropout)
        self.blocks = nn.ModuleList(Block(c.embed_dim, c.n_heads, c.mlp_ratio, c.dropout) for _ in range(c.depth))
        self.norm = nn.LayerNorm(c.embed_dim)
        self.head = nn.Linear(c.embed_dim, 1)
        # (llm_id, dataset_id) pairs seen in training; guards zero-shot evaluation
        self.trained_on: set[tuple[str, str]] = set()
        self._init_weights()

    def _init_weights(self):
        _trunc_normal(self.patch_pe.data)
        _trunc_normal(self.pos_embed.data)
        if self.cls_token is not None:
            _trunc_normal(self.cls_token.data)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)

    def adapt(self, x: torch.Tensor, llm_id: str) -> torch.Tensor:
        return self.adapters(x, llm_id)

    def embed_patches(self, z: torch.Tensor) -> torch.Tensor:
        """Shared-space tensor ``(B, L_p, N_p, D')`` to patch tokens ``(B, H*W, E)``."""
        p = patchify(z, self.config.patch_size)
        p = p + self.patch_pe.view(1, 1, *self.config.patch_size, -1)
        return self.patch_proj(rearrange(p, "b n ph pw d -> b n (ph pw d)"))

    def forward(self, x: torch.Tensor, llm_id: str) -> torch.Tensor:
        """Logits ``(B,)`` for a batch ``(B, L_p, N_p, D_M)`` from ``llm_id``."""
        if tuple(x.shape[1:3]) != self.config.pooled_shape:
            raise ValueError(f"expected pooled shape {self.config.pooled_shape}, got {tuple(x.shape[1:3])}")
        tokens = self.embed_patches(self.adapt(self.standardizer(x, llm_id), llm_id))
        if self.cls_token is not None:
            tokens = torch.cat([self.cls_token.expand(tokens.shape[0], -1, -1), tokens], dim=1)
        h = self.drop(tokens + self.pos_embed)
        for blk in self.blocks:
            h = blk(h)
        h = self.norm(h)
        pooled = h[:, 0] if self.cls_token is not None else h.mean(dim=1)
        return self.head(pooled).squeeze(-1)

    def add_llm(self, llm_id: str, dim: int) -> None:
        self.adapters.add(llm_id, dim)
        self.standardizer.add(llm_id, dim, self.adapters[llm_id].dtype)
        self.config.llm_dims[llm_id] = dim

    def reset_llm(self, llm_id: str) -> None:
        """Fresh adapter and unfitted input stats for ``llm_id``."""
        self.adapters.reset(llm_id)
        self.standardizer.add(llm_id, self.config.llm_dims[llm_id], self.adapters[llm_id].dtype)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {"backbone": [], "head": [], "positional": []}
        for name, p in self.named_parameters():
            if name.startswith("adapters.weights."):
                groups.setdefault("adapters:" + name.split(".", 2)[2], []).append((name, p))
            elif name.startswith("head."):
                groups["head"].append((name, p))
            elif name in ("patch_pe", "pos_embed"):
                groups["positional"].append((name, p))
            else:
                groups["backbone"].append((name, p))
        return groups


class ActMlp(nn.Module):
    """MLP on the flattened pooled tensor, features zero-padded to ``D_max``."""

    kind = "act-mlp"

    def __init__(self, config: ActMlpConfig):
        super().__init__()
        self.config = config
        lp, np_ = config.pooled_shape
        dims = [lp * np_ * config.max_dim, *config.hidden]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU(), nn.Dropout(config.dropout)]
        self.standardizer = InputStandardizer(config.llm_dims)
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(dims[-1], 1)
        self.trained_on: set[tuple[str, str]] = set()
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)

    def forward(self, x: torch.Tensor, llm_id: str) -> torch.Tensor:
        if llm_id not in self.config.llm_dims:
            raise UnregisteredLLMError(llm_id)
        x = self.standardizer(x, llm_id)
        pad = self.config.max_dim - x.shape[-1]
        if pad:
            x = nn.functional.pad(x, (0, pad))
        return self.head(self.body(x.flatten(1))).squeeze(-1)

    def parameter_groups(self):
        groups = {"backbone": [], "head": [], "positional": []}
        for name, p in self.named_parameters():
            groups["head" if name.startswith("head.") else "backbone"].append((name, p))
        return groups


def _select(model, groups) -> list[nn.Parameter]:
    table = model.parameter_groups()
    out = []
    for g in groups:
        if g == "adapters":
            keys = [k for k in table if k.startswith("adapters:")]
        elif g in table:
            keys = [g]
        elif g.startswith("adapters:"):
            raise UnregisteredLLMError(g.split(":", 1)[1])
        else:
            raise ValueError(f"unknown parameter group {g!r}")
        for k in keys:
            out.extend(p for _, p in table[k])
    return out


def freeze(model: nn.Module, groups) -> nn.Module:
    """Stop gradients into ``groups`` (``backbone``, ``head``, ``positional``,
    ``adapters`` or ``adapters:<llm_id>``)."""
    for p in _select(model, groups):
        p.requires_grad_(False)
    return model


def unfreeze(model: nn.Module, groups=None) -> nn.Module:
    params = model.parameters() if groups is None else _select(model, groups)
    for p in params:
        p.requires_grad_(True)
    return model


def checksum(model: nn.Module, groups=None) -> str:
    """SHA-256 over the raw bytes of the selected parameters."""
    h = hashlib.sha256()
    named = model.named_parameters() if groups is None else [(str(i), p) for i, p in enumerate(_select(model, groups))]
    for name, p in named:
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def build_model(kind: str, config, seed: int = 0) -> nn.Module:
    """Construct a model with seeded initialization, leaving the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if kind == ActVit.kind:
            return ActVit(config)
        if kind == ActMlp.kind:
            return ActMlp(config)
    raise ValueError(f"unknown model kind {kind!r}")


def _config_to_dict(config) -> dict:
    d = asdict(config)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def save(model: nn.Module, path) -> None:
    """Write weights, architecture config and provenance to an ``ACTMODL1`` archive."""
    header = {
        "kind": model.kind,
        "config": _config_to_dict(model.config),
        "llm_registry": dict(model.config.llm_dims),
        "trained_on": sorted(list(pair) for pair in model.trained_on),
        "input_stats_fitted": sorted(model.standardizer.fitted),
    }
    records = [({"name": k}, v.detach().cpu().numpy()) for k, v in model.state_dict().items()]
    write_archive(path, MODEL_MAGIC, header, records)


def load(path) -> nn.Module:
    header, records = read_archive(path, MODEL_MAGIC)
    kind = header.get("kind")
    cfg_cls = {ActVit.kind: ActVitConfig, ActMlp.kind: ActMlpConfig}.get(kind)
    if cfg_cls is None:
        raise ArchiveError(f"{path}: unknown model kind {kind!r}")
    model = build_model(kind, cfg_cls(**header["config"]))
    state = {meta["name"]: torch.from_numpy(arr) for meta, arr in records}
    if any(t.dtype == torch.float64 for t in state.values()):
        model = model.double()
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ArchiveError(f"{path}: parameter mismatch {sorted(missing)}")
    model.load_state_dict(state)
    model.trained_on = {tuple(p) for p in header.get("trained_on", [])}
    model.standardizer.fitted = set(header.get("input_stats_fitted", []))
    return model.eval()


def clone(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)
