"""Desk-scale DeiT-shaped ViT forward pass with token fusion in each block.

Fusion inside a block is driven by that block's own attention map: the
incoming tokens are scored with the attention they are about to receive
(one step ahead of the previous block), fused, and then the block either
reuses an aggregated copy of that attention map (``approximated``) or
recomputes attention on the fused tokens (``precise``).
"""
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import weightfile
from .criteria import CriteriaTemperatures, TokenState
from .fusion import (
    DIRECTION_MODES,
    POOLING_MODES,
    FusionPlan,
    aggregate_attention,
    fuse_rows,
    mctf_reduce,
)
from .linalg import DTYPE, ShapeError, gelu, layer_norm, row_softmax

ATTENTION_MODES = ("approximated", "precise")
SIM_SOURCES = ("features", "keys")


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 12
    embed_dim: int = 384
    heads: int = 6
    mlp_ratio: float = 4.0
    image_size: int = 224
    patch_size: int = 16
    in_chans: int = 3
    num_classes: int = 1000
    r_per_layer: int = 0
    safeguard_min_tokens: int = 10
    # blocks before this index run without fusion
    fusion_start_block: int = 1
    attention_mode: str = "approximated"
    matching_mode: str = "bidirectional"
    pooling_mode: str = "weighted"
    temps: CriteriaTemperatures = field(default_factory=CriteriaTemperatures)
    proportional_attention: bool = True
    sim_source: str = "features"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.safeguard_min_tokens < 1:
            raise ValueError("safeguard_min_tokens must be >= 1")
        if self.r_per_layer < 0:
            raise ValueError("r_per_layer must be >= 0")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.matching_mode not in DIRECTION_MODES:
            raise ValueError(f"matching_mode must be one of {DIRECTION_MODES}")
        if self.pooling_mode not in POOLING_MODES:
            raise ValueError(f"pooling_mode must be one of {POOLING_MODES}")
        if self.sim_source not in SIM_SOURCES:
            raise ValueError(f"sim_source must be one of {SIM_SOURCES}")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid ** 2

    @property
    def n_tokens(self):
        return self.n_patches + 1

    @property
    def mlp_hidden(self):
        return int(self.embed_dim * self.mlp_ratio)

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["temps"] = asdict(self.temps)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("temps"), dict):
            d["temps"] = CriteriaTemperatures(**d["temps"])
        return cls(**d)


PRESETS = {
    "deit-t": dict(depth=12, embed_dim=192, heads=3),
    "deit-s": dict(depth=12, embed_dim=384, heads=6),
    "deit-b": dict(depth=12, embed_dim=768, heads=12),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ViTConfig(**{**base, **overrides})


def weight_layout(config):
    """Name -> shape for every tensor the model needs. Linear weights are (in, out)."""
    C, hid = config.embed_dim, config.mlp_hidden
    patch_in = config.in_chans * config.patch_size ** 2
    layout = {
        "patch_embed.weight": (patch_in, C),
        "patch_embed.bias": (C,),
        "cls_token": (1, C),
        "pos_embed": (config.n_tokens, C),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        layout.update({
            p + "norm1.weight": (C,),
            p + "norm1.bias": (C,),
            p + "attn.qkv.weight": (C, 3 * C),
            p + "attn.qkv.bias": (3 * C,),
            p + "attn.proj.weight": (C, C),
            p + "attn.proj.bias": (C,),
            p + "norm2.weight": (C,),
            p + "norm2.bias": (C,),
            p + "mlp.fc1.weight": (C, hid),
            p + "mlp.fc1.bias": (hid,),
            p + "mlp.fc2.weight": (hid, C),
            p + "mlp.fc2.bias": (C,),
        })
    layout.update({
        "norm.weight": (C,),
        "norm.bias": (C,),
        "head.weight": (C, config.num_classes),
        "head.bias": (config.num_classes,),
    })
    return layout


class ModelWeights:
    """Immutable named-tensor table checked against a config's layout."""

    def __init__(self, tensors, config=None):
        self._t = {k: np.array(v, dtype=DTYPE) for k, v in tensors.items()}
        for arr in self._t.values():
            arr.setflags(write=False)
        if config is not None:
            self.validate(config)

    def validate(self, config):
        for name, shape in weight_layout(config).items():
            if name not in self._t:
                raise ValueError(f"missing tensor {name!r}")
            if self._t[name].shape != tuple(shape):
                raise ShapeError(f"tensor {name!r} has shape {self._t[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def items(self):
        return self._t.items()

    def block(self, i):
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in self._t.items() if k.startswith(prefix)}

    @classmethod
    def random(cls, config, seed=0, scale=0.02):
        """Seeded uniform(-scale, scale) tensors; layer norms start at identity."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in weight_layout(config).items():
            if "norm" in name:
                fill = 1.0 if name.endswith("weight") else 0.0
                tensors[name] = np.full(shape, fill, dtype=DTYPE)
            else:
                tensors[name] = rng.uniform(-scale, scale, size=shape).astype(DTYPE)
        return cls(tensors, config)

    @classmethod
    def load(cls, path, config=None):
        return cls(weightfile.load(path), config)

    def save(self, path):
        weightfile.save(path, dict(self._t))


def patch_embed(image, weights, config):
    """Split an H x W x C image into patches, project, prepend the class token."""
    img = np.asarray(image, dtype=DTYPE)
    expect = (config.image_size, config.image_size, config.in_chans)
    if img.shape != expect:
        raise ShapeError(f"image shape {img.shape} does not match config {expect}")
    p, g = config.patch_size, config.grid
    patches = (
        img.reshape(g, p, g, p, config.in_chans)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, p * p * config.in_chans)
    )
    tokens = patches @ weights["patch_embed.weight"] + weights["patch_embed.bias"]
    x = np.concatenate([weights["cls_token"], tokens], axis=0) + weights["pos_embed"]
    return TokenState.fresh(x.astype(DTYPE), cls_present=True)


@dataclass
class BlockTrace:
    index: int
    tokens_in: int
    tokens_out: int
    r_effective: int
    informativeness: np.ndarray
    plan: FusionPlan
    attention: np.ndarray = None

    def to_dict(self):
        return {
            "block": self.index,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "r_effective": self.r_effective,
            "plan": self.plan.to_dict(),
        }


@dataclass
class ModelTrace:
    blocks: list = field(default_factory=list)
    cls_embedding: np.ndarray = None
    final_tokens: int = 0

    @property
    def tokens_in(self):
        return [b.tokens_in for b in self.blocks]

    @property
    def tokens_out(self):
        return [b.tokens_out for b in self.blocks]

    @property
    def plans(self):
        return [b.plan for b in self.blocks]

    def to_dict(self):
        return {
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "final_tokens": self.final_tokens,
            "blocks": [b.to_dict() for b in self.blocks],
        }


def _heads(m, config):
    n = m.shape[0]
    return m.reshape(n, config.heads, config.head_dim).transpose(1, 0, 2)


def _merge_heads(m):
    h, n, d = m.shape
    return m.transpose(1, 0, 2).reshape(n, h * d)


def _attention(x, sizes, bw, config, with_values=True):
    """Returns (per-head attention, per-head values or None, keys averaged over heads)."""
    u = layer_norm(x, bw["norm1.weight"], bw["norm1.bias"])
    C = config.embed_dim
    width = 3 * C if with_values else 2 * C
    qkv = u @ bw["attn.qkv.weight"][:, :width] + bw["attn.qkv.bias"][:width]
    q, k = _heads(qkv[:, :C], config), _heads(qkv[:, C:2 * C], config)
    v = _heads(qkv[:, 2 * C:], config) if with_values else None
    bias = np.log(sizes.astype(DTYPE)) if config.proportional_attention else None
    scale = DTYPE(1.0 / math.sqrt(config.head_dim))
    attn = np.stack([row_softmax((q[h] @ k[h].T) * scale, bias) for h in range(config.heads)])
    return attn, v, k.mean(axis=0)


def _finish_block(x, attn, v, bw):
    out = _merge_heads(np.matmul(attn, v)) @ bw["attn.proj.weight"] + bw["attn.proj.bias"]
    x = (x + out).astype(DTYPE)
    u = layer_norm(x, bw["norm2.weight"], bw["norm2.bias"])
    hidden = gelu(u @ bw["mlp.fc1.weight"] + bw["mlp.fc1.bias"])
    return (x + hidden @ bw["mlp.fc2.weight"] + bw["mlp.fc2.bias"]).astype(DTYPE)


def block_forward(state, block_weights, config, r_effective=0, index=0, keep_attention=False):
    bw = block_weights
    x = state.features
    # precise mode only needs scores before fusion; values come after
    scoring_only = r_effective > 0 and config.attention_mode == "precise"
    attn, v, keys = _attention(x, state.sizes, bw, config, with_values=not scoring_only)
    # column means over heads and queries
    info = attn.mean(axis=(0, 1)).astype(DTYPE)

    if r_effective <= 0:
        plan = FusionPlan.identity(state.n_tokens, config.pooling_mode)
        new_x = _finish_block(x, attn, v, bw)
        out_state = TokenState(new_x, state.sizes, info, state.cls_present)
    else:
        sim = keys if config.sim_source == "keys" else None
        fused, plan = mctf_reduce(
            state, info, config.temps, r_effective,
            direction=config.matching_mode,
            pooling=config.pooling_mode,
            sim_features=sim,
        )
        if config.attention_mode == "approximated":
            attn_hat = aggregate_attention(attn, plan)
            v_hat = np.stack([fuse_rows(v[h], plan) for h in range(config.heads)])
        else:
            attn_hat, v_hat, _ = _attention(fused.features, fused.sizes, bw, config)
        new_x = _finish_block(fused.features, attn_hat, v_hat, bw)
        out_state = TokenState(new_x, fused.sizes, fused.info, fused.cls_present)

    trace = BlockTrace(
        index=index,
        tokens_in=state.n_tokens,
        tokens_out=out_state.n_tokens,
        r_effective=state.n_tokens - out_state.n_tokens,
        informativeness=info,
        plan=plan,
        attention=attn if keep_attention else None,
    )
    return out_state, trace


def effective_r(n_tokens, r, config, block_index, cls_present=True):
    """Tokens this block may remove under the start-block rule and safeguard."""
    if block_index < config.fusion_start_block or r <= 0:
        return 0
    fusible = n_tokens - (1 if cls_present else 0)
    return max(0, min(r, n_tokens - config.safeguard_min_tokens, fusible - 1))


def token_schedule(config, r=None, n_tokens=None):
    """Token counts entering each block plus the final count, without running."""
    r = config.r_per_layer if r is None else r
    n = config.n_tokens if n_tokens is None else n_tokens
    entering = []
    for i in range(config.depth):
        entering.append(n)
        n -= effective_r(n, r, config, i)
    return entering, n


def model_forward(tokens, weights, config, r=None, keep_attention=False):
    """Run every block and the classifier head on the class token.

    ``tokens`` is a :class:`TokenState` (e.g. from :func:`patch_embed`).
    ``r`` overrides ``config.r_per_layer``.
    """
    r = config.r_per_layer if r is None else r
    state = tokens
    trace = ModelTrace()
    for i in range(config.depth):
        r_eff = effective_r(state.n_tokens, r, config, i, state.cls_present)
        state, bt = block_forward(state, weights.block(i), config, r_eff, i, keep_attention)
        trace.blocks.append(bt)
    cls = state.features[0]
    trace.cls_embedding = cls.copy()
    trace.final_tokens = state.n_tokens
    normed = layer_norm(cls, weights["norm.weight"], weights["norm.bias"])[0]
    logits = (normed @ weights["head.weight"] + weights["head.bias"]).astype(DTYPE)
    return logits, trace


def random_image(config, seed=0):
    rng = np.random.default_rng(seed)
    shape = (config.image_size, config.image_size, config.in_chans)
    return rng.uniform(0.0, 1.0, size=shape).astype(DTYPE)
