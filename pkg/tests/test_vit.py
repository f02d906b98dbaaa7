import math

import numpy as np
import pytest

from mctf.criteria import TokenState
from mctf.vit import (
    ModelWeights,
    ViTConfig,
    block_forward,
    effective_r,
    model_forward,
    patch_embed,
    preset,
    random_image,
    token_schedule,
    weight_layout,
)

SMALL = ViTConfig(depth=3, embed_dim=24, heads=3, image_size=32, patch_size=8, num_classes=7)
GOLDEN_S16 = [197, 181, 165, 149, 133, 117, 101, 85, 69, 53, 37, 21]


def vanilla_forward(image, w, cfg):
    """Plain float64 ViT with no fusion, written out independently."""
    p, g, c = cfg.patch_size, cfg.grid, cfg.embed_dim
    img = np.asarray(image, np.float64)
    patches = np.stack([img[i * p:(i + 1) * p, j * p:(j + 1) * p].reshape(-1)
                        for i in range(g) for j in range(g)])
    W = {k: np.asarray(v, np.float64) for k, v in w.items()}
    x = np.vstack([W["cls_token"], patches @ W["patch_embed.weight"] + W["patch_embed.bias"]])
    x = x + W["pos_embed"]

    def ln(m, gain, shift):
        mu = m.mean(-1, keepdims=True)
        var = ((m - mu) ** 2).mean(-1, keepdims=True)
        return (m - mu) / np.sqrt(var + 1e-6) * gain + shift

    d = cfg.head_dim
    for b in range(cfg.depth):
        pre = f"blocks.{b}."
        u = ln(x, W[pre + "norm1.weight"], W[pre + "norm1.bias"])
        qkv = u @ W[pre + "attn.qkv.weight"] + W[pre + "attn.qkv.bias"]
        heads = []
        for h in range(cfg.heads):
            q = qkv[:, h * d:(h + 1) * d]
            k = qkv[:, c + h * d:c + (h + 1) * d]
            v = qkv[:, 2 * c + h * d:2 * c + (h + 1) * d]
            s = q @ k.T / math.sqrt(d)
            e = np.exp(s - s.max(-1, keepdims=True))
            heads.append((e / e.sum(-1, keepdims=True)) @ v)
        x = x + np.hstack(heads) @ W[pre + "attn.proj.weight"] + W[pre + "attn.proj.bias"]
        u = ln(x, W[pre + "norm2.weight"], W[pre + "norm2.bias"])
        hid = u @ W[pre + "mlp.fc1.weight"] + W[pre + "mlp.fc1.bias"]
        hid = 0.5 * hid * (1 + np.tanh(math.sqrt(2 / math.pi) * (hid + 0.044715 * hid ** 3)))
        x = x + hid @ W[pre + "mlp.fc2.weight"] + W[pre + "mlp.fc2.bias"]
    cls = ln(x[:1], W["norm.weight"], W["norm.bias"])[0]
    return cls @ W["head.weight"] + W["head.bias"]


@pytest.fixture(scope="module")
def deit_s():
    cfg = preset("deit-s")
    return cfg, ModelWeights.random(cfg, seed=7), random_image(cfg, seed=7)


def test_patch_embed_counts():
    cfg = preset("deit-t")
    w = ModelWeights.random(cfg, 0)
    assert patch_embed(random_image(cfg), w, cfg).n_tokens == 197
    small = preset("deit-t", image_size=32)
    assert patch_embed(random_image(small), ModelWeights.random(small, 0), small).n_tokens == 5


def test_patch_embed_zero_image_zero_weights():
    zeros = {k: np.zeros(s, np.float32) for k, s in weight_layout(SMALL).items()}
    rng = np.random.default_rng(0)
    zeros["pos_embed"] = rng.normal(size=zeros["pos_embed"].shape).astype(np.float32)
    zeros["cls_token"] = rng.normal(size=zeros["cls_token"].shape).astype(np.float32)
    w = ModelWeights(zeros, SMALL)
    tok = patch_embed(np.zeros((32, 32, 3)), w, SMALL)
    expect = zeros["pos_embed"].copy()
    expect[0] += zeros["cls_token"][0]
    assert np.allclose(tok.features, expect)


def test_patch_embed_shape_check():
    w = ModelWeights.random(SMALL, 0)
    with pytest.raises(ValueError):
        patch_embed(np.zeros((31, 32, 3)), w, SMALL)


def test_r0_matches_vanilla_forward():
    w = ModelWeights.random(SMALL, 3, scale=0.3)
    img = random_image(SMALL, 3)
    logits, trace = model_forward(patch_embed(img, w, SMALL), w, SMALL, r=0)
    ref = vanilla_forward(img, w, SMALL)
    assert trace.tokens_in == [17, 17, 17]
    assert np.allclose(logits, ref, atol=1e-5)


def test_block_r0_modes_bit_identical():
    w = ModelWeights.random(SMALL, 1, scale=0.2)
    tok = patch_embed(random_image(SMALL, 1), w, SMALL)
    out_a, _ = block_forward(tok, w.block(0), SMALL)
    out_p, _ = block_forward(tok, w.block(0), SMALL.with_(attention_mode="precise"))
    assert out_a.features.tobytes() == out_p.features.tobytes()


def test_block_reduces_by_r(deit_s):
    cfg, w, img = deit_s
    tok = patch_embed(img, w, cfg)
    out, bt = block_forward(tok, w.block(0), cfg, r_effective=16)
    assert out.n_tokens == 181 and out.sizes.sum() == 197
    assert bt.tokens_in == 197 and bt.r_effective == 16


def test_golden_schedule_all_blocks(deit_s):
    cfg, w, img = deit_s
    cfg0 = cfg.with_(fusion_start_block=0)
    logits, trace = model_forward(patch_embed(img, w, cfg0), w, cfg0, r=16)
    assert trace.tokens_in == GOLDEN_S16
    assert trace.final_tokens == 10
    assert np.all(np.isfinite(logits))
    assert token_schedule(cfg0, r=16) == (GOLDEN_S16, 10)


def test_preset_schedule_skips_first_block(deit_s):
    cfg, w, img = deit_s
    logits, trace = model_forward(patch_embed(img, w, cfg), w, cfg, r=16)
    assert trace.tokens_in == [197] + GOLDEN_S16[:-1]
    assert trace.final_tokens == 21
    assert token_schedule(cfg, r=16) == (trace.tokens_in, 21)
    assert np.all(np.isfinite(logits))


def test_absurd_r_is_clamped_by_safeguard(deit_s):
    cfg, w, img = deit_s
    _, trace = model_forward(patch_embed(img, w, cfg), w, cfg, r=200)
    assert min(trace.tokens_out) == 10 and trace.final_tokens == 10


def test_precise_mode_runs_and_differs(deit_s):
    cfg, w, img = deit_s
    tok = patch_embed(img, w, cfg)
    la, ta = model_forward(tok, w, cfg, r=16)
    lp, tp = model_forward(tok, w, cfg.with_(attention_mode="precise"), r=16)
    assert ta.tokens_in == tp.tokens_in
    assert np.all(np.isfinite(lp))


def test_effective_r_rules():
    cfg = preset("deit-t")
    assert effective_r(197, 16, cfg, 0) == 0
    assert effective_r(197, 16, cfg, 1) == 16
    assert effective_r(21, 16, cfg, 5) == 11
    assert effective_r(10, 16, cfg, 5) == 0


def test_sizes_conserved_through_model(deit_s):
    cfg, w, img = deit_s
    _, trace = model_forward(patch_embed(img, w, cfg), w, cfg.with_(pooling_mode="max"), r=20)
    assignment = np.arange(197)
    for plan in trace.plans:
        assignment = plan.assignment()[assignment]
    assert len(np.unique(assignment)) == trace.final_tokens


def test_weights_roundtrip(tmp_path):
    w = ModelWeights.random(SMALL, 5)
    path = tmp_path / "w.mctf"
    w.save(path)
    back = ModelWeights.load(path, SMALL)
    for name, arr in w.items():
        assert back[name].tobytes() == arr.tobytes()


def test_weights_validation():
    tensors = dict(ModelWeights.random(SMALL, 0).items())
    tensors.pop("head.bias")
    with pytest.raises(ValueError):
        ModelWeights(tensors, SMALL)
    with pytest.raises(ValueError):
        ModelWeights.random(SMALL, 0).validate(SMALL.with_(embed_dim=48))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        ViTConfig(embed_dim=10, heads=3)
    with pytest.raises(ValueError):
        ViTConfig(attention_mode="exact")
    with pytest.raises(ValueError):
        preset("deit-xl")
    cfg = preset("deit-b", r_per_layer=8)
    assert ViTConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.n_tokens == 197 and cfg.head_dim == 64


def test_token_state_input_path():
    w = ModelWeights.random(SMALL, 2)
    feats = np.random.default_rng(2).normal(size=(17, 24)).astype(np.float32)
    logits, trace = model_forward(TokenState.fresh(feats), w, SMALL, r=4)
    assert trace.tokens_in == [17, 17, 13]
    assert logits.shape == (7,)
