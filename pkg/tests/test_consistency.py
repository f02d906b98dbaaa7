import math
from types import SimpleNamespace

import numpy as np
import pytest

from mctf.consistency import consistency_loss, cross_entropy, default_lambda, sample_r_prime
from mctf.vit import ModelWeights, ViTConfig, model_forward, patch_embed, random_image

CFG = ViTConfig(depth=2, embed_dim=24, heads=3, image_size=32, patch_size=8,
                num_classes=5, r_per_layer=3, fusion_start_block=0)


@pytest.fixture(scope="module")
def model():
    w = ModelWeights.random(CFG, 11, scale=0.3)
    return w, patch_embed(random_image(CFG, 11), w, CFG)


def fake_forward(logits_by_r, cls_by_r):
    def forward(x, weights, config, r):
        return np.asarray(logits_by_r[r], np.float32), SimpleNamespace(
            cls_embedding=np.asarray(cls_by_r[r], np.float32))
    return forward


def test_cross_entropy_examples():
    assert cross_entropy([0.0, 0.0], 1) == pytest.approx(math.log(2))
    assert cross_entropy([100.0, 0.0, 0.0], 0) == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy([1.0, 0.0], 0) == pytest.approx(-math.log(math.e / (math.e + 1)))
    assert cross_entropy([1.0, 0.0], 0) == pytest.approx(0.3133, abs=1e-4)
    with pytest.raises(ValueError):
        cross_entropy([1.0, 0.0], 2)


def test_r_prime_support_and_determinism():
    rng = np.random.default_rng(0)
    assert {sample_r_prime(1, rng) for _ in range(50)} == {0}
    assert sample_r_prime(0, rng) == 0
    a = [sample_r_prime(16, np.random.default_rng(9)) for _ in range(3)]
    b = [sample_r_prime(16, np.random.default_rng(9)) for _ in range(3)]
    assert a == b
    seq1 = np.random.default_rng(5)
    seq2 = np.random.default_rng(5)
    assert [sample_r_prime(16, seq1) for _ in range(100)] == [sample_r_prime(16, seq2) for _ in range(100)]


def test_r_prime_uniform_frequencies():
    rng = np.random.default_rng(2024)
    draws = np.array([sample_r_prime(4, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / draws.size
    assert freq.shape == (4,)
    assert np.all(np.abs(freq - 0.25) <= 0.01)
    assert max(sample_r_prime(4, rng, inclusive=True) for _ in range(200)) == 4


def test_lambda_zero_collapses(model):
    w, x = model
    res = consistency_loss(model_forward, w, CFG, x, 2, lam=0.0, r_prime=1)
    assert res.total == res.ce_fixed + res.ce_random


def test_forced_r_prime_equal_r(model):
    w, x = model
    res = consistency_loss(model_forward, w, CFG, x, 1, lam=3.0, beta_conf=0.0, r_prime=CFG.r_per_layer)
    assert res.mse_cls == 0.0
    assert res.total == 2 * res.ce_fixed
    assert res.r_prime_drawn == CFG.r_per_layer


def test_gate_closed_below_beta():
    fwd = fake_forward({4: [0.1, 0.0, 0.0], 1: [0.0, 0.0, 0.0]},
                       {4: [1.0, 1.0], 1: [0.0, 0.0]})
    res = consistency_loss(fwd, None, SimpleNamespace(r_per_layer=4), None, 0, lam=5.0, r_prime=1)
    assert res.confidence < 0.4 and res.gated
    assert res.mse_cls == pytest.approx(1.0)
    assert res.total == res.ce_fixed + res.ce_random


def test_gate_open_above_beta():
    fwd = fake_forward({4: [5.0, 0.0, 0.0], 1: [0.0, 0.0, 0.0]},
                       {4: [1.0, 1.0], 1: [0.0, 0.0]})
    res = consistency_loss(fwd, None, SimpleNamespace(r_per_layer=4), None, 0, lam=5.0, r_prime=1)
    assert res.confidence > 0.4 and not res.gated
    assert res.total == pytest.approx(res.ce_fixed + res.ce_random + 5.0)


def test_random_draw_is_seeded(model):
    w, x = model
    a = consistency_loss(model_forward, w, CFG, x, 0, rng=np.random.default_rng(3))
    b = consistency_loss(model_forward, w, CFG, x, 0, rng=np.random.default_rng(3))
    assert a == b
    assert 0 <= a.r_prime_drawn < CFG.r_per_layer


def test_default_lambdas():
    assert default_lambda("deit-t") == 1.0
    assert default_lambda("deit-s") == 3.0
