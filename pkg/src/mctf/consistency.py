"""Forward-only token-reduction-consistency objective.

Two forwards of the same input at reduction ``r`` and a smaller random
``r'`` are scored with cross-entropy, and their final class tokens are tied
together with an MSE term. The MSE term is only kept when the ``r``
forward is confident enough.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .vit import model_forward

DEFAULT_BETA = 0.4
LAMBDA_DEFAULTS = {"deit-t": 1.0, "deit-s": 3.0}


@dataclass
class ConsistencyBatchResult:
    ce_fixed: float
    ce_random: float
    mse_cls: float
    r_prime_drawn: int
    gated: bool
    total: float
    confidence: float = 0.0

    def to_dict(self):
        return asdict(self)


def _log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def cross_entropy(logits, label):
    logits = np.asarray(logits).reshape(-1)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    return float(max(0.0, -_log_softmax(logits)[label]))


def sample_r_prime(r, rng, inclusive=False):
    """Uniform draw from {0, ..., r-1}, or {0, ..., r} when ``inclusive``."""
    if r <= 0:
        return 0
    return int(rng.integers(0, r + 1 if inclusive else r))


def default_lambda(preset_name):
    return LAMBDA_DEFAULTS.get(preset_name, 1.0)


def consistency_loss(forward, weights, config, x, y, lam=1.0, beta_conf=DEFAULT_BETA,
                     rng=None, r_prime=None, inclusive=False):
    """Evaluate the objective for one sample.

    ``forward`` has the signature of :func:`mctf.vit.model_forward` and must
    return a trace exposing ``cls_embedding``. Passing ``r_prime`` skips the
    random draw.
    """
    forward = forward or model_forward
    r = config.r_per_layer
    if r_prime is None:
        rng = rng if rng is not None else np.random.default_rng()
        r_prime = sample_r_prime(r, rng, inclusive)

    logits_r, trace_r = forward(x, weights, config, r=r)
    logits_p, trace_p = forward(x, weights, config, r=r_prime)

    ce_fixed = cross_entropy(logits_r, y)
    ce_random = cross_entropy(logits_p, y)
    diff = trace_r.cls_embedding.astype(np.float64) - trace_p.cls_embedding.astype(np.float64)
    mse = float(np.mean(diff * diff))
    confidence = float(np.exp(_log_softmax(logits_r)).max())
    gated = not confidence > beta_conf
    total = ce_fixed + ce_random
    if not gated:
        total = total + lam * mse
    return ConsistencyBatchResult(ce_fixed, ce_random, mse, int(r_prime), gated, total, confidence)
