"""Dense float32 kernels shared by the fusion engine and the ViT forward pass.

Matrices are plain 2-D ``numpy`` arrays of dtype float32. Every function
returns a new array and leaves its inputs untouched.
"""
import numpy as np

DTYPE = np.float32
LN_EPS = 1e-6

_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(m):
    arr = np.asarray(m, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax(m, bias=None):
    """Softmax over each row, optionally adding a per-column bias first.

    The bias is how proportional attention enters: passing ``log(sizes)``
    gives ``softmax(logits + log s)``.
    """
    m = as_matrix(m)
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE).reshape(-1)
        if bias.shape[0] != m.shape[1]:
            raise ShapeError(f"bias length {bias.shape[0]} != {m.shape[1]} columns")
        m = m + bias[None, :]
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(DTYPE)


def layer_norm(m, gain, shift, eps=LN_EPS):
    m = as_matrix(m)
    gain = np.asarray(gain, dtype=DTYPE).reshape(-1)
    shift = np.asarray(shift, dtype=DTYPE).reshape(-1)
    if gain.shape[0] != m.shape[1] or shift.shape[0] != m.shape[1]:
        raise ShapeError("gain/shift length must equal the number of columns")
    mean = m.mean(axis=1, keepdims=True)
    var = ((m - mean) ** 2).mean(axis=1, keepdims=True)
    normed = (m - mean) / np.sqrt(var + DTYPE(eps))
    return (normed * gain + shift).astype(DTYPE)


def gelu(m):
    # tanh approximation
    x = np.asarray(m, dtype=DTYPE)
    inner = _GELU_C * (x + DTYPE(0.044715) * x * x * x)
    return (DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(inner))).astype(DTYPE)


def cosine_normalize(m):
    """Scale rows to unit L2 norm; zero rows stay zero."""
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, DTYPE(1.0))
    return (m / safe).astype(DTYPE)
