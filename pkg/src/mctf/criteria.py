"""Per-pair criterion weights and the combined multi-criteria attraction."""
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import DTYPE, as_matrix, cosine_normalize

INFO_FLOOR = 1e-8
# keeps antipodal pairs strictly positive once raised to a temperature
SIM_FLOOR = 1e-8


@dataclass(frozen=True)
class TokenState:
    """Token features plus the size and informativeness trackers.

    ``features`` is N x C. ``sizes`` counts how many original tokens each row
    absorbed; ``info`` holds the attention-derived informativeness score.
    When ``cls_present`` is set, row 0 is the class token.
    """

    features: np.ndarray
    sizes: np.ndarray
    info: np.ndarray
    cls_present: bool = True

    def __post_init__(self):
        feats = as_matrix(self.features)
        sizes = np.asarray(self.sizes, dtype=np.int64).reshape(-1)
        info = np.asarray(self.info, dtype=DTYPE).reshape(-1)
        if not (feats.shape[0] == sizes.shape[0] == info.shape[0]):
            raise ValueError(
                f"row counts disagree: features {feats.shape[0]}, "
                f"sizes {sizes.shape[0]}, info {info.shape[0]}"
            )
        if sizes.size and sizes.min() < 1:
            raise ValueError("token sizes must be >= 1")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "info", info)

    @classmethod
    def fresh(cls, features, cls_present=True):
        feats = as_matrix(features)
        n = feats.shape[0]
        return cls(feats, np.ones(n, dtype=np.int64), np.ones(n, dtype=DTYPE), cls_present)

    @property
    def n_tokens(self):
        return self.features.shape[0]

    @property
    def n_fusible(self):
        return self.n_tokens - (1 if self.cls_present else 0)

    def take(self, idx):
        """Row subset as a view-like state (class flag dropped)."""
        idx = np.asarray(idx, dtype=np.int64)
        return TokenState(self.features[idx], self.sizes[idx], self.info[idx], False)

    def with_info(self, info):
        return replace(self, info=np.asarray(info, dtype=DTYPE))


@dataclass(frozen=True)
class CriteriaTemperatures:
    tau_sim: float = 1.0 / 20
    tau_info: float = 1.0
    tau_size: float = 1.0 / 40
    enable_sim: bool = True
    enable_info: bool = True
    enable_size: bool = True

    def __post_init__(self):
        for name in ("sim", "info", "size"):
            if getattr(self, f"enable_{name}") and not getattr(self, f"tau_{name}") > 0:
                raise ValueError(f"tau_{name} must be positive when enabled")

    @classmethod
    def from_code(cls, code, **taus):
        """Criteria subsets by short code: ``s``, ``si`` or ``sis``."""
        flags = {
            "s": (True, False, False),
            "si": (True, True, False),
            "sis": (True, True, True),
        }
        if code not in flags:
            raise ValueError(f"unknown criteria code {code!r}; expected s, si or sis")
        sim, info, size = flags[code]
        return cls(enable_sim=sim, enable_info=info, enable_size=size, **taus)

    @property
    def code(self):
        return {
            (True, False, False): "s",
            (True, True, False): "si",
            (True, True, True): "sis",
        }.get((self.enable_sim, self.enable_info, self.enable_size), "custom")

    def scaled(self, factor):
        return replace(
            self,
            tau_sim=self.tau_sim * factor,
            tau_info=self.tau_info * factor,
            tau_size=self.tau_size * factor,
        )


def similarity_weight(x_i, x_j):
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    ni, nj = np.linalg.norm(x_i), np.linalg.norm(x_j)
    cos = 0.0 if ni == 0 or nj == 0 else float(np.dot(x_i, x_j) / (ni * nj))
    return 0.5 * (min(max(cos, -1.0), 1.0) + 1.0)


def informativeness_weight(a_i, a_j):
    return 1.0 / (max(a_i, INFO_FLOOR) * max(a_j, INFO_FLOOR))


def size_weight(s_i, s_j):
    if s_i < 1 or s_j < 1:
        raise ValueError("sizes must be >= 1")
    return 1.0 / (s_i * s_j)


def pairwise_similarity(src_feats, tgt_feats):
    """Matrix of ``(cos + 1) / 2`` between every source and target row.

    Summation runs over the same elementwise products in the same order for
    (i, j) and (j, i), so swapping the operands yields an exact transpose.
    """
    a = cosine_normalize(src_feats)
    b = cosine_normalize(tgt_feats)
    cos = (a[:, None, :] * b[None, :, :]).sum(axis=-1, dtype=DTYPE)
    return (DTYPE(0.5) * (np.clip(cos, -1.0, 1.0) + DTYPE(1.0))).astype(DTYPE)


def attraction_matrix(source, target, temps=None, sim_features=None):
    """Multi-criteria attraction between a source and a target token set.

    Entry (i, j) is the product over enabled criteria of the criterion
    weight raised to its temperature. ``sim_features`` optionally replaces
    the token features for the similarity term (e.g. attention keys), as a
    pair ``(source_rows, target_rows)``.
    """
    temps = temps or CriteriaTemperatures()
    n_src, n_tgt = source.n_tokens, target.n_tokens
    w = np.ones((n_src, n_tgt), dtype=DTYPE)
    if n_src == 0 or n_tgt == 0:
        return w
    if temps.enable_sim:
        src_f, tgt_f = sim_features if sim_features is not None else (
            source.features, target.features)
        sim = np.maximum(pairwise_similarity(src_f, tgt_f), DTYPE(SIM_FLOOR))
        w = w * sim ** DTYPE(temps.tau_sim)
    if temps.enable_info:
        a_s = np.maximum(source.info, DTYPE(INFO_FLOOR))
        a_t = np.maximum(target.info, DTYPE(INFO_FLOOR))
        info = DTYPE(1.0) / (a_s[:, None] * a_t[None, :])
        w = w * info ** DTYPE(temps.tau_info)
    if temps.enable_size:
        s_s = source.sizes.astype(DTYPE)
        s_t = target.sizes.astype(DTYPE)
        size = DTYPE(1.0) / (s_s[:, None] * s_t[None, :])
        w = w * size ** DTYPE(temps.tau_size)
    return w.astype(DTYPE)
