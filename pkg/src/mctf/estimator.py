"""scikit-learn style wrappers around the fusion engine and the ViT.

``MCTFTransformer`` reduces one token matrix (rows are tokens, not
samples), so it is meant for direct use rather than inside a ``Pipeline``.
``MCTFViTClassifier`` behaves like a normal classifier over image batches.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .criteria import CriteriaTemperatures, TokenState
from .fusion import mctf_reduce
from .vit import ModelWeights, model_forward, patch_embed, preset


class MCTFTransformer(TransformerMixin, BaseEstimator):
    """Fuse ``r`` tokens of an (N, C) token matrix in one bidirectional step.

    There is nothing to learn; ``fit`` only records the feature count.
    ``transform`` stores the last plan, sizes and informativeness as
    ``plan_``, ``sizes_`` and ``info_``.
    """

    def __init__(self, r=8, criteria="sis", tau_sim=1 / 20, tau_info=1.0, tau_size=1 / 40,
                 direction="bidirectional", pooling="weighted", cls_token=True):
        self.r = r
        self.criteria = criteria
        self.tau_sim = tau_sim
        self.tau_info = tau_info
        self.tau_size = tau_size
        self.direction = direction
        self.pooling = pooling
        self.cls_token = cls_token

    def _temps(self):
        return CriteriaTemperatures.from_code(
            self.criteria, tau_sim=self.tau_sim, tau_info=self.tau_info, tau_size=self.tau_size)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        self.n_features_in_ = X.shape[1]
        self._temps()
        return self

    def transform(self, X, info=None, sizes=None):
        """``info`` defaults to uniform scores; ``sizes`` to ones."""
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        n = X.shape[0]
        info = np.full(n, 1.0 / n, dtype=np.float32) if info is None else np.asarray(info, np.float32)
        sizes = np.ones(n, dtype=np.int64) if sizes is None else np.asarray(sizes)
        state = TokenState(X, sizes, info, self.cls_token)
        out, plan = mctf_reduce(state, info, self._temps(), self.r,
                                direction=self.direction, pooling=self.pooling)
        self.plan_, self.sizes_, self.info_ = plan, out.sizes, out.info
        return out.features


class MCTFViTClassifier(ClassifierMixin, BaseEstimator):
    """DeiT-shaped classifier with token fusion, on seeded random or loaded weights.

    ``fit`` builds the model; it does not train. ``config`` overrides the
    preset entirely when given.
    """

    def __init__(self, preset="deit-s", r=16, seed=0, weights_path=None, config=None,
                 attention_mode="approximated", matching_mode="bidirectional",
                 pooling_mode="weighted", criteria="sis"):
        self.preset = preset
        self.r = r
        self.seed = seed
        self.weights_path = weights_path
        self.config = config
        self.attention_mode = attention_mode
        self.matching_mode = matching_mode
        self.pooling_mode = pooling_mode
        self.criteria = criteria

    def _build_config(self):
        base = self.config if self.config is not None else preset(self.preset)
        return base.with_(
            r_per_layer=self.r,
            attention_mode=self.attention_mode,
            matching_mode=self.matching_mode,
            pooling_mode=self.pooling_mode,
            temps=CriteriaTemperatures.from_code(self.criteria),
        )

    def _check_images(self, X):
        X = check_array(X, dtype=np.float32, allow_nd=True, ensure_2d=False)
        cfg = self.config_
        expect = (cfg.image_size, cfg.image_size, cfg.in_chans)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != expect:
            raise ValueError(f"expected images of shape (n, {', '.join(map(str, expect))}), got {X.shape}")
        return X

    def fit(self, X=None, y=None):
        self.config_ = self._build_config()
        if self.weights_path is not None:
            self.weights_ = ModelWeights.load(self.weights_path, self.config_)
        else:
            self.weights_ = ModelWeights.random(self.config_, seed=self.seed)
        self.classes_ = np.arange(self.config_.num_classes)
        if X is not None:
            self._check_images(X)
        return self

    def _forward(self, X):
        check_is_fitted(self, "weights_")
        X = self._check_images(X)
        logits, cls = [], []
        for img in X:
            lg, trace = model_forward(patch_embed(img, self.weights_, self.config_),
                                      self.weights_, self.config_)
            logits.append(lg)
            cls.append(trace.cls_embedding)
        return np.stack(logits), np.stack(cls)

    def decision_function(self, X):
        return self._forward(X)[0]

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        """Final-layer class-token embeddings, one row per image."""
        return self._forward(X)[1]
