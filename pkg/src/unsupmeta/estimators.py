"""scikit-learn compatible wrappers.

``LearnedRuleEmbedder`` trains a base model on unlabeled rows with a learned
update rule and exposes the top-layer embedding through ``transform``.
``RidgeProbeClassifier`` is the few-shot ridge probe used for evaluation.
They compose in a ``Pipeline``::

    Pipeline([("embed", LearnedRuleEmbedder(steps=500)), ("probe", RidgeProbeClassifier())])
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from . import tensor as T
from .base_model import ArchSpec, embed, init_params
from .meta_objective import center_normalize_targets, ridge_solve
from .update_rule import init_theta, unsupervised_update


def check_features(estimator, X, reset: bool, min_samples: int = 2) -> np.ndarray:
    """2-D, finite float64 matrix; ``reset`` records (or else checks) the feature count."""
    return validate_data(estimator, X, dtype=np.float64, ensure_min_samples=min_samples, reset=reset)


class LearnedRuleEmbedder(TransformerMixin, BaseEstimator):
    """Unsupervised feature learner driven by a (meta-learned) update rule.

    Parameters
    ----------
    theta_path : str or None
        Checkpoint with rule parameters; ``None`` uses a freshly initialised
        rule from ``profile``.
    hidden : tuple of int
        Hidden widths of the base model.
    steps : int
        Number of rule applications during ``fit``.
    """

    def __init__(self, theta_path=None, profile: str = "desk", hidden=(32, 32), embed_dim: int = 32,
                 activation: str = "relu", steps: int = 200, seed: int = 0):
        self.theta_path = theta_path
        self.profile = profile
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.activation = activation
        self.steps = steps
        self.seed = seed

    def _theta(self):
        if self.theta_path is not None:
            from .checkpoint import load_theta

            return load_theta(self.theta_path)[0]
        from .config import get_profile

        return init_theta(get_profile(self.profile).rule, [self.seed, 0x7E7A])

    def fit(self, X, y=None):
        X = check_features(self, X, reset=True)
        theta = self._theta()
        B = theta.cfg.batch_size
        if X.shape[0] < B:
            raise ValueError(f"need at least {B} rows (the rule's fixed batch size)")
        arch = ArchSpec((X.shape[1],) + tuple(self.hidden) + (self.embed_dim,), self.activation)
        params = init_params(arch, [self.seed, 11])
        rng = np.random.default_rng([self.seed, 3])
        for _ in range(self.steps):
            rows = rng.choice(X.shape[0], size=B, replace=False)
            params, _ = unsupervised_update(X[rows], params, theta)
            params = params.detach()
        self.params_ = params
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        # batch-norm statistics come from the batch itself, so two rows are the minimum
        X = check_features(self, X, reset=False)
        return embed(X, self.params_).data.copy()


class RidgeProbeClassifier(ClassifierMixin, BaseEstimator):
    """Closed-form ridge regression on centered, row-normalized one-hot targets."""

    def __init__(self, ridge_penalty: float = 0.1):
        self.ridge_penalty = ridge_penalty

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64, ensure_min_samples=2)
        check_classification_targets(y)
        if self.ridge_penalty <= 0:
            raise ValueError("ridge_penalty must be positive")
        self.classes_, idx = np.unique(y, return_inverse=True)
        onehot = np.zeros((len(y), len(self.classes_)))
        onehot[np.arange(len(y)), idx] = 1.0
        sol = ridge_solve(T.Tensor(X), center_normalize_targets(onehot), self.ridge_penalty)
        self.coef_ = sol.C.data.copy()
        return self

    def decision_function(self, X):
        """Per-class scores; for two classes, the second score minus the first."""
        check_is_fitted(self, "coef_")
        scores = self._scores(X)
        return scores[:, 1] - scores[:, 0] if len(self.classes_) == 2 else scores

    def _scores(self, X):
        check_is_fitted(self, "coef_")
        X = check_features(self, X, reset=False, min_samples=1)
        return np.hstack([X, np.ones((len(X), 1))]) @ self.coef_

    def predict(self, X):
        check_is_fitted(self, "coef_")
        # argmax picks the lowest index on ties
        return self.classes_[np.argmax(self._scores(X), axis=1)]
