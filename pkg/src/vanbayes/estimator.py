"""Scikit-learn style estimator for amortized parametric posteriors."""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import families as fam
from .network import FORMAT_VERSION, Network, TrainConfig, TrainHistory, decode_array, encode_array, train
from .summaries import PriorQuantileTransform


class VariationalPosterior(BaseEstimator):
    """Amortized posterior ``gamma | Z ~ family(a(Z; W))``.

    Each column of the target matrix gets its own network; all columns share
    the head ``family``.  Inputs are standardized with the training means and
    standard deviations.  With ``target_priors`` (one distribution spec per
    column) the head is fitted to ``Phi^{-1}(F(gamma))`` and every output is
    mapped back to the original scale.

    Parameters
    ----------
    family : str
        Head name, e.g. ``"het_normal"`` or ``"neg_binomial"``.
    hidden : tuple of int
        Hidden layer widths.
    target_priors : list of dict, optional
        Distribution specs for the quantile-normal target transform.

    The ``sample_weight`` argument of :meth:`fit` carries the importance weights.
    """

    def __init__(self, family="het_normal", hidden=(50, 10), activation="relu", epochs=50, batch_size=32,
                 learning_rate=1e-3, patience=5, validation_fraction=0.2, random_state=0,
                 standardize=True, target_priors=None):
        self.family = family
        self.hidden = hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.standardize = standardize
        self.target_priors = target_priors

    # -- helpers -----------------------------------------------------------
    @property
    def family_(self):
        return fam.get_family(self.family)

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           patience=self.patience, validation_fraction=self.validation_fraction,
                           seed=self.random_state)

    def _target_transform(self):
        if self.target_priors is None:
            return None
        return PriorQuantileTransform(list(self.target_priors)).fit()

    def _as_targets(self, y):
        y = np.asarray(y, dtype=float)
        return y.reshape(-1, 1) if y.ndim == 1 else y

    def _to_head_scale(self, y2):
        tt = self._target_transform()
        return y2 if tt is None else tt.transform(y2)

    def _from_head_scale(self, v):
        tt = self._target_transform()
        if tt is None:
            return v
        flat = np.asarray(v, dtype=float).reshape(-1, self.n_targets_)
        return tt.inverse_transform(flat).reshape(np.shape(v))

    def _scale_inputs(self, X):
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} summary features, got {X.shape[1]}")
        return (X - self.input_mean_) / self.input_scale_

    def _squeeze(self, v):
        return v[..., 0] if self.y_1d_ else v

    # -- fitting -----------------------------------------------------------
    def fit(self, X, y, sample_weight=None, validation=None):
        """Train one network per target column.

        ``validation`` is an optional ``(X_val, y_val[, w_val])`` tuple used for
        early stopping instead of an internal split.
        """
        X, y = check_X_y(X, y, dtype=float, multi_output=True, y_numeric=True)
        self.y_1d_ = y.ndim == 1
        y2 = self._as_targets(y)
        self.n_targets_ = y2.shape[1]
        self.n_features_in_ = X.shape[1]
        if self.target_priors is not None and len(self.target_priors) != self.n_targets_:
            raise ValueError("target_priors needs one distribution per target column")
        if self.standardize:
            self.input_mean_ = X.mean(axis=0)
            sd = X.std(axis=0)
            self.input_scale_ = np.where(sd > 0, sd, 1.0)
        else:
            self.input_mean_ = np.zeros(X.shape[1])
            self.input_scale_ = np.ones(X.shape[1])
        Z = (X - self.input_mean_) / self.input_scale_
        g = self._to_head_scale(y2)
        if sample_weight is not None:
            sample_weight = np.asarray(sample_weight, dtype=float)
        val = None
        if validation is not None:
            Xv, yv = validation[0], validation[1]
            wv = validation[2] if len(validation) > 2 else None
            val = (self._scale_inputs(Xv), self._to_head_scale(self._as_targets(yv)), wv)
        self.network_, self.history_ = train(Z, g, self.family_, self.hidden, self._train_config(),
                                             weights=sample_weight, validation=val, activation=self.activation)
        return self

    # -- raw outputs ---------------------------------------------------------
    def raw_outputs(self, X):
        """Raw head outputs, shape ``(B, K, n_raw)``."""
        check_is_fitted(self, "network_")
        return np.transpose(self.network_.forward(self._scale_inputs(X)), (1, 0, 2))

    def predict_params(self, X):
        """Natural head parameters per dataset (and target), on the head scale."""
        nat = self.family_.natural(self.raw_outputs(X))
        return {k: self._squeeze(v) for k, v in nat.items()}

    # -- posterior summaries ---------------------------------------------------
    def quantile(self, X, q):
        raw = self.raw_outputs(X)
        out = self.family_.quantile(raw, q).astype(float)
        return self._squeeze(self._from_head_scale(out))

    def predict(self, X):
        """Posterior median."""
        return self.quantile(X, 0.5)

    def interval(self, X, level=0.9):
        """Equal-tailed credible interval ``(lower, upper)``."""
        if not 0 < level < 1:
            raise ValueError("level must lie in (0, 1)")
        a = (1.0 - level) / 2.0
        return self.quantile(X, a), self.quantile(X, 1.0 - a)

    def log_density(self, X, y):
        raw = self.raw_outputs(X)
        y2 = self._as_targets(y)
        logp = self.family_.log_density(raw, self._to_head_scale(y2))
        tt = self._target_transform()
        if tt is not None:
            logp = logp + tt.log_jacobian(y2)
        return self._squeeze(logp)

    def cdf(self, X, y):
        raw = self.raw_outputs(X)
        return self._squeeze(self.family_.cdf(raw, self._to_head_scale(self._as_targets(y))))

    def pit(self, X, y, rng=None):
        """Probability integral transform; randomized between ``F(y-1)`` and ``F(y)``
        for discrete heads."""
        raw = self.raw_outputs(X)
        g = self._to_head_scale(self._as_targets(y))
        upper = self.family_.cdf(raw, g)
        if not self.family_.discrete:
            return self._squeeze(upper)
        rng = rng if rng is not None else np.random.default_rng(0)
        lower = np.where(g > 0, self.family_.cdf(raw, np.maximum(g - 1.0, 0.0)), 0.0)
        return self._squeeze(lower + rng.random(np.shape(upper)) * (upper - lower))

    def score(self, X, y, sample_weight=None):
        """Average log score (higher is better)."""
        logp = self._as_targets(self.log_density(X, y))
        per_record = logp.mean(axis=1)
        return float(np.average(per_record, weights=sample_weight))

    def sample(self, X, n_draws, rng):
        raw = self.raw_outputs(X)
        draws = self.family_.sample(raw, rng, size=(n_draws,) + raw.shape[:-1]).astype(float)
        return self._squeeze(self._from_head_scale(draws))

    # -- persistence -----------------------------------------------------------
    def to_dict(self):
        check_is_fitted(self, "network_")
        params = self.get_params()
        params["hidden"] = list(params["hidden"])
        return {
            "format": "vanbayes-posterior",
            "version": FORMAT_VERSION,
            "params": params,
            "link_clamps": {"scale_min": fam.SCALE_MIN, "scale_max": fam.SCALE_MAX, "prob_min": fam.PROB_MIN},
            "n_features_in": self.n_features_in_,
            "n_targets": self.n_targets_,
            "y_1d": bool(self.y_1d_),
            "input_mean": encode_array(self.input_mean_),
            "input_scale": encode_array(self.input_scale_),
            "network": self.network_.to_dict(),
            "history": self.history_.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "vanbayes-posterior" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported posterior file")
        params = dict(d["params"])
        params["hidden"] = tuple(params["hidden"])
        est = cls(**params)
        est.n_features_in_ = d["n_features_in"]
        est.n_targets_ = d["n_targets"]
        est.y_1d_ = d["y_1d"]
        est.input_mean_ = decode_array(d["input_mean"])
        est.input_scale_ = decode_array(d["input_scale"])
        est.network_ = Network.from_dict(d["network"])
        est.history_ = TrainHistory(**d["history"])
        return est

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
