"""Parametric likelihood heads with analytic gradients.

Every head knows how to score a target given a feature vector, to predict,
and to return exact gradients of the log-likelihood with respect to both
its own parameters and the input features (so the chain rule can continue
into the embedding tables).  Batch variants operate on (n, F) matrices and
return parameter gradients summed over the batch.

Scalar biases are stored as shape-(1,) arrays: the optimizer updates all
parameters in place through the dict returned by `params()`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from .gaussian_table import _decode_array, _encode_array


def _logsumexp(z, axis=-1, keepdims=False):
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _as_param(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64)).copy()


class CategoricalLinear:
    """softmax(W^T f + b) over C classes; linear in the features."""

    variant = "categorical-linear"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.array(weight, dtype=np.float64)   # (F, C)
        self.bias = np.array(bias, dtype=np.float64)       # (C,)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("weight must be (F, C) and bias (C,)")

    @property
    def feature_dim(self):
        return self.weight.shape[0]

    @property
    def n_classes(self):
        return self.weight.shape[1]

    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def _check_target(self, y):
        y = int(y)
        if not 0 <= y < self.n_classes:
            raise ValueError(f"class index {y} out of range [0, {self.n_classes})")
        return y

    def log_lik(self, features, target) -> float:
        y = self._check_target(target)
        z = features @ self.weight + self.bias
        return float(z[y] - _logsumexp(z))

    def predict(self, features) -> np.ndarray:
        z = features @ self.weight + self.bias
        return np.exp(z - _logsumexp(z))

    def grad(self, features, target):
        y = self._check_target(target)
        z = features @ self.weight + self.bias
        p = np.exp(z - _logsumexp(z))
        dz = -p
        dz[y] += 1.0
        dtheta = {"weight": np.outer(features, dz), "bias": dz}
        return dtheta, self.weight @ dz

    def log_lik_batch(self, features, targets) -> np.ndarray:
        z = features @ self.weight + self.bias
        return z[np.arange(len(targets)), targets] - _logsumexp(z, axis=1)

    def predict_batch(self, features) -> np.ndarray:
        z = features @ self.weight + self.bias
        return np.exp(z - _logsumexp(z, axis=1, keepdims=True))

    def grad_batch(self, features, targets):
        z = features @ self.weight + self.bias
        p = np.exp(z - _logsumexp(z, axis=1, keepdims=True))
        dz = -p
        dz[np.arange(len(targets)), targets] += 1.0
        dtheta = {"weight": features.T @ dz, "bias": dz.sum(axis=0)}
        return dtheta, dz @ self.weight.T

    def copy(self):
        return CategoricalLinear(self.weight.copy(), self.bias.copy())

    def to_dict(self):
        return {
            "variant": self.variant,
            "feature_dim": self.feature_dim,
            "n_classes": self.n_classes,
            "weight": _encode_array(self.weight),
            "bias": _encode_array(self.bias.reshape(1, -1)),
        }

    @classmethod
    def from_dict(cls, d):
        w = _decode_array(d["weight"], (d["feature_dim"], d["n_classes"]))
        b = _decode_array(d["bias"], (1, d["n_classes"]))[0]
        return cls(w, b)


class GaussianMLP:
    """Gaussian observation model whose mean is a tanh MLP (F -> H -> 1).

    The observation scale sigma_y is a fixed hyperparameter, not learned.
    """

    variant = "gaussian-mlp"

    def __init__(self, w1, b1, w2, b2, sigma_y: float = 0.1):
        self.w1 = np.array(w1, dtype=np.float64)   # (F, H)
        self.b1 = np.array(b1, dtype=np.float64)   # (H,)
        self.w2 = np.array(w2, dtype=np.float64)   # (H,)
        self.b2 = _as_param(b2)                    # (1,)
        if sigma_y <= 0:
            raise ValueError("sigma_y must be > 0")
        self.sigma_y = float(sigma_y)

    @property
    def feature_dim(self):
        return self.w1.shape[0]

    @property
    def hidden_dim(self):
        return self.w1.shape[1]

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def mean(self, features) -> float:
        h = np.tanh(features @ self.w1 + self.b1)
        return float(h @ self.w2 + self.b2[0])

    def log_lik(self, features, target) -> float:
        m = self.mean(features)
        return float(-(target - m) ** 2 / (2 * self.sigma_y ** 2)
                     - np.log(self.sigma_y * np.sqrt(2 * np.pi)))

    def predict(self, features) -> float:
        return self.mean(features)

    def grad(self, features, target):
        pre = features @ self.w1 + self.b1
        h = np.tanh(pre)
        m = float(h @ self.w2 + self.b2[0])
        dm = (target - m) / self.sigma_y ** 2
        dh = self.w2 * dm
        dpre = dh * (1.0 - h ** 2)
        dtheta = {
            "w1": np.outer(features, dpre),
            "b1": dpre,
            "w2": h * dm,
            "b2": np.atleast_1d(np.float64(dm)),
        }
        return dtheta, self.w1 @ dpre

    def log_lik_batch(self, features, targets) -> np.ndarray:
        h = np.tanh(features @ self.w1 + self.b1)
        m = h @ self.w2 + self.b2[0]
        return (-(targets - m) ** 2 / (2 * self.sigma_y ** 2)
                - np.log(self.sigma_y * np.sqrt(2 * np.pi)))

    def predict_batch(self, features) -> np.ndarray:
        h = np.tanh(features @ self.w1 + self.b1)
        return h @ self.w2 + self.b2[0]

    def grad_batch(self, features, targets):
        pre = features @ self.w1 + self.b1
        h = np.tanh(pre)
        m = h @ self.w2 + self.b2[0]
        dm = (targets - m) / self.sigma_y ** 2
        dh = dm[:, None] * self.w2[None, :]
        dpre = dh * (1.0 - h ** 2)
        dtheta = {
            "w1": features.T @ dpre,
            "b1": dpre.sum(axis=0),
            "w2": h.T @ dm,
            "b2": np.atleast_1d(dm.sum()),
        }
        return dtheta, dpre @ self.w1.T

    def copy(self):
        return GaussianMLP(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                           self.b2.copy(), self.sigma_y)

    def to_dict(self):
        return {
            "variant": self.variant,
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "sigma_y": self.sigma_y,
            "w1": _encode_array(self.w1),
            "b1": _encode_array(self.b1.reshape(1, -1)),
            "w2": _encode_array(self.w2.reshape(1, -1)),
            "b2": float(self.b2[0]),
        }

    @classmethod
    def from_dict(cls, d):
        w1 = _decode_array(d["w1"], (d["feature_dim"], d["hidden_dim"]))
        b1 = _decode_array(d["b1"], (1, d["hidden_dim"]))[0]
        w2 = _decode_array(d["w2"], (1, d["hidden_dim"]))[0]
        return cls(w1, b1, w2, d["b2"], d["sigma_y"])


class PoissonLinear:
    """Poisson counts with log-link: rate = exp(w^T f + b)."""

    variant = "poisson-linear"

    def __init__(self, weight, bias):
        self.weight = np.array(weight, dtype=np.float64)   # (F,)
        self.bias = _as_param(bias)                        # (1,)

    @property
    def feature_dim(self):
        return self.weight.shape[0]

    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    @staticmethod
    def _check_target(y):
        if y < 0 or int(y) != y:
            raise ValueError(f"poisson target must be a nonnegative integer, got {y!r}")
        return float(y)

    def log_lik(self, features, target) -> float:
        y = self._check_target(target)
        eta = float(features @ self.weight + self.bias[0])
        return y * eta - np.exp(eta) - float(gammaln(y + 1.0))

    def predict(self, features) -> float:
        return float(np.exp(features @ self.weight + self.bias[0]))

    def grad(self, features, target):
        y = self._check_target(target)
        eta = float(features @ self.weight + self.bias[0])
        deta = y - np.exp(eta)
        dtheta = {"weight": features * deta, "bias": np.atleast_1d(np.float64(deta))}
        return dtheta, self.weight * deta

    def log_lik_batch(self, features, targets) -> np.ndarray:
        eta = features @ self.weight + self.bias[0]
        y = np.asarray(targets, dtype=np.float64)
        return y * eta - np.exp(eta) - gammaln(y + 1.0)

    def predict_batch(self, features) -> np.ndarray:
        return np.exp(features @ self.weight + self.bias[0])

    def grad_batch(self, features, targets):
        eta = features @ self.weight + self.bias[0]
        deta = np.asarray(targets, dtype=np.float64) - np.exp(eta)
        dtheta = {"weight": features.T @ deta, "bias": np.atleast_1d(deta.sum())}
        return dtheta, deta[:, None] * self.weight[None, :]

    def copy(self):
        return PoissonLinear(self.weight.copy(), self.bias.copy())

    def to_dict(self):
        return {
            "variant": self.variant,
            "feature_dim": self.feature_dim,
            "weight": _encode_array(self.weight.reshape(1, -1)),
            "bias": float(self.bias[0]),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(_decode_array(d["weight"], (1, d["feature_dim"]))[0], d["bias"])


class GaussianLinear:
    """Gaussian observation model with a linear mean w^T f + b.

    Degenerate cousin of GaussianMLP used by the closed-form forgetting
    demo: with w frozen at ones, b = 0 and sigma_y = 1 the model reduces
    to a plain sum of embeddings under squared loss.
    """

    variant = "gaussian-linear"

    def __init__(self, weight, bias, sigma_y: float = 1.0):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = _as_param(bias)
        if sigma_y <= 0:
            raise ValueError("sigma_y must be > 0")
        self.sigma_y = float(sigma_y)

    @property
    def feature_dim(self):
        return self.weight.shape[0]

    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def mean(self, features) -> float:
        return float(features @ self.weight + self.bias[0])

    def log_lik(self, features, target) -> float:
        m = self.mean(features)
        return float(-(target - m) ** 2 / (2 * self.sigma_y ** 2)
                     - np.log(self.sigma_y * np.sqrt(2 * np.pi)))

    def predict(self, features) -> float:
        return self.mean(features)

    def grad(self, features, target):
        dm = (target - self.mean(features)) / self.sigma_y ** 2
        dtheta = {"weight": features * dm, "bias": np.atleast_1d(np.float64(dm))}
        return dtheta, self.weight * dm

    def log_lik_batch(self, features, targets) -> np.ndarray:
        m = features @ self.weight + self.bias[0]
        return (-(targets - m) ** 2 / (2 * self.sigma_y ** 2)
                - np.log(self.sigma_y * np.sqrt(2 * np.pi)))

    def predict_batch(self, features) -> np.ndarray:
        return features @ self.weight + self.bias[0]

    def grad_batch(self, features, targets):
        m = features @ self.weight + self.bias[0]
        dm = (targets - m) / self.sigma_y ** 2
        dtheta = {"weight": features.T @ dm, "bias": np.atleast_1d(dm.sum())}
        return dtheta, dm[:, None] * self.weight[None, :]

    def copy(self):
        return GaussianLinear(self.weight.copy(), self.bias.copy(), self.sigma_y)

    def to_dict(self):
        return {
            "variant": self.variant,
            "feature_dim": self.feature_dim,
            "sigma_y": self.sigma_y,
            "weight": _encode_array(self.weight.reshape(1, -1)),
            "bias": float(self.bias[0]),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(_decode_array(d["weight"], (1, d["feature_dim"]))[0], d["bias"], d["sigma_y"])


_VARIANTS = {
    cls.variant: cls
    for cls in (CategoricalLinear, GaussianMLP, PoissonLinear, GaussianLinear)
}


def head_from_dict(d: dict):
    return _VARIANTS[d["variant"]].from_dict(d)


HEAD_INIT_SCALE = 0.1


def new_categorical_linear(feature_dim: int, n_classes: int, rng: np.random.Generator) -> CategoricalLinear:
    return CategoricalLinear(rng.normal(0.0, HEAD_INIT_SCALE, (feature_dim, n_classes)),
                             np.zeros(n_classes))


def new_gaussian_mlp(feature_dim: int, rng: np.random.Generator,
                     hidden_dim: int = 64, sigma_y: float = 0.1) -> GaussianMLP:
    return GaussianMLP(rng.normal(0.0, HEAD_INIT_SCALE, (feature_dim, hidden_dim)),
                       np.zeros(hidden_dim),
                       rng.normal(0.0, HEAD_INIT_SCALE, hidden_dim),
                       0.0, sigma_y)


def new_poisson_linear(feature_dim: int, rng: np.random.Generator) -> PoissonLinear:
    return PoissonLinear(rng.normal(0.0, HEAD_INIT_SCALE, feature_dim), 0.0)
