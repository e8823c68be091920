"""Variational parameter storage for a matrix of independent Gaussians.

A table holds per-entry means `mu` and unconstrained scales `rho`; the
standard deviation is softplus(rho) so optimization is unconstrained.
Sampling is reparametrized (mu + sigma * noise) and the KL divergence to a
frozen prior snapshot has the usual closed form, summed over all entries.
"""

from __future__ import annotations

import base64

import numpy as np


def softplus(x):
    """ln(1 + exp(x)), computed stably for large |x|."""
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for y > 0: ln(exp(y) - 1)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    """Derivative of softplus; appears in every d/drho chain."""
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(s: str, shape: tuple[int, int]) -> np.ndarray:
    buf = base64.b64decode(s.encode("ascii"))
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)


class PriorSnapshot:
    """Frozen (mu0, sigma0) matrices used as the prior in KL terms.

    Immutable after creation: the arrays are marked read-only.
    """

    __slots__ = ("mu0", "sigma0")

    def __init__(self, mu0: np.ndarray, sigma0: np.ndarray):
        mu0 = np.array(mu0, dtype=np.float64)
        sigma0 = np.array(sigma0, dtype=np.float64)
        if mu0.shape != sigma0.shape:
            raise ValueError(f"shape mismatch: mu0 {mu0.shape} vs sigma0 {sigma0.shape}")
        if np.any(sigma0 <= 0):
            raise ValueError("prior sigma0 must be strictly positive")
        mu0.setflags(write=False)
        sigma0.setflags(write=False)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "sigma0", sigma0)

    def __setattr__(self, name, value):
        raise AttributeError("PriorSnapshot is read-only")

    @property
    def shape(self):
        return self.mu0.shape

    def to_dict(self) -> dict:
        return {
            "rows": self.shape[0],
            "cols": self.shape[1],
            "mu0": _encode_array(self.mu0),
            "sigma0": _encode_array(self.sigma0),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSnapshot":
        shape = (d["rows"], d["cols"])
        return cls(_decode_array(d["mu0"], shape), _decode_array(d["sigma0"], shape))


class GaussianTable:
    """rows x cols matrix of independent Gaussian variational factors."""

    def __init__(self, mu: np.ndarray, rho: np.ndarray):
        mu = np.array(mu, dtype=np.float64)
        rho = np.array(rho, dtype=np.float64)
        if mu.ndim != 2 or mu.shape != rho.shape:
            raise ValueError(f"mu and rho must be equal-shape matrices, got {mu.shape} and {rho.shape}")
        self.mu = mu
        self.rho = rho

    @property
    def rows(self) -> int:
        return self.mu.shape[0]

    @property
    def cols(self) -> int:
        return self.mu.shape[1]

    @property
    def shape(self):
        return self.mu.shape

    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    def n_params(self) -> int:
        return 2 * self.mu.size

    def copy(self) -> "GaussianTable":
        return GaussianTable(self.mu.copy(), self.rho.copy())

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "mu": _encode_array(self.mu),
            "rho": _encode_array(self.rho),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianTable":
        shape = (d["rows"], d["cols"])
        return cls(_decode_array(d["mu"], shape), _decode_array(d["rho"], shape))


INIT_MU_SCALE = 0.1
INIT_SIGMA = 0.1


def init_table(rows: int, cols: int, rng: np.random.Generator) -> GaussianTable:
    """Fresh table: mu ~ N(0, 0.1^2) i.i.d., sigma = 0.1 exactly."""
    if rows < 1 or cols < 1:
        raise ValueError(f"table shape must be positive, got ({rows}, {cols})")
    mu = rng.normal(0.0, INIT_MU_SCALE, size=(rows, cols))
    rho = np.full((rows, cols), float(softplus_inv(INIT_SIGMA)))
    return GaussianTable(mu, rho)


def standard_prior(rows: int, cols: int) -> PriorSnapshot:
    """N(0, 1) on every entry."""
    return PriorSnapshot(np.zeros((rows, cols)), np.ones((rows, cols)))


def snapshot(table: GaussianTable) -> PriorSnapshot:
    """Freeze the table's current (mu, sigma) as an immutable prior."""
    return PriorSnapshot(table.mu.copy(), softplus(table.rho))


def sample_rows(table: GaussianTable, indices, noise: np.ndarray) -> np.ndarray:
    """Reparametrized draw of the selected rows: mu + sigma * noise.

    `noise` must be standard-normal of shape (len(indices), cols).  The
    caller owns the sharing policy: within one forward pass, duplicate
    row indices are expected to be passed with one shared noise row per
    distinct index (sample the distinct rows once, then gather).
    """
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= table.rows):
        raise ValueError(f"row index out of range [0, {table.rows})")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (indices.size, table.cols):
        raise ValueError(f"noise shape {noise.shape} != ({indices.size}, {table.cols})")
    mu = table.mu[indices]
    sig = softplus(table.rho[indices])
    return mu + sig * noise


def kl_to_prior(table: GaussianTable, prior: PriorSnapshot) -> float:
    """Closed-form KL( q || prior ) summed over all entries."""
    if table.shape != prior.shape:
        raise ValueError(f"shape mismatch: table {table.shape} vs prior {prior.shape}")
    sig = softplus(table.rho)
    return float(np.sum(
        np.log(prior.sigma0 / sig)
        + (sig ** 2 + (table.mu - prior.mu0) ** 2) / (2.0 * prior.sigma0 ** 2)
        - 0.5
    ))


def kl_gradients(table: GaussianTable, prior: PriorSnapshot):
    """(d KL/d mu, d KL/d rho) for every entry."""
    sig = softplus(table.rho)
    dmu = (table.mu - prior.mu0) / prior.sigma0 ** 2
    dsigma = sig / prior.sigma0 ** 2 - 1.0 / sig
    return dmu, dsigma * sigmoid(table.rho)
