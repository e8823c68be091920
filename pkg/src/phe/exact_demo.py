"""Closed-form forgetting analysis on a 3-bucket linear model.

Two items share the middle bucket: item 0 reads rows (0, 1), item 1 reads
rows (1, 2), and the predictor is the plain sum of its two rows.  Targets
are +1 and -1.  Online gradient descent on this model provably forgets
(its final state depends on arrival order), while exact conjugate Gaussian
inference is order-invariant: the sequential posterior equals the batch
posterior for every permutation of the data.

The same scenario can be driven through the full variational stack: the
experiment seed below makes the production hash functions reproduce the
fixed bucket layout for items "m0" and "m1", so the hashed encoder, the
linear-Gaussian head, and the online trainer are all exercised end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .hashing import HashSpec
from .inference import (ModelState, TrainConfig, advance_stage, fit_initial,
                        fit_online, new_model_state, predict_mean)
from .likelihoods import GaussianLinear
from .phe_encoder import EncoderConfig, RecordLayout

# Experiment seed whose derived hash seeds map  m0 -> rows (0, 1)  and
# m1 -> rows (1, 2)  at B=3, K=2 (verified by test_demo_hash_layout).
DEMO_HASH_SEED = 21
DEMO_ITEMS = ("m0", "m1")

DESIGN = {0: np.array([1.0, 1.0, 0.0]), 1: np.array([0.0, 1.0, 1.0])}
TARGET = {0: 1.0, 1: -1.0}

OGD_DIVERGENCE_LIMIT = 1e6


@dataclass
class DemoModel:
    """OGD state for the 3-bucket predictor f(X) = e[h1(X)] + e[h2(X)]."""

    eta: float
    noise_sigma: float = 0.0
    e: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def predict(self, x: int) -> float:
        return float(DESIGN[x] @ self.e)

    def step(self, x: int, y: float) -> None:
        g = self.predict(x) - y
        self.e = self.e - self.eta * g * DESIGN[x]
        if np.max(np.abs(self.e)) > OGD_DIVERGENCE_LIMIT:
            raise NumericalError(f"OGD diverged: |e| exceeded {OGD_DIVERGENCE_LIMIT:g}")


def default_schedule(n_per_phase: int) -> list[int]:
    """N arrivals of item 0 followed by N arrivals of item 1."""
    return [0] * n_per_phase + [1] * n_per_phase


def ogd_run(eta: float, n_per_phase: int, schedule: list[int] | None = None,
            noise_sigma: float = 0.0, rng: np.random.Generator | None = None):
    """Run online gradient descent; returns (trajectory, final predictions).

    The trajectory has one row per state, starting at the zero
    initialization, so it holds len(schedule)+1 rows.
    """
    if schedule is None:
        schedule = default_schedule(n_per_phase)
    model = DemoModel(eta=eta, noise_sigma=noise_sigma)
    traj = np.zeros((len(schedule) + 1, 3))
    for t, x in enumerate(schedule):
        y = TARGET[x]
        if noise_sigma > 0:
            y += (rng or np.random.default_rng(0)).normal(0.0, noise_sigma)
        model.step(x, y)
        traj[t + 1] = model.e
    return traj, {0: model.predict(0), 1: model.predict(1)}


class GaussianBelief:
    """Gaussian belief over the three bucket values, kept in precision form
    so that sequential conditioning equals batch conditioning exactly."""

    def __init__(self, precision: np.ndarray, shift: np.ndarray):
        self.precision = np.array(precision, dtype=np.float64)
        self.shift = np.array(shift, dtype=np.float64)
        try:
            np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("belief precision is not positive definite") from exc

    @classmethod
    def standard(cls, dim: int = 3) -> "GaussianBelief":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def from_moments(cls, mean: np.ndarray, covariance: np.ndarray) -> "GaussianBelief":
        precision = np.linalg.inv(covariance)
        return cls(precision, precision @ np.asarray(mean, dtype=np.float64))

    @property
    def mean(self) -> np.ndarray:
        return np.linalg.solve(self.precision, self.shift)

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.precision)

    def predictive_mean(self, x: int) -> float:
        return float(DESIGN[x] @ self.mean)


def bayes_update(belief: GaussianBelief, x: int, y: float, sigma_obs: float) -> GaussianBelief:
    """Exact conjugate update for the observation y = a_x^T e + N(0, sigma_obs^2)."""
    if sigma_obs <= 0:
        raise ValueError("sigma_obs must be > 0")
    a = DESIGN[x]
    return GaussianBelief(belief.precision + np.outer(a, a) / sigma_obs ** 2,
                          belief.shift + y * a / sigma_obs ** 2)


def bayes_batch(belief: GaussianBelief, data, sigma_obs: float) -> GaussianBelief:
    """One-shot update with the stacked design matrix."""
    if sigma_obs <= 0:
        raise ValueError("sigma_obs must be > 0")
    a_mat = np.stack([DESIGN[x] for x, _ in data])
    ys = np.array([y for _, y in data])
    return GaussianBelief(belief.precision + a_mat.T @ a_mat / sigma_obs ** 2,
                          belief.shift + a_mat.T @ ys / sigma_obs ** 2)


def demo_dataset(n_per_item: int, blocked: bool = True) -> list[tuple[int, float]]:
    """Noiseless (X, Y) pairs; blocked order or strict alternation."""
    if blocked:
        xs = [0] * n_per_item + [1] * n_per_item
    else:
        xs = [i % 2 for i in range(2 * n_per_item)]
    return [(x, TARGET[x]) for x in xs]


def permutation_invariance_check(dataset, n_permutations: int, sigma_obs: float,
                                 eta: float = 0.1, seed: int = 0) -> dict:
    """Exact posteriors under shuffled arrival orders, with OGD as contrast.

    The identity order of `dataset` is always included, so passing a
    blocked dataset contrasts a blocked order against random (interleaved)
    ones.  Exact posteriors must agree to numerical precision; OGD final
    states generally do not.
    """
    rng = np.random.default_rng(seed)
    orders = [list(range(len(dataset)))]
    for _ in range(max(n_permutations - 1, 0)):
        orders.append(list(rng.permutation(len(dataset))))
    means, covs, ogd_finals = [], [], []
    for order in orders:
        belief = GaussianBelief.standard()
        for i in order:
            x, y = dataset[i]
            belief = bayes_update(belief, x, y, sigma_obs)
        means.append(belief.mean)
        covs.append(belief.covariance)
        schedule = [dataset[i][0] for i in order]
        traj, _ = ogd_run(eta, 0, schedule=schedule)
        ogd_finals.append(traj[-1])
    means = np.stack(means)
    covs = np.stack(covs)
    ogd_finals = np.stack(ogd_finals)
    return {
        "n_orders": len(orders),
        "bayes_mean_dev": float(np.max(np.abs(means - means[0]))) if len(orders) > 1 else 0.0,
        "bayes_cov_dev": float(np.max(np.abs(covs - covs[0]))) if len(orders) > 1 else 0.0,
        "ogd_spread": float(np.max(np.abs(ogd_finals - ogd_finals[0]))) if len(orders) > 1 else 0.0,
        "bayes_means": means,
        "ogd_finals": ogd_finals,
    }


# ---------------------------------------------------------------------------
# The alternating-arrival demo, including the variational learner
# ---------------------------------------------------------------------------

def demo_hash_spec() -> HashSpec:
    return HashSpec.from_seed(bucket_count=3, num_hashes=2, weight_buckets=1,
                              embed_dim=1, seed=DEMO_HASH_SEED)


def variational_demo_model(sigma_obs: float, learning_rate: float = 0.05,
                           seed: int = 0) -> tuple[ModelState, TrainConfig]:
    """Real-stack model matching the demo: 3x1 table, sum assembly, frozen
    identity head whose observation scale equals the conjugate model's."""
    enc = EncoderConfig(demo_hash_spec(), aggregation="sum", column_namespacing=False)
    layout = RecordLayout(categorical_columns=("item",), numeric_dim=0)
    cfg = TrainConfig(learning_rate=learning_rate, batch_size=64, seed=seed,
                      epochs_initial=0, epochs_online=0)
    head_factory = lambda fdim, rng: GaussianLinear(np.ones(fdim), 0.0, sigma_y=sigma_obs)
    state = new_model_state(enc, layout, head_factory, cfg, freeze_head=True)
    return state, cfg


def _fit_variational_stage(state, cfg, xs, epochs):
    cats = {"item": [DEMO_ITEMS[x] for x in xs]}
    nums = np.zeros((len(xs), 0))
    ys = np.array([TARGET[x] for x in xs])
    if state.stage == 0:
        fit_initial(state, cats, nums, ys, cfg, epochs=epochs)
    else:
        fit_online(state, cats, nums, ys, cfg, epochs=epochs)


def variational_fit_batch(xs, sigma_obs: float, epochs: int = 16000,
                          learning_rate: float = 0.01, mc_samples: int = 4,
                          seed: int = 0) -> np.ndarray:
    """Variational posterior means after fitting all demo data in one stage
    against the standard prior.

    With enough optimization the means coincide with the exact conjugate
    posterior means (the mean-field optimum of a Gaussian target keeps the
    mean).  Very small sigma_obs makes the objective so stiff that Adam
    hovers off the optimum; sigma_obs >= 0.1 converges cleanly.
    """
    from dataclasses import replace
    state, cfg = variational_demo_model(sigma_obs, learning_rate, seed)
    cfg = replace(cfg, mc_samples_train=mc_samples)
    _fit_variational_stage(state, cfg, xs, epochs)
    return state.table_e.mu[:, 0].copy()


def alternating_demo(repeats_per_item: int = 10, cycles: int = 2,
                     sigma_obs: float = 0.01, eta: float = 0.1,
                     epochs_per_stage: int = 2500, learning_rate: float = 0.02,
                     seed: int = 0) -> dict:
    """Per-step error traces for OGD, exact Bayes, and the variational
    learner on the alternating two-item stream.

    Items arrive in blocks: `repeats_per_item` copies of item 0, then of
    item 1, repeated `cycles` times.  All three learners predict each
    arrival before updating.  OGD and exact Bayes update per sample; the
    variational learner treats each block as one online stage.
    """
    blocks = []
    for _ in range(cycles):
        blocks.append([0] * repeats_per_item)
        blocks.append([1] * repeats_per_item)
    stream = [x for b in blocks for x in b]

    ogd = DemoModel(eta=eta)
    ogd_errors = np.zeros(len(stream))
    for t, x in enumerate(stream):
        ogd_errors[t] = abs(ogd.predict(x) - TARGET[x])
        ogd.step(x, TARGET[x])

    belief = GaussianBelief.standard()
    bayes_errors = np.zeros(len(stream))
    for t, x in enumerate(stream):
        bayes_errors[t] = abs(belief.predictive_mean(x) - TARGET[x])
        belief = bayes_update(belief, x, TARGET[x], sigma_obs)

    state, cfg = variational_demo_model(sigma_obs, learning_rate, seed)
    phe_errors = np.zeros(len(stream))
    t = 0
    for i, block in enumerate(blocks):
        cats = {"item": [DEMO_ITEMS[x] for x in block]}
        preds = predict_mean(state, cats, np.zeros((len(block), 0)))
        for j, x in enumerate(block):
            phe_errors[t] = abs(float(preds[j]) - TARGET[x])
            t += 1
        if i > 0:
            advance_stage(state, cfg)
        _fit_variational_stage(state, cfg, block, epochs_per_stage)

    return {
        "stream": stream,
        "ogd_errors": ogd_errors,
        "bayes_errors": bayes_errors,
        "phe_errors": phe_errors,
        "ogd_final": ogd.e.copy(),
        "bayes_final_mean": belief.mean,
        "phe_final_means": state.table_e.mu[:, 0].copy(),
        "switch_steps": [t for t in range(1, len(stream)) if stream[t] != stream[t - 1]],
        "warmup_end": 2 * repeats_per_item,
    }


def write_traces_csv(result: dict, path) -> None:
    """Emit (step, model, error) rows for plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "model", "error"])
        for name, key in (("ogd", "ogd_errors"), ("exact_bayes", "bayes_errors"),
                          ("phe_variational", "phe_errors")):
            for t, err in enumerate(result[key]):
                writer.writerow([t, name, f"{err:.12g}"])
