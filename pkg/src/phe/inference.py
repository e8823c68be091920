"""ELBO construction, variational-EM training, and Monte Carlo prediction.

The minibatch objective is

    loss = -(N / n_batch) * sum_i log p_theta(y_i | features_i)
           + KL(q(E) || prior_E) + KL(q(W) || prior_W)

with one reparametrized sample per table row per step.  Stage 0 jointly
optimizes the variational parameters and the head; every later stage
freezes the head, snapshots the current posterior as the new prior, and
optimizes the tables alone on the newly arrived data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .gaussian_table import (GaussianTable, PriorSnapshot, init_table, kl_gradients,
                             kl_to_prior, sigmoid, snapshot, standard_prior)
from .hashing import derive_seeds
from .likelihoods import head_from_dict
from .phe_encoder import (BatchIndex, EncoderConfig, RecordLayout, batch_backward,
                          batch_forward, build_batch_index)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 128
    epochs_initial: int = 100
    epochs_online: int = 15
    mc_samples_train: int = 1
    mc_samples_predict: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    kl_scale: float = 1.0
    reset_adam_per_stage: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mc_samples_train < 1 or self.mc_samples_predict < 1:
            raise ValueError("mc sample counts must be >= 1")


class Adam:
    """Plain Adam over a dict of named arrays, updated in place."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, grads: dict) -> None:
        for name, g in grads.items():
            p = self.params[name]
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def reset(self, names) -> None:
        for name in names:
            self.m[name][...] = 0.0
            self.v[name][...] = 0.0
            self.t[name] = 0


TABLE_PARAMS = ("mu_e", "rho_e", "mu_w", "rho_w")


def _rng_streams(seed: int) -> dict:
    names = ("table_e", "table_w", "head", "train", "shuffle", "predict")
    subs = derive_seeds(seed, len(names))
    return {name: np.random.default_rng(s) for name, s in zip(names, subs)}


@dataclass
class ModelState:
    enc_cfg: EncoderConfig
    layout: RecordLayout
    table_e: GaussianTable
    table_w: GaussianTable
    prior_e: PriorSnapshot
    prior_w: PriorSnapshot
    head: object
    stage: int = 0
    dynamic_columns: frozenset | None = None   # None = all columns update online
    freeze_head: bool = False                  # never train theta, even at stage 0
    adam: Adam | None = None
    rngs: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def param_dict(self) -> dict:
        params = {
            "mu_e": self.table_e.mu, "rho_e": self.table_e.rho,
            "mu_w": self.table_w.mu, "rho_w": self.table_w.rho,
        }
        for name, arr in self.head.params().items():
            params[f"head.{name}"] = arr
        return params

    def head_param_names(self):
        return [f"head.{name}" for name in self.head.params()]

    def n_embedding_params(self) -> int:
        return self.table_e.n_params() + self.table_w.n_params()


def new_model_state(enc_cfg: EncoderConfig, layout: RecordLayout, head_factory,
                    cfg: TrainConfig, dynamic_columns=None,
                    freeze_head: bool = False) -> ModelState:
    """Fresh stage-0 state with standard priors and seed-derived rng streams.

    `head_factory(feature_dim, rng)` builds the likelihood head.
    """
    spec = enc_cfg.spec
    rngs = _rng_streams(cfg.seed)
    table_e = init_table(spec.bucket_count_B, spec.embed_dim_d, rngs["table_e"])
    table_w = init_table(spec.weight_buckets_P, spec.hash_count_K, rngs["table_w"])
    head = head_factory(layout.feature_dim(spec.embed_dim_d), rngs["head"])
    state = ModelState(
        enc_cfg=enc_cfg, layout=layout,
        table_e=table_e, table_w=table_w,
        prior_e=standard_prior(*table_e.shape),
        prior_w=standard_prior(*table_w.shape),
        head=head,
        dynamic_columns=frozenset(dynamic_columns) if dynamic_columns else None,
        freeze_head=freeze_head,
        rngs=rngs,
    )
    state.adam = Adam(state.param_dict(), cfg.learning_rate,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return state


def elbo_minibatch_loss(state: ModelState, bidx: BatchIndex, targets: np.ndarray,
                        dataset_size: int, rng: np.random.Generator,
                        cfg: TrainConfig, update_theta: bool | None = None,
                        update_columns=None):
    """One reparametrized evaluation of the minibatch objective.

    Returns (loss, parts, grads) where parts carries the nll / kl_e / kl_w
    decomposition and grads maps parameter names to gradient arrays.
    Noise is drawn from `rng`, so pinning the generator freezes the sample.
    """
    n = bidx.n
    if n == 0:
        raise ValueError("empty batch")
    if update_theta is None:
        update_theta = state.stage == 0 and not state.freeze_head
    if update_columns is None and state.stage > 0:
        update_columns = state.dynamic_columns
    scale = dataset_size / n
    sig_e = state.table_e.sigma()
    sig_w = state.table_w.sigma()

    nll = 0.0
    acc: dict[str, np.ndarray] = {}
    for _ in range(cfg.mc_samples_train):
        features, ctx = batch_forward(bidx, state.enc_cfg,
                                      state.table_e.mu, sig_e,
                                      state.table_w.mu, sig_w, rng)
        ll = state.head.log_lik_batch(features, targets)
        nll += -scale * float(ll.sum())
        dtheta, dfeat = state.head.grad_batch(features, targets)
        dmu_e, dsig_e, dmu_w, dsig_w = batch_backward(
            bidx, state.enc_cfg, ctx, -scale * dfeat,
            state.table_e.shape, state.table_w.shape, columns=update_columns)
        for name, g in (("mu_e", dmu_e), ("sig_e", dsig_e),
                        ("mu_w", dmu_w), ("sig_w", dsig_w)):
            acc[name] = acc.get(name, 0.0) + g
        if update_theta:
            for name, g in dtheta.items():
                acc[f"head.{name}"] = acc.get(f"head.{name}", 0.0) + (-scale) * g
    s = 1.0 / cfg.mc_samples_train
    nll *= s

    kl_e = kl_to_prior(state.table_e, state.prior_e)
    kl_w = kl_to_prior(state.table_w, state.prior_w)
    loss = nll + cfg.kl_scale * (kl_e + kl_w)

    kmu_e, krho_e = kl_gradients(state.table_e, state.prior_e)
    kmu_w, krho_w = kl_gradients(state.table_w, state.prior_w)
    grads = {
        "mu_e": s * acc["mu_e"] + cfg.kl_scale * kmu_e,
        "rho_e": s * acc["sig_e"] * sigmoid(state.table_e.rho) + cfg.kl_scale * krho_e,
        "mu_w": s * acc["mu_w"] + cfg.kl_scale * kmu_w,
        "rho_w": s * acc["sig_w"] * sigmoid(state.table_w.rho) + cfg.kl_scale * krho_w,
    }
    if update_theta:
        for name in state.head.params():
            grads[f"head.{name}"] = s * acc[f"head.{name}"]
    parts = {"nll": nll, "kl_e": kl_e, "kl_w": kl_w}
    return loss, parts, grads


def _take_rows(bidx: BatchIndex, rows: np.ndarray) -> BatchIndex:
    return BatchIndex(
        layout=bidx.layout, n=len(rows),
        numerics=bidx.numerics[rows],
        idx_e={c: a[rows] for c, a in bidx.idx_e.items()},
        idx_w={c: a[rows] for c, a in bidx.idx_w.items()},
    )


def _fit(state: ModelState, categoricals: dict, numerics, targets, cfg: TrainConfig,
         epochs: int, update_theta: bool, update_columns) -> ModelState:
    targets = np.asarray(targets)
    bidx = build_batch_index(state.enc_cfg, state.layout, categoricals, numerics)
    n = bidx.n
    dataset_size = n
    shuffle_rng = state.rngs["shuffle"]
    train_rng = state.rngs["train"]
    step = 0
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            sub = _take_rows(bidx, rows)
            loss, parts, grads = elbo_minibatch_loss(
                state, sub, targets[rows], dataset_size, train_rng, cfg,
                update_theta=update_theta, update_columns=update_columns)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at stage {state.stage} epoch {epoch} step {step}: "
                    f"loss={loss}, nll={parts['nll']}, kl_e={parts['kl_e']}, kl_w={parts['kl_w']}")
            state.adam.step(grads)
            state.history.append({
                "stage": state.stage, "epoch": epoch, "step": step,
                "loss": float(loss), "kl_E": float(parts["kl_e"]),
                "kl_W": float(parts["kl_w"]), "nll": float(parts["nll"]),
            })
            step += 1
    return state


def fit_initial(state: ModelState, categoricals: dict, numerics, targets,
                cfg: TrainConfig, epochs: int | None = None) -> ModelState:
    """Joint optimization of tables and head on the initial dataset."""
    if state.stage != 0:
        raise ValueError(f"fit_initial requires stage 0, got stage {state.stage}")
    return _fit(state, categoricals, numerics, targets, cfg,
                cfg.epochs_initial if epochs is None else epochs,
                update_theta=not state.freeze_head, update_columns=None)


def advance_stage(state: ModelState, cfg: TrainConfig) -> ModelState:
    """Freeze the current posterior as the next stage's prior.

    The head stays frozen from here on; table Adam moments restart so each
    stage is a fresh variational optimization against its own prior.
    """
    state.prior_e = snapshot(state.table_e)
    state.prior_w = snapshot(state.table_w)
    state.stage += 1
    if cfg.reset_adam_per_stage:
        state.adam.reset(TABLE_PARAMS)
    return state


def fit_online(state: ModelState, categoricals: dict, numerics, targets,
               cfg: TrainConfig, epochs: int | None = None) -> ModelState:
    """Optimize the online objective on newly arrived data (tables only)."""
    if state.stage < 1:
        raise ValueError("fit_online requires advance_stage to have been called")
    return _fit(state, categoricals, numerics, targets, cfg,
                cfg.epochs_online if epochs is None else epochs,
                update_theta=False, update_columns=state.dynamic_columns)


def predict_mc(state: ModelState, categoricals: dict, numerics,
               n_samples: int | None = None, cfg: TrainConfig | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Monte Carlo predictive output, averaged over embedding samples.

    Categorical heads yield (n, C) averaged probability vectors; regression
    heads yield (n,) averaged means.
    """
    if n_samples is None:
        n_samples = cfg.mc_samples_predict if cfg is not None else 8
    if rng is None:
        rng = state.rngs["predict"]
    bidx = build_batch_index(state.enc_cfg, state.layout, categoricals, numerics)
    sig_e = state.table_e.sigma()
    sig_w = state.table_w.sigma()
    out = None
    for _ in range(n_samples):
        features, _ = batch_forward(bidx, state.enc_cfg, state.table_e.mu, sig_e,
                                    state.table_w.mu, sig_w, rng)
        pred = np.asarray(state.head.predict_batch(features), dtype=np.float64)
        out = pred if out is None else out + pred
    return out / n_samples


def predict_mean(state: ModelState, categoricals: dict, numerics) -> np.ndarray:
    """Deterministic prediction from the posterior-mean embeddings."""
    bidx = build_batch_index(state.enc_cfg, state.layout, categoricals, numerics)
    features, _ = batch_forward(bidx, state.enc_cfg, state.table_e.mu, None,
                                state.table_w.mu, None, None)
    return np.asarray(state.head.predict_batch(features), dtype=np.float64)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def state_to_dict(state: ModelState) -> dict:
    return {
        "hash_spec": state.enc_cfg.spec.to_config(),
        "aggregation": state.enc_cfg.aggregation,
        "column_namespacing": state.enc_cfg.column_namespacing,
        "layout": {
            "categorical_columns": list(state.layout.categorical_columns),
            "numeric_dim": state.layout.numeric_dim,
            "rating_mode": state.layout.rating_mode,
            "missing_token": state.layout.missing_token,
        },
        "stage": state.stage,
        "dynamic_columns": sorted(state.dynamic_columns) if state.dynamic_columns else None,
        "table_e": state.table_e.to_dict(),
        "table_w": state.table_w.to_dict(),
        "prior_e": state.prior_e.to_dict(),
        "prior_w": state.prior_w.to_dict(),
        "head": state.head.to_dict(),
    }


def state_from_dict(d: dict, cfg: TrainConfig | None = None) -> ModelState:
    from .hashing import HashSpec
    cfg = cfg if cfg is not None else TrainConfig()
    enc_cfg = EncoderConfig(HashSpec.from_config(d["hash_spec"]),
                            d["aggregation"], d["column_namespacing"])
    lay = d["layout"]
    layout = RecordLayout(tuple(lay["categorical_columns"]), lay["numeric_dim"],
                          lay["rating_mode"], lay["missing_token"])
    dyn = d["dynamic_columns"]
    state = ModelState(
        enc_cfg=enc_cfg, layout=layout,
        table_e=GaussianTable.from_dict(d["table_e"]),
        table_w=GaussianTable.from_dict(d["table_w"]),
        prior_e=PriorSnapshot.from_dict(d["prior_e"]),
        prior_w=PriorSnapshot.from_dict(d["prior_w"]),
        head=head_from_dict(d["head"]),
        stage=d["stage"],
        dynamic_columns=frozenset(dyn) if dyn else None,
        rngs=_rng_streams(cfg.seed),
    )
    state.adam = Adam(state.param_dict(), cfg.learning_rate,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return state


def save_checkpoint(state: ModelState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state_to_dict(state), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path, cfg: TrainConfig | None = None) -> ModelState:
    with open(path, encoding="utf-8") as fh:
        return state_from_dict(json.load(fh), cfg)


class PheModel:
    """Streaming-protocol wrapper: predict with MC averaging, update with a
    posterior-to-prior stage per arriving batch."""

    model_id = "phe"
    probabilistic = True

    def __init__(self, enc_cfg: EncoderConfig, layout: RecordLayout, head_factory,
                 cfg: TrainConfig, dynamic_columns=None, freeze_head: bool = False):
        self.cfg = cfg
        self.state = new_model_state(enc_cfg, layout, head_factory, cfg,
                                     dynamic_columns, freeze_head)

    def fit_initial(self, categoricals, numerics, targets, epochs=None):
        fit_initial(self.state, categoricals, numerics, targets, self.cfg, epochs)

    def predict_batch(self, categoricals, numerics) -> np.ndarray:
        return predict_mc(self.state, categoricals, numerics,
                          self.cfg.mc_samples_predict, self.cfg)

    def update(self, categoricals, numerics, targets, epochs=None):
        advance_stage(self.state, self.cfg)
        fit_online(self.state, categoricals, numerics, targets, self.cfg, epochs)

    def n_embedding_params(self) -> int:
        return self.state.n_embedding_params()
