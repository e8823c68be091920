"""Deterministic and collision-free comparison systems.

Ada models share the exact architecture of the probabilistic model (same
hash spec, weighted assembly, head shapes) but hold point embeddings and
fine-tune them online by plain maximum likelihood: no KL, no prior.  The
Slow/Medium/Fast variants differ only in how many epochs they spend on
each arriving batch (1 / 5 / 15).

EE gives every distinct item its own freshly grown row (collision-free,
unbounded memory); P-EE is its probabilistic twin, trained exactly like
the hashed model but indexed through the vocabulary map.
"""

from __future__ import annotations

import numpy as np

from .gaussian_table import (INIT_MU_SCALE, INIT_SIGMA, sigmoid, softplus,
                             softplus_inv)
from .hashing import derive_seeds
from .inference import Adam, TrainConfig
from .phe_encoder import (NAMESPACE_SEP, EncoderConfig, RecordLayout,
                          batch_backward, batch_forward, build_batch_index)


class DeterministicTable:
    """Point-embedding matrix; the non-probabilistic counterpart of a
    Gaussian table."""

    def __init__(self, values: np.ndarray):
        self.values = np.array(values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be a matrix")

    @property
    def shape(self):
        return self.values.shape

    def n_params(self) -> int:
        return self.values.size

    def copy(self) -> "DeterministicTable":
        return DeterministicTable(self.values.copy())


class VocabMap:
    """Injective item -> row mapping; rows are allocated consecutively and
    never reclaimed."""

    def __init__(self):
        self._rows: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._rows)

    def __contains__(self, item: str) -> bool:
        return item in self._rows

    def get(self, item: str):
        return self._rows.get(item)

    def add(self, item: str) -> int:
        if item in self._rows:
            raise ValueError(f"item {item!r} already mapped")
        row = len(self._rows)
        self._rows[item] = row
        return row

    def items(self):
        return self._rows.items()


class GrowableGaussian:
    """Mean-field Gaussian table that grows by one row per unseen item,
    carrying its per-row prior along."""

    def __init__(self, cols: int):
        self.cols = cols
        self.mu = np.zeros((0, cols))
        self.rho = np.zeros((0, cols))
        self.prior_mu = np.zeros((0, cols))
        self.prior_sigma = np.zeros((0, cols))

    @property
    def rows(self) -> int:
        return self.mu.shape[0]

    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    def grow(self, rng: np.random.Generator) -> int:
        row_mu = rng.normal(0.0, INIT_MU_SCALE, (1, self.cols))
        self.mu = np.concatenate([self.mu, row_mu])
        self.rho = np.concatenate([self.rho, np.full((1, self.cols), float(softplus_inv(INIT_SIGMA)))])
        self.prior_mu = np.concatenate([self.prior_mu, np.zeros((1, self.cols))])
        self.prior_sigma = np.concatenate([self.prior_sigma, np.ones((1, self.cols))])
        return self.rows - 1

    def snapshot_to_prior(self) -> None:
        self.prior_mu = self.mu.copy()
        self.prior_sigma = softplus(self.rho)

    def kl(self) -> float:
        sig = softplus(self.rho)
        return float(np.sum(np.log(self.prior_sigma / sig)
                            + (sig ** 2 + (self.mu - self.prior_mu) ** 2)
                            / (2.0 * self.prior_sigma ** 2) - 0.5))

    def kl_gradients(self):
        sig = softplus(self.rho)
        dmu = (self.mu - self.prior_mu) / self.prior_sigma ** 2
        dsig = sig / self.prior_sigma ** 2 - 1.0 / sig
        return dmu, dsig * sigmoid(self.rho)

    def n_params(self) -> int:
        return 2 * self.mu.size


def lookup_or_grow(vmap: VocabMap, table, item: str, rng: np.random.Generator) -> int:
    """Row index of `item`, growing the table by one random row on first
    sight.  Accepts a DeterministicTable (EE) or GrowableGaussian (P-EE)."""
    row = vmap.get(item)
    if row is not None:
        return row
    row = vmap.add(item)
    if isinstance(table, GrowableGaussian):
        grown = table.grow(rng)
    else:
        table.values = np.concatenate([table.values,
                                       rng.normal(0.0, INIT_MU_SCALE, (1, table.values.shape[1]))])
        grown = table.values.shape[0] - 1
    assert grown == row
    return row


def _grow_optimizer(moments: dict, rows: int) -> None:
    for key, arr in moments.items():
        if arr.shape[0] < rows:
            pad = np.zeros((rows - arr.shape[0],) + arr.shape[1:])
            moments[key] = np.concatenate([arr, pad])


# ---------------------------------------------------------------------------
# Ada: deterministic hash embeddings, online fine-tuning
# ---------------------------------------------------------------------------

ADA_EPOCHS = {"slow_ada": 1, "medium_ada": 5, "fast_ada": 15}


class AdaModel:
    """Hash-embedding model with point tables, fine-tuned online."""

    probabilistic = False

    def __init__(self, enc_cfg: EncoderConfig, layout: RecordLayout, head_factory,
                 cfg: TrainConfig, dynamic_columns=None, epochs_online: int | None = None,
                 model_id: str = "fast_ada"):
        self.enc_cfg = enc_cfg
        self.layout = layout
        self.cfg = cfg
        self.model_id = model_id
        self.epochs_online = ADA_EPOCHS.get(model_id, 15) if epochs_online is None else epochs_online
        self.dynamic_columns = frozenset(dynamic_columns) if dynamic_columns else None
        subs = derive_seeds(cfg.seed, 4)
        rng_e, rng_w, rng_h, _ = (np.random.default_rng(s) for s in subs)
        spec = enc_cfg.spec
        self.table_e = DeterministicTable(rng_e.normal(0.0, INIT_MU_SCALE,
                                                       (spec.bucket_count_B, spec.embed_dim_d)))
        self.table_w = DeterministicTable(rng_w.normal(0.0, INIT_MU_SCALE,
                                                       (spec.weight_buckets_P, spec.hash_count_K)))
        self.head = head_factory(layout.feature_dim(spec.embed_dim_d), rng_h)
        self._shuffle_rng = np.random.default_rng(subs[3])
        self.adam = Adam(self._params(), cfg.learning_rate,
                         cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def _params(self) -> dict:
        params = {"e": self.table_e.values, "w": self.table_w.values}
        for name, arr in self.head.params().items():
            params[f"head.{name}"] = arr
        return params

    def _loss_and_grads(self, bidx, targets, update_theta, update_columns):
        features, ctx = batch_forward(bidx, self.enc_cfg, self.table_e.values, None,
                                      self.table_w.values, None, None)
        ll = self.head.log_lik_batch(features, targets)
        dtheta, dfeat = self.head.grad_batch(features, targets)
        scale = -1.0 / bidx.n                       # minimize mean NLL
        dmu_e, _, dmu_w, _ = batch_backward(bidx, self.enc_cfg, ctx, scale * dfeat,
                                            self.table_e.shape, self.table_w.shape,
                                            columns=update_columns)
        grads = {"e": dmu_e, "w": dmu_w}
        if update_theta:
            for name, g in dtheta.items():
                grads[f"head.{name}"] = scale * g
        return scale * float(ll.sum()), grads

    def _fit(self, categoricals, numerics, targets, epochs, update_theta,
             update_columns, optimizer="adam", shuffle=True, batch_size=None):
        targets = np.asarray(targets)
        bidx = build_batch_index(self.enc_cfg, self.layout, categoricals, numerics)
        n = bidx.n
        bs = batch_size or self.cfg.batch_size
        from .inference import _take_rows
        for _ in range(epochs):
            order = self._shuffle_rng.permutation(n) if shuffle else np.arange(n)
            for start in range(0, n, bs):
                rows = order[start:start + bs]
                sub = _take_rows(bidx, rows)
                _, grads = self._loss_and_grads(sub, targets[rows], update_theta, update_columns)
                if optimizer == "adam":
                    self.adam.step(grads)
                else:
                    for name, g in grads.items():
                        self.adam.params[name] -= self.cfg.learning_rate * g

    def fit_initial(self, categoricals, numerics, targets, epochs=None):
        self._fit(categoricals, numerics, targets,
                  self.cfg.epochs_initial if epochs is None else epochs,
                  update_theta=True, update_columns=None)

    def update(self, categoricals, numerics, targets, epochs=None):
        # each arrival is a fresh fine-tuning run, mirroring the fresh
        # per-stage optimization of the probabilistic model
        if self.cfg.reset_adam_per_stage:
            self.adam.reset(["e", "w"])
        ada_fit_online(self, categoricals, numerics, targets,
                       self.epochs_online if epochs is None else epochs)

    def predict_batch(self, categoricals, numerics) -> np.ndarray:
        bidx = build_batch_index(self.enc_cfg, self.layout, categoricals, numerics)
        features, _ = batch_forward(bidx, self.enc_cfg, self.table_e.values, None,
                                    self.table_w.values, None, None)
        return np.asarray(self.head.predict_batch(features), dtype=np.float64)

    def n_embedding_params(self) -> int:
        return self.table_e.n_params() + self.table_w.n_params()


def ada_fit_online(model: AdaModel, categoricals, numerics, targets, epochs: int,
                   optimizer: str = "adam", shuffle: bool = True,
                   batch_size: int | None = None) -> AdaModel:
    """Maximum-likelihood fine-tuning of the embedding values on new data.

    The head stays frozen.  `optimizer="sgd"` with shuffle=False and
    batch_size=1 reproduces plain online gradient descent sample by sample,
    which the closed-form forgetting analysis relies on.
    """
    model._fit(categoricals, numerics, targets, epochs, update_theta=False,
               update_columns=model.dynamic_columns, optimizer=optimizer,
               shuffle=shuffle, batch_size=batch_size)
    return model


# ---------------------------------------------------------------------------
# EE / P-EE: collision-free expandable embeddings
# ---------------------------------------------------------------------------

class _ExpandableBase:
    """Shared plumbing: vocabulary map, per-column row lookup, layout."""

    def __init__(self, layout: RecordLayout, embed_dim: int, cfg: TrainConfig,
                 dynamic_columns=None, namespacing: bool = True):
        self.layout = layout
        self.embed_dim = embed_dim
        self.cfg = cfg
        self.dynamic_columns = frozenset(dynamic_columns) if dynamic_columns else None
        self.namespacing = namespacing
        self.vocab = VocabMap()
        subs = derive_seeds(cfg.seed, 3)
        self._grow_rng = np.random.default_rng(subs[0])
        self._head_rng = np.random.default_rng(subs[1])
        self._shuffle_rng = np.random.default_rng(subs[2])

    def _key(self, column: str, item: str) -> str:
        if self.namespacing:
            return f"{column}{NAMESPACE_SEP}{item}"
        return item

    def _rows_for(self, categoricals) -> dict:
        out = {}
        for col in self.layout.categorical_columns:
            vals = categoricals[col]
            rows = np.empty(len(vals), dtype=np.intp)
            for i, v in enumerate(vals):
                item = self.layout.missing_token if v is None else str(v)
                rows[i] = lookup_or_grow(self.vocab, self._table(), self._key(col, item),
                                         self._grow_rng)
            out[col] = rows
        return out

    def _table(self):
        raise NotImplementedError

    def _feature_parts(self, embs: dict, numerics: np.ndarray):
        parts = [np.asarray(numerics, dtype=np.float64)]
        parts += [embs[c] for c in self.layout.categorical_columns]
        if self.layout.rating_mode:
            c0, c1 = self.layout.categorical_columns[:2]
            parts.append(embs[c0] * embs[c1])
        return np.concatenate(parts, axis=1)

    def _backward_embs(self, dfeat: np.ndarray, embs: dict) -> dict:
        d = self.embed_dim
        lay = self.layout
        out = {}
        for c, col in enumerate(lay.categorical_columns):
            out[col] = dfeat[:, lay.embedding_slice(c, d)].copy()
        if lay.rating_mode:
            c0, c1 = lay.categorical_columns[:2]
            dprod = dfeat[:, lay.product_slice(d)]
            out[c0] += dprod * embs[c1]
            out[c1] += dprod * embs[c0]
        return out


class EeModel(_ExpandableBase):
    """Deterministic expandable embeddings: one private row per item."""

    model_id = "ee"
    probabilistic = False

    def __init__(self, layout: RecordLayout, embed_dim: int, head_factory,
                 cfg: TrainConfig, dynamic_columns=None):
        super().__init__(layout, embed_dim, cfg, dynamic_columns)
        self.table = DeterministicTable(np.zeros((0, embed_dim)))
        self.head = head_factory(layout.feature_dim(embed_dim), self._head_rng)
        self._head_adam = Adam(self.head.params(), cfg.learning_rate,
                               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self._moments = {"m": np.zeros((0, embed_dim)), "v": np.zeros((0, embed_dim))}
        self._t = 0

    def _table(self):
        return self.table

    def _forward(self, rows_by_col, numerics):
        embs = {c: self.table.values[rows_by_col[c]] for c in self.layout.categorical_columns}
        return self._feature_parts(embs, numerics), embs

    def _fit(self, categoricals, numerics, targets, epochs, update_theta, update_columns):
        targets = np.asarray(targets)
        rows_by_col = self._rows_for(categoricals)
        numerics = np.asarray(numerics, dtype=np.float64)
        n = len(targets)
        _grow_optimizer(self._moments, self.table.values.shape[0])
        cfg = self.cfg
        for _ in range(epochs):
            order = self._shuffle_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                sel = order[start:start + cfg.batch_size]
                sub_rows = {c: r[sel] for c, r in rows_by_col.items()}
                feats, embs = self._forward(sub_rows, numerics[sel])
                dtheta, dfeat = self.head.grad_batch(feats, targets[sel])
                scale = -1.0 / len(sel)
                dvals = np.zeros_like(self.table.values)
                dembs = self._backward_embs(scale * dfeat, embs)
                for col in self.layout.categorical_columns:
                    if update_columns is not None and col not in update_columns:
                        continue
                    np.add.at(dvals, sub_rows[col], dembs[col])
                self._adam_table_step(dvals)
                if update_theta:
                    self._head_adam.step({k: scale * g for k, g in dtheta.items()})

    def _adam_table_step(self, grad):
        cfg = self.cfg
        self._t += 1
        m, v = self._moments["m"], self._moments["v"]
        m *= cfg.adam_beta1
        m += (1 - cfg.adam_beta1) * grad
        v *= cfg.adam_beta2
        v += (1 - cfg.adam_beta2) * grad * grad
        mhat = m / (1 - cfg.adam_beta1 ** self._t)
        vhat = v / (1 - cfg.adam_beta2 ** self._t)
        self.table.values -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)

    def fit_initial(self, categoricals, numerics, targets, epochs=None):
        self._fit(categoricals, numerics, targets,
                  self.cfg.epochs_initial if epochs is None else epochs,
                  update_theta=True, update_columns=None)

    def update(self, categoricals, numerics, targets, epochs=None):
        if self.cfg.reset_adam_per_stage:
            for arr in self._moments.values():
                arr[...] = 0.0
            self._t = 0
        self._fit(categoricals, numerics, targets,
                  self.cfg.epochs_online if epochs is None else epochs,
                  update_theta=False, update_columns=self.dynamic_columns)

    def predict_batch(self, categoricals, numerics) -> np.ndarray:
        rows_by_col = self._rows_for(categoricals)
        feats, _ = self._forward(rows_by_col, np.asarray(numerics, dtype=np.float64))
        return np.asarray(self.head.predict_batch(feats), dtype=np.float64)

    def n_embedding_params(self) -> int:
        return self.table.n_params()


class PeeModel(_ExpandableBase):
    """Probabilistic expandable embeddings: the variational online learner
    with collision-free rows in place of hashing."""

    model_id = "pee"
    probabilistic = True

    def __init__(self, layout: RecordLayout, embed_dim: int, head_factory,
                 cfg: TrainConfig, dynamic_columns=None):
        super().__init__(layout, embed_dim, cfg, dynamic_columns)
        self.table = GrowableGaussian(embed_dim)
        self.head = head_factory(layout.feature_dim(embed_dim), self._head_rng)
        self._head_adam = Adam(self.head.params(), cfg.learning_rate,
                               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self._moments = {"m_mu": np.zeros((0, embed_dim)), "v_mu": np.zeros((0, embed_dim)),
                         "m_rho": np.zeros((0, embed_dim)), "v_rho": np.zeros((0, embed_dim))}
        self._t = 0
        self.stage = 0
        subs = derive_seeds(cfg.seed ^ 0x5EED, 2)
        self._noise_rng = np.random.default_rng(subs[0])
        self._predict_rng = np.random.default_rng(subs[1])

    def _table(self):
        return self.table

    def _forward_sampled(self, rows_by_col, numerics, rng):
        all_rows = np.concatenate([rows_by_col[c] for c in self.layout.categorical_columns])
        uniq = np.unique(all_rows)
        eps_rows = rng.standard_normal((uniq.size, self.embed_dim))
        sig = self.table.sigma()
        embs, eps_by_col = {}, {}
        for c in self.layout.categorical_columns:
            r = rows_by_col[c]
            eps = eps_rows[np.searchsorted(uniq, r)]
            embs[c] = self.table.mu[r] + sig[r] * eps
            eps_by_col[c] = eps
        return self._feature_parts(embs, numerics), embs, eps_by_col

    def _fit(self, categoricals, numerics, targets, epochs, update_theta, update_columns):
        targets = np.asarray(targets)
        rows_by_col = self._rows_for(categoricals)
        numerics = np.asarray(numerics, dtype=np.float64)
        n = len(targets)
        _grow_optimizer(self._moments, self.table.rows)
        cfg = self.cfg
        dataset_size = n
        for _ in range(epochs):
            order = self._shuffle_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                sel = order[start:start + cfg.batch_size]
                sub_rows = {c: r[sel] for c, r in rows_by_col.items()}
                feats, embs, eps_by_col = self._forward_sampled(sub_rows, numerics[sel],
                                                                self._noise_rng)
                dtheta, dfeat = self.head.grad_batch(feats, targets[sel])
                scale = -dataset_size / len(sel)
                dmu = np.zeros_like(self.table.mu)
                dsig = np.zeros_like(self.table.mu)
                dembs = self._backward_embs(scale * dfeat, embs)
                for col in self.layout.categorical_columns:
                    if update_columns is not None and col not in update_columns:
                        continue
                    np.add.at(dmu, sub_rows[col], dembs[col])
                    np.add.at(dsig, sub_rows[col], dembs[col] * eps_by_col[col])
                kmu, krho = self.table.kl_gradients()
                g_mu = dmu + kmu
                g_rho = dsig * sigmoid(self.table.rho) + krho
                self._adam_table_step(g_mu, g_rho)
                if update_theta:
                    self._head_adam.step({k: scale * g for k, g in dtheta.items()})

    def _adam_table_step(self, g_mu, g_rho):
        cfg = self.cfg
        self._t += 1
        for key, grad, target in (("mu", g_mu, self.table.mu), ("rho", g_rho, self.table.rho)):
            m, v = self._moments[f"m_{key}"], self._moments[f"v_{key}"]
            m *= cfg.adam_beta1
            m += (1 - cfg.adam_beta1) * grad
            v *= cfg.adam_beta2
            v += (1 - cfg.adam_beta2) * grad * grad
            mhat = m / (1 - cfg.adam_beta1 ** self._t)
            vhat = v / (1 - cfg.adam_beta2 ** self._t)
            target -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)

    def fit_initial(self, categoricals, numerics, targets, epochs=None):
        self._fit(categoricals, numerics, targets,
                  self.cfg.epochs_initial if epochs is None else epochs,
                  update_theta=True, update_columns=None)

    def update(self, categoricals, numerics, targets, epochs=None):
        self.table.snapshot_to_prior()
        self.stage += 1
        if self.cfg.reset_adam_per_stage:
            for arr in self._moments.values():
                arr[...] = 0.0
            self._t = 0
        self._fit(categoricals, numerics, targets,
                  self.cfg.epochs_online if epochs is None else epochs,
                  update_theta=False, update_columns=self.dynamic_columns)

    def predict_batch(self, categoricals, numerics) -> np.ndarray:
        rows_by_col = self._rows_for(categoricals)
        numerics = np.asarray(numerics, dtype=np.float64)
        out = None
        for _ in range(self.cfg.mc_samples_predict):
            feats, _, _ = self._forward_sampled(rows_by_col, numerics, self._predict_rng)
            pred = np.asarray(self.head.predict_batch(feats), dtype=np.float64)
            out = pred if out is None else out + pred
        return out / self.cfg.mc_samples_predict

    def n_embedding_params(self) -> int:
        return self.table.n_params()
