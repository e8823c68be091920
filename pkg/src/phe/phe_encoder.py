"""Maps categorical items to d-dimensional stochastic embeddings.

An item is hashed K times into the embedding table; the K sampled rows are
combined by an assembly function (by default a learned weighted sum whose
weights come from one sampled row of the weight table).  Record-level
encoding concatenates numeric features with one embedding per categorical
column, in schema order; rating-style layouts additionally append the
elementwise product of the first two embeddings.

Besides the per-record operations this module houses the vectorized batch
forward/backward used by the trainers.  The batch functions work on plain
(mu, sigma) arrays so the deterministic baselines can reuse them by
passing sigma=None.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian_table import GaussianTable, sigmoid, softplus
from .hashing import HashSpec, hash_signature

AGGREGATIONS = ("weighted_sum", "sum", "mean")

NAMESPACE_SEP = "∥"   # 'colname∥value'


@dataclass(frozen=True)
class EncoderConfig:
    spec: HashSpec
    aggregation: str = "weighted_sum"
    column_namespacing: bool = True

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")


def item_key(cfg: EncoderConfig, column: str | None, item: str) -> str:
    """The string actually hashed; prefixed with the column name when
    namespacing is on so one shared table serves all columns without
    forcing identical strings in different columns onto the same rows."""
    if cfg.column_namespacing and column is not None:
        return f"{column}{NAMESPACE_SEP}{item}"
    return item


def signature_for(cfg: EncoderConfig, column: str | None, item: str):
    return hash_signature(cfg.spec, item_key(cfg, column, item))


@dataclass(frozen=True)
class RecordLayout:
    """Fixed feature layout shared by a whole experiment.

    Features are [numerics | one embedding per categorical column | product
    of the first two embeddings when `rating_mode`].
    """

    categorical_columns: tuple[str, ...]
    numeric_dim: int
    rating_mode: bool = False
    missing_token: str = "<missing>"

    def __post_init__(self):
        if self.rating_mode and len(self.categorical_columns) < 2:
            raise ValueError("rating_mode needs at least two categorical columns")

    def feature_dim(self, embed_dim: int) -> int:
        blocks = len(self.categorical_columns) + (1 if self.rating_mode else 0)
        return self.numeric_dim + blocks * embed_dim

    def embedding_slice(self, c: int, embed_dim: int) -> slice:
        start = self.numeric_dim + c * embed_dim
        return slice(start, start + embed_dim)

    def product_slice(self, embed_dim: int) -> slice:
        start = self.numeric_dim + len(self.categorical_columns) * embed_dim
        return slice(start, start + embed_dim)


# ---------------------------------------------------------------------------
# Per-item encoding with gradient context
# ---------------------------------------------------------------------------

@dataclass
class EncodeContext:
    """Everything needed to push a gradient on the output embedding back to
    mu/rho of both tables: indices, the shared noise per distinct row, and
    the sampled values."""

    idx_e: np.ndarray          # (K,) row indices into E
    uniq_e: np.ndarray         # distinct rows, sorted
    inv_e: np.ndarray          # position of each idx_e in uniq_e
    eps_e: np.ndarray | None   # (U, d) noise per distinct row; None = mean pass
    e_rows: np.ndarray         # (K, d) values used in the combination
    idx_w: int
    eps_w: np.ndarray | None   # (K,) noise for the weight row
    weights: np.ndarray        # (K,) combination weights actually used
    aggregation: str


@dataclass
class TableGrads:
    """Accumulators for d(loss)/d(mu,rho) of both tables."""

    dmu_e: np.ndarray
    drho_e: np.ndarray
    dmu_w: np.ndarray
    drho_w: np.ndarray

    @classmethod
    def zeros_like(cls, table_e: GaussianTable, table_w: GaussianTable) -> "TableGrads":
        return cls(np.zeros(table_e.shape), np.zeros(table_e.shape),
                   np.zeros(table_w.shape), np.zeros(table_w.shape))


def _combination_weights(cfg: EncoderConfig, table_w: GaussianTable, idx_w: int,
                         eps_w: np.ndarray | None):
    k = cfg.spec.hash_count_K
    if cfg.aggregation == "sum":
        return np.ones(k)
    if cfg.aggregation == "mean":
        return np.full(k, 1.0 / k)
    mu = table_w.mu[idx_w]
    if eps_w is None:
        return mu.copy()
    return mu + softplus(table_w.rho[idx_w]) * eps_w


def encode(cfg: EncoderConfig, table_e: GaussianTable, table_w: GaussianTable,
           item: str, rng: np.random.Generator, column: str | None = None):
    """Stochastic embedding of one item plus the backprop context.

    Duplicate hash indices share a single noise row within this pass.
    """
    idx_list, idx_w = signature_for(cfg, column, item)
    idx_e = np.asarray(idx_list, dtype=np.intp)
    uniq_e, inv_e = np.unique(idx_e, return_inverse=True)
    eps_e = rng.standard_normal((uniq_e.size, cfg.spec.embed_dim_d))
    rows = table_e.mu[uniq_e] + softplus(table_e.rho[uniq_e]) * eps_e
    e_rows = rows[inv_e]
    eps_w = rng.standard_normal(cfg.spec.hash_count_K) if cfg.aggregation == "weighted_sum" else None
    weights = _combination_weights(cfg, table_w, idx_w, eps_w)
    out = weights @ e_rows
    return out, EncodeContext(idx_e, uniq_e, inv_e, eps_e, e_rows, idx_w, eps_w,
                              weights, cfg.aggregation)


def encode_mean(cfg: EncoderConfig, table_e: GaussianTable, table_w: GaussianTable,
                item: str, column: str | None = None) -> np.ndarray:
    """Deterministic embedding using posterior means only (all noise = 0)."""
    idx_list, idx_w = signature_for(cfg, column, item)
    weights = _combination_weights(cfg, table_w, idx_w, None)
    return weights @ table_e.mu[np.asarray(idx_list, dtype=np.intp)]


def backprop_encode(ctx: EncodeContext, d_out: np.ndarray, grads: TableGrads,
                    table_e: GaussianTable, table_w: GaussianTable) -> None:
    """Accumulate d(loss)/d(mu,rho) for one encoded item given d(loss)/d(out)."""
    d_rows = ctx.weights[:, None] * d_out[None, :]            # (K, d)
    d_uniq = np.zeros((ctx.uniq_e.size, d_out.size))
    np.add.at(d_uniq, ctx.inv_e, d_rows)
    grads.dmu_e[ctx.uniq_e] += d_uniq
    if ctx.eps_e is not None:
        grads.drho_e[ctx.uniq_e] += d_uniq * ctx.eps_e * sigmoid(table_e.rho[ctx.uniq_e])
    if ctx.aggregation == "weighted_sum":
        d_w = ctx.e_rows @ d_out                              # (K,)
        grads.dmu_w[ctx.idx_w] += d_w
        if ctx.eps_w is not None:
            grads.drho_w[ctx.idx_w] += d_w * ctx.eps_w * sigmoid(table_w.rho[ctx.idx_w])


@dataclass
class RecordContext:
    layout: RecordLayout
    embed_dim: int
    contexts: list          # one EncodeContext per categorical column
    embeddings: list        # the per-column embedding vectors


def encode_record(cfg: EncoderConfig, table_e: GaussianTable, table_w: GaussianTable,
                  layout: RecordLayout, categoricals: dict, numerics: np.ndarray,
                  rng: np.random.Generator):
    """Full feature vector for one record plus its backprop context."""
    d = cfg.spec.embed_dim_d
    embs, ctxs = [], []
    for col in layout.categorical_columns:
        value = categoricals.get(col)
        if value is None:
            value = layout.missing_token
        vec, ctx = encode(cfg, table_e, table_w, value, rng, column=col)
        embs.append(vec)
        ctxs.append(ctx)
    parts = [np.asarray(numerics, dtype=np.float64).ravel()] + embs
    if layout.rating_mode:
        parts.append(embs[0] * embs[1])
    features = np.concatenate(parts) if parts else np.zeros(0)
    assert features.size == layout.feature_dim(d)
    return features, RecordContext(layout, d, ctxs, embs)


def encode_record_mean(cfg: EncoderConfig, table_e: GaussianTable, table_w: GaussianTable,
                       layout: RecordLayout, categoricals: dict, numerics: np.ndarray) -> np.ndarray:
    embs = []
    for col in layout.categorical_columns:
        value = categoricals.get(col)
        if value is None:
            value = layout.missing_token
        embs.append(encode_mean(cfg, table_e, table_w, value, column=col))
    parts = [np.asarray(numerics, dtype=np.float64).ravel()] + embs
    if layout.rating_mode:
        parts.append(embs[0] * embs[1])
    return np.concatenate(parts)


def backprop_record(rctx: RecordContext, d_features: np.ndarray, grads: TableGrads,
                    table_e: GaussianTable, table_w: GaussianTable,
                    columns: set[str] | None = None) -> None:
    """Push d(loss)/d(features) into the tables.  `columns` restricts which
    categorical columns propagate (None = all)."""
    layout, d = rctx.layout, rctx.embed_dim
    d_embs = [d_features[layout.embedding_slice(c, d)].copy()
              for c in range(len(layout.categorical_columns))]
    if layout.rating_mode:
        d_prod = d_features[layout.product_slice(d)]
        d_embs[0] += d_prod * rctx.embeddings[1]
        d_embs[1] += d_prod * rctx.embeddings[0]
    for c, col in enumerate(layout.categorical_columns):
        if columns is not None and col not in columns:
            continue
        backprop_encode(rctx.contexts[c], d_embs[c], grads, table_e, table_w)


# ---------------------------------------------------------------------------
# Vectorized batch forward/backward (shared by PHE and the Ada baselines)
# ---------------------------------------------------------------------------

@dataclass
class BatchIndex:
    """Precomputed hash indices and numeric features for a batch of records."""

    layout: RecordLayout
    n: int
    numerics: np.ndarray             # (n, numeric_dim)
    idx_e: dict                      # column -> (n, K) int array
    idx_w: dict                      # column -> (n,) int array


def build_batch_index(cfg: EncoderConfig, layout: RecordLayout,
                      categoricals: dict, numerics: np.ndarray) -> BatchIndex:
    """Hash every record once.  `categoricals` maps column name to a list of
    item strings; signatures are computed per distinct item, then gathered."""
    numerics = np.asarray(numerics, dtype=np.float64)
    if numerics.ndim == 1:
        numerics = numerics.reshape(-1, max(layout.numeric_dim, 1))[:, :layout.numeric_dim]
    n = len(next(iter(categoricals.values()))) if categoricals else numerics.shape[0]
    idx_e, idx_w = {}, {}
    for col in layout.categorical_columns:
        values = ["" if v is None else v for v in categoricals[col]]
        uniques, codes = np.unique(np.asarray(values, dtype=object), return_inverse=True)
        sig_e = np.empty((uniques.size, cfg.spec.hash_count_K), dtype=np.intp)
        sig_w = np.empty(uniques.size, dtype=np.intp)
        for u, item in enumerate(uniques):
            e_list, w = signature_for(cfg, col, str(item))
            sig_e[u] = e_list
            sig_w[u] = w
        idx_e[col] = sig_e[codes]
        idx_w[col] = sig_w[codes]
    return BatchIndex(layout, n, numerics, idx_e, idx_w)


@dataclass
class BatchContext:
    per_column: list = field(default_factory=list)   # dicts keyed by column
    embeddings: dict = field(default_factory=dict)   # column -> (n, d)


def batch_forward(bidx: BatchIndex, cfg: EncoderConfig,
                  mu_e: np.ndarray, sig_e: np.ndarray | None,
                  mu_w: np.ndarray, sig_w: np.ndarray | None,
                  rng: np.random.Generator | None):
    """Features (n, F) for a batch plus the context for `batch_backward`.

    With sig_e/sig_w given, one noise row is drawn per distinct table row
    touched anywhere in the batch (so duplicate lookups share their sample
    within this forward pass); with them None the pass is deterministic.
    """
    layout, n = bidx.layout, bidx.n
    k, d = cfg.spec.hash_count_K, mu_e.shape[1]
    sample = sig_e is not None
    if sample:
        all_e = np.concatenate([bidx.idx_e[c].ravel() for c in layout.categorical_columns]) \
            if layout.categorical_columns else np.zeros(0, dtype=np.intp)
        uniq_e = np.unique(all_e)
        eps_e_rows = rng.standard_normal((uniq_e.size, d))
        weighted = cfg.aggregation == "weighted_sum"
        if weighted:
            all_w = np.concatenate([bidx.idx_w[c] for c in layout.categorical_columns])
            uniq_w = np.unique(all_w)
            eps_w_rows = rng.standard_normal((uniq_w.size, k))
    ctx = BatchContext()
    parts = [bidx.numerics]
    for col in layout.categorical_columns:
        ie = bidx.idx_e[col]                      # (n, K)
        iw = bidx.idx_w[col]                      # (n,)
        e = mu_e[ie]                              # (n, K, d)
        eps_e = eps_w = None
        if sample:
            eps_e = eps_e_rows[np.searchsorted(uniq_e, ie)]
            e = e + sig_e[ie] * eps_e
        if cfg.aggregation == "sum":
            w = np.ones((n, k))
        elif cfg.aggregation == "mean":
            w = np.full((n, k), 1.0 / k)
        else:
            w = mu_w[iw]
            if sample and sig_w is not None:
                eps_w = eps_w_rows[np.searchsorted(uniq_w, iw)]
                w = w + sig_w[iw] * eps_w
        emb = np.einsum("nk,nkd->nd", w, e)
        ctx.per_column.append({"column": col, "idx_e": ie, "idx_w": iw, "e": e,
                               "w": w, "eps_e": eps_e, "eps_w": eps_w})
        ctx.embeddings[col] = emb
        parts.append(emb)
    if layout.rating_mode:
        c0, c1 = layout.categorical_columns[:2]
        parts.append(ctx.embeddings[c0] * ctx.embeddings[c1])
    return np.concatenate(parts, axis=1), ctx


def batch_backward(bidx: BatchIndex, cfg: EncoderConfig, ctx: BatchContext,
                   d_features: np.ndarray,
                   mu_e_shape, mu_w_shape,
                   columns: set[str] | None = None):
    """Scatter d(loss)/d(features) back onto the tables.

    Returns (dmu_e, dsig_e, dmu_w, dsig_w); the sigma pieces are aligned
    with the shared per-pass noise and are zero matrices for mean passes.
    `columns` restricts gradient flow to the named categorical columns.
    """
    layout = bidx.layout
    d = mu_e_shape[1]
    dmu_e = np.zeros(mu_e_shape)
    dsig_e = np.zeros(mu_e_shape)
    dmu_w = np.zeros(mu_w_shape)
    dsig_w = np.zeros(mu_w_shape)
    d_embs = {}
    for c, col in enumerate(layout.categorical_columns):
        d_embs[col] = d_features[:, layout.embedding_slice(c, d)].copy()
    if layout.rating_mode:
        c0, c1 = layout.categorical_columns[:2]
        d_prod = d_features[:, layout.product_slice(d)]
        d_embs[c0] += d_prod * ctx.embeddings[c1]
        d_embs[c1] += d_prod * ctx.embeddings[c0]
    for entry in ctx.per_column:
        col = entry["column"]
        if columns is not None and col not in columns:
            continue
        g = d_embs[col]                                           # (n, d)
        de = entry["w"][:, :, None] * g[:, None, :]               # (n, K, d)
        flat_idx = entry["idx_e"].ravel()
        np.add.at(dmu_e, flat_idx, de.reshape(-1, d))
        if entry["eps_e"] is not None:
            np.add.at(dsig_e, flat_idx, (de * entry["eps_e"]).reshape(-1, d))
        if cfg.aggregation == "weighted_sum":
            dw = np.einsum("nd,nkd->nk", g, entry["e"])
            np.add.at(dmu_w, entry["idx_w"], dw)
            if entry["eps_w"] is not None:
                np.add.at(dsig_w, entry["idx_w"], dw * entry["eps_w"])
    return dmu_e, dsig_e, dmu_w, dsig_w
