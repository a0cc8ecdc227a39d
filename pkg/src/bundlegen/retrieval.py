"""Bundle scoring, ranking, and the pairwise recommendation loss.

A pseudo bundle is matched against the predefined catalog two ways: exact
item overlap (Jaccard) and latent similarity (cosine of mean-pooled item
embeddings). The final score is the convex mix alpha * jaccard +
(1 - alpha) * cosine. Only the cosine part is differentiable, so the
ranking loss trains the embedding side; set overlap acts as a constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from bundlegen import autodiff as ad
from bundlegen.errors import ValidationError

log = logging.getLogger(__name__)


class BundleCatalog:
    """Predefined bundles: binary item vectors plus mean-pooled embeddings.

    ``refresh(r_hat)`` recomputes the embedding side on the current tape so
    ranking-loss gradients reach the base item embeddings.
    """

    def __init__(self, Y: sp.csr_matrix, r_hat: ad.Tensor | None = None):
        Y = Y.tocsr()
        sizes = np.asarray((Y > 0).sum(axis=1)).ravel().astype(np.int64)
        if np.any(sizes == 0):
            raise ValidationError(
                f"catalog has empty bundles: {np.flatnonzero(sizes == 0)[:10].tolist()}"
            )
        self.Y_bool = (Y > 0).astype(np.float64).tocsr()
        self.sizes = sizes
        self.num_bundles, self.num_items = Y.shape
        pool = self.Y_bool.multiply(1.0 / sizes[:, None]).tocsr()
        pool.sort_indices()
        self.pool = pool
        self.pool_t = pool.T.tocsr()
        self.pool_t.sort_indices()
        self.embeddings = None
        if r_hat is not None:
            self.refresh(r_hat)

    def refresh(self, r_hat: ad.Tensor) -> ad.Tensor:
        self.embeddings = ad.spmm(self.pool, self.pool_t, r_hat)
        return self.embeddings

    @property
    def embedding_values(self) -> np.ndarray:
        return self.embeddings.value

    def items_of(self, b) -> np.ndarray:
        return self.Y_bool.indices[self.Y_bool.indptr[b] : self.Y_bool.indptr[b + 1]]


@dataclass(frozen=True)
class ScoredBundle:
    bundle_id: int
    y_jaccard: float
    y_cosine: float
    y: float


def jaccard(items_a, items_b) -> float:
    """Set overlap |a∩b| / |a∪b|; empty query scores 0."""
    a = set(np.asarray(items_a, dtype=np.int64).tolist())
    b = set(np.asarray(items_b, dtype=np.int64).tolist())
    if not a or not b:
        return 0.0
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


def jaccard_all(catalog: BundleCatalog, items_g) -> np.ndarray:
    """Jaccard of the query set against every catalog bundle at once."""
    g = np.asarray(items_g, dtype=np.int64)
    if len(g) == 0:
        return np.zeros(catalog.num_bundles)
    indicator = np.zeros(catalog.num_items)
    indicator[g] = 1.0
    inter = catalog.Y_bool @ indicator
    union = catalog.sizes + len(g) - inter
    return inter / union


def bundle_embedding(items, r_hat_value: np.ndarray) -> np.ndarray:
    """Mean of the normalized item embeddings of a bundle."""
    items = np.asarray(items, dtype=np.int64)
    if len(items) == 0:
        raise ValueError("bundle_embedding of an empty item set")
    return r_hat_value[items].mean(axis=0)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; zero vectors score 0."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def cosine_all(bhat_values: np.ndarray, g_hat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(bhat_values, axis=1)
    ng = np.linalg.norm(g_hat)
    if ng == 0.0:
        return np.zeros(len(bhat_values))
    safe = np.where(norms > 0.0, norms, 1.0)
    out = (bhat_values @ g_hat) / (safe * ng)
    out[norms == 0.0] = 0.0
    return out


def combined_score(alpha: float, y_jaccard, y_cosine):
    """Convex mix of the two similarities."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * y_jaccard + (1.0 - alpha) * y_cosine


def query_embedding(pseudo_items, r_hat_value, fallback_items=None) -> np.ndarray:
    """Mean embedding of the pseudo bundle, or of the fallback history when
    the pseudo bundle is empty. Returns the zero vector if both are empty."""
    items = np.asarray(pseudo_items, dtype=np.int64)
    if len(items) == 0:
        if fallback_items is None or len(fallback_items) == 0:
            log.warning("empty pseudo bundle and no fallback items; cosine is 0")
            return np.zeros(r_hat_value.shape[1])
        items = np.asarray(fallback_items, dtype=np.int64)
    return bundle_embedding(items, r_hat_value)


def rank_topk(
    pseudo_items,
    catalog: BundleCatalog,
    alpha: float,
    k: int,
    mask=(),
    r_hat_value: np.ndarray | None = None,
    fallback_items=None,
) -> list[ScoredBundle]:
    """Top-k catalog bundles by combined score.

    Ties break toward the smaller bundle id; bundles in ``mask`` (the
    user's training positives) are excluded. Result length is
    min(k, catalog size - masked).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    y_j = jaccard_all(catalog, pseudo_items)
    if alpha < 1.0:
        if r_hat_value is None:
            raise ValueError("r_hat_value is required when alpha < 1")
        g_hat = query_embedding(pseudo_items, r_hat_value, fallback_items)
        y_c = cosine_all(catalog.embedding_values, g_hat)
    else:
        y_c = np.zeros(catalog.num_bundles)
    y = combined_score(alpha, y_j, y_c)

    allowed = np.ones(catalog.num_bundles, dtype=bool)
    mask = np.asarray(list(mask), dtype=np.int64)
    if len(mask):
        allowed[mask] = False
    candidates = np.flatnonzero(allowed)
    order = np.lexsort((candidates, -y[candidates]))
    top = candidates[order[:k]]
    return [
        ScoredBundle(int(b), float(y_j[b]), float(y_c[b]), float(y[b])) for b in top
    ]


class BundleTripleBatch(NamedTuple):
    user: np.ndarray
    pos: np.ndarray
    neg: np.ndarray


def sample_bundle_triples(X_train: sp.csr_matrix, batch: int, rng) -> BundleTripleBatch:
    """(user, adopted bundle, non-adopted bundle) triples, seeded rng.

    Users are drawn uniformly among those with at least one positive;
    users whose positives cover the whole catalog are skipped with a
    warning. Negatives come from rejection sampling.
    """
    X = X_train.tocsr()
    n_users, n_bundles = X.shape
    counts = np.diff(X.indptr)
    eligible = np.flatnonzero((counts > 0) & (counts < n_bundles))
    saturated = np.flatnonzero(counts >= n_bundles)
    if len(saturated):
        log.warning(
            "%d user(s) interact with every bundle; skipped in sampling", len(saturated)
        )
    if len(eligible) == 0:
        raise ValidationError("no user has both a positive and a negative bundle")
    users = eligible[rng.integers(0, len(eligible), size=batch)]
    pos = np.empty(batch, dtype=np.int64)
    neg = np.empty(batch, dtype=np.int64)
    for t, u in enumerate(users):
        bundles = X.indices[X.indptr[u] : X.indptr[u + 1]]
        pos[t] = bundles[rng.integers(len(bundles))]
        positives = set(bundles.tolist())
        while True:
            b = int(rng.integers(n_bundles))
            if b not in positives:
                neg[t] = b
                break
    return BundleTripleBatch(users.astype(np.int64), pos, neg)


def recommendation_loss(
    r_hat: ad.Tensor,
    catalog: BundleCatalog,
    triples: BundleTripleBatch,
    query_items_by_user: dict,
    alpha: float,
) -> ad.Tensor:
    """Mean pairwise loss -ln σ(y_pos - y_neg) over bundle triples.

    The Jaccard part of each score is a constant of the discrete item sets;
    gradients flow through the cosine part into the item embeddings.
    """
    users = np.unique(triples.user)
    row_of = {int(u): r for r, u in enumerate(users)}
    rows, cols, vals = [], [], []
    for r, u in enumerate(users):
        items = np.asarray(query_items_by_user[int(u)], dtype=np.int64)
        if len(items) == 0:
            continue
        rows.extend([r] * len(items))
        cols.extend(items)
        vals.extend([1.0 / len(items)] * len(items))
    G = sp.csr_matrix(
        (vals, (rows, cols)), shape=(len(users), catalog.num_items)
    )
    Gt = G.T.tocsr()
    g_hat = ad.spmm(G, Gt, r_hat)

    user_rows = np.array([row_of[int(u)] for u in triples.user], dtype=np.int64)
    gq = ad.gather_rows(g_hat, user_rows)
    bpos = ad.gather_rows(catalog.embeddings, triples.pos)
    bneg = ad.gather_rows(catalog.embeddings, triples.neg)
    cos_pos = ad.cosine_rows(bpos, gq)
    cos_neg = ad.cosine_rows(bneg, gq)

    jac = np.empty(len(triples.user))
    jac_neg = np.empty(len(triples.user))
    for t, u in enumerate(triples.user):
        q = query_items_by_user[int(u)]
        jac[t] = jaccard(q, catalog.items_of(triples.pos[t]))
        jac_neg[t] = jaccard(q, catalog.items_of(triples.neg[t]))
    margin_const = alpha * (jac - jac_neg)
    margin = ad.add(
        ad.constant(margin_const), ad.scale(ad.sub(cos_pos, cos_neg), 1.0 - alpha)
    )
    return ad.mean_all(ad.softplus(ad.scale(margin, -1.0)))
