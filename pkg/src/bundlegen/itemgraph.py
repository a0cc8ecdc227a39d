"""Item co-occurrence graph and correlation embeddings.

Two items bought by overlapping user sets are assumed to combine well.
The co-occurrence matrix C = Zᵀ·Z induces an undirected item graph
(edge iff off-diagonal C > 0); item embeddings are propagated over it with
degree-normalized neighbor averaging, layer-averaged, and L2-normalized.
Dot products of the normalized rows are correlation scores in [-1, 1];
distance is exp(-score). The clustering loss pulls co-occurring pairs
above non-co-occurring ones in correlation.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from bundlegen import autodiff as ad
from bundlegen.errors import SamplingError

log = logging.getLogger(__name__)


def build_cooccurrence(Z) -> sp.csr_matrix:
    """Exact integer co-occurrence counts C = Zᵀ·Z, sparse symmetric."""
    Z = Z.tocsr().astype(np.int64)
    return (Z.T @ Z).tocsr()


class ItemGraph:
    """Undirected item graph from co-occurrence, with normalized adjacency.

    Self-loops are dropped (every interacted item co-occurs with itself, so
    keeping them would make all nodes self-adjacent and propagation
    degenerate). Isolated items get an identity row in the normalized
    adjacency so their embeddings pass through propagation unchanged.
    """

    def __init__(self, C: sp.csr_matrix):
        n = C.shape[0]
        adj = C.tocsr(copy=True)
        adj.setdiag(0)
        adj.eliminate_zeros()
        adj.data = np.ones_like(adj.data)
        self.num_items = n
        self.adjacency = adj.astype(np.float64)
        self.degrees = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
        self.isolated = np.flatnonzero(self.degrees == 0)

        inv_sqrt = np.zeros(n)
        nz = self.degrees > 0
        inv_sqrt[nz] = 1.0 / np.sqrt(self.degrees[nz])
        D = sp.diags(inv_sqrt)
        norm = (D @ self.adjacency @ D).tocsr()
        if len(self.isolated):
            eye = sp.coo_matrix(
                (
                    np.ones(len(self.isolated)),
                    (self.isolated, self.isolated),
                ),
                shape=(n, n),
            )
            norm = (norm + eye).tocsr()
        norm.sort_indices()
        self.norm_adjacency = norm

    def neighbors(self, i) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i] : a.indptr[i + 1]]


def propagate(graph: ItemGraph, r0: ad.Tensor, n_layers: int) -> list:
    """Degree-normalized neighbor averaging; returns [r0, r1, ..., rL]."""
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    A = graph.norm_adjacency  # symmetric, so it is its own transpose
    layers = [r0]
    for _ in range(n_layers):
        layers.append(ad.spmm(A, A, layers[-1]))
    return layers


def finalize(layers) -> tuple:
    """Layer-average then row-normalize; returns (r_star, r_hat)."""
    r_star = ad.scale(ad.add_n(layers), 1.0 / len(layers))
    norms = np.linalg.norm(r_star.value, axis=1)
    zero_rows = np.flatnonzero(norms == 0.0)
    if len(zero_rows):
        log.warning(
            "finalize: %d zero-norm item rows stay zero: %s",
            len(zero_rows),
            zero_rows[:20].tolist(),
        )
    r_hat = ad.l2_normalize_rows(r_star)
    return r_star, r_hat


def correlation(r_hat_value: np.ndarray, i: int, j: int) -> float:
    """Correlation score of an item pair: dot of normalized embeddings."""
    return float(r_hat_value[i] @ r_hat_value[j])


def distance(score: float) -> float:
    """Distance induced by a correlation score: 1/exp(score)."""
    return float(np.exp(-score))


def knn_cluster(r_hat_value: np.ndarray, i: int, k: int) -> np.ndarray:
    """The k items nearest to item i, ascending distance, ids break ties.

    The anchor itself is excluded from the neighbor list.
    """
    n = r_hat_value.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < {n}, got {k}")
    scores = r_hat_value @ r_hat_value[i]
    scores[i] = -np.inf
    # ascending distance == descending score; lexsort's last key dominates
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


class TripleBatch(NamedTuple):
    anchor: np.ndarray
    pos: np.ndarray
    neg: np.ndarray


class TripleSampler:
    """Samples (anchor, co-occurring, non-co-occurring) item triples.

    Anchors are uniform over items with at least one neighbor and at least
    one non-neighbor; positives uniform over the anchor's neighbors;
    negatives by rejection over non-neighbors.
    """

    def __init__(self, graph: ItemGraph):
        n = graph.num_items
        self.graph = graph
        self.candidates = np.flatnonzero(
            (graph.degrees > 0) & (graph.degrees < n - 1)
        )
        if len(self.candidates) == 0:
            raise SamplingError(
                "no item has both a co-occurring and a non-co-occurring partner"
            )
        self._neighbor_sets = {}

    def _nbr_set(self, i):
        s = self._neighbor_sets.get(i)
        if s is None:
            s = frozenset(self.graph.neighbors(i).tolist())
            self._neighbor_sets[i] = s
        return s

    def sample(self, batch: int, rng) -> TripleBatch:
        n = self.graph.num_items
        anchors = self.candidates[rng.integers(0, len(self.candidates), size=batch)]
        pos = np.empty(batch, dtype=np.int64)
        neg = np.empty(batch, dtype=np.int64)
        for t, i in enumerate(anchors):
            nbrs = self.graph.neighbors(i)
            pos[t] = nbrs[rng.integers(len(nbrs))]
            nbr_set = self._nbr_set(i)
            while True:
                j = int(rng.integers(n))
                if j != i and j not in nbr_set:
                    neg[t] = j
                    break
        return TripleBatch(anchors.astype(np.int64), pos, neg)


def sample_triples(C: sp.csr_matrix, batch: int, rng) -> TripleBatch:
    """One-shot triple batch straight from a co-occurrence matrix."""
    return TripleSampler(ItemGraph(C)).sample(batch, rng)


def clustering_loss(r_hat: ad.Tensor, triples: TripleBatch) -> ad.Tensor:
    """Mean triplet loss -ln σ(s_pos - s_neg) over a batch.

    With distance d = exp(-s), the pairwise term ln(1/d_ij) - ln(1/d_ij')
    collapses to s_ij - s_ij', so the loss is computed directly on
    correlation scores.
    """
    ra = ad.gather_rows(r_hat, triples.anchor)
    rp = ad.gather_rows(r_hat, triples.pos)
    rn = ad.gather_rows(r_hat, triples.neg)
    s_pos = ad.rowdot(ra, rp)
    s_neg = ad.rowdot(ra, rn)
    return ad.mean_all(ad.softplus(ad.sub(s_neg, s_pos)))


class ItemEmbeddingIndex:
    """Trainable base embeddings plus their propagated, normalized form.

    ``refresh()`` rebuilds the differentiable propagation graph from the
    current r0; ``r_hat`` is the tape tensor and ``r_hat_value`` a plain
    array view for queries (kNN, correlation).
    """

    def __init__(self, graph: ItemGraph, dim: int, n_layers: int, rng):
        self.graph = graph
        self.n_layers = n_layers
        bound = 1.0 / np.sqrt(dim)
        self.r0 = ad.parameter(
            rng.uniform(-bound, bound, size=(graph.num_items, dim))
        )
        self.r_star = None
        self.r_hat = None
        self.refresh()

    def refresh(self):
        layers = propagate(self.graph, self.r0, self.n_layers)
        self.r_star, self.r_hat = finalize(layers)
        return self.r_hat

    @property
    def r_hat_value(self) -> np.ndarray:
        return self.r_hat.value

    def correlation(self, i, j) -> float:
        return correlation(self.r_hat_value, i, j)

    def knn_cluster(self, i, k) -> np.ndarray:
        return knn_cluster(self.r_hat_value, i, k)


def export_embeddings(r_hat_value: np.ndarray, path):
    """One line per item: ``item_id v1 ... vd`` in full double precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(r_hat_value):
            fh.write(str(i) + " " + " ".join(f"{x:.17g}" for x in row) + "\n")


def import_embeddings(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            rows.append((int(parts[0]), [float(x) for x in parts[1:]]))
    rows.sort()
    return np.array([vec for _, vec in rows], dtype=np.float64)
