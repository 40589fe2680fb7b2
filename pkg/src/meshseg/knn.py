"""Exact k-nearest-neighbor graphs in feature space and edge tensor assembly.

Graph construction is non-differentiable structure: neighbor indices are
computed from raw feature values and gradients never flow through the
selection.  Edge tensors, by contrast, are built with gather_rows and are
fully differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from meshseg.tensor import DimensionError, concat_channels, gather_rows, sub


class GraphConfigError(ValueError):
    """Neighborhood size incompatible with the cell count."""


@dataclass
class KnnGraph:
    """M x K table of neighbor cell ids, nearest first."""

    indices: np.ndarray  # (M, K) int64
    k: int

    @property
    def num_cells(self):
        return self.indices.shape[0]

    def permuted_neighbors(self, rng):
        """Same graph with each row's neighbor order shuffled (for tests)."""
        idx = self.indices.copy()
        for row in idx:
            rng.shuffle(row)
        return KnnGraph(indices=idx, k=self.k)


def _pairwise_sq_dists(features):
    # ||a-b||^2 expanded; cheap at desk scale and exact enough for ranking.
    sq = np.einsum("ij,ij->i", features, features)
    d = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
    np.maximum(d, 0.0, out=d)
    return d


def build_knn_graph(features, k, include_self=False):
    """Rows list the k cells nearest in Euclidean feature distance.

    The center itself is excluded unless include_self is set; distance ties
    break toward the lower cell index.
    """
    features = np.asarray(features)
    m = features.shape[0]
    if k < 1 or k >= m:
        raise GraphConfigError(f"k={k} must satisfy 1 <= k < M={m}")
    if not np.isfinite(features).all():
        raise ValueError("non-finite feature values")
    d = _pairwise_sq_dists(features)
    if not include_self:
        np.fill_diagonal(d, np.inf)

    # Partition to the k smallest per row, then order those by distance with
    # ties kept in index order (candidates pre-sorted by index + stable sort).
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    cand = np.sort(part, axis=1)
    d_cand = np.take_along_axis(d, cand, axis=1)
    order = np.argsort(d_cand, axis=1, kind="stable")
    idx = np.take_along_axis(cand, order, axis=1)

    # Ties straddling the partition boundary need the full candidate set.
    kth = d_cand.max(axis=1)
    counts = (d <= kth[:, None]).sum(axis=1)
    for i in np.nonzero(counts > k)[0]:
        tied = np.nonzero(d[i] <= kth[i])[0]  # ascending index already
        tied = tied[np.argsort(d[i][tied], kind="stable")]
        idx[i] = tied[:k]
    return KnnGraph(indices=idx.astype(np.int64), k=k)


def build_block_knn_graph(features, block_size, k, include_self=False):
    """Per-block KNN for a batch of equally sized meshes stacked along rows.

    Neighbors never cross block boundaries; indices are global row ids.
    """
    features = np.asarray(features)
    total = features.shape[0]
    if total % block_size:
        raise DimensionError(
            f"{total} rows do not divide into blocks of {block_size}"
        )
    blocks = []
    for start in range(0, total, block_size):
        g = build_knn_graph(features[start:start + block_size], k, include_self)
        blocks.append(g.indices + start)
    return KnnGraph(indices=np.concatenate(blocks, axis=0), k=k)


def center_index_table(m, k):
    """Index table mapping every (i, j) edge to its center cell i."""
    return np.repeat(np.arange(m, dtype=np.int64)[:, None], k, axis=1)


def gather_edge_features(features, graph):
    """Tiled center features and gathered neighbor features, both (M, K, d)."""
    m = features.data.shape[0]
    if graph.num_cells != m:
        raise DimensionError(
            f"graph over {graph.num_cells} cells applied to {m} feature rows"
        )
    centers = gather_rows(features, center_index_table(m, graph.k))
    neighbors = gather_rows(features, graph.indices)
    return centers, neighbors


def edge_tensors(features, graph):
    """Edge inputs for one layer: (center (+) neighbor, center - neighbor)."""
    centers, neighbors = gather_edge_features(features, graph)
    return concat_channels([centers, neighbors]), sub(centers, neighbors)
