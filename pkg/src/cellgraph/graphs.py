"""Cell graphs: k-nearest-neighbor topology over nucleus centroids and the
spectral link markers derived from the normalized graph Laplacian.

Markers come from the eigenvectors of L = I - D^{-1/2} A D^{-1/2}.  Rows of
the full eigenvector matrix are orthonormal, which is what lets marker dot
products encode node identity; truncating to a small marker dimension keeps
that property only approximately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorpusError, NumericError

GRAPH_DUMP_VERSION = 1


@dataclass
class CellGraph:
    """Directed k-NN edge list plus the symmetrized adjacency.

    ``edge_list[d] = (i, j)`` means j is one of node i's k nearest
    neighbors; edges are grouped by source node, neighbors ordered by
    (distance, index).  ``k`` is the effective per-node neighbor count
    after clamping to n - 1.
    """

    n: int
    centroids: np.ndarray  # (n, 2) float64, columns x, y
    k: int
    edge_list: np.ndarray  # (k*n, 2) intp
    adjacency: np.ndarray  # (n, n) float64, symmetric, zero diagonal
    degrees: np.ndarray  # (n,) float64 row sums of adjacency

    @property
    def num_edges(self) -> int:
        return self.edge_list.shape[0]


def build_knn_graph(centroids, k: int) -> CellGraph:
    """Connect each centroid to its k nearest neighbors (Euclidean).

    Distance ties break toward the smaller node index.  k is clamped to
    n - 1 so small crops still produce valid graphs; duplicates in the
    coordinates are allowed.
    """
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        raise ContractError("cannot build a graph from zero centroids")
    if not np.all(np.isfinite(pts)):
        raise ContractError("centroids must be finite")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    keff = min(k, n - 1)

    if keff == 0:
        edge_list = np.zeros((0, 2), dtype=np.intp)
    else:
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        idx = np.arange(n)
        order = np.lexsort((np.broadcast_to(idx, (n, n)), d2), axis=1)
        nbrs = order[:, :keff]
        src = np.repeat(idx, keff)
        edge_list = np.stack([src, nbrs.reshape(-1)], axis=1).astype(np.intp)

    adj = np.zeros((n, n), dtype=np.float64)
    if edge_list.size:
        adj[edge_list[:, 0], edge_list[:, 1]] = 1.0
        adj = np.maximum(adj, adj.T)
    return CellGraph(
        n=n,
        centroids=pts,
        k=keff,
        edge_list=edge_list,
        adjacency=adj,
        degrees=adj.sum(axis=1),
    )


def normalized_laplacian(g: CellGraph) -> np.ndarray:
    """L = I - D^{-1/2} A D^{-1/2}, with the 1/sqrt(degree) factor taken as
    0 for isolated nodes (their diagonal entry stays 1)."""
    with np.errstate(divide="ignore"):
        dinv = np.where(g.degrees > 0, 1.0 / np.sqrt(g.degrees), 0.0)
    lap = np.eye(g.n) - dinv[:, None] * g.adjacency * dinv[None, :]
    return lap


@dataclass
class LinkMarkers:
    """Per-node spectral markers.

    ``basis`` holds the full eigendecomposition of the Laplacian: row t is
    the eigenvector of the t-th smallest eigenvalue, sign-fixed so its
    largest-magnitude entry is positive (ties resolved by lowest index).
    ``markers[i]`` is node i's marker: the retained eigenvector entries at
    position i, zero-padded on the right when the graph is too small.
    """

    markers: np.ndarray  # (n, dim)
    eigenvalues: np.ndarray  # (n,) ascending
    basis: np.ndarray  # (n, n), row t = t-th eigenvector


def link_markers(lap: np.ndarray, dim: int, skip_first: bool = True) -> LinkMarkers:
    """Full symmetric eigendecomposition of the Laplacian, truncated to a
    marker of ``dim`` entries per node.

    By default the first (trivial, near-zero-eigenvalue) eigenvector is
    skipped and the next ``dim`` are used; ``skip_first=False`` keeps the
    whole ascending basis, which is the mode where marker dot products
    reproduce adjacency exactly.
    """
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    if lap.shape != (n, n) or not np.allclose(lap, lap.T, atol=1e-10):
        raise ContractError("link_markers requires a symmetric square matrix")
    try:
        eigvals, eigvecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as e:  # pragma: no cover - LAPACK failure
        raise NumericError(f"eigendecomposition failed: {e}") from e

    basis = eigvecs.T  # row t = eigenvector t, eigenvalues ascending
    for t in range(n):
        lead = int(np.argmax(np.abs(basis[t])))
        if basis[t, lead] < 0:
            basis[t] = -basis[t]

    start = 1 if skip_first else 0
    kept = basis[start : start + dim]
    markers = np.zeros((n, dim), dtype=np.float64)
    markers[:, : kept.shape[0]] = kept.T
    return LinkMarkers(markers=markers, eigenvalues=eigvals, basis=basis)


# ---------------------------------------------------------------------------
# dump format: a stable JSON schema used by the CLI `graph` subcommand


def write_graph_dump(path, g: CellGraph, lm: LinkMarkers) -> None:
    doc = {
        "version": GRAPH_DUMP_VERSION,
        "n": g.n,
        "k": g.k,
        "centroids": g.centroids.tolist(),
        "edge_list": [[int(i), int(j)] for i, j in g.edge_list],
        "eigenvalues": lm.eigenvalues.tolist(),
        "markers": lm.markers.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def parse_graph_dump(path) -> dict:
    """Read a graph dump back; raises CorpusError naming any missing field."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}: not valid JSON ({e})") from e
    for field in ("version", "n", "k", "centroids", "edge_list", "eigenvalues", "markers"):
        if field not in doc:
            raise CorpusError(f"{path}: missing field '{field}'")
    doc["centroids"] = np.asarray(doc["centroids"], dtype=np.float64).reshape(doc["n"], 2)
    doc["edge_list"] = np.asarray(doc["edge_list"], dtype=np.intp).reshape(-1, 2)
    doc["eigenvalues"] = np.asarray(doc["eigenvalues"], dtype=np.float64)
    doc["markers"] = np.asarray(doc["markers"], dtype=np.float64)
    return doc
