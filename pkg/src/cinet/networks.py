"""Directed block-model networks and community recovery.

Conventions used across the package:

* An adjacency matrix ``A`` is a dense ``(n, n)`` 0/1 array with zero
  diagonal, where ``A[j, i] == 1`` means a directed edge from sender ``j``
  to receiver ``i``.
* Community labels are 1-based integers in ``{1..K}``.
* Block matrices are indexed sender-community first: ``P[k-1, k2-1]`` is
  the probability of an edge from a node in community ``k`` to a node in
  community ``k2``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import linear_sum_assignment

from .errors import InputError, ParameterError, ParseError

__all__ = [
    "validate_adjacency",
    "validate_labels",
    "sample_sbm",
    "sample_interference_network",
    "detect_communities",
    "align_labels",
    "adjusted_rand_index",
    "ingest_edge_list",
    "EdgeListResult",
    "write_adjacency_csv",
    "write_labels_csv",
    "read_labels_csv",
]


def validate_adjacency(A: np.ndarray) -> np.ndarray:
    """Check the 0/1, zero-diagonal, square contract and return ``A`` as int8."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"adjacency matrix must be square, got shape {A.shape}")
    if not np.isin(A, (0, 1)).all():
        raise InputError("adjacency entries must be exactly 0 or 1")
    if np.diagonal(A).any():
        raise InputError("adjacency matrix must have a zero diagonal (no self-loops)")
    return A.astype(np.int8, copy=False)


def validate_labels(labels: np.ndarray, K: int | None = None, allow_empty: bool = False) -> np.ndarray:
    """Check labels lie in {1..K}; unless ``allow_empty``, every community occurs."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be a 1-d integer array")
    if K is None:
        K = int(labels.max()) if labels.size else 0
    if K < 1:
        raise InputError("community count K must be >= 1")
    if labels.min() < 1 or labels.max() > K:
        raise InputError(f"labels must lie in {{1..{K}}}")
    if not allow_empty and len(np.unique(labels)) != K:
        raise InputError("every community in {1..K} must be non-empty in simulation mode")
    return labels.astype(np.int64, copy=False)


def _validate_block_matrix(P: np.ndarray, K: int | None = None) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ParameterError(f"block matrix must be square, got shape {P.shape}")
    if K is not None and P.shape[0] != K:
        raise ParameterError(f"block matrix is {P.shape[0]}x{P.shape[0]}, expected {K}x{K}")
    if np.any(P < 0.0) or np.any(P > 1.0):
        raise ParameterError("block probabilities must lie in [0, 1]")
    return P


def _bernoulli_block_graph(labels: np.ndarray, P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    idx = labels - 1
    probs = P[np.ix_(idx, idx)]
    A = (rng.random(probs.shape) < probs).astype(np.int8)
    np.fill_diagonal(A, 0)
    return A


def sample_sbm(n, labels_or_prior, P, seed):
    """Draw a directed stochastic block model graph.

    Parameters
    ----------
    n : int
        Node count, at least 2.
    labels_or_prior : array
        Either a length-``n`` integer array of fixed labels in {1..K}, or a
        length-``K`` float vector of categorical weights (summing to 1) from
        which labels are drawn i.i.d.
    P : (K, K) array
        Edge probabilities, sender community first.
    seed : int
        RNG seed; identical inputs and seed give an identical draw.

    Returns
    -------
    (A, labels) : ((n, n) int8 array, (n,) int array)
    """
    if n < 2:
        raise InputError("at least 2 nodes are required")
    P = _validate_block_matrix(P)
    K = P.shape[0]
    rng = np.random.default_rng(seed)
    arr = np.asarray(labels_or_prior)
    if np.issubdtype(arr.dtype, np.integer):
        labels = validate_labels(arr, K, allow_empty=True)
        if labels.size != n:
            raise InputError(f"fixed labels have length {labels.size}, expected {n}")
    else:
        weights = arr.astype(float)
        if weights.ndim != 1 or weights.size != K:
            raise InputError(f"label weights must have length K={K}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-8:
            raise ParameterError("label weights must be nonnegative and sum to 1")
        labels = rng.choice(K, size=n, p=weights) + 1
    A = _bernoulli_block_graph(labels, P, rng)
    return A, labels


def sample_interference_network(labels, Pi, seed):
    """Draw the latent interference network given shared community labels.

    Entries are independent Bernoulli given the labels: edge ``j -> i`` has
    probability ``Pi[C_j - 1, C_i - 1]`` (sender community first).
    """
    Pi = _validate_block_matrix(Pi)
    labels = validate_labels(labels, Pi.shape[0], allow_empty=True)
    rng = np.random.default_rng(seed)
    return _bernoulli_block_graph(labels, Pi, rng)


# ---------------------------------------------------------------------------
# Community detection: regularized spectral clustering + greedy refinement
# ---------------------------------------------------------------------------


def _block_counts(A: np.ndarray, labels: np.ndarray, K: int):
    onehot = np.zeros((A.shape[0], K))
    onehot[np.arange(A.shape[0]), labels - 1] = 1.0
    M = onehot.T @ A @ onehot
    sizes = onehot.sum(axis=0)
    return M, sizes


def _profile_loglik(M: np.ndarray, sizes: np.ndarray) -> float:
    pairs = np.outer(sizes, sizes) - np.diag(sizes)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(pairs > 0, M / np.maximum(pairs, 1), 0.0)
        term = M * np.log(np.where(p > 0, p, 1.0)) + (pairs - M) * np.log(
            np.where(p < 1, 1.0 - p, 1.0)
        )
    return float(term.sum())


def _greedy_refine(A, labels, K, max_sweeps):
    n = A.shape[0]
    labels = labels.copy()
    Af = A.astype(float)
    onehot = np.zeros((n, K))
    onehot[np.arange(n), labels - 1] = 1.0
    Dout = Af @ onehot
    Din = Af.T @ onehot
    M, sizes = _block_counts(A, labels, K)
    best_ll = _profile_loglik(M, sizes)
    for _ in range(max_sweeps):
        moved = False
        for i in range(n):
            a = labels[i] - 1
            if sizes[a] <= 1:
                continue  # never empty out a community
            best_move, best_gain = None, 1e-9
            for b in range(K):
                if b == a:
                    continue
                M2 = M.copy()
                M2[a, :] -= Dout[i]
                M2[:, a] -= Din[i]
                M2[b, :] += Dout[i]
                M2[:, b] += Din[i]
                sizes2 = sizes.copy()
                sizes2[a] -= 1
                sizes2[b] += 1
                gain = _profile_loglik(M2, sizes2) - best_ll
                if gain > best_gain:
                    best_move, best_gain = (b, M2, sizes2), gain
            if best_move is not None:
                b, M, sizes = best_move
                best_ll += best_gain
                Dout[:, a] -= Af[:, i]
                Dout[:, b] += Af[:, i]
                Din[:, a] -= Af[i, :]
                Din[:, b] += Af[i, :]
                labels[i] = b + 1
                moved = True
        if not moved:
            break
    return labels


def detect_communities(A, K, *, seed=0, n_restarts=5, refine=True, max_sweeps=10, tau=None):
    """Recover K community labels from an observed directed network.

    The matrix is symmetrized as ``A + A.T``, a degree-regularized spectral
    embedding is built from the leading K eigenvectors, rows are normalized
    and clustered with seeded k-means, and the partition is then improved by
    greedy single-node moves on the directed block-model profile
    log-likelihood. Deterministic for a fixed seed.
    """
    A = validate_adjacency(A)
    n = A.shape[0]
    if K < 1:
        raise InputError("K must be >= 1")
    if K > n:
        raise InputError(f"K={K} exceeds node count n={n}")
    if K == 1:
        return np.ones(n, dtype=np.int64)

    S = (A + A.T).astype(float)
    deg = S.sum(axis=1)
    if tau is None:
        tau = deg.mean() if deg.mean() > 0 else 1.0
    dinv = 1.0 / np.sqrt(deg + tau)
    L = dinv[:, None] * S * dinv[None, :]
    vals, vecs = np.linalg.eigh(L)
    lead = np.argsort(np.abs(vals))[-K:]
    U = vecs[:, lead]
    norms = np.linalg.norm(U, axis=1)
    U = U / np.where(norms > 0, norms, 1.0)[:, None]

    rng = np.random.default_rng(seed)
    best_labels, best_dist = None, np.inf
    for _ in range(max(1, n_restarts)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # kmeans2 warns on empty clusters
            centroids, lab = kmeans2(U, K, minit="++", seed=rng)
        dist = float(((U - centroids[lab]) ** 2).sum())
        if dist < best_dist:
            best_dist, best_labels = dist, lab
    labels = best_labels.astype(np.int64) + 1
    # guard against empty clusters from k-means before refinement
    for k in range(1, K + 1):
        if not np.any(labels == k):
            far = np.argsort(np.linalg.norm(U - U.mean(axis=0), axis=1))[-1]
            labels[far] = k
    if refine:
        labels = _greedy_refine(A, labels, K, max_sweeps)
    return labels


def align_labels(est, truth):
    """Best label permutation matching an estimated partition to a reference.

    Solves the assignment problem on the K x K confusion matrix and returns
    ``(perm, agreement)`` where ``perm[a-1]`` is the reference label assigned
    to estimated label ``a`` and ``agreement`` is the matched fraction.
    """
    est = np.asarray(est)
    truth = np.asarray(truth)
    if est.shape != truth.shape:
        raise InputError("label vectors must have the same length")
    K = int(max(est.max(), truth.max()))
    est = validate_labels(est, K, allow_empty=True)
    truth = validate_labels(truth, K, allow_empty=True)
    conf = np.zeros((K, K))
    np.add.at(conf, (est - 1, truth - 1), 1.0)
    rows, cols = linear_sum_assignment(-conf)
    perm = np.empty(K, dtype=np.int64)
    perm[rows] = cols + 1
    agreement = conf[rows, cols].sum() / est.size
    return perm, float(agreement)


def apply_permutation(labels, perm):
    """Relabel ``labels`` by ``perm`` as returned by :func:`align_labels`."""
    perm = np.asarray(perm)
    return perm[np.asarray(labels) - 1]


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected agreement between two partitions."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InputError("partitions must have the same length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    conf = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(conf, (ai, bi), 1.0)
    comb = lambda x: x * (x - 1) / 2.0
    sum_ij = comb(conf).sum()
    sum_a = comb(conf.sum(axis=1)).sum()
    sum_b = comb(conf.sum(axis=0)).sum()
    total = comb(n)
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# Edge-list ingestion and CSV export
# ---------------------------------------------------------------------------


@dataclass
class EdgeListResult:
    """Adjacency built from an edge list plus the node-id bookkeeping."""

    adjacency: np.ndarray
    node_ids: list
    index_of: dict = field(repr=False)
    self_loops_dropped: int = 0
    duplicates_dropped: int = 0
    zero_weight_dropped: int = 0


def ingest_edge_list(path, directed=True, node_order="sorted"):
    """Read a ``source,target[,weight]`` CSV into an adjacency matrix.

    Positive weights collapse to an edge; self-loops are dropped (with a
    warning carrying the count) and duplicate rows are deduplicated. Node ids
    are arbitrary strings; their ordering is ``sorted`` (default) or
    ``first-seen``.
    """
    if node_order not in ("sorted", "first-seen"):
        raise InputError(f"unknown node-id policy {node_order!r}")
    edges = []
    seen_order = []
    seen = set()
    self_loops = 0
    zero_weight = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty edge-list file")
        header = [h.strip().lower() for h in header]
        if header[:2] != ["source", "target"]:
            raise ParseError(f"expected header 'source,target[,weight]', got {header}", line_no=1)
        has_weight = len(header) >= 3 and header[2] == "weight"
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ParseError(f"expected at least 2 columns, got {len(row)}", line_no=line_no)
            src, dst = row[0].strip(), row[1].strip()
            if not src or not dst:
                raise ParseError("empty node id", line_no=line_no)
            if has_weight and len(row) >= 3 and row[2].strip():
                try:
                    w = float(row[2])
                except ValueError:
                    raise ParseError(f"unparseable weight {row[2]!r}", line_no=line_no) from None
            else:
                w = 1.0
            for node in (src, dst):
                if node not in seen:
                    seen.add(node)
                    seen_order.append(node)
            if w <= 0:
                zero_weight += 1
                continue
            if src == dst:
                self_loops += 1
                continue
            edges.append((src, dst))
    if not seen_order:
        raise InputError(f"{path}: no edge rows found")
    node_ids = sorted(seen_order) if node_order == "sorted" else seen_order
    index_of = {node: i for i, node in enumerate(node_ids)}
    n = len(node_ids)
    A = np.zeros((n, n), dtype=np.int8)
    duplicates = 0
    for src, dst in edges:
        j, i = index_of[src], index_of[dst]
        if A[j, i]:
            duplicates += 1
            continue
        A[j, i] = 1
        if not directed:
            A[i, j] = 1
    if self_loops:
        warnings.warn(f"dropped {self_loops} self-loop row(s) from {path}", stacklevel=2)
    return EdgeListResult(
        adjacency=A,
        node_ids=node_ids,
        index_of=index_of,
        self_loops_dropped=self_loops,
        duplicates_dropped=duplicates,
        zero_weight_dropped=zero_weight,
    )


def write_adjacency_csv(A, path, dense_limit=2000):
    """Export a 0/1 matrix: dense CSV up to ``dense_limit`` nodes, else a `j,i` coordinate list."""
    A = validate_adjacency(A)
    n = A.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if n <= dense_limit:
            for row in A:
                writer.writerow(row.tolist())
        else:
            writer.writerow(["j", "i"])
            for j, i in zip(*np.nonzero(A)):
                writer.writerow([int(j), int(i)])


def write_labels_csv(labels, path, node_ids=None):
    labels = np.asarray(labels)
    if node_ids is None:
        node_ids = list(range(labels.size))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "label"])
        for node, lab in zip(node_ids, labels):
            writer.writerow([node, int(lab)])


def read_labels_csv(path):
    """Read a ``node_id,label`` CSV; returns (node_ids, labels)."""
    node_ids, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty labels file")
        if [h.strip().lower() for h in header[:2]] != ["node_id", "label"]:
            raise ParseError(f"expected header 'node_id,label', got {header}", line_no=1)
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                labels.append(int(row[1]))
            except (IndexError, ValueError):
                raise ParseError(f"unparseable label row {row!r}", line_no=line_no) from None
            node_ids.append(row[0].strip())
    if not node_ids:
        raise InputError(f"{path}: no label rows found")
    return node_ids, np.asarray(labels, dtype=np.int64)
