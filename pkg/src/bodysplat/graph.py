"""Point graph over Gaussian centers with random-walk embeddings.

The graph links every point to its k nearest neighbors with distance
weights. Walks traverse it as undirected, stepping to closer neighbors
more often (probability proportional to 1/distance), and feed a skip-gram
model with negative sampling whose input vectors become the per-node
embeddings. Contrastive batches pair each node with same-or-adjacent-part
positives and everything-else negatives; the topology loss pushes anchor
embeddings toward positives and away from negatives by cosine similarity.

Everything here is bit-reproducible for a fixed seed: walk randomness uses
one child stream per node, so parallel and serial generation agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cloud import GaussianCloud, knn_all
from .errors import SamplingError
from .template import PriorTopology

TINY_DISTANCE = 1e-12


@dataclass
class PointGraph:
    neighbors: np.ndarray   # (N, k) out-edges by ascending distance
    weights: np.ndarray     # (N, k) Euclidean distances

    @property
    def n_nodes(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


@dataclass
class WalkCorpus:
    walks: np.ndarray       # (n_walks, length) node indices
    length: int
    walks_per_node: int
    seed: int
    n_nodes: int


@dataclass
class NodeEmbeddings:
    vectors: np.ndarray     # (N, dim)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ContrastiveBatch:
    anchors: np.ndarray     # (N,)
    positives: np.ndarray   # (N, M)
    negatives: np.ndarray   # (N, M)
    samples_per_anchor: int


def build_graph(cloud: GaussianCloud, k: int) -> PointGraph:
    """Directed kNN graph with Euclidean distance edge weights."""
    n = len(cloud)
    if k < 1 or k >= n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    neighbors = knn_all(cloud.positions, k)
    weights = np.linalg.norm(
        cloud.positions[neighbors] - cloud.positions[:, np.newaxis, :], axis=2
    )
    return PointGraph(neighbors=neighbors, weights=weights)


def _walk_tables(graph: PointGraph):
    """Undirected adjacency with cumulative 1/distance step probabilities."""
    n = graph.n_nodes
    adj: list[dict] = [dict() for _ in range(n)]
    for i in range(n):
        for j, w in zip(graph.neighbors[i], graph.weights[i]):
            j = int(j)
            adj[i][j] = float(w)
            adj[j][i] = float(w)
    deg = np.array([len(a) for a in adj])
    width = int(deg.max())
    nbr = np.zeros((n, width), dtype=np.int64)
    cum = np.ones((n, width))
    for i, a in enumerate(adj):
        items = sorted(a.items())
        ids = np.array([j for j, _ in items], dtype=np.int64)
        inv = 1.0 / np.maximum([w for _, w in items], TINY_DISTANCE)
        probs = inv / inv.sum()
        nbr[i, :len(ids)] = ids
        cum[i, :len(ids)] = np.cumsum(probs)
        cum[i, len(ids) - 1] = 1.0
    return nbr, cum


def random_walks(graph: PointGraph, length: int, walks_per_node: int,
                 seed: int) -> WalkCorpus:
    """Seeded 1/distance-biased walks, ``walks_per_node`` from every node.

    Each node consumes its own child random stream (derived from the seed
    and the node index), so the corpus does not depend on scheduling order.
    """
    if length < 2:
        raise ValueError("walk length must be at least 2")
    if walks_per_node < 1:
        raise ValueError("walks_per_node must be at least 1")
    n = graph.n_nodes
    nbr, cum = _walk_tables(graph)
    uniforms = np.empty((n * walks_per_node, length - 1))
    for node in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, node]))
        uniforms[node * walks_per_node:(node + 1) * walks_per_node] = rng.random(
            (walks_per_node, length - 1)
        )
    walks = np.empty((n * walks_per_node, length), dtype=np.int64)
    walks[:, 0] = np.repeat(np.arange(n), walks_per_node)
    current = walks[:, 0].copy()
    for step in range(1, length):
        u = uniforms[:, step - 1]
        slot = (cum[current] <= u[:, np.newaxis]).sum(axis=1)
        slot = np.minimum(slot, nbr.shape[1] - 1)
        current = nbr[current, slot]
        walks[:, step] = current
    return WalkCorpus(walks=walks, length=length, walks_per_node=walks_per_node,
                      seed=seed, n_nodes=n)


def _skipgram_pairs(corpus: WalkCorpus, window: int):
    """Aggregated (center, context, count) co-occurrence pairs."""
    walks = corpus.walks
    n = corpus.n_nodes
    centers = []
    contexts = []
    for delta in range(1, window + 1):
        if walks.shape[1] <= delta:
            break
        a = walks[:, :-delta].ravel()
        b = walks[:, delta:].ravel()
        centers.append(a)
        contexts.append(b)
        centers.append(b)
        contexts.append(a)
    key = np.concatenate(centers).astype(np.int64) * n + np.concatenate(contexts)
    uniq, counts = np.unique(key, return_counts=True)
    return (uniq // n).astype(np.int64), (uniq % n).astype(np.int64), counts.astype(np.float64)


def train_embeddings(corpus: WalkCorpus, dim: int, window: int, negatives: int,
                     epochs: int, learning_rate: float = 0.025,
                     seed: int = 0) -> NodeEmbeddings:
    """Skip-gram with negative sampling over walk co-occurrence windows.

    Pairs are aggregated by count and trained in fixed-size minibatches so
    the result is deterministic for a given corpus and seed. The input-side
    vectors are returned as the node embeddings.
    """
    if dim < 2:
        raise ValueError("embedding dimension must be at least 2")
    if corpus.walks.size == 0:
        raise ValueError("walk corpus is empty")
    n = corpus.n_nodes
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    w_in = (rng.random((n, dim)) - 0.5) / dim
    w_out = np.zeros((n, dim))
    if epochs == 0:
        return NodeEmbeddings(vectors=w_in)

    centers, contexts, counts = _skipgram_pairs(corpus, window)
    # unigram^(3/4) noise distribution over walk tokens
    freq = np.bincount(corpus.walks.ravel(), minlength=n).astype(np.float64)
    noise = freq ** 0.75
    noise_cum = np.cumsum(noise / noise.sum())

    chunk = 65536
    n_pairs = len(centers)
    total_chunks = max(1, epochs * ((n_pairs + chunk - 1) // chunk))
    step_no = 0
    for epoch in range(epochs):
        order = rng.permutation(n_pairs)
        for lo in range(0, n_pairs, chunk):
            sel = order[lo:lo + chunk]
            ci, xi, cnt = centers[sel], contexts[sel], counts[sel]
            b = len(sel)
            lr = learning_rate * max(1e-2, 1.0 - step_no / total_chunks)
            step_no += 1
            neg = np.searchsorted(noise_cum, rng.random((b, negatives)))
            neg = np.minimum(neg, n - 1)

            vi = w_in[ci]
            vo = w_out[xi]
            vn = w_out[neg]
            s_pos = expit(np.einsum("bd,bd->b", vi, vo))
            s_neg = expit(np.einsum("bd,bkd->bk", vi, vn))
            g_pos = (s_pos - 1.0) * cnt
            g_neg = s_neg * cnt[:, np.newaxis]

            grad_in = g_pos[:, np.newaxis] * vo + np.einsum("bk,bkd->bd", g_neg, vn)
            grad_out = g_pos[:, np.newaxis] * vi
            grad_neg = g_neg[:, :, np.newaxis] * vi[:, np.newaxis, :]

            for mat, rows, vals in (
                (w_in, ci, grad_in),
                (w_out, xi, grad_out),
                (w_out, neg.ravel(), grad_neg.reshape(-1, dim)),
            ):
                for d in range(dim):
                    mat[:, d] -= lr * np.bincount(rows, weights=vals[:, d], minlength=n)
    return NodeEmbeddings(vectors=w_in)


def sample_contrastive(cloud: GaussianCloud, topology: PriorTopology, m: int,
                       seed: int) -> ContrastiveBatch:
    """Per-anchor positive/negative node samples against the part prior.

    Positives share the anchor's part or a prior-adjacent one (never the
    anchor itself); negatives are everything else. Uniform with
    replacement, deterministic for a given seed.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    n = len(cloud)
    parts = cloud.semantics.argmax(axis=1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))

    group = topology.adjacency | np.eye(15, dtype=bool)
    positives = np.empty((n, m), dtype=np.int64)
    negatives = np.empty((n, m), dtype=np.int64)
    for p in np.unique(parts):
        eligible = group[p][parts]
        pool = np.nonzero(eligible)[0]
        npool = np.nonzero(~eligible)[0]
        anchors_p = np.nonzero(parts == p)[0]
        # anchors of part p sit inside their own pool; draw from one shorter
        slots = np.searchsorted(pool, anchors_p)
        size = len(pool) - 1
        if size < 1:
            from .template import PART_NAMES
            raise SamplingError(
                f"part '{PART_NAMES[p]}' has no eligible positive samples"
            )
        if len(npool) < 1:
            from .template import PART_NAMES
            raise SamplingError(
                f"part '{PART_NAMES[p]}' has no eligible negative samples"
            )
        draw = rng.integers(0, size, size=(len(anchors_p), m))
        draw += draw >= slots[:, np.newaxis]
        positives[anchors_p] = pool[draw]
        negatives[anchors_p] = npool[rng.integers(0, len(npool),
                                                  size=(len(anchors_p), m))]
    return ContrastiveBatch(anchors=np.arange(n), positives=positives,
                            negatives=negatives, samples_per_anchor=m)


def _cosine(a, b):
    """Cosine similarity and partials; zero-norm vectors give 0 with no grad."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    sa = np.where(ok, na, 1.0)
    sb = np.where(ok, nb, 1.0)
    dot = np.einsum("...d,...d->...", a, b)
    cos = np.where(ok, dot / (sa * sb), 0.0)
    da = np.where(ok[..., np.newaxis],
                  b / (sa * sb)[..., np.newaxis] - (cos / sa ** 2)[..., np.newaxis] * a,
                  0.0)
    db = np.where(ok[..., np.newaxis],
                  a / (sa * sb)[..., np.newaxis] - (cos / sb ** 2)[..., np.newaxis] * b,
                  0.0)
    return cos, da, db


def topology_loss(embeddings: NodeEmbeddings, batch: ContrastiveBatch):
    """Mean cosine(anchor, negative) minus cosine(anchor, positive).

    Returns (scalar, gradient array aligned with the embedding table).
    """
    vec = embeddings.vectors
    n_nodes, dim = vec.shape
    if batch.positives.max(initial=-1) >= n_nodes or batch.negatives.max(initial=-1) >= n_nodes:
        raise ValueError("batch indices exceed embedding table size")
    anchors = batch.anchors
    m = batch.samples_per_anchor
    n = len(anchors)

    a = vec[anchors][:, np.newaxis, :]          # (N, 1, d) broadcast over M
    p = vec[batch.positives]                    # (N, M, d)
    q = vec[batch.negatives]
    cos_p, da_p, dp = _cosine(np.broadcast_to(a, p.shape), p)
    cos_n, da_n, dq = _cosine(np.broadcast_to(a, q.shape), q)
    scale = 1.0 / (m * n)
    loss = float((cos_n.sum() - cos_p.sum()) * scale)

    grads = np.zeros_like(vec)
    anchor_g = scale * (da_n.sum(axis=1) - da_p.sum(axis=1))
    for d in range(dim):
        grads[:, d] += np.bincount(anchors, weights=anchor_g[:, d], minlength=n_nodes)
        grads[:, d] += np.bincount(batch.negatives.ravel(),
                                   weights=(scale * dq[..., d]).ravel(), minlength=n_nodes)
        grads[:, d] -= np.bincount(batch.positives.ravel(),
                                   weights=(scale * dp[..., d]).ravel(), minlength=n_nodes)
    return loss, grads
