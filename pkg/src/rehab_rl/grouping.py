"""Treatment groupings: the known block map and the learned embedding map.

The learned route mirrors how word vectors are trained from co-occurrence
counts: every weekly plan is a context window, treatments co-selected by the
behaviour policy end up close in embedding space, and K-means recovers the
groups from the embedded points.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, week_rows


@dataclass
class GroupAssignment:
    """Total map from treatment ids (1-based) to group labels 1..k."""

    labels: np.ndarray
    k: int
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) == 0:
            raise ValueError("labels must be a non-empty 1-d array")
        if self.labels.min() < 1 or self.labels.max() > self.k:
            raise ValueError(f"labels must lie in 1..{self.k}")
        if len(np.unique(self.labels)) != self.k:
            raise ValueError("every group label must be used at least once")

    @property
    def n_treatments(self) -> int:
        return len(self.labels)

    def group_of(self, treatment: int) -> int:
        return int(self.labels[treatment - 1])

    def members(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0] + 1

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "k": self.k,
            "map": {str(t + 1): int(g) for t, g in enumerate(self.labels)},
            "meta": self.meta,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "GroupAssignment":
        mapping = data["map"]
        labels = np.empty(len(mapping), dtype=np.int64)
        for t, g in mapping.items():
            labels[int(t) - 1] = int(g)
        return cls(labels, int(data["k"]), data.get("provenance", ""), data.get("meta", {}))

    @classmethod
    def load(cls, path) -> "GroupAssignment":
        with open(path, encoding="utf8") as fh:
            return cls.from_dict(json.load(fh))


def dkbg_assignment(n_groups: int = 11, treatments_per_group: int = 10) -> GroupAssignment:
    """The known grouping: consecutive blocks of ids, treatment t in group ceil(t/10)."""
    labels = np.repeat(np.arange(1, n_groups + 1), treatments_per_group)
    return GroupAssignment(labels, n_groups, provenance="dkbg")


def true_assignment(params) -> GroupAssignment:
    ga = dkbg_assignment(params.n_groups, params.treatments_per_group)
    ga.provenance = "true"
    return ga


def identity_assignment(n_treatments: int) -> GroupAssignment:
    """Each treatment its own group; used for the ungrouped diagnostics."""
    labels = np.arange(1, n_treatments + 1)
    return GroupAssignment(labels, n_treatments, provenance="identity")


def build_cooccurrence(cohort: Cohort) -> np.ndarray:
    """Count, for every treatment pair, the plans containing both.

    The context window spans the whole plan (order inside a plan carries no
    meaning), with uniform weighting.  Symmetric with a zero diagonal.
    """
    n = cohort.params.n_treatments
    m = cohort.params.plan_size
    x = np.zeros((n, n))
    plans = week_rows(cohort).plans - 1
    for a in range(m):
        for b in range(a + 1, m):
            np.add.at(x, (plans[:, a], plans[:, b]), 1.0)
            np.add.at(x, (plans[:, b], plans[:, a]), 1.0)
    return x


@dataclass
class GloveEmbedding:
    """Trained treatment vectors plus the raw factors behind them.

    ``vectors`` is the conventional sum of the main and context factors.
    ``loss_history[i]`` is the full objective after ``i`` epochs, so the
    final entry is the loss of the returned parameters exactly.
    """

    vectors: np.ndarray
    main_vectors: np.ndarray
    context_vectors: np.ndarray
    main_bias: np.ndarray
    context_bias: np.ndarray
    loss_history: list

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def glove_weight(x, x_max: float, alpha: float) -> np.ndarray:
    """Co-occurrence weighting: (x / x_max)^alpha, capped at one."""
    return np.minimum(np.power(np.asarray(x, dtype=float) / x_max, alpha), 1.0)


def glove_objective(
    x: np.ndarray,
    main_vectors: np.ndarray,
    context_vectors: np.ndarray,
    main_bias: np.ndarray,
    context_bias: np.ndarray,
    x_max: float = 10.0,
    alpha: float = 0.75,
) -> float:
    """Weighted least-squares fit of log co-occurrence, over nonzero cells."""
    ii, jj = np.nonzero(x)
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    diff = (
        np.einsum("ij,ij->i", main_vectors[ii], context_vectors[jj])
        + main_bias[ii]
        + context_bias[jj]
        - np.log(x[ii, jj])
    )
    return float(np.sum(glove_weight(x[ii, jj], x_max, alpha) * diff**2))


def train_glove(
    x: np.ndarray,
    dim: int = 10,
    epochs: int = 50,
    x_max: float = 10.0,
    alpha: float = 0.75,
    learning_rate: float = 0.05,
    rng: np.random.Generator | None = None,
) -> GloveEmbedding:
    """Fit treatment vectors to the co-occurrence matrix by adaptive SGD.

    Each parameter keeps its own accumulated squared gradient (initialised
    at one) and is stepped by ``learning_rate * grad / sqrt(accum)``.  One
    epoch visits every nonzero ordered pair once.  Pairs are processed in
    diagonal bands (all (i, i+offset) cells together) so the band updates
    touch disjoint parameters and can be applied vectorised; band order is
    shuffled every epoch.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if x.shape != (n, n):
        raise ValueError("co-occurrence matrix must be square")
    if not np.any(x > 0):
        raise ValueError("co-occurrence matrix is all zero, nothing to embed")
    if dim < 2:
        raise ValueError("embedding dimension must be at least 2")
    rng = rng or np.random.default_rng()

    w = (rng.random((n, dim)) - 0.5) / dim
    wc = (rng.random((n, dim)) - 0.5) / dim
    b = (rng.random(n) - 0.5) / dim
    bc = (rng.random(n) - 0.5) / dim
    gw, gwc = np.ones((n, dim)), np.ones((n, dim))
    gb, gbc = np.ones(n), np.ones(n)

    # Precompute the nonzero cells of each diagonal band.
    bands = []
    rows = np.arange(n)
    for off in range(1, n):
        cols = (rows + off) % n
        live = x[rows, cols] > 0
        if np.any(live):
            i, j = rows[live], cols[live]
            bands.append((i, j, np.log(x[i, j]), glove_weight(x[i, j], x_max, alpha)))

    def loss() -> float:
        return glove_objective(x, w, wc, b, bc, x_max=x_max, alpha=alpha)

    history = [loss()]
    for _ in range(epochs):
        for band in rng.permutation(len(bands)):
            i, j, logx, f = bands[band]
            diff = np.einsum("ij,ij->i", w[i], wc[j]) + b[i] + bc[j] - logx
            g = 2.0 * f * diff
            grad_w = g[:, None] * wc[j]
            grad_wc = g[:, None] * w[i]
            w[i] -= learning_rate * grad_w / np.sqrt(gw[i])
            wc[j] -= learning_rate * grad_wc / np.sqrt(gwc[j])
            b[i] -= learning_rate * g / np.sqrt(gb[i])
            bc[j] -= learning_rate * g / np.sqrt(gbc[j])
            gw[i] += grad_w**2
            gwc[j] += grad_wc**2
            gb[i] += g**2
            gbc[j] += g**2
        history.append(loss())
    if not history[-1] < history[0]:
        raise RuntimeError("embedding training failed to reduce the objective")
    return GloveEmbedding(w + wc, w, wc, b, bc, history)


@dataclass
class KMeansResult:
    labels: np.ndarray  # 0-based cluster indices
    centers: np.ndarray
    wcss: float
    n_iter: int
    wcss_trace: np.ndarray
    restart: int


def _lloyd(points: np.ndarray, init_idx: np.ndarray, max_iters: int):
    """One K-means run from the given seed points.

    Records the within-cluster sum of squares at every assignment step, a
    non-increasing sequence.  An emptied cluster is re-seeded at the point
    farthest from its current centroid.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    k = len(init_idx)
    centers = points[init_idx].copy()
    labels = np.full(len(points), -1)
    trace = []
    for it in range(1, max_iters + 1):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        assigned = d2[np.arange(len(points)), new_labels]
        for _ in range(k):  # bounded empty-cluster repairs
            missing = np.setdiff1d(np.arange(k), new_labels, assume_unique=False)
            if len(missing) == 0:
                break
            far = int(np.argmax(assigned))
            centers[missing[0]] = points[far]
            d2[:, missing[0]] = ((points - centers[missing[0]]) ** 2).sum(axis=1)
            new_labels = d2.argmin(axis=1)
            assigned = d2[np.arange(len(points)), new_labels]
        else:
            raise RuntimeError("could not repair empty clusters")
        trace.append(float(assigned.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
    return labels, centers, trace[-1], it, np.asarray(trace)


def kmeans_best(
    points: np.ndarray,
    k: int,
    restarts: int = 1000,
    max_iters: int = 1000,
    rng: np.random.Generator | None = None,
) -> KMeansResult:
    """Best of ``restarts`` K-means runs by within-cluster sum of squares.

    Each restart seeds centroids at k distinct points chosen uniformly; on
    ties the first restart encountered wins, which keeps results stable.
    """
    points = np.asarray(points, dtype=float)
    if k > len(points):
        raise ValueError(f"cannot form {k} clusters from {len(points)} points")
    rng = rng or np.random.default_rng()
    best: KMeansResult | None = None
    for r in range(restarts):
        init_idx = rng.choice(len(points), size=k, replace=False)
        labels, centers, wcss, n_iter, trace = _lloyd(points, init_idx, max_iters)
        if best is None or wcss < best.wcss:
            best = KMeansResult(labels, centers, wcss, n_iter, trace, r)
    return best


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters 1..k by ascending smallest member index."""
    order = sorted(set(labels.tolist()), key=lambda c: int(np.nonzero(labels == c)[0][0]))
    remap = {c: i + 1 for i, c in enumerate(order)}
    return np.asarray([remap[c] for c in labels], dtype=np.int64)


def cluster_kmeans(
    points: np.ndarray,
    k: int = 11,
    restarts: int = 1000,
    max_iters: int = 1000,
    rng: np.random.Generator | None = None,
    provenance: str = "tebg",
) -> GroupAssignment:
    result = kmeans_best(points, k, restarts=restarts, max_iters=max_iters, rng=rng)
    meta = {"wcss": result.wcss, "restarts": restarts, "max_iters": max_iters}
    return GroupAssignment(canonical_labels(result.labels), k, provenance=provenance, meta=meta)


def tebg_assignment(
    cohort: Cohort,
    dim: int = 10,
    epochs: int = 50,
    x_max: float = 10.0,
    learning_rate: float = 0.05,
    k: int = 11,
    restarts: int = 1000,
    max_iters: int = 1000,
    embed_rng: np.random.Generator | None = None,
    kmeans_rng: np.random.Generator | None = None,
) -> GroupAssignment:
    """Learn a grouping from the cohort's co-selection structure."""
    x = build_cooccurrence(cohort)
    emb = train_glove(x, dim=dim, epochs=epochs, x_max=x_max,
                      learning_rate=learning_rate, rng=embed_rng)
    ga = cluster_kmeans(emb.vectors, k=k, restarts=restarts, max_iters=max_iters,
                        rng=kmeans_rng, provenance="tebg")
    ga.meta.update({"embedding_dim": dim, "epochs": epochs, "x_max": x_max,
                    "final_loss": emb.loss_history[-1]})
    return ga


def partition_agreement(a: GroupAssignment, b: GroupAssignment) -> tuple[float, float]:
    """(purity, adjusted Rand index) between two assignments.

    Purity is symmetrised (the worse of the two directions) so that, like
    the adjusted Rand index, it equals one exactly when the partitions are
    identical up to relabelling.  Both scores ignore label names.
    """
    if a.n_treatments != b.n_treatments:
        raise ValueError("assignments cover different treatment sets")
    n = a.n_treatments
    cont = np.zeros((a.k, b.k), dtype=np.int64)
    np.add.at(cont, (a.labels - 1, b.labels - 1), 1)

    purity = min(cont.max(axis=0).sum(), cont.max(axis=1).sum()) / n

    def comb2(v):
        v = np.asarray(v, dtype=float)
        return v * (v - 1.0) / 2.0

    sum_ij = comb2(cont).sum()
    sum_a = comb2(cont.sum(axis=1)).sum()
    sum_b = comb2(cont.sum(axis=0)).sum()
    total = comb2([n])[0]
    expected = sum_a * sum_b / total
    denom = 0.5 * (sum_a + sum_b) - expected
    ari = 1.0 if denom == 0 else float((sum_ij - expected) / denom)
    return float(purity), ari
