"""Behavior-embedding analysis over policy activations.

A 2-D t-SNE embedding of the 256-d hidden activations (exact, O(n^2),
per-row bandwidths binary-searched to the target perplexity), Chinese-
Whispers clustering on the raw activation vectors (distance-threshold graph,
majority label propagation), per-cluster transition arrows from episode
ordering, and per-point coloring by mean attack impact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PERPLEXITY = 132.0
DEFAULT_CRITICAL_DISTANCE = 15.0
SENTINEL_COLOR = None  # exported as null: record was never attacked


@dataclass
class TsneResult:
    coords: np.ndarray          # (n, 2)
    kl_trace: list[float]       # objective per gradient iteration
    row_perplexities: np.ndarray  # 2**entropy per row after calibration


@dataclass
class EmbeddingPoint:
    record_index: int
    episode: int
    step: int
    x: float
    y: float
    cluster: int
    color: float | None = SENTINEL_COLOR


@dataclass
class TransitionArrow:
    from_cluster: int
    to_cluster: int
    count: int
    probability: float


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_entropy_and_p(dist_row: np.ndarray, beta: float, self_index: int):
    logits = -dist_row * beta
    logits[self_index] = -np.inf
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    nz = p > 0
    entropy_bits = -np.sum(p[nz] * np.log2(p[nz]))
    return entropy_bits, p


def calibrate_bandwidth(
    dist_row: np.ndarray,
    self_index: int,
    perplexity: float,
    tol: float = 1e-4,
    max_iter: int = 200,
) -> tuple[float, np.ndarray, float]:
    """Binary-search the Gaussian precision so the conditional distribution's
    perplexity (2^entropy) hits the target.  Returns (beta, row of
    conditional probabilities, achieved perplexity)."""
    target_bits = np.log2(perplexity)
    beta, lo, hi = 1.0, 0.0, np.inf
    entropy, p = _row_entropy_and_p(dist_row, beta, self_index)
    for _ in range(max_iter):
        diff = entropy - target_bits
        if abs(2.0**entropy - perplexity) <= tol:
            break
        if diff > 0:  # distribution too flat: sharpen
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
        else:
            hi = beta
            beta = (lo + beta) / 2.0
        entropy, p = _row_entropy_and_p(dist_row, beta, self_index)
    return beta, p, float(2.0**entropy)


def tsne_embed(
    activations: np.ndarray,
    perplexity: float = DEFAULT_PERPLEXITY,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    early_exaggeration: float = 12.0,
    exaggeration_until: int = 250,
    initial_momentum: float = 0.5,
    final_momentum: float = 0.8,
) -> TsneResult:
    """Exact t-SNE with the reference gradient-descent schedule."""
    x = np.asarray(activations, dtype=np.float64)
    n = x.shape[0]
    if n <= 3 * perplexity:
        raise ValueError(
            f"need more than 3 * perplexity = {3 * perplexity:.0f} points, got {n}"
        )

    dists = _pairwise_sq_dists(x)
    p_cond = np.zeros((n, n))
    row_perp = np.zeros(n)
    for i in range(n):
        _beta, p, achieved = calibrate_bandwidth(dists[i], i, perplexity)
        p_cond[i] = p
        row_perp[i] = achieved
    del dists

    p_joint = (p_cond + p_cond.T) / (2.0 * n)
    del p_cond
    np.maximum(p_joint, 1e-300, out=p_joint)
    np.fill_diagonal(p_joint, 0.0)
    # Constant part of the KL objective: sum p log p.
    nz = p_joint > 0
    p_log_p = float(np.sum(p_joint[nz] * np.log(p_joint[nz])))

    # The descent loop runs in float32: memory bandwidth dominates at n^2.
    p32 = p_joint.astype(np.float32)
    del p_joint
    rng = np.random.default_rng(seed)
    y = rng.normal(scale=1e-4, size=(n, 2)).astype(np.float32)
    velocity = np.zeros_like(y)
    kl_trace: list[float] = []

    for it in range(iterations):
        exaggeration = early_exaggeration if it < exaggeration_until else 1.0
        momentum = initial_momentum if it < exaggeration_until else final_momentum

        sq = np.sum(y * y, axis=1)
        d = sq[:, None] + sq[None, :] - 2.0 * (y @ y.T)
        np.maximum(d, 0.0, out=d)
        qnum = 1.0 / (1.0 + d)
        np.fill_diagonal(qnum, 0.0)
        z = float(qnum.sum())

        # KL(P || Q) with the unexaggerated P.
        log_qnum = np.log(np.maximum(qnum, 1e-37))
        np.fill_diagonal(log_qnum, 0.0)
        kl = p_log_p - float(np.sum(p32 * log_qnum)) + np.log(z)
        kl_trace.append(kl)

        pq = (exaggeration * p32 - qnum / z) * qnum
        grad = 4.0 * (np.diag(pq.sum(axis=1)) @ y - pq @ y)
        velocity = momentum * velocity - learning_rate * grad
        y = y + velocity
        y -= y.mean(axis=0)

    return TsneResult(
        coords=y.astype(np.float64),
        kl_trace=kl_trace,
        row_perplexities=row_perp,
    )


# ---------------------------------------------------------------------------
# Chinese-Whispers clustering
# ---------------------------------------------------------------------------


def _neighbor_lists(vectors: np.ndarray, critical_distance: float, chunk: int = 512):
    n = vectors.shape[0]
    sq = np.sum(vectors * vectors, axis=1)
    limit = critical_distance**2
    neighbors = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = (
            sq[start:stop, None] + sq[None, :] - 2.0 * (vectors[start:stop] @ vectors.T)
        )
        for r in range(stop - start):
            row = block[r]
            row[start + r] = np.inf  # no self edge
            neighbors.append(np.nonzero(row <= limit)[0])
    return neighbors


def chinese_whispers(
    vectors: np.ndarray,
    critical_distance: float = DEFAULT_CRITICAL_DISTANCE,
    max_iters: int = 50,
    seed: int = 0,
    convergence_fraction: float = 0.01,
) -> np.ndarray:
    """Label propagation on the distance-threshold graph.

    Every node starts in its own cluster; nodes are visited in a seeded
    random order, each adopting the most frequent label among its neighbors
    (ties broken at random among the maxima).  Stops when fewer than 1% of
    labels change in a sweep.  Labels are compacted to 0..k-1.
    """
    if critical_distance <= 0:
        raise ValueError("critical_distance must be positive")
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    neighbors = _neighbor_lists(vectors, critical_distance)
    labels = np.arange(n)
    rng = np.random.default_rng(seed)
    for _sweep in range(max_iters):
        order = rng.permutation(n)
        changed = 0
        for node in order:
            nbrs = neighbors[node]
            if len(nbrs) == 0:
                continue  # isolated points keep their own label
            counts = np.bincount(labels[nbrs])
            top = np.nonzero(counts == counts.max())[0]
            new = int(top[0]) if len(top) == 1 else int(rng.choice(top))
            if new != labels[node]:
                labels[node] = new
                changed += 1
        if changed < convergence_fraction * n:
            break
    # Compact labels, preserving first-appearance order.
    remap: dict[int, int] = {}
    out = np.empty(n, dtype=np.int64)
    for i, lab in enumerate(labels):
        if lab not in remap:
            remap[lab] = len(remap)
        out[i] = remap[lab]
    return out


# ---------------------------------------------------------------------------
# Cluster transitions
# ---------------------------------------------------------------------------


def cluster_transitions(
    labels: np.ndarray, refs: list[tuple[int, int]]
) -> list[TransitionArrow]:
    """Aggregate cross-cluster moves between consecutive steps of the same
    episode.  ``refs`` pairs (episode_id, step) with each label row.
    Probabilities normalize by each cluster's outgoing moves plus episode
    terminations attributed to it."""
    if len(labels) != len(refs):
        raise ValueError(
            f"{len(labels)} labels for {len(refs)} record references"
        )
    by_pos = {ref: i for i, ref in enumerate(refs)}
    arrows: dict[tuple[int, int], int] = {}
    outgoing: dict[int, int] = {}
    last_step: dict[int, int] = {}
    for episode, step in refs:
        last_step[episode] = max(step, last_step.get(episode, -1))
    terminations: dict[int, int] = {}
    for (episode, step), i in by_pos.items():
        c = int(labels[i])
        if step == last_step[episode]:
            terminations[c] = terminations.get(c, 0) + 1
        j = by_pos.get((episode, step + 1))
        if j is None:
            continue
        c_next = int(labels[j])
        if c_next != c:
            arrows[(c, c_next)] = arrows.get((c, c_next), 0) + 1
            outgoing[c] = outgoing.get(c, 0) + 1
    result = []
    for (c, c_next), count in sorted(arrows.items()):
        denom = outgoing.get(c, 0) + terminations.get(c, 0)
        result.append(
            TransitionArrow(
                from_cluster=c,
                to_cluster=c_next,
                count=count,
                probability=count / denom,
            )
        )
    return result


# ---------------------------------------------------------------------------
# Impact coloring
# ---------------------------------------------------------------------------


def color_by_impact(
    points: list[EmbeddingPoint],
    samples,
    property: str = "red_count",
    metric: str = "difference",
) -> list[EmbeddingPoint]:
    """Set each point's color to the mean impact over all attack samples on
    its record; records never attacked keep the sentinel color."""
    by_record: dict[int, list[float]] = {}
    for s in samples:
        by_record.setdefault(s.point.record_index, []).append(
            s.impacts[property][metric]
        )
    for p in points:
        vals = by_record.get(p.record_index)
        p.color = float(np.mean(vals)) if vals else SENTINEL_COLOR
    return points


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

EMBEDDING_SCHEMA = {"schema": "strikelab.embedding", "version": 1}
ARROWS_SCHEMA = {"schema": "strikelab.transitions", "version": 1}


def export_embedding(path, points: list[EmbeddingPoint]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(EMBEDDING_SCHEMA, sort_keys=True) + "\n")
        for p in points:
            fh.write(
                json.dumps(
                    {
                        "record_index": p.record_index,
                        "episode": p.episode,
                        "step": p.step,
                        "x": p.x,
                        "y": p.y,
                        "cluster": p.cluster,
                        "color": p.color,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def export_transitions(path, arrows: list[TransitionArrow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(ARROWS_SCHEMA, sort_keys=True) + "\n")
        for a in arrows:
            fh.write(
                json.dumps(
                    {
                        "from": a.from_cluster,
                        "to": a.to_cluster,
                        "count": a.count,
                        "probability": a.probability,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
