"""Episodic memory: top-confidence selection, k-means pseudo-labeling and
memory batch sampling.

k-means is written out in full rather than delegated to a library because the
contract here is stricter than typical implementations: Lloyd iterations must
stop at an assignment fixpoint, the within-cluster sum of squares must be
non-increasing at every iteration (asserted), empty clusters are re-seeded at
the point farthest from its assigned centroid, and the k-means++ seeding is
order-independent — it draws through value-hashes of the points, so permuting
the input rows permutes the output labels identically.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import model
from .model import Batch, ParamVector

KMEANS_MAX_ITER = 100


class EmptyMemoryError(RuntimeError):
    """Raised when a memory batch is requested from an empty domain memory."""


@dataclass
class EpisodicMemory:
    """Stored subset of one finished target domain, with pseudo-labels."""

    domain_id: int
    samples: np.ndarray
    pseudo_labels: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.pseudo_labels = np.asarray(self.pseudo_labels, dtype=np.int64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        n = self.samples.shape[0]
        if self.pseudo_labels.shape != (n,) or self.confidences.shape != (n,):
            raise ValueError("pseudo_labels and confidences must match sample count")
        if n and (self.confidences.min() < 0.0 or self.confidences.max() > 1.0):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def sample_batch(self, b: int, seed) -> Batch:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(self), size=b, replace=len(self) < b)
        return Batch(self.samples[idx], self.pseudo_labels[idx])


@dataclass
class DomainMemory:
    """Union of per-domain episodic memories, ids strictly increasing."""

    episodic: list[EpisodicMemory] = field(default_factory=list)

    def add(self, em: EpisodicMemory):
        if self.episodic and em.domain_id <= self.episodic[-1].domain_id:
            raise ValueError("episodic memory domain ids must strictly increase")
        self.episodic.append(em)

    def __len__(self) -> int:
        return sum(len(em) for em in self.episodic)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def union_samples(self) -> np.ndarray:
        return np.vstack([em.samples for em in self.episodic])

    def union_labels(self) -> np.ndarray:
        return np.concatenate([em.pseudo_labels for em in self.episodic])

    def save_csv(self, path):
        dim = self.episodic[0].samples.shape[1] if self.episodic else 0
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("domain_id,pseudo_label,confidence,"
                     + ",".join(f"x{i}" for i in range(dim)) + "\n")
            for em in self.episodic:
                for x, y, c in zip(em.samples, em.pseudo_labels, em.confidences):
                    fh.write(f"{em.domain_id},{y},{c:.17g},"
                             + ",".join(f"{v:.17g}" for v in x) + "\n")

    @classmethod
    def load_csv(cls, path) -> "DomainMemory":
        rows = []
        with open(path, encoding="utf-8") as fh:
            fh.readline()
            for line in fh:
                parts = line.rstrip("\n").split(",")
                rows.append((int(parts[0]), int(parts[1]), float(parts[2]),
                             [float(v) for v in parts[3:]]))
        mem = cls()
        for did in sorted({r[0] for r in rows}):
            sub = [r for r in rows if r[0] == did]
            mem.add(EpisodicMemory(
                did, np.array([r[3] for r in sub]),
                np.array([r[1] for r in sub]), np.array([r[2] for r in sub])))
        return mem


def _value_hash_uniforms(points: np.ndarray, seed: int, round_idx: int) -> np.ndarray:
    """u in (0,1) per point, from a hash of (seed, round, point value).

    Anchoring the randomness to point values (not row positions) makes the
    k-means++ draw invariant to the ordering of the input rows.
    """
    prefix = int(seed).to_bytes(8, "little", signed=True) \
        + int(round_idx).to_bytes(4, "little")
    u = np.empty(points.shape[0])
    for i, row in enumerate(points):
        h = hashlib.blake2b(prefix + row.tobytes(), digest_size=8).digest()
        u[i] = (int.from_bytes(h, "little") + 1) / (2 ** 64 + 2)
    return u


def _kmeanspp_seed(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """k-means++ via exponential races over value-hashed uniforms.

    Drawing index argmin_i Exp_i / w_i samples i with probability w_i/sum(w),
    so the usual D^2 weighting is reproduced without positional RNG state.
    """
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    d2 = np.full(n, np.inf)
    for r in range(k):
        e = -np.log(_value_hash_uniforms(points, seed, r))
        if r == 0:
            pick = int(np.argmin(e))
        else:
            w = np.where(d2 > 0.0, d2, 0.0)
            if w.sum() <= 0.0:  # fewer distinct points than k
                pick = int(np.argmin(e))
            else:
                with np.errstate(divide="ignore"):
                    pick = int(np.argmin(np.where(w > 0.0, e / w, np.inf)))
        centroids[r] = points[pick]
        dist = ((points - centroids[r]) ** 2).sum(axis=1)
        d2 = np.minimum(d2, dist)
    return centroids


def _wcss(points, centroids, assign) -> float:
    return float(((points - centroids[assign]) ** 2).sum())


def kmeans(points: np.ndarray, k: int, seed: int):
    """Lloyd iterations from k-means++ seeding to an assignment fixpoint.

    Returns (assignments, centroids). Raises if an iteration ever increases
    the within-cluster sum of squares (which would indicate a bug).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need point count >= k >= 1, got n={n}, k={k}")
    centroids = _kmeanspp_seed(points, k, seed)
    assign = None
    wcss_prev = np.inf
    for _ in range(KMEANS_MAX_ITER):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        claimed: set[int] = set()
        for j in range(k):
            mask = assign == j
            if mask.any():
                centroids[j] = points[mask].mean(axis=0)
            else:
                # empty cluster: re-seed at the point farthest from its
                # centroid (moves a zero-mass centroid, WCSS unchanged)
                residual = ((points - centroids[assign]) ** 2).sum(axis=1)
                for idx in claimed:
                    residual[idx] = -1.0
                far = int(residual.argmax())
                claimed.add(far)
                centroids[j] = points[far]
        wcss = _wcss(points, centroids, assign)
        if wcss > wcss_prev + 1e-9 * (1.0 + wcss_prev):
            raise AssertionError("k-means WCSS increased between iterations")
        wcss_prev = wcss
    return assign, centroids


def pseudo_label(params: ParamVector, samples: np.ndarray, num_classes: int,
                 seed: int) -> np.ndarray:
    """Cluster encoder features with k = C, then map each cluster to the
    majority class of the model's own predictions inside it (ties -> lowest
    class index)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ValueError("pseudo_label needs at least one sample")
    features, logits = model.forward(params, samples)
    preds = logits.argmax(axis=1)
    assign, _ = kmeans(features, num_classes, seed)
    cluster_to_class = np.zeros(num_classes, dtype=np.int64)
    for j in range(num_classes):
        mask = assign == j
        if mask.any():
            counts = np.bincount(preds[mask], minlength=params.spec.num_classes)
            cluster_to_class[j] = int(counts.argmax())  # argmax takes lowest on ties
    return cluster_to_class[assign]


def select_episodic(params: ParamVector, domain_id: int, samples: np.ndarray,
                    capacity: int, seed: int,
                    class_balanced: bool = True) -> EpisodicMemory:
    """Keep the most confidently predicted samples of a finished target domain.

    With class balancing (default), the top ceil(capacity/C) per predicted
    class are preferred; the set is then topped up / truncated by global
    confidence so exactly min(capacity, n) samples survive. Pseudo-labels are
    computed on the selected subset and frozen.
    """
    spec = params.spec
    if capacity < spec.num_classes:
        raise ValueError("capacity must be at least num_classes")
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    _, logits = model.forward(params, samples)
    probs = model.softmax(logits)
    conf = probs.max(axis=1)
    preds = logits.argmax(axis=1)

    target = min(capacity, n)
    order = np.lexsort((np.arange(n), -conf))  # confidence desc, index asc
    if class_balanced:
        per_class = -(-capacity // spec.num_classes)
        preferred = []
        for c in range(spec.num_classes):
            cls_idx = order[preds[order] == c]
            preferred.extend(cls_idx[:per_class])
        preferred = np.array(sorted(preferred, key=lambda i: (-conf[i], i)),
                             dtype=np.int64)
        if preferred.size >= target:
            chosen = preferred[:target]
        else:
            rest = np.array([i for i in order if i not in set(preferred)],
                            dtype=np.int64)
            chosen = np.concatenate([preferred, rest[:target - preferred.size]])
    else:
        chosen = order[:target]
    chosen = np.sort(chosen)

    labels = pseudo_label(params, samples[chosen], spec.num_classes, seed)
    return EpisodicMemory(domain_id, samples[chosen], labels, conf[chosen])


def sample_memory_batch(memory: DomainMemory, b: int, seed) -> Batch:
    """Uniform draw of b samples across the whole domain memory (without
    replacement when possible), labeled with the stored pseudo-labels."""
    if memory.is_empty:
        raise EmptyMemoryError("domain memory is empty; no constraint batch")
    X = memory.union_samples()
    y = memory.union_labels()
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(y), size=b, replace=len(y) < b)
    return Batch(X[idx], y[idx])
