"""Per-sample feature bank and the InfoNCE contrastive objective.

The bank holds one unit-norm key per registered sample, frozen at task start
and thereafter refreshed by momentum blending with keys recomputed under the
current parameters. Queries and positives are always recomputed (so the model
receives gradients); bank rows only ever act as constant negatives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import model
from .model import Batch, ParamVector

UNIT_NORM_TOL = 1e-6
BLEND_NORM_EPS = 1e-12

SampleKey = tuple[str, int]


def _check_unit_rows(rows: np.ndarray, what: str):
    norms = np.linalg.norm(rows, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ValueError(f"{what} must be unit-norm within {UNIT_NORM_TOL}")


@dataclass
class ContrastItem:
    """One query with its positive key and a constant set of negatives."""

    query: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64)
        self.positive = np.asarray(self.positive, dtype=np.float64)
        self.negatives = np.asarray(self.negatives, dtype=np.float64)
        if self.negatives.size == 0:
            self.negatives = self.negatives.reshape(0, self.query.size)
        dim = self.query.size
        if self.positive.size != dim or self.negatives.shape[1] != dim:
            raise ValueError("query, positive and negatives must share key_dim")
        _check_unit_rows(self.query, "query")
        _check_unit_rows(self.positive, "positive")
        if len(self.negatives):
            _check_unit_rows(self.negatives, "negatives")
            if np.any(np.all(self.negatives == self.positive, axis=1)):
                raise ValueError("positive key must not appear among negatives")


class FeatureBank:
    """Unit-norm keys for every sample of source + memory + current target."""

    def __init__(self, keys: np.ndarray, sample_keys: list[SampleKey],
                 momentum: float, temperature: float):
        keys = np.asarray(keys, dtype=np.float64)
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if keys.shape[0] != len(sample_keys):
            raise ValueError("one sample key per bank row required")
        _check_unit_rows(keys, "bank keys")
        if len(set(sample_keys)) != len(sample_keys):
            raise ValueError("duplicate (dataset_id, sample_id) in bank")
        self.keys = keys
        self.sample_index: dict[SampleKey, int] = {
            sk: i for i, sk in enumerate(sample_keys)}
        self.row_ids = list(sample_keys)
        self.momentum = float(momentum)
        self.temperature = float(temperature)

    def __len__(self) -> int:
        return self.keys.shape[0]

    def row_of(self, sample_key: SampleKey) -> int:
        try:
            return self.sample_index[sample_key]
        except KeyError:
            raise KeyError(f"sample {sample_key} is not registered in the bank")

    def save_csv(self, path):
        """Debug artifact: `# momentum=.. temperature=..` then one row per key."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# momentum={self.momentum!r} temperature={self.temperature!r}\n")
            dim = self.keys.shape[1]
            fh.write("dataset_id,sample_id," + ",".join(f"k{i}" for i in range(dim)) + "\n")
            for (ds, sid), row in zip(self.row_ids, self.keys):
                fh.write(f"{ds},{sid}," + ",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def load_csv(cls, path) -> "FeatureBank":
        with open(path, encoding="utf-8") as fh:
            meta = fh.readline().strip().lstrip("# ").split()
            kv = dict(item.split("=") for item in meta)
            fh.readline()  # column header
            keys, ids = [], []
            for line in fh:
                parts = line.rstrip("\n").split(",")
                ids.append((parts[0], int(parts[1])))
                keys.append([float(v) for v in parts[2:]])
        return cls(np.array(keys), ids, float(kv["momentum"]), float(kv["temperature"]))


def build_feature_bank(params: ParamVector, datasets: list[tuple[str, np.ndarray]],
                       momentum: float, temperature: float) -> FeatureBank:
    """One key per sample across all datasets, under frozen ``params``."""
    if not datasets:
        raise ValueError("at least one dataset is required to build a bank")
    blocks, ids = [], []
    for dataset_id, inputs in datasets:
        inputs = np.asarray(inputs, dtype=np.float64)
        features, _ = model.forward(params, inputs)
        blocks.append(model.project_key(params, features))
        ids.extend((dataset_id, i) for i in range(inputs.shape[0]))
    return FeatureBank(np.vstack(blocks), ids, momentum, temperature)


def info_nce(item: ContrastItem, tau: float) -> float:
    """-log( exp(q.k+/t) / (exp(q.k+/t) + sum_j exp(q.k-_j/t)) ), stably."""
    if tau <= 0.0:
        raise ValueError("temperature must be > 0")
    s_pos = float(item.query @ item.positive) / tau
    if len(item.negatives) == 0:
        return 0.0
    s_neg = (item.negatives @ item.query) / tau
    m = max(s_pos, float(s_neg.max()))
    lse = m + np.log(np.exp(s_pos - m) + np.exp(s_neg - m).sum())
    return float(lse - s_pos)


def sample_negatives(bank: FeatureBank, count: int | None, exclude: set[int],
                     seed) -> np.ndarray:
    """Uniform without-replacement draw of bank rows, skipping ``exclude``.

    ``count=None`` selects every available row (exact full-bank mode).
    """
    avail = np.array([i for i in range(len(bank)) if i not in exclude], dtype=np.int64)
    if count is None:
        return bank.keys[avail]
    if count < 0:
        raise ValueError("negative count must be >= 0")
    if count > avail.size:
        warnings.warn(
            f"requested {count} negatives but only {avail.size} rows are "
            "available; using all of them", RuntimeWarning)
        count = avail.size
    rng = np.random.default_rng(seed)
    chosen = rng.choice(avail, size=count, replace=False)
    return bank.keys[chosen]


def _batched_negative_rows(n_bank: int, own_rows: np.ndarray, count: int | None,
                           rng: np.random.Generator) -> np.ndarray:
    """Per-item uniform without-replacement row draws, excluding each item's
    own bank row. Random-key selection: smallest `count` keys per row."""
    avail = n_bank - 1
    if count is None:
        count = avail
    elif count > avail:
        warnings.warn(
            f"requested {count} negatives but only {avail} rows are "
            "available; using all of them", RuntimeWarning)
        count = avail
    b = own_rows.size
    if count == 0:
        return np.empty((b, 0), dtype=np.int64)
    keys = rng.random((b, n_bank))
    keys[np.arange(b), own_rows] = np.inf
    if count == n_bank - 1:
        return np.argsort(keys, axis=1)[:, :count]
    return np.argpartition(keys, count - 1, axis=1)[:, :count]


def contrastive_batch_loss(params: ParamVector, bank: FeatureBank, batch: Batch,
                           sample_keys: list[SampleKey], aug_seed: int,
                           augment_fn, num_negatives: int | None,
                           neg_seed, with_grad: bool = True):
    """Mean InfoNCE over a batch, differentiating through query and positive.

    Per sample x: q = key(x), k+ = key(augment(x, aug_seed)); negatives are
    constant bank rows drawn uniformly without replacement, excluding x's own
    row. Returns (loss, grad, fresh q keys); grad is None unless requested.
    """
    n = len(batch)
    if len(sample_keys) != n:
        raise ValueError("one (dataset_id, sample_id) per batch row required")
    own_rows = np.array([bank.row_of(sk) for sk in sample_keys], dtype=np.int64)
    tau = bank.temperature

    X_aug = augment_fn(batch.inputs, aug_seed)
    q, q_cache = model.keys_with_grad_cache(params, batch.inputs)
    k_pos, k_cache = model.keys_with_grad_cache(params, X_aug)

    neg_rows = _batched_negative_rows(len(bank), own_rows, num_negatives,
                                      np.random.default_rng(neg_seed))
    m_neg = neg_rows.shape[1]
    s_pos = (q * k_pos).sum(axis=1) / tau
    if m_neg == 0:
        loss = 0.0
        grad = model.zero_grad(params.spec) if with_grad else None
        return loss, grad, q

    negs = bank.keys[neg_rows]                      # (n, m, key_dim), constants
    s_neg = np.einsum("nmk,nk->nm", negs, q) / tau  # (n, m)
    m = np.maximum(s_pos, s_neg.max(axis=1))
    e_pos = np.exp(s_pos - m)
    e_neg = np.exp(s_neg - m[:, None])
    denom = e_pos + e_neg.sum(axis=1)
    losses = np.log(denom) + m - s_pos
    loss = float(losses.mean())

    grad = None
    if with_grad:
        p_pos = e_pos / denom
        p_neg = e_neg / denom[:, None]
        dq = ((p_pos - 1.0)[:, None] * k_pos
              + np.einsum("nm,nmk->nk", p_neg, negs)) / (tau * n)
        dk = (p_pos - 1.0)[:, None] * q / (tau * n)
        grad = model.zero_grad(params.spec)
        model.backprop_keys(params, q_cache, dq, grad)
        model.backprop_keys(params, k_cache, dk, grad)
    return loss, grad, q


def update_key(bank: FeatureBank, row: int, fresh_key: np.ndarray):
    """Momentum-blend then renormalize: k <- normalize(m*old + (1-m)*fresh)."""
    fresh_key = np.asarray(fresh_key, dtype=np.float64)
    _check_unit_rows(fresh_key, "fresh key")
    if not 0 <= row < len(bank):
        raise IndexError(f"bank row {row} out of range")
    blended = bank.momentum * bank.keys[row] + (1.0 - bank.momentum) * fresh_key
    norm = np.linalg.norm(blended)
    if norm < BLEND_NORM_EPS:
        warnings.warn("momentum blend collapsed to zero; keeping old key",
                      RuntimeWarning)
        return
    bank.keys[row] = blended / norm


def update_keys(bank: FeatureBank, rows: np.ndarray, fresh_keys: np.ndarray):
    """Vectorized ``update_key`` over distinct rows (same blend + renorm)."""
    rows = np.asarray(rows, dtype=np.int64)
    fresh_keys = np.asarray(fresh_keys, dtype=np.float64)
    blended = bank.momentum * bank.keys[rows] + (1.0 - bank.momentum) * fresh_keys
    norms = np.linalg.norm(blended, axis=1)
    bad = norms < BLEND_NORM_EPS
    if np.any(bad):
        warnings.warn("momentum blend collapsed to zero; keeping old key",
                      RuntimeWarning)
        blended[bad] = bank.keys[rows[bad]]
        norms[bad] = 1.0
    bank.keys[rows] = blended / norms[:, None]
