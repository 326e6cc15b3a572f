"""Synthetic continual-adaptation task generation, vector augmentation and
dataset file I/O.

The source domain is a Gaussian mixture with class means spaced on a circle
(embedded in the first two coordinates for input_dim > 2). Each target domain
redraws from the same class-conditional process and pushes it through an
affine shift: rotate in the class-mean plane, scale, translate, then add
domain noise. Labels share one space across domains; target labels are kept
for evaluation but are not reachable through the adaptation-facing API.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Batch


class DatasetParseError(ValueError):
    """Malformed dataset file; carries the offending line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class AugmentSpec:
    """Vector-data augmentation: random uniform scale then Gaussian noise."""

    noise_sigma: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.noise_sigma < 0.0 or lo > hi:
            raise ValueError(f"invalid augmentation spec: {self}")


@dataclass(frozen=True)
class DomainSequenceSpec:
    """Geometry and transform schedule of a synthetic domain sequence."""

    num_classes: int
    input_dim: int
    rotations: tuple[float, ...]          # radians, one per target domain
    translations: tuple[tuple[float, ...], ...]
    scales: tuple[float, ...]
    noise_sigmas: tuple[float, ...]
    train_per_domain: int
    test_per_domain: int
    class_radius: float = 2.0
    class_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotations", tuple(float(r) for r in self.rotations))
        object.__setattr__(self, "translations",
                           tuple(tuple(float(v) for v in t) for t in self.translations))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "noise_sigmas",
                           tuple(float(s) for s in self.noise_sigmas))
        n = self.num_targets
        if n < 1:
            raise ValueError("at least one target domain is required")
        if not (len(self.translations) == len(self.scales)
                == len(self.noise_sigmas) == n):
            raise ValueError("per-domain transform lists must share length")
        if any(len(t) != self.input_dim for t in self.translations):
            raise ValueError("translations must have input_dim entries")
        if self.num_classes < 2 or self.input_dim < 2:
            raise ValueError("need num_classes >= 2 and input_dim >= 2")
        if min(self.train_per_domain, self.test_per_domain) < self.num_classes:
            raise ValueError("train/test counts must be >= num_classes")
        if any(s <= 0.0 for s in self.scales) or any(s < 0.0 for s in self.noise_sigmas):
            raise ValueError("scales must be > 0 and noise sigmas >= 0")

    @property
    def num_targets(self) -> int:
        return len(self.rotations)


@dataclass
class DomainDataset:
    """One domain's train/test splits; domain 0 is the labeled source."""

    domain_id: int
    train: Batch
    test: Batch
    labeled_for_training: bool

    def train_for_adaptation(self) -> Batch:
        """Adaptation-facing view: target-domain labels are stripped."""
        if self.labeled_for_training:
            return self.train
        return Batch(self.train.inputs, None)


def _class_means(spec: DomainSequenceSpec) -> np.ndarray:
    means = np.zeros((spec.num_classes, spec.input_dim))
    angles = 2.0 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    means[:, 0] = spec.class_radius * np.cos(angles)
    means[:, 1] = spec.class_radius * np.sin(angles)
    return means


def _rotation_matrix(dim: int, angle: float) -> np.ndarray:
    R = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    R[0, 0], R[0, 1], R[1, 0], R[1, 1] = c, -s, s, c
    return R


def _draw_split(spec: DomainSequenceSpec, domain_id: int, split: str, n: int) -> Batch:
    split_code = {"train": 0, "test": 1}[split]
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, domain_id, split_code]))
    labels = np.tile(np.arange(spec.num_classes), -(-n // spec.num_classes))[:n]
    labels = rng.permutation(labels)
    base = _class_means(spec)[labels] + spec.class_std * rng.standard_normal(
        (n, spec.input_dim))
    if domain_id == 0:
        return Batch(base, labels)
    k = domain_id - 1
    R = _rotation_matrix(spec.input_dim, spec.rotations[k])
    x = spec.scales[k] * (base @ R.T) + np.asarray(spec.translations[k])
    if spec.noise_sigmas[k] > 0.0:
        x = x + spec.noise_sigmas[k] * rng.standard_normal(x.shape)
    return Batch(x, labels)


def generate_sequence(spec: DomainSequenceSpec) -> list[DomainDataset]:
    """Source followed by the target domains, deterministic per spec.seed."""
    out = []
    for d in range(spec.num_targets + 1):
        out.append(DomainDataset(
            domain_id=d,
            train=_draw_split(spec, d, "train", spec.train_per_domain),
            test=_draw_split(spec, d, "test", spec.test_per_domain),
            labeled_for_training=(d == 0)))
    return out


def _hash_uniforms(prefix: bytes, row: np.ndarray, n: int) -> np.ndarray:
    """n uniforms in (0, 1], derived from blake2b(prefix, block, row bytes)."""
    row_bytes = row.tobytes()
    out = np.empty(n)
    filled, block = 0, 0
    while filled < n:
        h = hashlib.blake2b(prefix + block.to_bytes(4, "little") + row_bytes,
                            digest_size=64).digest()
        vals = np.frombuffer(h, dtype="<u8")
        take = min(vals.size, n - filled)
        out[filled:filled + take] = (vals[:take].astype(np.float64) + 1.0) / 2.0 ** 64
        filled += take
        block += 1
    return out


def augment(x: np.ndarray, strength: AugmentSpec, seed: int) -> np.ndarray:
    """Scale by a uniform draw then add Gaussian noise, per-row deterministic.

    The randomness is derived from a hash of (seed, row value), so the same
    vector under the same seed always maps to the same augmented vector, no
    matter which batch it appears in.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    n, d = rows.shape
    prefix = int(seed).to_bytes(8, "little", signed=True)
    pairs = -(-d // 2)
    u = np.empty((n, 1 + 2 * pairs))
    for i in range(n):
        u[i] = _hash_uniforms(prefix, rows[i], u.shape[1])
    scales = strength.scale_range[0] + \
        (strength.scale_range[1] - strength.scale_range[0]) * u[:, 0]
    # Box-Muller on hashed uniforms: exact standard normals
    r = np.sqrt(-2.0 * np.log(u[:, 1:1 + pairs]))
    theta = 2.0 * np.pi * u[:, 1 + pairs:]
    normals = np.concatenate([r * np.cos(theta), r * np.sin(theta)], axis=1)[:, :d]
    out = scales[:, None] * rows + strength.noise_sigma * normals
    return out[0] if single else out


# ---------------------------------------------------------------------------
# dataset files: CSV with header domain_id,split,label,x0..x{d-1}


def save_dataset(ds: DomainDataset, path):
    dim = ds.train.inputs.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("domain_id,split,label," + ",".join(f"x{i}" for i in range(dim)) + "\n")
        for split_name, batch in (("train", ds.train), ("test", ds.test)):
            for i in range(len(batch)):
                label = "" if batch.labels is None else str(int(batch.labels[i]))
                fh.write(f"{ds.domain_id},{split_name},{label},"
                         + ",".join(f"{v:.17g}" for v in batch.inputs[i]) + "\n")


def load_dataset(path, num_classes: int | None = None) -> DomainDataset:
    """Parse one domain file; target train rows may have empty labels.

    When ``num_classes`` is given, any label outside [0, C) is a parse error.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError("empty file", 1)
    header = lines[0].split(",")
    if header[:3] != ["domain_id", "split", "label"]:
        raise DatasetParseError(f"bad header {lines[0]!r}", 1)
    dim = len(header) - 3
    if [f"x{i}" for i in range(dim)] != header[3:]:
        raise DatasetParseError("feature columns must be x0..x{d-1}", 1)

    rows = {"train": ([], []), "test": ([], [])}
    domain_id = None
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 + dim:
            raise DatasetParseError(
                f"expected {3 + dim} fields, got {len(parts)}", ln)
        try:
            did = int(parts[0])
        except ValueError:
            raise DatasetParseError(f"bad domain_id {parts[0]!r}", ln)
        if domain_id is None:
            domain_id = did
        elif did != domain_id:
            raise DatasetParseError("mixed domain ids in one file", ln)
        if parts[1] not in rows:
            raise DatasetParseError(f"bad split {parts[1]!r}", ln)
        label = None
        if parts[2] != "":
            try:
                label = int(parts[2])
            except ValueError:
                raise DatasetParseError(f"bad label {parts[2]!r}", ln)
            if label < 0:
                raise DatasetParseError(f"negative label {label}", ln)
            if num_classes is not None and label >= num_classes:
                raise DatasetParseError(
                    f"label {label} >= num_classes {num_classes}", ln)
        try:
            x = [float(v) for v in parts[3:]]
        except ValueError:
            raise DatasetParseError("non-numeric feature value", ln)
        xs, ys = rows[parts[1]]
        xs.append(x)
        ys.append(label)

    for split in ("train", "test"):
        if not rows[split][0]:
            raise DatasetParseError(f"file has no {split} rows", len(lines))
    if any(l is None for l in rows["test"][1]):
        raise DatasetParseError("test rows must all be labeled", len(lines))

    train_labels = rows["train"][1]
    has_train_labels = all(l is not None for l in train_labels)
    train = Batch(np.array(rows["train"][0]),
                  np.array(train_labels, dtype=np.int64) if has_train_labels else None)
    test = Batch(np.array(rows["test"][0]), np.array(rows["test"][1], dtype=np.int64))
    return DomainDataset(
        domain_id=domain_id, train=train, test=test,
        labeled_for_training=(domain_id == 0 and has_train_labels))
