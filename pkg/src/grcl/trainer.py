"""Training orchestration: source pretraining, per-domain adaptation with
gradient-projected contrastive updates, baselines, and memory lifecycle.

Randomness is organized as per-purpose streams keyed by (seed, task, step,
purpose) rather than one shared generator. Methods that consume only a
subset of the streams (e.g. a baseline that never draws a source batch)
therefore see exactly the same batches, negatives and augmentations as the
full method, which makes trajectories comparable across methods and is
relied on by the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import contrast, gradproj, memory as memory_mod, metrics, model
from .domains import AugmentSpec, DomainDataset, augment
from .memory import DomainMemory
from .model import Batch, ModelSpec, ParamVector, TrainingDivergenceError

METHODS = ("source-only", "seq-finetune", "multi-task",
           "grcl-noforget", "grcl", "grcl-exact")

# stream purposes within a step
_EPOCH, _AUG, _NEG, _SRC, _MEM, _EPISODIC = range(6)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_source: int = 64
    batch_contrast: int = 64
    batch_memory: int = 64
    lambda_weight: float = 1.0
    temperature: float = 0.07
    momentum: float = 0.5
    num_negatives: int | None = 256
    memory_capacity: int = 256
    method: str = "grcl"
    exact_per_domain: bool = False
    ridge: float = 1e-3
    eps_feas: float | None = None  # None -> scale-relative default
    lr_schedule: str = "cosine"
    augment_spec: AugmentSpec = field(default_factory=lambda: AugmentSpec(0.2, (0.9, 1.1)))
    class_balanced_memory: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; one of {METHODS}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if min(self.batch_source, self.batch_contrast, self.batch_memory) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 0 or self.lambda_weight < 0.0:
            raise ValueError("epochs and lambda_weight must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.method == "grcl-exact":
            object.__setattr__(self, "exact_per_domain", True)

    @property
    def is_projected(self) -> bool:
        return self.method in ("grcl", "grcl-exact", "grcl-noforget")


@dataclass
class AdaptationState:
    params: ParamVector
    memory: DomainMemory
    bank: contrast.FeatureBank | None
    completed_domains: int
    frozen_prev_params: ParamVector
    task_stats: list[dict] = field(default_factory=list)


def _stream(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _stream_seed(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(
        1, np.uint64)[0] >> 1)


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _labeled_batches(batch: Batch, size: int, rng: np.random.Generator):
    idx = rng.choice(len(batch), size=min(size, len(batch)), replace=False)
    return Batch(batch.inputs[idx], batch.labels[idx])


def train_source(spec: ModelSpec, source: DomainDataset, cfg: TrainConfig) -> ParamVector:
    """Supervised mini-batch SGD on the labeled source domain."""
    if not source.labeled_for_training or source.train.labels is None:
        raise ValueError("source domain must be labeled for training")
    params = model.init_params(spec, _stream_seed(cfg.seed, 0))
    train = source.train
    n = len(train)
    steps_per_epoch = max(1, n // cfg.batch_source)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        order = _stream(cfg.seed, 1, epoch).permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_source:(s + 1) * cfg.batch_source]
            batch = Batch(train.inputs[idx], train.labels[idx])
            loss, grad = model.ce_loss_and_grad(params, batch)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"source training diverged at epoch {epoch}, step {s}")
            params = model.sgd_step(params, grad, _lr_at(cfg, step, total))
            step += 1
    return params


def _memory_constraint_rows(params, cfg, mem, task_key, gstep):
    """Memory gradients entering the projection QP: one row for the pooled
    domain memory, or one per episodic memory in exact mode."""
    rows, labels, losses = [], [], {}
    if mem.is_empty:
        return rows, labels, losses
    if cfg.exact_per_domain:
        for em in mem.episodic:
            b = em.sample_batch(cfg.batch_memory,
                                _stream_seed(*task_key, gstep, _MEM, em.domain_id))
            loss_k, g_k = model.ce_loss_and_grad(params, b)
            rows.append(g_k)
            labels.append(f"memory-{em.domain_id}")
            losses[f"memory-{em.domain_id}"] = loss_k
    else:
        b = memory_mod.sample_memory_batch(
            mem, cfg.batch_memory, _stream_seed(*task_key, gstep, _MEM))
        loss_dm, g_dm = model.ce_loss_and_grad(params, b)
        rows.append(g_dm)
        labels.append("domain-memory")
        losses["domain-memory"] = loss_dm
    return rows, labels, losses


def adapt_domain(state: AdaptationState, source: DomainDataset,
                 target: DomainDataset, cfg: TrainConfig,
                 trace=None) -> AdaptationState:
    """Run one adaptation task and roll the memory/bank state forward."""
    if target.labeled_for_training:
        raise ValueError("target domains must be unlabeled for training")
    t = state.completed_domains + 1
    if cfg.method == "source-only":
        return AdaptationState(state.params, state.memory, state.bank, t,
                               state.frozen_prev_params,
                               state.task_stats + [{"task": t, "steps": 0,
                                                    "violation_steps": 0}])

    task_key = (cfg.seed, 100 + t)
    target_train = target.train_for_adaptation()

    # bank + contrastive pool over source U memory U current target, keyed
    # with the frozen parameters from the previous task
    datasets = [("source", source.train.inputs)]
    pool_blocks = [source.train.inputs]
    pool_ids: list[contrast.SampleKey] = [("source", i)
                                          for i in range(len(source.train))]
    if not state.memory.is_empty:
        mem_x = state.memory.union_samples()
        datasets.append(("memory", mem_x))
        pool_blocks.append(mem_x)
        pool_ids += [("memory", i) for i in range(len(mem_x))]
    datasets.append(("target", target_train.inputs))
    pool_blocks.append(target_train.inputs)
    pool_ids += [("target", i) for i in range(len(target_train))]
    bank = contrast.build_feature_bank(state.frozen_prev_params, datasets,
                                       cfg.momentum, cfg.temperature)
    pool = np.vstack(pool_blocks)

    params = state.params
    steps_per_epoch = max(1, len(pool) // cfg.batch_contrast)
    total = cfg.epochs * steps_per_epoch
    gstep = 0
    violation_steps = 0
    aug_fn = lambda X, seed: augment(X, cfg.augment_spec, seed)

    for epoch in range(cfg.epochs):
        order = _stream(*task_key, _EPOCH, epoch).permutation(len(pool))
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_contrast:(s + 1) * cfg.batch_contrast]
            batch = Batch(pool[idx])
            batch_keys = [pool_ids[i] for i in idx]
            lr = _lr_at(cfg, gstep, total)

            loss_c, g_c, fresh_q = contrast.contrastive_batch_loss(
                params, bank, batch, batch_keys,
                aug_seed=_stream_seed(*task_key, gstep, _AUG),
                augment_fn=aug_fn, num_negatives=cfg.num_negatives,
                neg_seed=_stream(*task_key, gstep, _NEG))
            if not np.isfinite(loss_c):
                raise TrainingDivergenceError(
                    f"contrastive loss diverged at task {t}, step {gstep}")

            record = {"task": t, "epoch": epoch, "step": gstep, "lr": lr,
                      "loss_contrast": loss_c}

            if cfg.is_projected:
                # order within a step: g_t, g_s, key updates, memory batch,
                # memory gradients, projection, parameter step
                src_batch = _labeled_batches(
                    source.train, cfg.batch_source,
                    _stream(*task_key, gstep, _SRC))
                loss_s, g_s = model.ce_loss_and_grad(params, src_batch)
                record["loss_source"] = loss_s
                rows, labels = [g_s], ["source"]
                contrast.update_keys(
                    bank, np.array([bank.row_of(pool_ids[i]) for i in idx]), fresh_q)
                if cfg.method != "grcl-noforget":
                    m_rows, m_labels, m_losses = _memory_constraint_rows(
                        params, cfg, state.memory, task_key, gstep)
                    rows += m_rows
                    labels += m_labels
                    record.update({f"loss_{k}": v for k, v in m_losses.items()})
                cs = gradproj.ConstraintSet(g_c, np.vstack(rows), labels)
                eps = cfg.eps_feas if cfg.eps_feas is not None \
                    else gradproj.default_eps_feas(g_c)
                violated = gradproj.check_violation(cs, eps)
                res = gradproj.project(cs, cfg.ridge, eps)
                feas = cs.constraint_grads @ res.projected
                assert np.all(feas >= -eps), \
                    f"projected update infeasible by {float(-feas.min()):.3e}"
                violation_steps += int(violated.any())
                record.update({"violated": violated.tolist(),
                               "multipliers": res.multipliers.tolist(),
                               "distortion": res.distortion,
                               "constraints": labels})
                update = res.projected
            elif cfg.method == "multi-task":
                src_batch = _labeled_batches(
                    source.train, cfg.batch_source,
                    _stream(*task_key, gstep, _SRC))
                loss_s, g_s = model.ce_loss_and_grad(params, src_batch)
                record["loss_source"] = loss_s
                contrast.update_keys(
                    bank, np.array([bank.row_of(pool_ids[i]) for i in idx]), fresh_q)
                update = g_s + cfg.lambda_weight * g_c
            else:  # seq-finetune
                contrast.update_keys(
                    bank, np.array([bank.row_of(pool_ids[i]) for i in idx]), fresh_q)
                update = g_c

            params = model.sgd_step(params, update, lr)
            if trace is not None:
                trace(record)
            gstep += 1

    new_em = memory_mod.select_episodic(
        params, target.domain_id, target_train.inputs, cfg.memory_capacity,
        _stream_seed(*task_key, _EPISODIC),
        class_balanced=cfg.class_balanced_memory)
    new_memory = DomainMemory(list(state.memory.episodic))
    new_memory.add(new_em)
    stats = {"task": t, "steps": gstep, "violation_steps": violation_steps}
    return AdaptationState(params, new_memory, bank, t, params,
                           state.task_stats + [stats])


def run_sequence(spec: ModelSpec, datasets: list[DomainDataset],
                 cfg: TrainConfig, trace=None) -> metrics.AccuracyMatrix:
    """Source training followed by every adaptation task; returns R."""
    if not datasets or datasets[0].domain_id != 0:
        raise ValueError("datasets[0] must be the source domain (id 0)")
    num_targets = len(datasets) - 1
    R = metrics.AccuracyMatrix(num_targets)
    params = train_source(spec, datasets[0], cfg)
    R.set(0, 0, metrics.evaluate_accuracy(params, datasets[0].test))
    state = AdaptationState(params, DomainMemory(), None, 0, params)
    for t in range(1, num_targets + 1):
        state = adapt_domain(state, datasets[0], datasets[t], cfg, trace=trace)
        for j in range(t + 1):
            R.set(t, j, metrics.evaluate_accuracy(state.params, datasets[j].test))
    return R
