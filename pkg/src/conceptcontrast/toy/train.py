"""Two-stage training on synthetic domains: ERM pre-training, then
fine-tuning with a contrastive term whose concept clusters are refreshed on
a fixed schedule.

Everything is plain SGD in float64; a run is fully determined by the data
config, the model seed and the schedule seed.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..activations import ActivationDataset, SampleMeta, write_activation_dump
from ..contrast import ContrastBatch, normalize_backward, normalize_rows, total_finetune_loss
from ..errors import ConfigError, SummarizationFailedError, TrainingDivergedError
from ..metrics import class_conditional_energy, coverage_thresholds, neuron_coverage
from ..summarize import SummarizerConfig, summarize
from .data import DGData
from .model import ToyModel, backward, cross_entropy, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    feature_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1 or self.feature_dim < 1:
            raise ConfigError("model dimensions must be >= 1")


@dataclass(frozen=True)
class TrainSchedule:
    pretrain_steps: int = 300
    finetune_steps: int = 2000
    recluster_every: int = 1000
    max_finetune: int = 5000
    batch_size: int = 64
    learning_rate: float = 0.05
    finetune_learning_rate: Optional[float] = None
    ce_weight: float = 1.0
    base_weight: float = 0.0
    concept_weight: float = 1.0
    renormalize: bool = True
    seed: int = 0
    eval_every: int = 100
    coverage_quantile: float = 0.01
    coverage_scope: str = "global"

    def __post_init__(self):
        if self.recluster_every < 1:
            raise ConfigError("recluster_every must be >= 1")
        if self.finetune_steps > self.max_finetune:
            raise ConfigError(
                f"finetune_steps {self.finetune_steps} exceeds max_finetune {self.max_finetune}"
            )
        if min(self.pretrain_steps, self.finetune_steps) < 0 or self.batch_size < 2:
            raise ConfigError("step counts must be >= 0 and batch_size >= 2")
        if min(self.ce_weight, self.base_weight, self.concept_weight) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.learning_rate < 0 or (self.finetune_learning_rate or 0) < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    @property
    def finetune_lr(self):
        if self.finetune_learning_rate is None:
            return self.learning_rate
        return self.finetune_learning_rate


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    # wall-clock figures live outside ``records`` so logs stay reproducible
    timing: dict = field(default_factory=dict)

    def add(self, **rec):
        self.records.append(rec)

    def events(self, kind):
        return [r for r in self.records if r.get("event") == kind]

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def _batch_indices(rng, data, batch_size):
    """Equal share of the batch from every source domain."""
    domains = data.source_domains
    per = max(1, batch_size // len(domains))
    out = []
    for s in domains:
        pool = np.flatnonzero(data.domain_labels == s)
        out.append(rng.choice(pool, size=min(per, pool.size), replace=False))
    return np.concatenate(out)


def _sgd(model, grads, lr):
    for name, g in grads.items():
        setattr(model, name, getattr(model, name) - lr * g)


def activation_dump(model, data, mask=None, layer_name="features"):
    """Feature activations of ``data`` (optionally masked) with predictions."""
    if mask is not None:
        data = data.subset(mask)
    z, logits, _ = forward(model, data.inputs)
    pred = np.argmax(logits, axis=1)
    samples = [SampleMeta(sid, int(c), int(d), int(p)) for sid, c, d, p in
               zip(data.sample_ids, data.class_labels, data.domain_labels, pred)]
    return ActivationDataset(z.T, samples, data.n_classes, data.n_domains, layer_name)


def evaluate(model, data, quantile=0.01, coverage_scope="global"):
    """Accuracy per domain, source coverage and target class-conditional
    energy (power 0)."""
    z, logits, _ = forward(model, data.inputs)
    correct = np.argmax(logits, axis=1) == data.class_labels
    src = data.source_mask
    acc = {str(s): float(correct[data.domain_labels == s].mean()) for s in range(data.n_domains)}
    src_z = z[src].T
    cov = neuron_coverage(src_z, coverage_thresholds(src_z, quantile, coverage_scope))
    return {
        "accuracy_per_domain": acc,
        "source_accuracy": float(correct[src].mean()),
        "target_accuracy": float(correct[~src].mean()),
        "coverage": cov.coverage,
        "energy": class_conditional_energy(z[~src], data.class_labels[~src], power=0.0),
    }


def _check(loss, model, step, phase):
    if not np.isfinite(loss) or not model.is_finite():
        raise TrainingDivergedError(f"{phase} diverged at step {step} (loss={loss})", step)


def pretrain_erm(model, data, schedule, train_log=None):
    """Cross-entropy SGD on the source domains. Returns a new model."""
    model = model.copy()
    train_log = train_log if train_log is not None else TrainLog()
    rng = np.random.default_rng([schedule.seed, 0])
    y = data.class_labels
    for step in range(schedule.pretrain_steps):
        idx = _batch_indices(rng, data, schedule.batch_size)
        _, logits, cache = forward(model, data.inputs[idx])
        loss, g_logits = cross_entropy(logits, y[idx])
        _sgd(model, backward(model, cache, grad_logits=g_logits), schedule.learning_rate)
        _check(loss, model, step, "pretraining")
        rec = {"phase": "pretrain", "step": step, "erm_loss": loss}
        if (step + 1) % schedule.eval_every == 0 or step + 1 == schedule.pretrain_steps:
            rec.update(evaluate(model, data, schedule.coverage_quantile, schedule.coverage_scope))
        train_log.add(**rec)
    return model, train_log


def finetune_step_loss(model, inputs, labels, clusters, schedule):
    """Composite fine-tuning objective on one batch.

    Returns ``(total, ce, contrast, grads)``; the contrast term is averaged
    over anchors so its scale does not grow with the batch size.
    """
    z, logits, cache = forward(model, inputs)
    ce, g_logits = cross_entropy(logits, labels)
    g_logits = g_logits * schedule.ce_weight
    contrast = 0.0
    g_z = None
    if schedule.base_weight or schedule.concept_weight:
        u, norms = normalize_rows(z)
        res = total_finetune_loss(
            ContrastBatch(u, labels, normalized=False), clusters,
            schedule.base_weight, schedule.concept_weight, schedule.renormalize,
        )
        B = z.shape[0]
        contrast = res.loss / B
        g_z = normalize_backward(u, norms, res.grad_embeddings / B)
    grads = backward(model, cache, grad_z=g_z, grad_logits=g_logits)
    return schedule.ce_weight * ce + contrast, ce, contrast, grads


def finetune_coco(model, data, schedule, summarizer_cfg, rundir=None, train_log=None,
                  step_offset=0):
    """Fine-tune with periodic re-summarization of the feature neurons.

    At step 0 and every ``recluster_every`` steps the current source
    activations are dumped and summarized into fresh concept clusters,
    which stay fixed until the next refresh. Returns ``(model, log)``.
    """
    model = model.copy()
    train_log = train_log if train_log is not None else TrainLog()
    rng = np.random.default_rng([schedule.seed, 1])
    rundir = Path(rundir) if rundir is not None else None
    if rundir is not None:
        (rundir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (rundir / "clusters").mkdir(parents=True, exist_ok=True)
    y = data.class_labels
    clusters = None
    summarize_seconds = 0.0
    t_start = time.perf_counter()
    lr = schedule.finetune_lr

    for step in range(schedule.finetune_steps):
        if step % schedule.recluster_every == 0:
            dump = activation_dump(model, data, data.source_mask)
            t0 = time.perf_counter()
            try:
                clusters = summarize(dump, summarizer_cfg, step_tag=step_offset + step)
            except SummarizationFailedError:
                if schedule.concept_weight:
                    raise
                clusters = None
            summarize_seconds += time.perf_counter() - t0
            rec = {"phase": "finetune", "event": "recluster", "step": step,
                   "n_clusters": len(clusters) if clusters is not None else 0}
            if clusters is not None:
                rec["covered_neurons"] = len(clusters.covered_neurons())
            rec.update(evaluate(model, data, schedule.coverage_quantile, schedule.coverage_scope))
            if rundir is not None:
                path = rundir / "checkpoints" / f"features_step{step:05d}.coca"
                write_activation_dump(dump, path)
                train_log.checkpoints.append(str(path))
                rec["checkpoint"] = path.name
                if clusters is not None:
                    clusters.save(rundir / "clusters" / f"clusters_step{step:05d}.json")
            train_log.add(**rec)

        idx = _batch_indices(rng, data, schedule.batch_size)
        total, ce, contrast, grads = finetune_step_loss(
            model, data.inputs[idx], y[idx], clusters, schedule)
        _sgd(model, grads, lr)
        _check(total, model, step, "fine-tuning")
        rec = {"phase": "finetune", "step": step, "loss": total, "ce_loss": ce,
               "contrast_loss": contrast}
        if (step + 1) % schedule.eval_every == 0 or step + 1 == schedule.finetune_steps:
            rec.update(evaluate(model, data, schedule.coverage_quantile, schedule.coverage_scope))
        train_log.add(**rec)

    train_log.timing["finetune_seconds"] = time.perf_counter() - t_start
    train_log.timing["summarize_seconds"] = summarize_seconds
    train_log.timing["summarize_calls"] = len(train_log.events("recluster"))
    return model, train_log


def feature_arm(schedule):
    """The same schedule with the concept term swapped for feature contrast."""
    return replace(schedule, base_weight=schedule.base_weight + schedule.concept_weight,
                   concept_weight=0.0)


def compare_arms(data: DGData, model_cfg: ModelConfig, schedule: TrainSchedule,
                 summarizer_cfg: SummarizerConfig):
    """Pre-train once, then fine-tune a feature-contrast arm and a concept
    arm from the same checkpoint and seed. Returns final metrics per arm."""
    model = ToyModel.init(data.inputs.shape[1], model_cfg.hidden_dim, model_cfg.feature_dim,
                          data.n_classes, model_cfg.seed)
    pre, _ = pretrain_erm(model, data, schedule)
    out = {"pretrained": evaluate(pre, data, schedule.coverage_quantile, schedule.coverage_scope)}
    for name, sched in (("feature", feature_arm(schedule)), ("concept", schedule)):
        m, tlog = finetune_coco(pre, data, sched, summarizer_cfg)
        out[name] = evaluate(m, data, schedule.coverage_quantile, schedule.coverage_scope)
        out[name]["timing"] = dict(tlog.timing)
    return out


def run_toy(data, model_cfg, schedule, summarizer_cfg, rundir=None):
    """Full two-stage run. Writes the log, checkpoints and clusters to
    ``rundir`` when given. Returns ``(model, log)``."""
    model = ToyModel.init(data.inputs.shape[1], model_cfg.hidden_dim, model_cfg.feature_dim,
                          data.n_classes, model_cfg.seed)
    train_log = TrainLog()
    model, train_log = pretrain_erm(model, data, schedule, train_log)
    if rundir is not None:
        rundir = Path(rundir)
        rundir.mkdir(parents=True, exist_ok=True)
        (rundir / "checkpoints").mkdir(exist_ok=True)
        path = rundir / "checkpoints" / "features_pretrained.coca"
        write_activation_dump(activation_dump(model, data, data.source_mask), path)
        train_log.checkpoints.append(str(path))
    model, train_log = finetune_coco(model, data, schedule, summarizer_cfg, rundir, train_log)
    final = evaluate(model, data, schedule.coverage_quantile, schedule.coverage_scope)
    train_log.add(phase="final", step=schedule.finetune_steps, **final)
    if rundir is not None:
        train_log.write(rundir / "train_log.jsonl")
        model.save(rundir / "model.npz")
        (rundir / "timing.json").write_text(json.dumps(train_log.timing, indent=1) + "\n")
        (rundir / "config.json").write_text(json.dumps(
            {"model": asdict(model_cfg), "schedule": asdict(schedule),
             "summarizer": asdict(summarizer_cfg)}, indent=1) + "\n")
    return model, train_log
