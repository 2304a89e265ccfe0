"""Hyperparameter selection by training-domain validation: hold out part of
every source domain, fine-tune on the rest and keep the setting with the
best held-out source accuracy. The target domain is never consulted."""

from dataclasses import replace

import numpy as np

from ..errors import SummarizationFailedError

from .model import ToyModel, predict
from .train import finetune_coco, pretrain_erm


def source_validation_split(data, fraction=0.2, seed=0):
    """Split off ``fraction`` of every source (class, domain) cell.

    Returns ``(train, val)``; ``train`` keeps the target domain untouched.
    """
    rng = np.random.default_rng(seed)
    val = np.zeros(len(data.class_labels), dtype=bool)
    for s in data.source_domains:
        for c in range(data.n_classes):
            cell = np.flatnonzero((data.domain_labels == s) & (data.class_labels == c))
            n_val = int(round(fraction * cell.size))
            val[rng.permutation(cell)[:n_val]] = True
    return data.subset(~val), data.subset(val)


def search_summarizer(data, model_cfg, schedule, base_cfg, grid, val_fraction=0.2):
    """Score each summarizer override in ``grid`` (a list of dicts).

    Returns a list of ``(override, val_accuracy)`` in grid order; the
    accuracy is ``None`` when summarization finds no active neurons.
    """
    train, val = source_validation_split(data, val_fraction, schedule.seed)
    model = ToyModel.init(data.inputs.shape[1], model_cfg.hidden_dim, model_cfg.feature_dim,
                          data.n_classes, model_cfg.seed)
    pre, _ = pretrain_erm(model, train, schedule)
    out = []
    for override in grid:
        try:
            tuned, _ = finetune_coco(pre, train, schedule, replace(base_cfg, **override))
        except SummarizationFailedError:
            out.append((override, None))
            continue
        acc = float((predict(tuned, val.inputs) == val.class_labels).mean())
        out.append((override, acc))
    return out
