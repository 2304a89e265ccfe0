"""Synthetic multi-domain classification data.

Class means sit on a sphere; every domain distorts them by its own seeded
affine map, and one domain is held out as the unseen target.
"""

from dataclasses import dataclass

import numpy as np

from ..activations import ActivationDataset, SampleMeta
from ..errors import ConfigError, ConsistencyError


@dataclass(frozen=True)
class SyntheticDGConfig:
    n_classes: int = 4
    n_domains: int = 3
    samples_per_cell: int = 100
    input_dim: int = 16
    class_separation: float = 3.0
    domain_shift_scale: float = 1.0
    noise_sigma: float = 1.0
    seed: int = 0
    target_domain: int = -1

    def __post_init__(self):
        if self.n_classes < 2 or self.n_domains < 2:
            raise ConfigError("need at least 2 classes and 2 domains")
        if self.samples_per_cell < 1 or self.input_dim < 1:
            raise ConfigError("samples_per_cell and input_dim must be >= 1")
        if self.noise_sigma < 0 or self.domain_shift_scale < 0 or self.class_separation < 0:
            raise ConfigError("separation, shift and noise must be non-negative")
        if not -self.n_domains <= self.target_domain < self.n_domains:
            raise ConfigError(f"target_domain {self.target_domain} out of range")

    @property
    def target(self):
        return self.target_domain % self.n_domains


@dataclass(frozen=True)
class DGData:
    inputs: np.ndarray  # (M, input_dim)
    class_labels: np.ndarray
    domain_labels: np.ndarray
    sample_ids: tuple
    n_classes: int
    n_domains: int
    target_domain: int

    @property
    def source_mask(self):
        return self.domain_labels != self.target_domain

    @property
    def source_domains(self):
        return [s for s in range(self.n_domains) if s != self.target_domain]

    def subset(self, mask):
        return DGData(self.inputs[mask], self.class_labels[mask], self.domain_labels[mask],
                      tuple(np.asarray(self.sample_ids, dtype=object)[mask]),
                      self.n_classes, self.n_domains, self.target_domain)

    def source(self):
        return self.subset(self.source_mask)

    def target(self):
        return self.subset(~self.source_mask)

    def to_dump(self):
        """Store the raw inputs in activation-dump layout (one row per input
        dimension). The target domain goes in the layer name."""
        samples = [SampleMeta(sid, int(c), int(d))
                   for sid, c, d in zip(self.sample_ids, self.class_labels, self.domain_labels)]
        return ActivationDataset(self.inputs.T, samples, self.n_classes, self.n_domains,
                                 f"input:target={self.target_domain}")

    @classmethod
    def from_dump(cls, ds):
        name = ds.layer_name
        if not name.startswith("input:target="):
            raise ConsistencyError(f"dump layer {name!r} is not a synthetic input dump")
        return cls(np.asarray(ds.activations, dtype=np.float64).T, ds.class_labels,
                   ds.domain_labels, tuple(ds.sample_ids), ds.n_classes, ds.n_domains,
                   int(name.split("=", 1)[1]))


def generate_synthetic_dg(cfg: SyntheticDGConfig) -> DGData:
    rng = np.random.default_rng(cfg.seed)
    C, S, D = cfg.n_classes, cfg.n_domains, cfg.input_dim
    means = rng.standard_normal((C, D))
    means *= cfg.class_separation / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)

    xs, ys, ds, ids = [], [], [], []
    for s in range(S):
        A = np.eye(D) + cfg.domain_shift_scale * rng.standard_normal((D, D)) / (2.0 * np.sqrt(D))
        b = rng.standard_normal(D)
        b *= cfg.domain_shift_scale * cfg.class_separation / max(np.linalg.norm(b), 1e-12)
        for c in range(C):
            noise = cfg.noise_sigma * rng.standard_normal((cfg.samples_per_cell, D))
            xs.append(means[c] @ A.T + b + noise)
            ys += [c] * cfg.samples_per_cell
            ds += [s] * cfg.samples_per_cell
            ids += [f"d{s}c{c}i{i}" for i in range(cfg.samples_per_cell)]
    return DGData(np.concatenate(xs), np.array(ys), np.array(ds), tuple(ids), C, S, cfg.target)
