"""Generalization diagnostics: neuron coverage and hyperspherical energy."""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .activations import ActivationDataset
from .errors import ConfigError, ConsistencyError, EmptyInputError, InsufficientPointsError
from .summarize import compute_thresholds

ENERGY_EPS = 1e-12


@dataclass(frozen=True)
class CoverageReport:
    coverage: float
    activated_ids: frozenset
    threshold_used: np.ndarray
    total_neurons: int

    def to_dict(self):
        return {
            "coverage": self.coverage,
            "activated": len(self.activated_ids),
            "total_neurons": self.total_neurons,
            "activated_ids": sorted(self.activated_ids),
        }


@dataclass(frozen=True)
class EnergyReport:
    energy: float
    power: float
    pair_count: int

    def to_dict(self):
        return {"energy": self.energy, "power": self.power, "pair_count": self.pair_count}


def _matrix(ds):
    return ds.activations if isinstance(ds, ActivationDataset) else np.asarray(ds)


def coverage_thresholds(ds, quantile=0.01, scope="global"):
    """Activation thresholds for coverage at the top-``quantile`` level.

    The default is one scalar over the whole layer; ``scope="neuron"`` gives
    every neuron its own quantile.
    """
    return compute_thresholds(_matrix(ds), quantile, scope)


def neuron_coverage(ds, thresholds, mode="exists"):
    """Fraction of neurons driven above their threshold.

    ``mode="exists"``: a neuron counts once any sample exceeds its threshold.
    ``mode="forall"``: every sample must exceed it.
    """
    acts = np.asarray(_matrix(ds), dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] == 0 or acts.shape[1] == 0:
        raise EmptyInputError("coverage needs at least one neuron and one sample")
    thresholds = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (acts.shape[0],))
    above = acts > thresholds[:, None]
    if mode == "exists":
        hit = above.any(axis=1)
    elif mode == "forall":
        hit = above.all(axis=1)
    else:
        raise ConfigError(f"unknown coverage mode {mode!r}")
    ids = frozenset(int(n) for n in np.flatnonzero(hit))
    return CoverageReport(len(ids) / acts.shape[0], ids, np.array(thresholds), acts.shape[0])


def coverage_curve(dumps, quantile=0.01, scope="global", mode="exists", step_tags=None):
    """Coverage of each dump in order, thresholds recomputed per dump.

    Returns a list of ``(step_tag, coverage)``; tags default to positions.
    """
    dumps = list(dumps)
    if step_tags is None:
        step_tags = list(range(len(dumps)))
    if len(step_tags) != len(dumps):
        raise ConsistencyError("one step tag per dump required")
    sizes = {_matrix(d).shape[0] for d in dumps}
    if len(sizes) > 1:
        raise ConsistencyError(f"dumps disagree on neuron count: {sorted(sizes)}")
    return [
        (tag, neuron_coverage(d, coverage_thresholds(d, quantile, scope), mode).coverage)
        for tag, d in zip(step_tags, dumps)
    ]


def hyperspherical_energy(features, power=0.0, eps=ENERGY_EPS, check_norm=True):
    """Pairwise potential energy of unit feature vectors.

    Sums ``|z_i - z_j|^-power`` (``power > 0``) or ``log(1 / |z_i - z_j|)``
    (``power == 0``) over ordered pairs ``i != j``; distances are clamped
    below at ``eps``. Lower energy means more spread-out features.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise InsufficientPointsError("energy needs at least two feature vectors")
    if power < 0:
        raise ConfigError("power must be >= 0")
    if check_norm and np.any(np.abs(np.linalg.norm(z, axis=1) - 1.0) > 1e-6):
        warnings.warn("hyperspherical_energy: rows are not unit-normalized", stacklevel=2)
    B, d = z.shape
    block = max(1, (1 << 21) // max(1, B * d))
    row_sums = np.empty(B)
    for start in range(0, B, block):
        diff = z[start:start + block, None, :] - z[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        dist = np.maximum(dist, eps)
        if power == 0:
            e = -np.log(dist)
        else:
            e = dist ** (-power)
        idx = np.arange(start, min(start + block, B))
        e[idx - start, idx] = 0.0
        row_sums[idx] = e.sum(axis=1)
    return EnergyReport(float(row_sums.sum()), float(power), B * (B - 1))


def class_conditional_energy(features, labels, power=0.0, eps=ENERGY_EPS):
    """Mean per-class energy of unit-normalized features.

    Classes with fewer than two samples are skipped. All-zero rows stay at
    the origin.
    """
    z = np.asarray(features, dtype=np.float64)
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), eps)
    labels = np.asarray(labels)
    values = [
        hyperspherical_energy(z[labels == c], power, eps, check_norm=False).energy
        for c in np.unique(labels)
        if (labels == c).sum() >= 2
    ]
    if not values:
        raise InsufficientPointsError("no class has two or more samples")
    return float(np.mean(values))


def random_projection(dim, seed, out_dim=3):
    """Seeded ``(dim, out_dim)`` matrix with orthonormal columns."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, out_dim)))
    return q * np.sign(np.diag(r))


def project_to_sphere(features, seed=0):
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise EmptyInputError("nothing to project")
    if z.shape[1] < 3:
        z = np.pad(z, ((0, 0), (0, 3 - z.shape[1])))
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), ENERGY_EPS)
    p = z @ random_projection(z.shape[1], seed)
    return p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), ENERGY_EPS)


def export_projection(features, out, seed=0, labels=None):
    """Write features projected onto the unit 2-sphere as CSV (x, y, z[, label])."""
    p = project_to_sphere(features, seed)
    if labels is not None and len(labels) != len(p):
        raise ConsistencyError("one label per feature row required")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z"] + (["label"] if labels is not None else []))
        for i, row in enumerate(p):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(str(labels[i]))
            w.writerow(vals)
    return p
