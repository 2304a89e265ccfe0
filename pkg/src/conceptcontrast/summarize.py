"""Neuron summarization: group the neurons of a feature layer into concept
clusters from their activation dumps.

Pipeline per (class, domain) slice: quantile thresholds -> binary stimuli
matrix -> drop rarely-firing neurons -> K-Means over the stimuli rows.
Clusters are then merged across domains within each class and finally
across classes, using Jaccard overlap of their neuron sets, and every
neuron gets a weight ``|X_n| / |union of X_m over the cluster|``.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np

from . import __version__
from .activations import ActivationDataset, SliceView
from .errors import (
    ConfigError,
    ConsistencyError,
    EmptyClusterError,
    EmptyInputError,
    FormatError,
    SummarizationFailedError,
)
from .kmeans import kmeans

log = logging.getLogger(__name__)

SCHEMA = "conceptcontrast.clusters"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SummarizerConfig:
    quantile: float = 0.01
    k_clusters: int = 5
    min_active_ratio: float = 0.01
    merge_threshold: float = 0.8
    seed: int = 0
    correct_only: bool = True
    threshold_scope: str = "neuron"  # or "global": one scalar for all neurons
    threshold_source: str = "dataset"  # or "slice": quantiles within each slice
    weight_scope: str = "cluster"  # or "global": X_n over every sample
    exclusive: bool = False  # assign every neuron to one cluster only
    n_init: int = 10
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError(f"quantile must be in (0, 1), got {self.quantile}")
        if not 0.0 < self.merge_threshold <= 1.0:
            raise ConfigError(f"merge_threshold must be in (0, 1], got {self.merge_threshold}")
        if self.k_clusters < 1:
            raise ConfigError(f"k_clusters must be >= 1, got {self.k_clusters}")
        if not 0.0 <= self.min_active_ratio <= 1.0:
            raise ConfigError(f"min_active_ratio must be in [0, 1], got {self.min_active_ratio}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if self.threshold_scope not in ("neuron", "global"):
            raise ConfigError(f"unknown threshold_scope {self.threshold_scope!r}")
        if self.threshold_source not in ("dataset", "slice"):
            raise ConfigError(f"unknown threshold_source {self.threshold_source!r}")
        if self.weight_scope not in ("cluster", "global"):
            raise ConfigError(f"unknown weight_scope {self.weight_scope!r}")
        if self.n_init < 1 or self.threads < 1:
            raise ConfigError("n_init and threads must be >= 1")


@dataclass(frozen=True)
class StimuliMatrix:
    bits: np.ndarray  # bool, (N, M')
    thresholds: np.ndarray
    active_mask: np.ndarray
    sample_ids: tuple = ()
    tag: Optional[tuple] = None

    def stimuli_of(self, neuron):
        return frozenset(self.sample_ids[j] for j in np.flatnonzero(self.bits[neuron]))


@dataclass(frozen=True)
class NeuronCluster:
    members: frozenset
    weights: Mapping[int, float]
    stimuli_set: frozenset
    provenance: tuple = ()

    def __post_init__(self):
        if not self.members:
            raise ConsistencyError("a cluster needs at least one member")
        if set(self.weights) != set(self.members):
            raise ConsistencyError("cluster weights must be keyed exactly by its members")

    @property
    def sort_key(self):
        return (min(self.members), tuple(sorted(self.members)))


@dataclass(frozen=True)
class ConceptClusters:
    clusters: tuple
    config_snapshot: SummarizerConfig
    step_tag: int = 0
    n_neurons: int = 0
    warnings: tuple = field(default=(), compare=False)

    def __len__(self):
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    def weight_matrix(self, n_neurons=None):
        """Dense ``(n_clusters, n_neurons)`` matrix of the per-neuron weights."""
        n = self.n_neurons if n_neurons is None else n_neurons
        W = np.zeros((len(self.clusters), n))
        for i, cl in enumerate(self.clusters):
            for neuron, w in cl.weights.items():
                if not 0 <= neuron < n:
                    raise ConsistencyError(f"cluster member {neuron} outside [0, {n})")
                W[i, neuron] = w
        return W

    def covered_neurons(self):
        return sorted(set().union(*(cl.members for cl in self.clusters)))

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "toolkit_version": __version__,
            "step_tag": self.step_tag,
            "n_neurons": self.n_neurons,
            # thread count does not affect the result, so it is not recorded
            "config": {k: v for k, v in asdict(self.config_snapshot).items() if k != "threads"},
            "clusters": [
                {
                    "members": sorted(cl.members),
                    "weights": [cl.weights[n] for n in sorted(cl.members)],
                    "stimuli": sorted(cl.stimuli_set),
                    "provenance": [list(t) for t in cl.provenance],
                }
                for cl in self.clusters
            ],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != SCHEMA:
            raise FormatError("not a concept-cluster document")
        if doc.get("version") != SCHEMA_VERSION:
            raise FormatError(f"unsupported cluster schema version {doc.get('version')}")
        try:
            clusters = tuple(
                NeuronCluster(
                    members=frozenset(int(m) for m in c["members"]),
                    weights={int(m): float(w) for m, w in zip(c["members"], c["weights"])},
                    stimuli_set=frozenset(str(s) for s in c["stimuli"]),
                    provenance=tuple(tuple(int(v) for v in t) for t in c["provenance"]),
                )
                for c in doc["clusters"]
            )
            cfg = SummarizerConfig(**doc["config"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed cluster document: {exc}") from exc
        return cls(clusters, cfg, int(doc.get("step_tag", 0)), int(doc["n_neurons"]),
                   tuple(doc.get("warnings", ())))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise FormatError(f"{path}: not a concept-cluster document")
        return cls.from_dict(doc)


def compute_thresholds(activations, quantile, scope="neuron"):
    """Per-neuron activation threshold at the top-``quantile`` level.

    ``activations`` is ``(N, M)`` (or a :class:`SliceView`). Each threshold
    is the ``1 - quantile`` quantile of the neuron's outputs with linear
    interpolation between order statistics. With ``scope="global"`` a single
    quantile over all entries is broadcast to every neuron.
    """
    acts = activations.activations if isinstance(activations, SliceView) else activations
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[1] == 0:
        raise EmptyInputError("thresholds need at least one sample")
    level = 1.0 - quantile
    if scope == "global":
        return np.full(acts.shape[0], np.quantile(acts, level))
    if scope != "neuron":
        raise ConfigError(f"unknown threshold scope {scope!r}")
    return np.quantile(acts, level, axis=1)


def binarize(view, thresholds):
    """Stimuli matrix: 1 where the activation strictly exceeds the neuron's
    threshold."""
    if isinstance(view, SliceView):
        acts, ids, tag = view.activations, tuple(view.sample_ids), view.tag
    else:
        acts, ids, tag = np.asarray(view), tuple(range(np.shape(view)[1])), None
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (acts.shape[0],):
        raise ConsistencyError(
            f"{thresholds.shape[0] if thresholds.ndim else 1} thresholds for {acts.shape[0]} neurons"
        )
    bits = np.asarray(acts, dtype=np.float64) > thresholds[:, None]
    return StimuliMatrix(bits, thresholds, np.ones(acts.shape[0], dtype=bool), ids, tag)


def filter_noisy(stim, min_active_ratio):
    """Keep neurons firing on at least ``min_active_ratio`` of the samples."""
    if not 0.0 <= min_active_ratio <= 1.0:
        raise ConfigError(f"min_active_ratio must be in [0, 1], got {min_active_ratio}")
    counts = stim.bits.sum(axis=1)
    # tolerance absorbs ratio * M round-off, e.g. 0.1 * 30
    mask = counts >= min_active_ratio * stim.bits.shape[1] - 1e-9
    return replace(stim, active_mask=mask)


def kmeans_stimuli(stim, k, seed, n_init=10):
    """Partition the active neurons by K-Means on their binary stimuli rows.

    Returns a list of frozensets of neuron ids, ordered by smallest member.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    active = np.flatnonzero(stim.active_mask)
    if active.size == 0:
        raise EmptyClusterError(f"no active neurons in slice {stim.tag}", tag=stim.tag)
    if active.size < k:
        groups = [frozenset([int(n)]) for n in active]
    else:
        labels, _ = kmeans(stim.bits[active].astype(np.float64), k, seed=seed, n_init=n_init)
        groups = [frozenset(int(n) for n in active[labels == j]) for j in range(labels.max() + 1)]
    return sorted(groups, key=lambda g: (min(g), sorted(g)))


def jaccard(a, b):
    """``|a & b| / |a | b|``; two empty sets score 0."""
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def member_similarity(x, y):
    return jaccard(x.members, y.members)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # smaller root wins so components are labelled deterministically
            self.parent[max(ri, rj)] = min(ri, rj)


def _collapse(group):
    members = frozenset().union(*(c.members for c in group))
    weights = {}
    for c in group:
        for n, w in c.weights.items():
            weights[n] = max(w, weights.get(n, 0.0))
    return NeuronCluster(
        members=members,
        weights=weights,
        stimuli_set=frozenset().union(*(c.stimuli_set for c in group)),
        provenance=tuple(t for c in group for t in c.provenance),
    )


def merge_clusters(clusters, threshold, similarity: Optional[Callable] = None,
                   reweight: Optional[Callable] = None):
    """Merge every connected group of clusters whose pairwise similarity
    exceeds ``threshold``.

    ``similarity`` defaults to Jaccard overlap of the member neuron sets.
    Components are collapsed (union of members, stimuli and provenance) and
    the pass is repeated until nothing merges, so the result is a fixed
    point. Merged weights are provisional (max over parts) unless
    ``reweight`` is given.
    """
    sim = similarity or member_similarity
    current = sorted(clusters, key=lambda c: c.sort_key)
    while True:
        n = len(current)
        uf = _UnionFind(n)
        for i in range(n):
            for j in range(i + 1, n):
                if sim(current[i], current[j]) > threshold:
                    uf.union(i, j)
        groups = {}
        for i in range(n):
            groups.setdefault(uf.find(i), []).append(current[i])
        if len(groups) == n:
            break
        current = sorted((_collapse(g) if len(g) > 1 else g[0] for g in groups.values()),
                         key=lambda c: c.sort_key)
    if reweight is not None:
        current = [reweight(c) for c in current]
    return current


def compute_weights(cluster, per_neuron_stimuli):
    """Set ``w_n = |X_n| / |union of X_m for m in cluster|``.

    The cluster's stimuli set is refreshed to that union. A member with an
    empty stimuli set keeps weight 0 and a warning is logged.
    """
    missing = [n for n in cluster.members if n not in per_neuron_stimuli]
    if missing:
        raise ConsistencyError(f"no stimuli recorded for neurons {sorted(missing)}")
    union = frozenset().union(*(per_neuron_stimuli[n] for n in cluster.members))
    weights = {}
    for n in sorted(cluster.members):
        x_n = per_neuron_stimuli[n]
        if not x_n:
            log.warning("neuron %d never activates within its cluster scope; weight 0", n)
            weights[n] = 0.0
        else:
            weights[n] = len(x_n) / len(union)
    return replace(cluster, weights=weights, stimuli_set=union)


def _summarize_slice(view, cfg, thresholds=None):
    """Steps 1-3 for one slice. Returns (clusters, per-neuron stimuli, warning)."""
    if len(view) == 0:
        return [], {}, f"slice {view.tag} is empty; skipped"
    if thresholds is None:
        thresholds = compute_thresholds(view, cfg.quantile, cfg.threshold_scope)
    stim = filter_noisy(binarize(view, thresholds), cfg.min_active_ratio)
    stimuli = {n: stim.stimuli_of(n) for n in range(stim.bits.shape[0])}
    try:
        groups = kmeans_stimuli(stim, cfg.k_clusters, cfg.seed, cfg.n_init)
    except EmptyClusterError:
        return [], stimuli, f"slice {view.tag} has no active neurons; skipped"
    clusters = [
        compute_weights(
            NeuronCluster(g, {n: 0.0 for n in g}, frozenset(), (view.tag,)), stimuli
        )
        for g in groups
    ]
    return clusters, stimuli, None


def summarize(ds: ActivationDataset, cfg: SummarizerConfig, step_tag=0):
    """Summarize the neurons of ``ds`` into concept clusters.

    By default each neuron's threshold is its top-quantile output over the
    whole dump, applied unchanged inside every slice; the noisy-neuron
    ratio is then measured against the slice size.
    """
    views = [ds.slice(c, s, cfg.correct_only)
             for c in range(ds.n_classes) for s in range(ds.n_domains)]
    if ds.n_samples == 0:
        raise SummarizationFailedError("dump has no samples")
    thresholds = None
    if cfg.threshold_source == "dataset":
        thresholds = compute_thresholds(ds.activations, cfg.quantile, cfg.threshold_scope)
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(lambda v: _summarize_slice(v, cfg, thresholds), views))
    else:
        results = [_summarize_slice(v, cfg, thresholds) for v in views]

    warnings = []
    slice_stimuli = {}
    per_class = {}
    for view, (clusters, stimuli, warning) in zip(views, results):
        if warning:
            warnings.append(warning)
            log.info(warning)
        if stimuli:
            slice_stimuli[view.tag] = stimuli
        per_class.setdefault(view.class_label, []).extend(clusters)

    if not any(per_class.values()):
        raise SummarizationFailedError(
            "every (class, domain) slice was empty or had no active neurons"
        )

    if cfg.weight_scope == "global":
        gthr = thresholds
        if gthr is None:
            gthr = compute_thresholds(ds.activations, cfg.quantile, cfg.threshold_scope)
        gstim = binarize(ds.activations, gthr)
        ids = ds.sample_ids
        global_x = {n: frozenset(ids[j] for j in np.flatnonzero(gstim.bits[n]))
                    for n in range(ds.n_neurons)}

        def stimuli_for(cluster):
            return global_x
    else:
        def stimuli_for(cluster):
            tags = dict.fromkeys(cluster.provenance)
            return {
                n: frozenset().union(*(slice_stimuli[t][n] for t in tags))
                for n in cluster.members
            }

    def reweight(cluster):
        return compute_weights(cluster, stimuli_for(cluster))

    class_level = []
    for c in sorted(per_class):
        class_level.extend(merge_clusters(per_class[c], cfg.merge_threshold, reweight=reweight))
    final = merge_clusters(class_level, cfg.merge_threshold, reweight=reweight)
    if cfg.exclusive:
        final = _make_exclusive(final, reweight)
    return ConceptClusters(tuple(final), cfg, step_tag, ds.n_neurons, tuple(warnings))


def _make_exclusive(clusters, reweight):
    """Keep each neuron only in the cluster where it weighs most (earliest
    cluster on ties), then drop emptied clusters and reweight."""
    owner = {}
    for i, cl in enumerate(clusters):
        for n, w in cl.weights.items():
            if n not in owner or w > clusters[owner[n]].weights[n]:
                owner[n] = i
    out = []
    for i, cl in enumerate(clusters):
        keep = frozenset(n for n in cl.members if owner[n] == i)
        if keep:
            out.append(reweight(replace(cl, members=keep,
                                        weights={n: cl.weights[n] for n in keep})))
    return sorted(out, key=lambda c: c.sort_key)
