"""Acceptance suite: one test per criterion, each reporting a pass/fail
line in the terminal summary."""

import itertools
import time
from fractions import Fraction

import numpy as np
import pytest

from conceptcontrast.activations import (
    encode_binary,
    load_activation_dump,
    make_dataset,
    write_activation_dump,
)
from conceptcontrast.contrast import ContrastBatch, concept_loss, infonce_loss, normalize_rows
from conceptcontrast.metrics import hyperspherical_energy, neuron_coverage
from conceptcontrast.summarize import (
    ConceptClusters,
    NeuronCluster,
    StimuliMatrix,
    SummarizerConfig,
    kmeans_stimuli,
    summarize,
)
from conceptcontrast.toy import (
    ModelConfig,
    SyntheticDGConfig,
    TrainSchedule,
    compare_arms,
    generate_synthetic_dg,
    run_toy,
)
from conceptcontrast.toy.model import ToyModel
from conceptcontrast.toy.reference import EVAL_SEEDS, reference_configs
from conceptcontrast.toy.train import activation_dump, finetune_step_loss
from helpers import HAND_TRACE, hand_trace_dataset


def exact_sse(rows, groups):
    """Within-group SSE in exact rational arithmetic."""
    total = Fraction(0)
    for g in groups:
        pts = [rows[i] for i in g]
        for d in range(len(rows[0])):
            col = [Fraction(int(p[d])) for p in pts]
            mean = sum(col) / len(col)
            total += sum((v - mean) ** 2 for v in col)
    return total


def exhaustive_optimum(rows, k):
    best = None
    for labels in itertools.product(range(k), repeat=len(rows)):
        groups = [[i for i, lab in enumerate(labels) if lab == j] for j in range(k)]
        cost = exact_sse(rows, [g for g in groups if g])
        if best is None or cost < best:
            best = cost
    return best


def fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def random_clusters(rng, N, n_clusters):
    cls = []
    for _ in range(n_clusters):
        members = rng.choice(N, size=int(rng.integers(1, min(4, N) + 1)), replace=False)
        cls.append(NeuronCluster(frozenset(int(n) for n in members),
                                 {int(n): float(rng.uniform(0.1, 1.0)) for n in members},
                                 frozenset()))
    return ConceptClusters(tuple(cls), SummarizerConfig(), 0, N)


def unit_batch(rng, B, N, n_classes=3):
    z, _ = normalize_rows(rng.standard_normal((B, N)))
    y = rng.integers(0, n_classes, B)
    y[1] = y[0]
    return ContrastBatch(z, y)


def test_criterion_01_kmeans_matches_exhaustive_optimum(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = []
    n_instances = 60
    for i in range(n_instances):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, 4))
        m = int(rng.integers(2, 10))
        bits = rng.random((n, m)) < rng.uniform(0.2, 0.8)
        stim = StimuliMatrix(bits, np.zeros(n), np.ones(n, dtype=bool), tuple(range(m)))
        groups = [sorted(g) for g in kmeans_stimuli(stim, k, seed=i)]
        rows = bits.astype(int).tolist()
        if exact_sse(rows, groups) != exhaustive_optimum(rows, k):
            mismatches.append(i)
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 60
    criterion(1, ok, f"K-Means SSE equals exhaustive optimum on {n_instances - len(mismatches)}"
                     f"/{n_instances} instances (exact rational tie) in {elapsed:.1f}s")
    assert ok, mismatches


def test_criterion_02_hand_traced_summarization(criterion):
    ds, cfg = hand_trace_dataset()
    out = summarize(ds, cfg)
    got = [({n: cl.weights[n] for n in sorted(cl.members)}, set(cl.provenance)) for cl in out]
    ok = len(got) == len(HAND_TRACE) and all(
        set(w) == set(ew) and all(abs(w[n] - ew[n]) < 1e-15 for n in w) and p == ep
        for (w, p), (ew, ep) in zip(got, HAND_TRACE)
    )
    criterion(2, ok, f"2x2 fixture gives {len(got)} clusters matching the hand trace, "
                     f"weights {[sorted(round(v, 4) for v in w.values()) for w, _ in got]}")
    assert ok, got


def test_criterion_03_gradient_checks(criterion):
    t0 = time.perf_counter()
    worst = {"infonce": 0.0, "concept": 0.0, "end_to_end": 0.0}
    data = generate_synthetic_dg(SyntheticDGConfig(
        n_classes=3, n_domains=3, samples_per_cell=10, input_dim=5, seed=0))
    for trial in range(20):
        rng = np.random.default_rng(trial)
        b = unit_batch(rng, 8, 5)
        num = fd(lambda z: infonce_loss(ContrastBatch(z, b.class_labels, False)).loss,
                 b.embeddings)
        worst["infonce"] = max(worst["infonce"], rel_err(infonce_loss(b).grad_embeddings, num))

        cl = random_clusters(rng, 5, 3)
        num = fd(lambda z: concept_loss(ContrastBatch(z, b.class_labels, False), cl).loss,
                 b.embeddings)
        worst["concept"] = max(worst["concept"],
                               rel_err(concept_loss(b, cl).grad_embeddings, num))

        model = ToyModel.init(5, 6, 10, 3, seed=trial)
        clusters = summarize(activation_dump(model, data, data.source_mask),
                             SummarizerConfig(quantile=0.05, k_clusters=2))
        sched = TrainSchedule(ce_weight=1.0, base_weight=0.5, concept_weight=1.0)
        idx = rng.choice(np.flatnonzero(data.source_mask), 12, replace=False)
        x, y = data.inputs[idx], data.class_labels[idx]
        grads = finetune_step_loss(model, x, y, clusters, sched)[3]
        for name, p in model.params().items():
            def loss_of(v, name=name):
                saved = getattr(model, name)
                setattr(model, name, v)
                try:
                    return finetune_step_loss(model, x, y, clusters, sched)[0]
                finally:
                    setattr(model, name, saved)
            worst["end_to_end"] = max(worst["end_to_end"], rel_err(grads[name], fd(loss_of, p)))
    elapsed = time.perf_counter() - t0
    ok = (worst["infonce"] <= 1e-5 and worst["concept"] <= 1e-5
          and worst["end_to_end"] <= 1e-4 and elapsed < 60)
    criterion(3, ok, "worst relative FD error over 20 trials: "
                     + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                     + f" ({elapsed:.1f}s)")
    assert ok, worst


def test_criterion_04_degenerate_equivalence(criterion):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        N = int(rng.integers(2, 9))
        b = unit_batch(rng, int(rng.integers(4, 16)), N)
        ident = ConceptClusters(
            tuple(NeuronCluster(frozenset({n}), {n: 1.0}, frozenset()) for n in range(N)),
            SummarizerConfig(), 0, N)
        worst = max(worst, abs(concept_loss(b, ident).loss - infonce_loss(b).loss))
    ok = worst <= 1e-10
    criterion(4, ok, f"identity clusters: max |concept - feature| loss over 20 batches = {worst:.1e}")
    assert ok


@pytest.fixture(scope="module")
def reference_runs():
    t0 = time.perf_counter()
    runs = {}
    for seed in EVAL_SEEDS:
        data_cfg, model_cfg, schedule, summ = reference_configs(seed)
        runs[seed] = compare_arms(generate_synthetic_dg(data_cfg), model_cfg, schedule, summ)
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_05_energy_direction(criterion, reference_runs):
    runs, elapsed = reference_runs
    wins = [s for s, r in runs.items() if r["concept"]["energy"] < r["feature"]["energy"]]
    detail = ", ".join(f"{r['concept']['energy']:.0f}<{r['feature']['energy']:.0f}"
                       if s in wins else f"{r['concept']['energy']:.0f}>={r['feature']['energy']:.0f}"
                       for s, r in runs.items())
    ok = len(wins) >= 4 and elapsed < 600
    criterion(5, ok, f"concept arm has lower target energy in {len(wins)}/5 seeds "
                     f"({detail}; {elapsed:.0f}s for all runs)")
    assert ok


@pytest.mark.slow
def test_criterion_06_coverage_direction(criterion, reference_runs):
    runs, _ = reference_runs
    wins = [s for s, r in runs.items() if r["concept"]["coverage"] > r["feature"]["coverage"]]
    detail = ", ".join(f"{r['concept']['coverage']:.3f} vs {r['feature']['coverage']:.3f}"
                       for r in runs.values())
    ok = len(wins) >= 4
    criterion(6, ok, f"concept arm has higher coverage in {len(wins)}/5 seeds ({detail})")
    assert ok


@pytest.mark.slow
def test_criterion_07_target_accuracy(criterion, reference_runs):
    runs, _ = reference_runs
    deltas = [r["concept"]["target_accuracy"] - r["feature"]["target_accuracy"]
              for r in runs.values()]
    within = sum(d >= -0.01 for d in deltas)
    ok = within >= 4
    criterion(7, ok, f"target accuracy drop <= 1pp in {within}/5 seeds "
                     f"(deltas {', '.join(f'{100 * d:+.1f}pp' for d in deltas)})")
    assert ok


def test_criterion_08_metric_oracles(criterion):
    worst_cov = worst_energy = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        acts = rng.standard_normal((int(rng.integers(1, 40)), int(rng.integers(1, 60))))
        t = rng.uniform(0.5, 3.0, acts.shape[0])
        hits = 0
        for n in range(acts.shape[0]):
            for m in range(acts.shape[1]):
                if acts[n, m] > t[n]:
                    hits += 1
                    break
        worst_cov = max(worst_cov, abs(neuron_coverage(acts, t).coverage - hits / acts.shape[0]))

        z, _ = normalize_rows(rng.standard_normal((int(rng.integers(2, 30)), int(rng.integers(2, 8)))))
        power = [0.0, 1.0, 2.0][seed % 3]
        total = 0.0
        for i in range(len(z)):
            for j in range(len(z)):
                if i != j:
                    d = max(float(np.sqrt(np.sum((z[i] - z[j]) ** 2))), 1e-12)
                    total += -np.log(d) if power == 0 else d ** -power
        worst_energy = max(worst_energy, abs(hyperspherical_energy(z, power).energy - total))
    ok = worst_cov <= 1e-10 and worst_energy <= 1e-10
    criterion(8, ok, f"max deviation from double-loop oracles over 20 datasets: coverage "
                     f"{worst_cov:.1e}, energy {worst_energy:.1e}")
    assert ok


def test_criterion_09_determinism_and_round_trip(criterion, tmp_path):
    data = generate_synthetic_dg(SyntheticDGConfig(
        n_classes=3, n_domains=3, samples_per_cell=20, input_dim=6, seed=5))
    sched = TrainSchedule(pretrain_steps=60, finetune_steps=40, recluster_every=20,
                          batch_size=30, eval_every=20, seed=5)
    summ = SummarizerConfig(quantile=0.05, k_clusters=2, seed=5)
    model_cfg = ModelConfig(hidden_dim=8, feature_dim=16, seed=5)
    logs = []
    for name in ("a", "b"):
        run_toy(data, model_cfg, sched, summ, tmp_path / name)
        logs.append((tmp_path / name / "train_log.jsonl").read_bytes())
    same_logs = logs[0] == logs[1]

    identical = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(0, 30)), int(rng.integers(0, 40))
        labels = rng.integers(0, 3, m)
        ds = make_dataset(rng.standard_normal((n, m)).astype(np.float32), labels,
                          rng.integers(0, 2, m), predicted=labels if seed % 2 else None,
                          n_classes=3, n_domains=2, layer_name=f"layer{seed}")
        first = tmp_path / f"rt{seed}.coca"
        write_activation_dump(ds, first)
        second = tmp_path / f"rt{seed}_again.coca"
        write_activation_dump(load_activation_dump(first), second)
        identical += first.read_bytes() == second.read_bytes() == encode_binary(ds)
    ok = same_logs and identical == 20
    criterion(9, ok, f"repeated seeded run logs identical: {same_logs}; "
                     f"byte-identical dump round trips: {identical}/20")
    assert ok


@pytest.mark.slow
def test_criterion_10_summarization_cost(criterion, reference_runs):
    runs, _ = reference_runs
    shares = [r["concept"]["timing"]["summarize_seconds"] / r["concept"]["timing"]["finetune_seconds"]
              for r in runs.values()]
    ok = max(shares) < 0.10
    criterion(10, ok, f"summarize share of fine-tuning wall time: max {100 * max(shares):.1f}% "
                      f"over {len(shares)} reference runs (limit 10%)")
    assert ok
