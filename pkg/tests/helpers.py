"""Fixtures shared by several test modules."""

import numpy as np

from conceptcontrast.activations import make_dataset
from conceptcontrast.summarize import SummarizerConfig


def hand_trace_dataset():
    """Two classes x two domains x four samples, binary activations.

    Expected clusters (traced by hand, K=2, ratio 1/4, global threshold):
      slices (0, *): {0, 1} and {2}; domains merge.
      slice (1, 0): {2, 5} and {3, 4}; slice (1, 1): {2} and {3, 4}.
      class merge joins {2} from (0, *) and (1, 1); {2, 5} stays apart (J = 1/2).
    """
    ids, cls, dom = [], [], []
    for c in range(2):
        for s in range(2):
            for i in range(4):
                ids.append(f"c{c}s{s}i{i}")
                cls.append(c)
                dom.append(s)
    fires = {
        0: [f"c0s{s}i{i}" for s in range(2) for i in (0, 1)],
        1: [f"c0s{s}i{i}" for s in range(2) for i in (1, 2)],
        2: [f"c{c}s{s}i3" for c in range(2) for s in range(2)],
        3: [f"c1s{s}i{i}" for s in range(2) for i in (0, 1)],
        4: [f"c1s{s}i{i}" for s in range(2) for i in (0, 1)],
        5: ["c1s0i2"],
        6: [],
    }
    acts = np.zeros((7, len(ids)))
    for n, on in fires.items():
        for sid in on:
            acts[n, ids.index(sid)] = 1.0
    # a global quantile equal to the on-fraction interpolates strictly
    # between 0 and 1, so exactly the designed entries fire
    on_fraction = acts.sum() / acts.size
    ds = make_dataset(acts, cls, dom, predicted=cls, n_classes=2, n_domains=2, sample_ids=ids)
    cfg = SummarizerConfig(quantile=on_fraction, k_clusters=2, min_active_ratio=0.25,
                           merge_threshold=0.8, threshold_scope="global")
    return ds, cfg


HAND_TRACE = [
    ({0: 2 / 3, 1: 2 / 3}, {(0, 0), (0, 1)}),
    ({2: 1.0}, {(0, 0), (0, 1), (1, 1)}),
    ({2: 0.5, 5: 0.5}, {(1, 0)}),
    ({3: 1.0, 4: 1.0}, {(1, 0), (1, 1)}),
]
