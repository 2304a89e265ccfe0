"""Concept-level contrastive learning toolkit.

Summarizes the neurons of a feature layer into concept clusters, computes
concept activation vectors and feature- vs. concept-level InfoNCE losses,
and reports neuron coverage and hyperspherical energy.
"""

__version__ = "0.1.0"

from .activations import (  # noqa: E402
    ActivationDataset,
    SampleMeta,
    SliceView,
    load_activation_dump,
    make_dataset,
    write_activation_dump,
)
from .contrast import (  # noqa: E402
    ContrastBatch,
    LossResult,
    compute_cav,
    concept_loss,
    infonce_loss,
    total_finetune_loss,
)
from .metrics import (  # noqa: E402
    coverage_curve,
    export_projection,
    hyperspherical_energy,
    neuron_coverage,
)
from .summarize import (  # noqa: E402
    ConceptClusters,
    NeuronCluster,
    SummarizerConfig,
    summarize,
)

__all__ = [
    "ActivationDataset", "SampleMeta", "SliceView", "load_activation_dump", "make_dataset",
    "write_activation_dump", "ContrastBatch", "LossResult", "compute_cav", "concept_loss",
    "infonce_loss", "total_finetune_loss", "coverage_curve", "export_projection",
    "hyperspherical_energy", "neuron_coverage", "ConceptClusters", "NeuronCluster",
    "SummarizerConfig", "summarize",
]
