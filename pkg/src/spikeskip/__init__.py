"""Spiking networks with searchable skip connections.

Modules: :mod:`.engine` (LIF dynamics, surrogate gradient, merges, encoders),
:mod:`.topology` (block adjacency matrices, search spaces, MAC counts),
:mod:`.netbuild` (supernet-backed networks, BPTT training, evaluation),
:mod:`.bosearch` (GP surrogate, confidence-bound batches, search loops) and
:mod:`.harness` (configs, datasets, experiments, reports, CLI).
"""

__version__ = "0.1.0"
