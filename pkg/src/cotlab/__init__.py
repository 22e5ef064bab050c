"""One-layer chain-of-thought transformer laboratory for the k-parity problem."""

from .link import DEFAULT_LINK, LinkFunction, link_constants, phi_eval, phi_prime, verify_invariants
from .model import AttentionWeights, FilterConfig, FilterMode, MaskKind, generate_chain, quantize, run_chain
from .task import (
    DecompositionTree,
    ParityInstance,
    TokenMatrix,
    build_instance,
    build_tree,
    ground_truth_labels,
    sample_augmented,
    sample_inputs,
)
from .training import DataSpec, Regime, Trace, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LINK", "LinkFunction", "link_constants", "phi_eval", "phi_prime", "verify_invariants",
    "AttentionWeights", "FilterConfig", "FilterMode", "MaskKind", "generate_chain", "quantize", "run_chain",
    "DecompositionTree", "ParityInstance", "TokenMatrix", "build_instance", "build_tree", "ground_truth_labels",
    "sample_augmented", "sample_inputs", "DataSpec", "Regime", "Trace", "TrainConfig", "evaluate", "train",
]
