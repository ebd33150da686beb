"""Global redundancy-aware pruning of Mixture-of-Experts layers, on synthetic MoE stacks."""
__version__ = "0.1.0"

from .estimators import (
    CountGuidedPruner,
    ExpertSimilarity,
    GrapePruner,
    RandomPruner,
    RouterGuidedPruner,
    UniformPruner,
)
from .fidelity import FidelityReport, compare, evaluate
from .merge import apply_plan
from .planner import (
    ClusterPlan,
    TraceEvent,
    cluster_entropy,
    count_guided_prune,
    grape_prune,
    oracle_allocate,
    random_prune,
    router_guided_prune,
    uniform_prune,
)
from .redundancy import build_profile, mean_redundancy, normalize_profile
from .similarity import SimilarityBlock, cka_similarity_block, linear_cka, mse_similarity_block
from .synth import (
    CalibrationCapture,
    SynthMoeModel,
    capture_calibration,
    forward,
    generate_model,
)
