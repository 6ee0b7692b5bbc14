"""Predictive coding over recurrent network ensembles with spike-and-slab synapses.

The package trains the *distribution* of every connection weight (spike
probability, slab mass, slab variance) by alternating belief relaxation and
closed-form hyperparameter updates, both minimising one prediction-error
energy.  A plain single-network predictive-coding baseline, a cyclic-alphabet
toy language, sequential-digit classification and small-corpus language
modelling are included, along with a CLI that runs the experiments and
renders report figures next to their CSV outputs.
"""

__version__ = "0.1.0"

from .forward import EnsembleMoments, NoiseDraws, draw_noise, forward_step, readout
from .inference import (
    BeliefState,
    InferenceConfig,
    TaskMode,
    belief_step,
    energy,
    run_inference,
)
from .learning import (
    HyperGradients,
    Optimizer,
    TrainConfig,
    apply_update,
    hyper_gradients,
    train,
)
from .sas import (
    ConcreteNetwork,
    EnsembleNetwork,
    InitConfig,
    LayerMoments,
    SaSLayer,
    clamp,
    init_ensemble,
    moments,
    sample_network,
)

__all__ = [
    "BeliefState",
    "ConcreteNetwork",
    "EnsembleMoments",
    "EnsembleNetwork",
    "HyperGradients",
    "InferenceConfig",
    "InitConfig",
    "LayerMoments",
    "NoiseDraws",
    "Optimizer",
    "SaSLayer",
    "TaskMode",
    "TrainConfig",
    "apply_update",
    "belief_step",
    "clamp",
    "draw_noise",
    "energy",
    "forward_step",
    "hyper_gradients",
    "init_ensemble",
    "moments",
    "readout",
    "run_inference",
    "sample_network",
    "train",
]
