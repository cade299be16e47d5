"""Cloud-edge test-time adaptation at desk scale.

Edges run forward-only inference and upload a filtered subset of test
samples; the cloud adapts a foundation model by weighted entropy
minimization, distills it into the edge model with a replay buffer, and
distributes only the normalization scale/shift parameters back.
"""

from . import (adapt, cloud, edge, experiment, filtration, metrics, nn,
               pretrain, streams, wire)
from .adapt import AdaptConfig, AdaptationEngine, ReplayBuffer
from .edge import EdgeConfig, EdgeRuntime, UploadQueue
from .experiment import Scenario, make_scenario, run_experiment, run_loopback
from .filtration import FiltrationConfig, FiltrationState
from .nn import ModelParams, ModelSpec, NormMode, ParamMask
from .samples import Sample
from .streams import StreamSpec, gen_stream

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptationEngine", "ReplayBuffer",
    "EdgeConfig", "EdgeRuntime", "UploadQueue",
    "Scenario", "make_scenario", "run_experiment", "run_loopback",
    "FiltrationConfig", "FiltrationState",
    "ModelParams", "ModelSpec", "NormMode", "ParamMask",
    "Sample", "StreamSpec", "gen_stream",
    "adapt", "cloud", "edge", "experiment", "filtration", "metrics", "nn",
    "pretrain", "streams", "wire",
]
