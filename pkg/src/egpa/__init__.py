"""Error-guided pose augmentation and an attention graph network for exercise assessment."""

__version__ = "0.1.0"

from .errors import EGPAError, ParameterError, ParseError, ValidationError
from .skeleton import (ERROR_TYPES, AssessmentLabels, MotionSequence, SkeletonTopology, chain_topology,
                       kinect_v2_topology, normalized_adjacency)
from .augment import (AugmentConfig, ErrorSpec, default_specs, generate_augmented_dataset, inject_alignment_error,
                      inject_compensation, inject_rom_error, inject_temporal_error, inject_weight_shift,
                      plausibility_check, sample_severity)
from .ingestion import LabeledSample, Provenance, read_catalog, subject_split, write_catalog
from .model import ModelConfig, forward, gradients, init_params, load_params, save_params
from .training import TrainConfig, train_two_stage
from .metrics import EvalReport, attention_stats, evaluate, err_acc, macro_f1, mae, mape, rmse
from .synth import SynthConfig, synthesize

__all__ = [name for name in dir() if not name.startswith("_")]
