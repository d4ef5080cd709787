"""Text-conditioned 3D sign motion generation."""

from .dataset import Lexicon, MotionSample, generate_corpus, load_corpus, save_corpus
from .denoiser import ModelConfig, SignDenoiser
from .diffusion import NoiseSchedule, make_schedule
from .estimator import SignMotionDiffusion
from .fitting import Detections, FitConfig, SequenceFitter, fit_sequence
from .kinematics import Camera, KinematicTree, default_regressor, default_tree, forward_kinematics
from .metrics import dtw, evaluate, fid, mpjpe, mpvpe
from .params import FormatError, ParamSequence, load_params, save_params
from .prior import PosePrior, PriorSet

__all__ = [
    "Camera",
    "Detections",
    "FitConfig",
    "FormatError",
    "KinematicTree",
    "Lexicon",
    "ModelConfig",
    "MotionSample",
    "NoiseSchedule",
    "ParamSequence",
    "PosePrior",
    "PriorSet",
    "SequenceFitter",
    "SignDenoiser",
    "SignMotionDiffusion",
    "default_regressor",
    "default_tree",
    "dtw",
    "evaluate",
    "fid",
    "fit_sequence",
    "forward_kinematics",
    "generate_corpus",
    "load_corpus",
    "load_params",
    "make_schedule",
    "mpjpe",
    "mpvpe",
    "save_corpus",
    "save_params",
]
