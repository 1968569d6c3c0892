"""Audio-visual deepfake detection with a toy multimodal language model.

A clip's audio and video features are encoded, read by a small decoder
alongside a fixed question, and classified by comparing the ``Real`` and
``Fake`` answer-token logits.
"""
from .config import ConfigError, RunConfig
from .data import CorpusSpec, build_splits
from .estimator import AVDeepfakeClassifier, pack_clips, unpack_clips
from .metrics import auc, extract_two_token, mean_average_precision
from .model import ModelConfig, PromptTemplate, forward, init_params
from .training import StagePlan, full_stage, lora_stage

__version__ = "0.1.0"

__all__ = ["AVDeepfakeClassifier", "ConfigError", "CorpusSpec", "ModelConfig", "PromptTemplate",
           "RunConfig", "StagePlan", "auc", "build_splits", "extract_two_token", "forward",
           "full_stage", "init_params", "lora_stage", "mean_average_precision", "pack_clips",
           "unpack_clips"]
