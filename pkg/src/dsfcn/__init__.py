"""Dual-stage fully convolutional pipeline for optic disk/cup segmentation
and cup-to-disk-ratio glaucoma scoring, on a small reverse-mode autodiff core."""

from .autodiff import (GraphError, ParamSet, SgdConfig, ShapeError, Tensor,
                       backward, sgd_step)
from .cascade import (CascadeConfig, CascadeResult, CropRegion, TransformRecord,
                      crop_and_stack, detect_disk_region, preprocess,
                      preprocess_mask, run_cascade, run_single_stage,
                      train_stage, uncrop)
from .classifier import SigmoidClassifier, fit_sigmoid
from .data import Sample, SynthConfig, augment, load_dataset, load_sample, synth_generate
from .metrics import (SegReport, UndefinedMetricError, auc, binarize,
                      build_report, cdr_area, cdr_vertical, mae_cdr, score_pair)
from .model import FcnConfig, FcnModel, ProbMap, build_fcn, forward, predict_probabilities

__all__ = [
    "GraphError", "ParamSet", "SgdConfig", "ShapeError", "Tensor", "backward", "sgd_step",
    "CascadeConfig", "CascadeResult", "CropRegion", "TransformRecord",
    "crop_and_stack", "detect_disk_region", "preprocess", "preprocess_mask",
    "run_cascade", "run_single_stage", "train_stage", "uncrop",
    "SigmoidClassifier", "fit_sigmoid",
    "Sample", "SynthConfig", "augment", "load_dataset", "load_sample", "synth_generate",
    "SegReport", "UndefinedMetricError", "auc", "binarize", "build_report",
    "cdr_area", "cdr_vertical", "mae_cdr", "score_pair",
    "FcnConfig", "FcnModel", "ProbMap", "build_fcn", "forward", "predict_probabilities",
]

__version__ = "0.1.0"
