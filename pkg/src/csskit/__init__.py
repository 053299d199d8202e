"""Continuous speech separation with a channel-count-agnostic mask estimator.

Modules:

- ``dsp``: STFT/iSTFT and SI-SNR
- ``autograd``: small reverse-mode tensor engine and Adam
- ``vararray``: the multichannel mask network (TAC + conformer)
- ``objectives``: uPIT stage-1 loss and teacher-student stage-2 loss
- ``simulate``: toy microphone-array mixtures and long-form sessions
- ``segment``: CTS/FWS segmentation and segment filtering
- ``css``: sliding-window separation, stitching, masking and MVDR outputs
- ``train``: training loops and evaluation
- ``recipes``: seeded end-to-end experiments
- ``io``, ``config``, ``cli``: persistence, run configs, command line
"""
from .css import CssConfig, OracleMaskModel, css_separate, mvdr_separate, mvdr_weights
from .dsp import StftConfig, istft, si_snr, stft
from .objectives import LossWeights, Stage1Refs, stage1_loss, stage2_loss
from .segment import DiarizationAnnotation, DiarizationEntry, Segment, cts, fws
from .train import TrainConfig, evaluate, train_stage1, train_stage2
from .vararray import PRESETS, NetConfig, VarArray

__version__ = "0.1.0"

__all__ = [
    "CssConfig", "OracleMaskModel", "css_separate", "mvdr_separate", "mvdr_weights",
    "StftConfig", "istft", "si_snr", "stft",
    "LossWeights", "Stage1Refs", "stage1_loss", "stage2_loss",
    "DiarizationAnnotation", "DiarizationEntry", "Segment", "cts", "fws",
    "TrainConfig", "evaluate", "train_stage1", "train_stage2",
    "PRESETS", "NetConfig", "VarArray",
]
