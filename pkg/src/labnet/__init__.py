"""Microphone-invariant multichannel speech enhancement."""
from .dsp import DspConfig, InputError, griffin_lim, istft, stft
from .kernels import ContractError, StreamState
from .model import ABLATIONS, LABNet, ModelConfig, StreamingEnhancer, ablated, enhance, enhance_stream
from .params import CorruptModelError, load_params, save_params
from .resources import count_macs, count_params, latency_report
from .train import TrainConfig, grad_check, train_toy

__all__ = [
    "ABLATIONS", "ContractError", "CorruptModelError", "DspConfig", "InputError", "LABNet",
    "ModelConfig", "StreamState", "StreamingEnhancer", "TrainConfig", "ablated", "count_macs",
    "count_params", "enhance", "enhance_stream", "grad_check", "griffin_lim", "istft",
    "latency_report", "load_params", "save_params", "stft", "train_toy",
]
