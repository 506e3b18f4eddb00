"""Parameter and multiply-accumulate accounting.

MACs count weight multiplications (convolutions, linear maps, GRU gates) and the
two attention contractions; normalisation, activations and elementwise gating are
not counted.
"""
from __future__ import annotations

from .model import LABNet


def count_params(model: LABNet) -> int:
    return sum(p.numel() for p in model.parameters())


def _dpr_per_bin(cfg) -> int:
    d, hf, ht = cfg.hidden, cfg.freq_hidden, cfg.time_hidden
    bigru = 2 * 3 * hf * (d + hf) + 2 * hf * d
    time = 3 * ht * (d + ht) + ht * d
    glu = 2 * d * d
    return bigru + time + glu


def _aggregator_per_bin(cfg, channels: int) -> int:
    d = cfg.hidden
    if cfg.aggregator == "cca":
        return 2 * d * d + 2 * channels * d * d + 2 * channels * d
    return channels * d * d + d * d + 2 * d * d


def macs_breakdown(model: LABNet, channels: int) -> dict[str, int]:
    """Multiply-accumulates per STFT frame, by block."""
    cfg = model.config
    d, kt, kf = cfg.hidden, cfg.kernel_t, cfg.kernel_f
    fr = model.n_reduced
    out = {}

    f, d_in, enc = model.n_freqs, 3, 0
    for _ in range(cfg.enc_layers):
        f = (f - 1) // 2 + 1
        enc += f * d * d_in * kt * kf
        d_in = d
    out["encoder"] = channels * enc

    dpr = fr * _dpr_per_bin(cfg)
    agg = fr * _aggregator_per_bin(cfg, channels)
    out["stage1"] = (channels * dpr + agg) if cfg.stage1 else 0
    out["stage2"] = (channels * (fr * 2 * d * d + dpr) + agg) if cfg.stage2 else 0
    out["stage3"] = dpr if cfg.stage3 else 0

    f, dec = fr, 0
    for _ in range(cfg.enc_layers):
        dec += f * d * d * kt * kf
        f = 2 * (f - 1) + 1
    out["decoder"] = dec + f * d
    return out


def count_macs(model: LABNet, channels: int, seconds: float = 1.0) -> float:
    """MACs to process ``seconds`` of ``channels``-channel audio (affine in ``channels``)."""
    frames_per_second = model.dsp.sample_rate / model.dsp.hop
    return sum(macs_breakdown(model, channels).values()) * frames_per_second * seconds


def latency_report(model: LABNet) -> dict:
    cfg = model.dsp
    window_ms = 1000.0 * cfg.win_len / cfg.sample_rate
    return {
        "window_ms": window_ms,
        "gla_iters": cfg.gla_iters,
        "gla_ms": window_ms * cfg.gla_iters,
        "total_ms": cfg.latency_ms,
        "total_samples": cfg.latency_samples,
    }
