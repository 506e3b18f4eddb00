"""STFT analysis/synthesis, power compression, phase-difference features and
Griffin-Lim phase refinement.

Spectrograms are complex tensors shaped ``(..., F, T)`` with ``F = win_len // 2 + 1``.
Framing is not centered: frame ``t`` covers samples ``[t * hop, t * hop + win_len)``
and the tail is zero-padded so that every input sample is covered by two frames
except the first ``hop`` samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


# Lower bound on the synthesis envelope.  Only the first hop (covered by a single
# frame) falls below it; without the floor, inconsistent spectra blow up there.
ENV_FLOOR = 1e-3


class InputError(ValueError):
    """Raised for malformed signals (non-finite samples, bad lengths, ...)."""


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    win_len: int = 512
    hop: int = 256
    compress_exp: float = 0.3
    gla_iters: int = 1

    def __post_init__(self):
        if self.win_len != 2 * self.hop:
            raise ValueError(f"win_len must equal 2*hop, got {self.win_len}/{self.hop}")
        if not 0.0 < self.compress_exp <= 1.0:
            raise ValueError(f"compress_exp must be in (0, 1], got {self.compress_exp}")
        if self.gla_iters < 0:
            raise ValueError("gla_iters must be >= 0")

    @property
    def n_freqs(self) -> int:
        return self.win_len // 2 + 1

    @property
    def latency_samples(self) -> int:
        # one analysis window, plus one more window per GLA synthesis/analysis round
        return self.win_len * (1 + self.gla_iters)

    @property
    def latency_ms(self) -> float:
        return 1000.0 * self.latency_samples / self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        return math.ceil((n_samples + self.win_len - self.hop) / self.hop)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    x = np.asarray(x)
    if x.dtype == np.float16 or np.issubdtype(x.dtype, np.integer):
        x = x.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(x))


def window(cfg: DspConfig, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.hann_window(cfg.win_len, periodic=True, dtype=dtype, device=device)


def _frame(wave: torch.Tensor, cfg: DspConfig, n_frames: int) -> torch.Tensor:
    need = (n_frames - 1) * cfg.hop + cfg.win_len
    pad = need - wave.shape[-1]
    if pad > 0:
        wave = torch.nn.functional.pad(wave, (0, pad))
    elif pad < 0:
        wave = wave[..., :need]
    return wave.unfold(-1, cfg.win_len, cfg.hop)  # (..., T, win)


def stft(wave, cfg: DspConfig = DspConfig(), n_frames: int | None = None) -> torch.Tensor:
    """Complex spectrogram ``(..., F, T)`` of a real waveform ``(..., N)``."""
    wave = _as_tensor(wave)
    if wave.shape[-1] < 1:
        raise InputError("waveform must contain at least one sample")
    if not torch.isfinite(wave).all():
        raise InputError("waveform contains non-finite samples")
    if n_frames is None:
        n_frames = cfg.n_frames(wave.shape[-1])
    frames = _frame(wave, cfg, n_frames) * window(cfg, wave.dtype, wave.device)
    return torch.fft.rfft(frames, n=cfg.win_len, dim=-1).transpose(-1, -2)


def overlap_add(frames: torch.Tensor, cfg: DspConfig) -> torch.Tensor:
    """Sum ``(..., T, win)`` frames at hop spacing into ``(..., (T-1)*hop + win)``."""
    *lead, n_frames, win = frames.shape
    length = (n_frames - 1) * cfg.hop + win
    # fold expects (N, C*k, L)
    flat = frames.reshape(-1, n_frames, win).transpose(1, 2)
    out = torch.nn.functional.fold(flat, output_size=(1, length), kernel_size=(1, win),
                                   stride=(1, cfg.hop))
    return out.reshape(*lead, length)


def synthesis_envelope(n_frames: int, cfg: DspConfig, dtype=torch.float32) -> torch.Tensor:
    w2 = window(cfg, dtype) ** 2
    return overlap_add(w2.expand(n_frames, -1), cfg)


def istft(spec, cfg: DspConfig = DspConfig(), length: int | None = None,
          floor: float = ENV_FLOOR) -> torch.Tensor:
    """Least-squares inverse of :func:`stft` (weighted overlap-add, Hann synthesis).

    Without ``length`` the full support ``(T-1)*hop + win_len`` is returned.
    The window-energy envelope is clamped at ``floor`` before division; only the
    first samples of the first frame fall below the default floor, and there the
    clamp keeps inconsistent spectra from being amplified by up to ``1/w[1]``.
    ``floor=0`` gives the exact inverse.
    """
    spec = _as_tensor(spec)
    if not torch.isfinite(torch.view_as_real(spec)).all():
        raise InputError("spectrogram contains non-finite values")
    real_dtype = spec.real.dtype
    frames = torch.fft.irfft(spec.transpose(-1, -2), n=cfg.win_len, dim=-1)
    frames = frames * window(cfg, real_dtype, spec.device)
    n_frames = spec.shape[-1]
    wave = overlap_add(frames, cfg)
    env = synthesis_envelope(n_frames, cfg, real_dtype).to(spec.device)
    if floor > 0:
        wave = wave / env.clamp_min(floor)
    else:
        wave = torch.where(env > 0, wave / torch.where(env > 0, env, 1.0), 0.0)
    if length is not None:
        if length > wave.shape[-1]:
            wave = torch.nn.functional.pad(wave, (0, length - wave.shape[-1]))
        wave = wave[..., :length]
    return wave


def compress(spec: torch.Tensor, p: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(|S|**p, |S|**p * exp(j angle S))``; zero bins keep phase 0."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"compression exponent must be in (0, 1], got {p}")
    mag = spec.abs()
    mag_c = mag ** p
    # torch.angle(0) == 0, so zero bins map to 0 + 0j
    return mag_c, torch.polar(mag_c, torch.angle(spec))


def decompress(mag_c: torch.Tensor, p: float) -> torch.Tensor:
    return mag_c.clamp_min(0.0) ** (1.0 / p)


def wrap_phase(x: torch.Tensor) -> torch.Tensor:
    """Map angles onto ``(-pi, pi]``."""
    return math.pi - torch.remainder(math.pi - x, 2 * math.pi)


def safe_angle(spec: torch.Tensor) -> torch.Tensor:
    """``angle`` with empty bins pinned to 0; ``angle(-0j)`` would give pi."""
    return torch.where(spec == 0, torch.zeros((), dtype=spec.real.dtype), torch.angle(spec))


def phase_features(spec: torch.Tensor, prev_phase: torch.Tensor | None = None
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Temporal and spectral phase differences of a ``(..., F, T)`` spectrogram.

    ``prev_phase`` (``(..., F)``) is the phase of the frame preceding ``spec[..., 0]``
    when processing a stream chunk; offline the first frame difference is zero.
    """
    phase = safe_angle(spec)
    pd_time = torch.zeros_like(phase)
    pd_time[..., 1:] = wrap_phase(phase[..., 1:] - phase[..., :-1])
    if prev_phase is not None:
        pd_time[..., 0] = wrap_phase(phase[..., 0] - prev_phase)
    pd_freq = torch.zeros_like(phase)
    pd_freq[..., 1:, :] = wrap_phase(phase[..., 1:, :] - phase[..., :-1, :])
    return pd_time, pd_freq


def consistency_error(spec: torch.Tensor, mag_target: torch.Tensor, cfg: DspConfig,
                      floor: float = ENV_FLOOR) -> float:
    """``|| |STFT(iSTFT(spec))| - mag_target ||`` over the full frame support."""
    rebuilt = stft(istft(spec, cfg, floor=floor), cfg, n_frames=spec.shape[-1])
    return float(torch.linalg.vector_norm(rebuilt.abs() - mag_target))


def griffin_lim(mag_target: torch.Tensor, phase_init: torch.Tensor, iters: int,
                cfg: DspConfig = DspConfig(), floor: float = ENV_FLOOR) -> torch.Tensor:
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if (mag_target < 0).any():
        raise InputError("target magnitude must be non-negative")
    n_frames = mag_target.shape[-1]
    spec = torch.polar(mag_target, phase_init)
    for _ in range(iters):
        rebuilt = stft(istft(spec, cfg, floor=floor), cfg, n_frames=n_frames)
        spec = torch.polar(mag_target, torch.angle(rebuilt))
    return spec
