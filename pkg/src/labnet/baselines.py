"""Conventional microphone-invariant beamformers: oracle MVDR and delay-and-sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import dsp
from .dsp import DspConfig


class NumericalError(ArithmeticError):
    pass


@dataclass
class OracleStats:
    speech_cov: np.ndarray   # (F, C, C)
    noise_cov: np.ndarray    # (F, C, C), diagonally loaded


def _spec(x, cfg: DspConfig) -> np.ndarray:
    return dsp.stft(torch.as_tensor(np.asarray(x, dtype=np.float64)), cfg).numpy()


def spatial_covariance(spec: np.ndarray) -> np.ndarray:
    """Time-averaged outer products of ``(C, F, T)`` STFT vectors -> ``(F, C, C)``."""
    return np.einsum("cft,dft->fcd", spec, spec.conj()) / spec.shape[-1]


def oracle_stats(rec, cfg: DspConfig = DspConfig(), loading: float = 1e-6) -> OracleStats:
    r_y = spatial_covariance(_spec(rec.reverberant_clean, cfg))
    r_n = spatial_covariance(_spec(rec.noise_sum, cfg))
    c = r_n.shape[-1]
    load = loading * np.trace(r_n, axis1=1, axis2=2).real / c
    r_n = r_n + load[:, None, None] * np.eye(c)
    return OracleStats(r_y, r_n)


def steering_vectors(speech_cov: np.ndarray) -> np.ndarray:
    """Principal eigenvector per frequency, scaled to a relative transfer function
    (reference entry exactly 1); falls back to unit norm with real-positive
    reference entry when the reference component vanishes."""
    _, vecs = np.linalg.eigh(speech_cov)
    d = vecs[..., -1]
    ref = d[:, :1]
    small = np.abs(ref[:, 0]) < 1e-12
    rtf = d / np.where(small[:, None], 1.0, ref)
    phase = np.exp(-1j * np.angle(ref))
    return np.where(small[:, None], d * phase, rtf)


def mvdr_weights(stats: OracleStats) -> tuple[np.ndarray, np.ndarray]:
    d = steering_vectors(stats.speech_cov)
    w = np.empty_like(d)
    for f, (r_n, d_f) in enumerate(zip(stats.noise_cov, d)):
        try:
            num = np.linalg.solve(r_n, d_f)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"noise covariance singular at frequency bin {f}") from exc
        den = np.vdot(d_f, num)
        if not np.isfinite(num).all() or abs(den) < 1e-300:
            raise NumericalError(f"noise covariance singular at frequency bin {f}")
        w[f] = num / den
    return w, d


def mvdr(noisy, stats: OracleStats, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Beamform ``(C, N)`` noisy audio with the oracle MVDR filter; returns ``(N,)``."""
    noisy = np.asarray(noisy, dtype=np.float64)
    spec = _spec(noisy, cfg)
    w, _ = mvdr_weights(stats)
    out = np.einsum("fc,cft->ft", w.conj(), spec)
    return dsp.istft(torch.from_numpy(out), cfg, length=noisy.shape[-1]).numpy()


def geometric_tdoas(scene, fs: int = 16000) -> np.ndarray:
    """Integer direct-path delay of each microphone relative to the reference."""
    c = scene.room.speed_of_sound
    delays = np.linalg.norm(scene.mic_pos - scene.source_pos, axis=1) / c * fs
    return np.rint(delays - delays[0]).astype(int)


def delay_and_sum(noisy, tdoas) -> np.ndarray:
    """Advance channel ``c`` by ``tdoas[c]`` samples (zero fill) and average."""
    noisy = np.asarray(noisy, dtype=np.float64)
    c, n = noisy.shape
    tdoas = np.asarray(tdoas, dtype=int)
    if tdoas.shape != (c,):
        raise ValueError(f"need one delay per channel, got {tdoas.shape} for {c} channels")
    if np.any(np.abs(tdoas) >= n):
        raise ValueError("delays must be shorter than the signal")
    out = np.zeros(n)
    for x, tau in zip(noisy, tdoas):
        if tau >= 0:
            out[:n - tau] += x[tau:]
        else:
            out[-tau:] += x[:n + tau]
    return out / c
