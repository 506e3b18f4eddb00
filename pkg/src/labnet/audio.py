"""RIFF WAV reading and writing (16-bit PCM or 32-bit float)."""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from scipy.io import wavfile


class AudioError(ValueError):
    pass


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return ``(samples, rate)``; samples are float32 shaped ``(N,)`` or ``(N, C)``."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(str(path))
    except (OSError, ValueError, EOFError) as exc:
        raise AudioError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float32)
    else:
        raise AudioError(f"{path}: unsupported sample type {data.dtype}")
    if data.size == 0:
        raise AudioError(f"{path}: no samples")
    return data, int(rate)


def read_mono(path, rate: int = 16000) -> np.ndarray:
    data, fs = read_wav(path)
    if fs != rate:
        raise AudioError(f"{path}: sample rate {fs} Hz, expected {rate} Hz")
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    return data


def write_wav(path, data, rate: int = 16000, pcm16: bool = False) -> None:
    """Write ``(N,)`` or ``(N, C)`` samples; float32 by default (lossless for float32 input)."""
    data = np.asarray(data)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = data.astype(np.float32)
    wavfile.write(str(path), rate, data)


def read_multichannel(paths, rate: int = 16000) -> np.ndarray:
    """Load a recording as ``(C, N)``: one multichannel WAV, or several mono WAVs
    taken in lexical path order (the first is the reference channel)."""
    paths = [Path(p) for p in paths]
    if len(paths) == 1:
        data, fs = read_wav(paths[0])
        if fs != rate:
            raise AudioError(f"{paths[0]}: sample rate {fs} Hz, expected {rate} Hz")
        return data[None, :] if data.ndim == 1 else np.ascontiguousarray(data.T)
    chans = [read_mono(p, rate) for p in sorted(paths)]
    lengths = {len(c) for c in chans}
    if len(lengths) != 1:
        raise AudioError(f"channel files have different lengths: {sorted(lengths)}")
    return np.stack(chans)
