"""Objective metrics: SI-SNR, STOI and log-spectral distance, plus the evaluation harness."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .dsp import InputError

log = logging.getLogger(__name__)

SI_SNR_CEIL = 60.0

# STOI constants (Taal et al., 2011)
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MINFREQ = 150
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
EPS = np.finfo(np.float64).eps


def si_snr(est, ref) -> float:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise InputError(f"length mismatch {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    energy = np.dot(ref, ref)
    if energy <= 0:
        raise InputError("reference is silent")
    target = np.dot(est, ref) / energy * ref
    err = est - target
    num, den = np.dot(target, target), np.dot(err, err)
    if den <= num * 10 ** (-SI_SNR_CEIL / 10):
        return SI_SNR_CEIL
    if num <= 0:
        return -SI_SNR_CEIL
    return float(min(SI_SNR_CEIL, 10 * math.log10(num / den)))


def _third_octave_bands():
    freqs = np.linspace(0, STOI_FS, STOI_NFFT + 1)[: STOI_NFFT // 2 + 1]
    k = np.arange(STOI_BANDS)
    lo = STOI_MINFREQ * 2.0 ** ((2 * k - 1) / 6)
    hi = STOI_MINFREQ * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((STOI_BANDS, len(freqs)))
    for i in range(STOI_BANDS):
        a = np.argmin((freqs - lo[i]) ** 2)
        b = np.argmin((freqs - hi[i]) ** 2)
        obm[i, a:b] = 1
    return obm


_OBM = _third_octave_bands()
_STOI_WIN = np.hanning(STOI_FRAME + 2)[1:-1]


def _frames(x, hop):
    n = 1 + (len(x) - STOI_FRAME) // hop
    idx = np.arange(STOI_FRAME)[None, :] + hop * np.arange(max(n, 0))[:, None]
    return x[idx] * _STOI_WIN


def _remove_silent_frames(x, y):
    hop = STOI_FRAME // 2
    fx, fy = _frames(x, hop), _frames(y, hop)
    energy = 20 * np.log10(np.linalg.norm(fx, axis=1) + EPS)
    keep = energy > energy.max() - STOI_DYN_RANGE
    fx, fy = fx[keep], fy[keep]
    n = (len(fx) - 1) * hop + STOI_FRAME if len(fx) else 0
    xs, ys = np.zeros(n), np.zeros(n)
    for i in range(len(fx)):
        xs[i * hop:i * hop + STOI_FRAME] += fx[i]
        ys[i * hop:i * hop + STOI_FRAME] += fy[i]
    return xs, ys


def stoi(est, ref, fs: int = 16000) -> float:
    """Short-time objective intelligibility of ``est`` against the clean ``ref``."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise InputError(f"length mismatch {est.shape} vs {ref.shape}")
    if fs != STOI_FS:
        g = math.gcd(fs, STOI_FS)
        ref = resample_poly(ref, STOI_FS // g, fs // g)
        est = resample_poly(est, STOI_FS // g, fs // g)
    if len(ref) < STOI_FRAME:
        raise InputError("signal too short for STOI")
    x, y = _remove_silent_frames(ref, est)
    if len(x) < STOI_FRAME:
        raise InputError("signal too short for STOI")
    hop = STOI_FRAME // 2
    x_spec = np.fft.rfft(_frames(x, hop), n=STOI_NFFT).T
    y_spec = np.fft.rfft(_frames(y, hop), n=STOI_NFFT).T
    if x_spec.shape[1] < STOI_SEGMENT:
        raise InputError(f"STOI needs at least {STOI_SEGMENT} non-silent frames "
                         f"(~384 ms), got {x_spec.shape[1]}")
    x_tob = np.sqrt(_OBM @ np.abs(x_spec) ** 2)
    y_tob = np.sqrt(_OBM @ np.abs(y_spec) ** 2)
    n_seg = x_tob.shape[1] - STOI_SEGMENT + 1
    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n_seg)[:, None]
    xs = x_tob[:, idx].transpose(1, 0, 2)  # (segments, bands, N)
    ys = y_tob[:, idx].transpose(1, 0, 2)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    yp = np.minimum(ys * scale, xs * (1 + 10 ** (-STOI_BETA / 20)))
    yp = yp - yp.mean(axis=2, keepdims=True)
    xs = xs - xs.mean(axis=2, keepdims=True)
    yp /= np.linalg.norm(yp, axis=2, keepdims=True) + EPS
    xs /= np.linalg.norm(xs, axis=2, keepdims=True) + EPS
    return float(np.sum(yp * xs) / (xs.shape[0] * xs.shape[1]))


def log_spectral_distance(est, ref, n_fft: int = 512, hop: int = 256) -> float:
    """Mean over frames of the RMS difference of log power spectra, in dB."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    win = np.hanning(n_fft)
    n = 1 + max(len(ref) - n_fft, 0) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n)[:, None]
    pad = max(0, idx.max() + 1 - len(ref))
    e = np.pad(est, (0, pad))[idx] * win
    r = np.pad(ref, (0, pad))[idx] * win
    power_e = np.abs(np.fft.rfft(e)) ** 2
    power_r = np.abs(np.fft.rfft(r)) ** 2
    floor = 1e-8 * max(power_r.max(), 1e-20)  # 80 dB below the reference peak
    pe = 10 * np.log10(power_e + floor)
    pr = 10 * np.log10(power_r + floor)
    return float(np.mean(np.sqrt(np.mean((pe - pr) ** 2, axis=1))))


# --------------------------------------------------------------------- harness

METRIC_FIELDS = ("si_snr_db", "si_snr_noisy_db", "si_snr_improvement_db", "stoi", "lsd_db")


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> dict:
        if not self.rows:
            return {k: float("nan") for k in METRIC_FIELDS}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_FIELDS}

    def summary(self) -> dict:
        return {"type": "summary", "count": len(self.rows), "failed": len(self.errors),
                **self.meta, **{f"mean_{k}": v for k, v in self.mean.items()}}

    def lines(self) -> list[str]:
        out = [json.dumps({"type": "utterance", **r}, sort_keys=True) for r in self.rows]
        out += [json.dumps({"type": "error", **e}, sort_keys=True) for e in self.errors]
        out.append(json.dumps(self.summary(), sort_keys=True))
        return out

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()))


def score(est, rec, fs: int = 16000) -> dict:
    """Metrics of ``est`` against the reverberant clean reference channel of ``rec``."""
    ref = rec.reverberant_clean[0]
    noisy = rec.noisy[0]
    s, s0 = si_snr(est, ref), si_snr(noisy, ref)
    return {"si_snr_db": s, "si_snr_noisy_db": s0, "si_snr_improvement_db": s - s0,
            "stoi": stoi(est, ref, fs), "lsd_db": log_spectral_distance(est, ref)}


def evaluate(entries, enhancer, channels: int | None = None, fs: int = 16000) -> EvalReport:
    """Score ``enhancer(recording) -> waveform`` on every manifest entry.

    ``channels`` restricts each recording to its first ``channels`` microphones.
    Failures are recorded and the run continues.
    """
    from .roomsim import load_recording

    report = EvalReport(meta={"channels": channels})
    for entry in sorted(entries, key=lambda e: e["id"]):
        try:
            rec = load_recording(entry)
            if channels is not None:
                if channels > rec.channels:
                    raise InputError(f"{entry['id']} has {rec.channels} channels, "
                                     f"{channels} requested")
                rec = rec.select(range(channels))
            est = np.asarray(enhancer(rec), dtype=np.float64)
            report.rows.append({"id": entry["id"], **score(est, rec, fs)})
        except (OSError, ValueError, ArithmeticError) as exc:
            log.warning("evaluation of %s failed: %s", entry.get("id"), exc)
            report.errors.append({"id": entry.get("id"), "error": str(exc)})
    return report


# --------------------------------------------------------------------- enhancers


def identity_enhancer(rec):
    return rec.noisy[0]


def oracle_enhancer(rec):
    return rec.reverberant_clean[0]


def labnet_enhancer(model):
    from .model import enhance

    def run(rec):
        return enhance(rec.noisy.astype(np.float32), model).numpy()

    return run


def mvdr_enhancer(cfg=None):
    from .baselines import mvdr, oracle_stats
    from .dsp import DspConfig

    cfg = cfg or DspConfig()

    def run(rec):
        return mvdr(rec.noisy, oracle_stats(rec, cfg), cfg)

    return run
