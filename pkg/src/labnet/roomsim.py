"""Shoebox-room scene simulation for ad-hoc microphone arrays.

Room impulse responses come from the image method with one uniform absorption
coefficient for all six surfaces, obtained by inverting Sabine's formula for the
requested T60.  Image arrivals are rounded to the nearest sample.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio import AudioError, read_mono, write_wav
from .dsp import InputError

log = logging.getLogger(__name__)

FS = 16000
SPLIT_MICS = {"train": 6, "valid": 6, "test": 12}
# samples are quantised to this grid so that noisy = clean + noise holds exactly,
# in float64 memory and in float32 WAV files alike (|x| < 2 needs 23 bits + sign)
QUANTUM = 2.0 ** -22


@dataclass(frozen=True)
class RoomSpec:
    length: float
    width: float
    height: float
    t60: float
    speed_of_sound: float = 343.0

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface(self) -> float:
        l, w, h = self.length, self.width, self.height
        return 2 * (l * w + l * h + w * h)

    def sabine_absorption(self) -> float:
        """Uniform absorption coefficient giving ``t60`` by Sabine's formula (capped at 1)."""
        k = 24 * math.log(10) / self.speed_of_sound
        return min(1.0, k * self.volume / (self.surface * self.t60))


@dataclass(frozen=True)
class SceneConstraints:
    length: tuple[float, float] = (5.0, 10.0)
    width: tuple[float, float] = (5.0, 10.0)
    height: tuple[float, float] = (3.0, 4.0)
    t60: tuple[float, float] = (0.1, 0.5)
    snr_db: tuple[float, float] = (-5.0, 15.0)
    noises: tuple[int, int] = (1, 3)
    mics: int = 6
    wall_margin: float = 0.5


@dataclass
class Scene:
    room: RoomSpec
    source_pos: np.ndarray
    mic_pos: np.ndarray          # (C, 3)
    noise_pos: np.ndarray        # (K, 3)
    snr_db: float
    seed: object = None

    def to_dict(self) -> dict:
        return {
            "room": [self.room.length, self.room.width, self.room.height],
            "t60": self.room.t60,
            "snr_db": self.snr_db,
            "positions": {
                "source": self.source_pos.tolist(),
                "mics": self.mic_pos.tolist(),
                "noises": self.noise_pos.tolist(),
            },
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        l, w, h = d["room"]
        pos = d["positions"]
        return cls(RoomSpec(l, w, h, d["t60"]), np.array(pos["source"]), np.array(pos["mics"]),
                   np.array(pos["noises"]), d["snr_db"], d.get("seed"))


@dataclass
class MultichannelRecording:
    noisy: np.ndarray               # (C, N)
    reverberant_clean: np.ndarray   # (C, N)
    noise_sum: np.ndarray           # (C, N)
    scene: Scene | None = None
    rirs: dict = field(default_factory=dict)
    id: str = ""

    @property
    def channels(self) -> int:
        return self.noisy.shape[0]

    def select(self, channels) -> "MultichannelRecording":
        """Sub-array view in the given channel order (first entry becomes the reference)."""
        idx = list(channels)
        return MultichannelRecording(self.noisy[idx], self.reverberant_clean[idx],
                                     self.noise_sum[idx], self.scene, self.rirs, self.id)


# --------------------------------------------------------------------- RIRs


def _check_inside(room: RoomSpec, pos, what: str) -> np.ndarray:
    pos = np.asarray(pos, dtype=float)
    if pos.shape != (3,) or np.any(pos <= 0) or np.any(pos >= room.dims):
        raise InputError(f"{what} position {pos.tolist()} is not strictly inside the room "
                         f"{room.dims.tolist()}")
    return pos


def simulate_rir(room: RoomSpec, src, mic, fs: int = FS, length: int | None = None,
                 absorption: float | None = None) -> np.ndarray:
    """Image-method impulse response from ``src`` to ``mic``.

    ``length`` defaults to ``ceil(t60 * fs)`` samples (extended if the direct path
    arrives later); ``absorption`` overrides the Sabine-derived coefficient.
    """
    src = _check_inside(room, src, "source")
    mic = _check_inside(room, mic, "microphone")
    c = room.speed_of_sound
    alpha = room.sabine_absorption() if absorption is None else float(absorption)
    beta = math.sqrt(max(0.0, 1.0 - alpha))
    direct = int(round(np.linalg.norm(src - mic) / c * fs))
    if length is None:
        length = max(int(math.ceil(room.t60 * fs)), direct + 1)
    max_dist = c * length / fs

    axes = []
    for dim, s, m in zip(room.dims, src, mic):
        n = np.arange(-int(math.ceil(max_dist / (2 * dim))) - 1,
                      int(math.ceil(max_dist / (2 * dim))) + 2)
        q = np.array([0, 1])
        nn, qq = np.meshgrid(n, q, indexing="ij")
        offset = (1 - 2 * qq) * s + 2 * nn * dim - m
        order = np.abs(nn - qq) + np.abs(nn)
        axes.append((offset.ravel(), order.ravel()))
    (dx, ox), (dy, oy), (dz, oz) = axes
    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2)
    order = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    keep = dist < max_dist
    dist, order = dist[keep], order[keep]
    if beta == 0.0:
        keep = order == 0
        dist, order = dist[keep], order[keep]
    delay = np.rint(dist / c * fs).astype(np.int64)
    amp = beta ** order / (4 * np.pi * np.maximum(dist, 1e-3))
    inside = delay < length
    return np.bincount(delay[inside], weights=amp[inside], minlength=length)[:length]


def schroeder_decay_db(rir: np.ndarray) -> np.ndarray:
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    return 10 * np.log10(np.maximum(energy / energy[0], 1e-300))


# --------------------------------------------------------------------- scenes


def sample_scene(rng: np.random.Generator, constraints: SceneConstraints = SceneConstraints(),
                 seed=None) -> Scene:
    c = constraints
    room = RoomSpec(rng.uniform(*c.length), rng.uniform(*c.width), rng.uniform(*c.height),
                    rng.uniform(*c.t60))
    lo = np.full(3, c.wall_margin)
    hi = room.dims - c.wall_margin

    def place(k):
        return rng.uniform(lo, hi, size=(k, 3))

    source = place(1)[0]
    mics = place(c.mics)
    noises = place(int(rng.integers(c.noises[0], c.noises[1] + 1)))
    snr = float(rng.uniform(*c.snr_db))
    return Scene(room, source, mics, noises, snr, seed)


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.tile(x, int(math.ceil(n / len(x))))[:n]


def _quantise(x: np.ndarray) -> np.ndarray:
    return np.rint(x / QUANTUM) * QUANTUM


def mix_scene(clean, noises, scene: Scene, fs: int = FS, peak: float = 0.9,
              rir_length: int | None = None) -> MultichannelRecording:
    """Reverberate the source and noises at every microphone and mix at ``scene.snr_db``.

    SNR is measured between reverberant speech and summed reverberant noise on the
    reference (first) microphone.  ``snr_db = inf`` gives a noise-free mixture.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if not np.any(clean) or not np.isfinite(clean).all():
        raise InputError("clean source is silent or non-finite")
    if len(noises) < 1:
        raise InputError("at least one noise signal is required")
    n = len(clean)
    room = scene.room
    h_src = np.stack([simulate_rir(room, scene.source_pos, m, fs, rir_length) for m in scene.mic_pos])
    n_src = [_fit_length(np.asarray(z, dtype=np.float64), n) for z in noises]
    n_src = [z / max(np.sqrt(np.mean(z ** 2)), 1e-12) for z in n_src]
    h_noise = np.stack([[simulate_rir(room, p, m, fs, rir_length) for m in scene.mic_pos]
                        for p in scene.noise_pos[:len(n_src)]])

    y = np.stack([fftconvolve(clean, h)[:n] for h in h_src])
    v = np.zeros_like(y)
    for z, hs in zip(n_src, h_noise):
        v += np.stack([fftconvolve(z, h)[:n] for h in hs])

    p_y, p_v = np.sum(y[0] ** 2), np.sum(v[0] ** 2)
    if np.isinf(scene.snr_db) and scene.snr_db > 0:
        v[:] = 0.0
    else:
        v *= math.sqrt(p_y / (p_v * 10 ** (scene.snr_db / 10)))
    gain = peak / max(np.max(np.abs(y + v)), 1e-12)
    y, v = _quantise(y * gain), _quantise(v * gain)
    x = y + v  # exact on the quantisation grid
    return MultichannelRecording(x, y, v, scene, {"source": h_src, "noise": h_noise})


# --------------------------------------------------------------------- synthetic audio


def synth_speech(rng: np.random.Generator, seconds: float, fs: int = FS) -> np.ndarray:
    """Speech-like harmonic complex: gliding f0, moving formants, syllabic gating."""
    n = int(seconds * fs)
    t = np.arange(n) / fs
    f0 = rng.uniform(90, 220) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t
                                                    + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    # syllables: alternating voiced segments and short pauses
    gate = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.2) * fs)
    formants = []
    while pos < n:
        dur = int(rng.uniform(0.12, 0.35) * fs)
        seg = np.arange(pos, min(pos + dur, n))
        gate[seg] = np.sin(np.pi * (seg - pos) / dur) ** 2
        formants.append((seg, rng.uniform([300, 900, 2200], [800, 2000, 3200])))
        pos += dur + int(rng.uniform(0.04, 0.2) * fs)
    env_f = np.zeros((3, n))
    for seg, f in formants:
        env_f[:, seg] = f[:, None]
    sig = np.zeros(n)
    n_harm = int(4000 / 90)
    for k in range(1, n_harm + 1):
        fk = k * f0
        amp = sum(np.exp(-0.5 * ((fk - env_f[i]) / 150.0) ** 2) for i in range(3)) + 0.05 / k
        amp = np.where(fk < 0.45 * fs, amp, 0.0)
        sig += amp * np.sin(k * phase)
    sig *= gate
    return sig / max(np.sqrt(np.mean(sig ** 2)), 1e-12) * 0.1


def synth_noise(rng: np.random.Generator, seconds: float, fs: int = FS, kind: str | None = None
                ) -> np.ndarray:
    n = int(seconds * fs)
    kind = kind or rng.choice(["white", "pink", "babble", "hum", "modulated"])
    if kind == "white":
        z = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(len(spec))
        spec[1:] /= np.sqrt(f[1:])
        z = np.fft.irfft(spec, n)
    elif kind == "babble":
        z = sum(synth_speech(rng, seconds, fs) for _ in range(4))
        z = z + 0.01 * rng.standard_normal(n)
    elif kind == "hum":
        t = np.arange(n) / fs
        base = rng.choice([50.0, 60.0])
        z = sum(np.sin(2 * np.pi * k * base * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 8))
        z = z + 0.3 * rng.standard_normal(n)
    elif kind == "modulated":
        t = np.arange(n) / fs
        z = rng.standard_normal(n) * (1 + 0.8 * np.sin(2 * np.pi * rng.uniform(1, 6) * t))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return z / max(np.sqrt(np.mean(z ** 2)), 1e-12) * 0.1


# --------------------------------------------------------------------- datasets


def _list_wavs(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.wav")) if directory else []


def _random_segment(x: np.ndarray, n: int, rng) -> np.ndarray:
    if len(x) <= n:
        return _fit_length(x, n)
    start = int(rng.integers(0, len(x) - n + 1))
    return x[start:start + n]


def utterance(index: int, seed: int, constraints: SceneConstraints, seconds: float,
              clean_files=(), noise_files=()) -> tuple[MultichannelRecording, dict]:
    """Generate utterance ``index`` from its own RNG stream ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    scene = sample_scene(rng, constraints, seed=[seed, index])
    sources = {}
    if clean_files:
        path = clean_files[int(rng.integers(len(clean_files)))]
        clean = read_mono(path)
        sources["clean"] = str(path)
        n = min(len(clean), int(seconds * FS)) if seconds else len(clean)
        clean = _random_segment(clean, n, rng)
    else:
        clean = synth_speech(rng, seconds)
        sources["clean"] = "synthetic"
        n = len(clean)
    k = len(scene.noise_pos)
    if noise_files:
        picks = [noise_files[int(rng.integers(len(noise_files)))] for _ in range(k)]
        noises = [_random_segment(read_mono(p), n, rng) for p in picks]
        sources["noises"] = [str(p) for p in picks]
    else:
        noises = [synth_noise(rng, n / FS) for _ in range(k)]
        sources["noises"] = ["synthetic"] * k
    rec = mix_scene(clean, noises, scene)
    return rec, sources


def build_dataset(out_dir, count: int, split: str = "train", mics: int | None = None,
                  clean_dir=None, noise_dir=None, seed: int = 0, seconds: float = 4.0,
                  constraints: SceneConstraints | None = None) -> tuple[Path, list[dict]]:
    """Write ``count`` utterances plus ``manifest.jsonl`` under ``out_dir``.

    Without ``clean_dir``/``noise_dir`` the synthetic generators are used.  Returns
    the manifest path and a list of per-utterance errors (those utterances are skipped).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_mics = mics if mics is not None else SPLIT_MICS[split]
    base = constraints or SceneConstraints()
    constraints = SceneConstraints(**{**asdict(base), "mics": n_mics})
    clean_files, noise_files = _list_wavs(clean_dir), _list_wavs(noise_dir)
    if clean_dir and not clean_files:
        raise AudioError(f"no WAV files in {clean_dir}")
    if noise_dir and not noise_files:
        raise AudioError(f"no WAV files in {noise_dir}")

    errors, lines = [], []
    for i in range(count):
        uid = f"{split}_{i:05d}"
        try:
            rec, sources = utterance(i, seed, constraints, seconds, clean_files, noise_files)
        except (AudioError, InputError) as exc:
            log.warning("skipping %s: %s", uid, exc)
            errors.append({"id": uid, "error": str(exc)})
            continue
        udir = out / uid
        paths = {}
        for kind, data in (("noisy", rec.noisy), ("clean", rec.reverberant_clean),
                           ("noise", rec.noise_sum)):
            paths[kind] = []
            for ch, wave in enumerate(data):
                rel = f"{uid}/{kind}_ch{ch:02d}.wav"
                write_wav(udir / f"{kind}_ch{ch:02d}.wav", wave.astype(np.float32))
                paths[kind].append(rel)
        entry = {"id": uid, "split": split, "fs": FS, "n_mics": n_mics,
                 "n_samples": int(rec.noisy.shape[1]), "paths": paths,
                 **rec.scene.to_dict(), "sources": sources}
        lines.append(json.dumps(entry, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    if errors:
        (out / "errors.jsonl").write_text("".join(json.dumps(e) + "\n" for e in errors))
    return manifest, errors


def read_manifest(path) -> list[dict]:
    path = Path(path)
    entries = []
    for line in path.read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            entry["_root"] = str(path.parent)
            entries.append(entry)
    return entries


def load_recording(entry: dict, root=None) -> MultichannelRecording:
    from .audio import read_wav

    root = Path(root or entry.get("_root", "."))

    def stack(kind):
        return np.stack([read_wav(root / p)[0] for p in entry["paths"][kind]]).astype(np.float64)

    x, y, v = stack("noisy"), stack("clean"), stack("noise")
    return MultichannelRecording(x, y, v, Scene.from_dict(entry), id=entry["id"])
