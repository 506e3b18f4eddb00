import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from labnet.audio import AudioError, read_wav, write_wav
from labnet.dsp import InputError
from labnet.roomsim import (FS, RoomSpec, Scene, SceneConstraints, build_dataset, load_recording,
                            mix_scene, read_manifest, sample_scene, schroeder_decay_db,
                            simulate_rir, synth_noise, synth_speech, utterance)

ROOM = RoomSpec(6.0, 5.0, 3.0, 0.3)


def inside(room, pos, margin):
    return np.all(pos >= margin - 1e-12) and np.all(pos <= room.dims - margin + 1e-12)


# --------------------------------------------------------------------- RIRs


def test_direct_tap_for_343_cm():
    # 3.43 m at 343 m/s is 10 ms, i.e. 160 samples at 16 kHz
    rir = simulate_rir(ROOM, [1.0, 2.5, 1.5], [4.43, 2.5, 1.5])
    assert np.flatnonzero(rir)[0] == 160


def test_anechoic_limit_single_tap():
    src, mic = np.array([1.0, 1.0, 1.0]), np.array([3.0, 2.0, 1.5])
    rir = simulate_rir(ROOM, src, mic, absorption=1.0)
    dist = np.linalg.norm(src - mic)
    assert np.count_nonzero(rir) == 1
    k = int(np.flatnonzero(rir)[0])
    assert k == round(dist / 343 * FS)
    assert rir[k] == pytest.approx(1 / (4 * math.pi * dist))


def test_short_t60_caps_absorption_to_anechoic():
    assert RoomSpec(6, 5, 3, 0.1).sabine_absorption() == 1.0


def test_sabine_inversion():
    room = RoomSpec(8, 6, 3.5, 0.4)
    alpha = room.sabine_absorption()
    assert 0.161 * room.volume / (room.surface * alpha) == pytest.approx(0.4, rel=2e-3)


def test_schroeder_decay_near_t60():
    rir = simulate_rir(ROOM, [1.2, 1.3, 1.4], [4.1, 3.2, 1.7], length=int(0.8 * FS))
    decay = schroeder_decay_db(rir)
    # extrapolate the -5..-25 dB slope to -60 dB, as in a T20 measurement
    t = np.arange(len(decay)) / FS
    sl = (decay <= -5) & (decay >= -25)
    slope = np.polyfit(t[sl], decay[sl], 1)[0]
    assert 0.2 <= -60 / slope <= 0.45


@given(st.floats(0.6, 5.4), st.floats(0.6, 4.4), st.floats(0.6, 2.4),
       st.floats(0.6, 5.4), st.floats(0.6, 4.4), st.floats(0.6, 2.4))
@settings(max_examples=20)
def test_first_tap_is_geometric_delay(sx, sy, sz, mx, my, mz):
    src, mic = np.array([sx, sy, sz]), np.array([mx, my, mz])
    rir = simulate_rir(ROOM, src, mic, length=2000)
    expected = np.linalg.norm(src - mic) / 343 * FS
    assert abs(np.flatnonzero(rir)[0] - expected) <= 1


@pytest.mark.parametrize("pos", [[0.0, 1, 1], [6.0, 1, 1], [1, -1, 1], [1, 1, 3.5]])
def test_position_outside_room(pos):
    with pytest.raises(InputError):
        simulate_rir(ROOM, pos, [1, 1, 1])


# --------------------------------------------------------------------- scenes


def test_placements_respect_wall_margin():
    rng = np.random.default_rng(0)
    c = SceneConstraints()
    for _ in range(10_000):
        s = sample_scene(rng, c)
        room = s.room
        assert 5 <= room.length <= 10 and 5 <= room.width <= 10 and 3 <= room.height <= 4
        assert 0.1 <= room.t60 <= 0.5 and -5 <= s.snr_db <= 15
        for p in (s.source_pos, *s.mic_pos, *s.noise_pos):
            assert inside(room, p, 0.5)


def test_noise_count_uniform():
    rng = np.random.default_rng(1)
    n = 10_000
    counts = np.bincount([len(sample_scene(rng).noise_pos) for _ in range(n)], minlength=4)[1:]
    assert counts.sum() == n
    sigma = math.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) < 3 * sigma)


def test_scene_deterministic():
    a = sample_scene(np.random.default_rng(7))
    b = sample_scene(np.random.default_rng(7))
    assert a.room == b.room and a.snr_db == b.snr_db
    assert np.array_equal(a.mic_pos, b.mic_pos) and np.array_equal(a.noise_pos, b.noise_pos)


def test_scene_dict_round_trip():
    s = sample_scene(np.random.default_rng(3), seed=[0, 3])
    back = Scene.from_dict(json.loads(json.dumps(s.to_dict())))
    assert back.room == s.room and np.array_equal(back.mic_pos, s.mic_pos)


# --------------------------------------------------------------------- mixing


def test_decomposition_exact(scene4):
    assert np.array_equal(scene4.noisy, scene4.reverberant_clean + scene4.noise_sum)
    assert np.array_equal(scene4.noisy - scene4.noise_sum, scene4.reverberant_clean)


def test_reference_snr_matches_scene(scene4):
    y, v = scene4.reverberant_clean[0], scene4.noise_sum[0]
    snr = 10 * math.log10(np.sum(y ** 2) / np.sum(v ** 2))
    assert abs(snr - scene4.scene.snr_db) < 0.01


@given(st.floats(-5, 15), st.integers(1, 3))
@settings(max_examples=8)
def test_realised_snr_property(snr, k):
    rng = np.random.default_rng(k)
    scene = Scene(RoomSpec(6, 5, 3, 0.2), np.array([2.0, 2, 1.5]), np.array([[4.0, 3, 1.2], [3, 1, 1]]),
                  rng.uniform(0.6, 2.4, size=(k, 3)), snr)
    rec = mix_scene(synth_speech(rng, 0.5), [synth_noise(rng, 0.5) for _ in range(k)], scene)
    y, v = rec.reverberant_clean[0], rec.noise_sum[0]
    assert abs(10 * math.log10(np.sum(y ** 2) / np.sum(v ** 2)) - snr) < 0.01
    assert np.array_equal(rec.noisy, rec.reverberant_clean + rec.noise_sum)


def test_noise_free_limit():
    rng = np.random.default_rng(0)
    scene = Scene(ROOM, np.array([2.0, 2, 1.5]), np.array([[4.0, 3, 1.2]]), np.array([[1.0, 4, 1]]),
                  math.inf)
    rec = mix_scene(synth_speech(rng, 0.5), [synth_noise(rng, 0.5)], scene)
    assert np.array_equal(rec.noisy, rec.reverberant_clean)


def test_silent_clean_rejected(scene4):
    with pytest.raises(InputError):
        mix_scene(np.zeros(800), [np.ones(800)], scene4.scene)
    with pytest.raises(InputError):
        mix_scene(np.ones(800), [], scene4.scene)


def test_reverberant_clean_is_convolution(scene4):
    rng = np.random.default_rng(11)
    clean = synth_speech(rng, 3.0)
    h = scene4.rirs["source"][2]
    y = np.convolve(clean, h)[:len(clean)]
    gain = np.dot(scene4.reverberant_clean[2], y) / np.dot(y, y)
    np.testing.assert_allclose(scene4.reverberant_clean[2], gain * y, atol=1e-6)


def test_utterance_streams_are_independent():
    c = SceneConstraints(mics=2)
    a, _ = utterance(3, 0, c, 0.5)
    b, _ = utterance(3, 0, c, 0.5)
    d, _ = utterance(4, 0, c, 0.5)
    assert np.array_equal(a.noisy, b.noisy) and not np.array_equal(a.noisy, d.noisy)


@pytest.mark.parametrize("kind", ["white", "pink", "babble", "hum", "modulated"])
def test_synthetic_noise_kinds(kind):
    z = synth_noise(np.random.default_rng(0), 0.5, kind=kind)
    assert len(z) == 8000 and np.sqrt(np.mean(z ** 2)) == pytest.approx(0.1)


# --------------------------------------------------------------------- datasets


def test_dataset_manifest(tmp_path):
    manifest, errors = build_dataset(tmp_path, 10, "train", seconds=0.5)
    entries = read_manifest(manifest)
    assert not errors and len(entries) == 10
    for e in entries:
        assert e["n_mics"] == 6
        for kind in ("noisy", "clean", "noise"):
            assert all((tmp_path / p).exists() for p in e["paths"][kind])
        assert {"room", "t60", "snr_db", "positions", "seed"} <= set(e)


def test_split_mic_counts(tmp_path):
    m, _ = build_dataset(tmp_path / "t", 1, "test", seconds=0.5)
    assert read_manifest(m)[0]["n_mics"] == 12
    m, _ = build_dataset(tmp_path / "v", 1, "valid", seconds=0.5)
    assert read_manifest(m)[0]["n_mics"] == 6


def test_dataset_regenerates_bit_exact(tmp_path):
    build_dataset(tmp_path / "a", 2, "train", mics=3, seed=4, seconds=0.5)
    build_dataset(tmp_path / "b", 2, "train", mics=3, seed=4, seconds=0.5)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_written_recording_keeps_decomposition(tmp_path):
    m, _ = build_dataset(tmp_path, 1, "train", mics=2, seconds=0.5)
    rec = load_recording(read_manifest(m)[0])
    assert np.array_equal(rec.noisy, rec.reverberant_clean + rec.noise_sum)


def test_corpus_directories_and_bad_files(tmp_path):
    clean, noise = tmp_path / "clean", tmp_path / "noise"
    rng = np.random.default_rng(0)
    write_wav(clean / "a.wav", synth_speech(rng, 0.6))
    write_wav(clean / "b.wav", synth_speech(rng, 0.6), rate=8000)
    write_wav(noise / "n.wav", synth_noise(rng, 0.3))
    manifest, errors = build_dataset(tmp_path / "out", 6, "train", mics=2, clean_dir=clean,
                                     noise_dir=noise, seconds=0.5)
    entries = read_manifest(manifest)
    assert len(entries) + len(errors) == 6
    assert errors and all("8000" in e["error"] for e in errors)
    assert all(e["sources"]["clean"].endswith("a.wav") for e in entries)


def test_empty_corpus_directory(tmp_path):
    (tmp_path / "clean").mkdir()
    with pytest.raises(AudioError):
        build_dataset(tmp_path / "out", 1, clean_dir=tmp_path / "clean")


def test_count_must_be_positive(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(tmp_path, 0)
