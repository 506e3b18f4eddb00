import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from labnet.dsp import InputError
from labnet.metrics import (METRIC_FIELDS, SI_SNR_CEIL, EvalReport, evaluate, identity_enhancer,
                            log_spectral_distance, mvdr_enhancer, oracle_enhancer, si_snr, stoi)
from labnet.roomsim import build_dataset, read_manifest, synth_speech

# reference STOI values from the pystoi 0.4.1 implementation on the signals built by noisy_at()
PYSTOI = {-10: 0.6057294163867948, -5: 0.7089081095084695, 0: 0.7950152681481802,
          10: 0.9093106530662791}


@pytest.fixture(scope="module")
def speech():
    return synth_speech(np.random.default_rng(0), 3.0)


def noisy_at(x, snr):
    n = np.random.default_rng(1).standard_normal(len(x))
    return x + n * np.linalg.norm(x) / np.linalg.norm(n) * 10 ** (-snr / 20)


# --------------------------------------------------------------------- SI-SNR


def test_si_snr_perfect_is_clamped(speech):
    assert si_snr(speech, speech) == SI_SNR_CEIL == 60.0


def test_si_snr_scale_invariant(speech):
    y = noisy_at(speech, 5)
    assert si_snr(2 * y, speech) == pytest.approx(si_snr(y, speech), abs=1e-12)


def test_si_snr_constructed_zero_db(speech):
    ref = speech - speech.mean()
    e = np.random.default_rng(3).standard_normal(len(ref))
    e -= e.mean()
    e -= np.dot(e, ref) / np.dot(ref, ref) * ref
    e *= np.linalg.norm(ref) / np.linalg.norm(e)
    assert abs(si_snr(ref + e, speech)) < 0.01


@given(arrays(np.float64, 200, elements=st.floats(-1, 1)), st.floats(0.01, 100))
def test_si_snr_positive_scaling_exact(x, a):
    ref = np.sin(np.arange(200) * 0.1)
    if np.ptp(x) > 1e-3:
        assert si_snr(a * x, ref) == pytest.approx(si_snr(x, ref), abs=1e-9)


def test_si_snr_errors(speech):
    with pytest.raises(InputError):
        si_snr(speech, np.zeros_like(speech))
    with pytest.raises(InputError):
        si_snr(speech[:-1], speech)


# --------------------------------------------------------------------- STOI


def test_stoi_self_is_one(speech):
    assert stoi(speech, speech) == pytest.approx(1.0, abs=1e-3)


def test_stoi_sign_flip(speech):
    assert stoi(-speech, speech) == pytest.approx(stoi(speech, speech), abs=1e-12)


@pytest.mark.parametrize("snr", sorted(PYSTOI))
def test_stoi_matches_reference_values(speech, snr):
    assert stoi(noisy_at(speech, snr), speech) == pytest.approx(PYSTOI[snr], abs=2e-3)


def test_stoi_monotone_in_snr(speech):
    assert stoi(noisy_at(speech, -10), speech) < stoi(noisy_at(speech, 10), speech)


def test_stoi_too_short():
    with pytest.raises(InputError):
        stoi(np.ones(3000), np.ones(3000))


@given(st.integers(0, 1000))
@settings(max_examples=5)
def test_stoi_bounded(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(12000), rng.standard_normal(12000)
    assert -1 <= stoi(x, y) <= 1


# --------------------------------------------------------------------- LSD


def test_lsd_zero_for_identical(speech):
    assert log_spectral_distance(speech, speech) == 0.0


def test_lsd_of_gain():
    x = np.random.default_rng(0).standard_normal(8000)
    # white noise has no empty bins, so a factor 2 is a 6.02 dB shift everywhere
    assert log_spectral_distance(2 * x, x) == pytest.approx(20 * math.log10(2), abs=0.05)


# --------------------------------------------------------------------- evaluate


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    path, _ = build_dataset(out, 3, "test", mics=3, seed=2, seconds=1.5)
    return read_manifest(path)


def test_identity_improvement_exactly_zero(manifest):
    rep = evaluate(manifest, identity_enhancer)
    assert len(rep.rows) == 3 and all(r["si_snr_improvement_db"] == 0.0 for r in rep.rows)


def test_oracle_passthrough(manifest):
    rep = evaluate(manifest, oracle_enhancer)
    assert all(r["si_snr_db"] == SI_SNR_CEIL for r in rep.rows)
    assert all(r["stoi"] == pytest.approx(1.0, abs=1e-3) for r in rep.rows)


def test_report_mean_is_row_mean(manifest):
    rep = evaluate(manifest, mvdr_enhancer())
    for k in METRIC_FIELDS:
        assert rep.mean[k] == pytest.approx(sum(r[k] for r in rep.rows) / len(rep.rows))


def test_order_independent(manifest):
    a = evaluate(manifest, identity_enhancer)
    b = evaluate(list(reversed(manifest)), identity_enhancer)
    assert a.rows == b.rows


def test_failures_recorded_and_run_continues(manifest):
    def flaky(rec):
        if rec.id.endswith("1"):
            raise ValueError("boom")
        return rec.noisy[0]

    rep = evaluate(manifest, flaky)
    assert len(rep.rows) == 2 and rep.errors == [{"id": "test_00001", "error": "boom"}]


def test_channel_restriction(manifest):
    rep = evaluate(manifest, lambda rec: rec.noisy[0] if rec.channels == 2 else None, channels=2)
    assert len(rep.rows) == 3
    rep = evaluate(manifest, identity_enhancer, channels=5)
    assert not rep.rows and len(rep.errors) == 3


def test_report_lines(manifest, tmp_path):
    rep = evaluate(manifest, identity_enhancer)
    rep.write(tmp_path / "r.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [x["type"] for x in lines] == ["utterance"] * 3 + ["summary"]
    assert lines[-1]["count"] == 3 and "mean_stoi" in lines[-1]


def test_empty_report_mean_is_nan():
    assert all(math.isnan(v) for v in EvalReport().mean.values())
