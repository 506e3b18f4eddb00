import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from labnet.model import LABNet, ModelConfig
from labnet.roomsim import RoomSpec, Scene, SceneConstraints, mix_scene, synth_noise, synth_speech, utterance

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_model():
    return LABNet(ModelConfig(hidden=8, seed=3))


@pytest.fixture(scope="session")
def default_model():
    return LABNet(ModelConfig())


@pytest.fixture(scope="session")
def scene4():
    """4-mic scene, T60 0.2 s, 0 dB SNR, one noise source."""
    rng = np.random.default_rng(11)
    room = RoomSpec(6.0, 5.0, 3.0, 0.2)
    mics = np.array([[2.0, 2.0, 1.5], [2.3, 2.1, 1.5], [2.6, 1.8, 1.4], [1.8, 2.5, 1.6]])
    scene = Scene(room, np.array([4.0, 3.0, 1.6]), mics, np.array([[1.0, 4.0, 1.2]]), 0.0, seed=11)
    clean = synth_speech(rng, 3.0)
    noise = synth_noise(rng, 3.0, kind="white")
    return mix_scene(clean, [noise], scene)


@pytest.fixture(scope="session")
def recordings6():
    cons = SceneConstraints(mics=6)
    return [utterance(i, 5, cons, 1.5)[0] for i in range(3)]


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


class Verdict:
    def __init__(self, config, number, title):
        self.config, self.number, self.title = config, number, title
        self.recorded = False

    def __call__(self, ok: bool, detail: str):
        line = f"[{self.number}] {'PASS' if ok else 'FAIL'} {self.title}: {detail}"
        self.config.stash[ACCEPTANCE].append(line)
        self.recorded = True
        print(line)
        assert ok, line


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records one PASS/FAIL line for the criterion under test."""
    marker = request.node.get_closest_marker("criterion")
    v = Verdict(request.config, *marker.args)
    yield v
    if not v.recorded:
        request.config.stash[ACCEPTANCE].append(f"[{v.number}] FAIL {v.title}: raised before judging")
