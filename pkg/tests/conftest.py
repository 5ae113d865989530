import numpy as np
import pytest

from pulsebench import synth
from pulsebench.tensorcore import backward, forward, precision


def numeric_grads(graph, inputs, params, loss="loss", eps=1e-6, rng_seed=None):
    """Central differences of a scalar output w.r.t. every parameter entry (float64)."""
    out = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = forward(graph, inputs, params, rng=_rng(rng_seed))[loss]
            flat[i] = old - eps
            down = forward(graph, inputs, params, rng=_rng(rng_seed))[loss]
            flat[i] = old
            g.reshape(-1)[i] = (float(up) - float(down)) / (2 * eps)
        out[name] = g
    return out


def _rng(seed):
    return None if seed is None else np.random.default_rng(seed)


def analytic_grads(graph, inputs, params, loss="loss", rng_seed=None):
    forward(graph, inputs, params, rng=_rng(rng_seed))
    return backward(graph, loss)


def rel_err(a, b):
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-7)  # floor for exactly-zero gradients
    return num / den


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture(scope="session")
def clean_sample():
    prof = synth.SubjectProfile(id="clean", hr_bpm=72.0, pulse_strength=0.02, motion_amp=0.3,
                                specular_amp=0.03, seed=11)
    return synth.simulate(prof, 30.0)


TINY_NET = dict(window_frames=10, input_resolution=4, channels=(4,), hidden=8)
TINY_META = dict(support_frames=60, epochs=2, meta_batch=2, query_clips=4)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Two small on-disk domains: A for training, B for testing."""
    root = tmp_path_factory.mktemp("data")
    synth.generate_dataset(root / "A", seed=7, n_subjects=3, duration=16.0, domain="A", size=16)
    synth.generate_dataset(root / "B", seed=8, n_subjects=2, duration=16.0, domain="B", size=16)
    return root / "A", root / "B"
