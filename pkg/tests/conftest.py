import numpy as np
import pytest

from msnn.model import MsnnConfig, MsnnModel


TINY = dict(
    n_channels=2,
    n_timepoints=32,
    sampling_rate=16,
    n_classes=2,
    kernel_sizes=(8, 4),
    feature_maps=(2, 4, 4),
)


@pytest.fixture
def tiny_config():
    return MsnnConfig(seed=1, **TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return MsnnModel.build(tiny_config)


@pytest.fixture
def primed_tiny_model(tiny_model):
    """Tiny model with batch-norm running statistics populated."""
    rng = np.random.default_rng(11)
    tiny_model.forward(rng.standard_normal((6, 2, 32, 1)), mode="train")
    return tiny_model


def sine_amplitude(signal: np.ndarray, freq: float, fs: float) -> float:
    """Least-squares sinusoid fit: amplitude of the freq component."""
    t = np.arange(signal.shape[0]) / fs
    design = np.column_stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)])
    coef, *_ = np.linalg.lstsq(design, signal, rcond=None)
    return float(np.hypot(coef[0], coef[1]))
