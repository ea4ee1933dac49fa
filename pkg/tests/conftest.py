import logging

import numpy as np
import pytest

from histoage.synth.cohort import GeneratorSpec, gen_subjects


@pytest.fixture(autouse=True)
def _package_logging():
    """The CLI detaches the package logger from the root; put it back so caplog sees records."""
    yield
    package = logging.getLogger("histoage")
    for handler in list(package.handlers):
        package.removeHandler(handler)
        handler.close()
    package.propagate = True
    package.setLevel(logging.NOTSET)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_cohort():
    """~360 synthetic subjects with a noisy predicted age column."""
    cohort, truth = gen_subjects(GeneratorSpec(scale_factor=0.2), seed=7)
    noise = np.random.default_rng(3).normal(0.0, 4.0, len(cohort))
    frame = cohort.assign(predicted_age=cohort["age"].to_numpy(dtype=np.float64) + noise)
    return frame, truth


@pytest.fixture
def write_config(tmp_path):
    """Write a flat config file into tmp_path and return its path."""

    def write(lines, name="test.cfg"):
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return write
