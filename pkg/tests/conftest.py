import numpy as np
import pytest

from tempered_laplace import nn


def random_params(sizes, activation="tanh", head="softmax_categorical", seed=0, scale=1.0):
    arch = nn.MlpArchitecture(tuple(sizes), activation, head)
    rng = np.random.default_rng(seed)
    return nn.ModelParams(scale * rng.standard_normal(arch.num_params), arch)


def central_difference(fn, w, step=1e-5):
    """Central finite differences of a (vector-valued) function of a flat vector."""
    w = np.asarray(w, dtype=np.float64)
    cols = []
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = step
        cols.append((np.asarray(fn(w + e)) - np.asarray(fn(w - e))) / (2 * step))
    return np.stack(cols, axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_digits_idx(directory, gzip=False):
    """Write scikit-learn's bundled 8x8 digits as an IDX image/label pair."""
    from sklearn.datasets import load_digits

    from tempered_laplace.data import write_idx_images, write_idx_labels

    digits = load_digits()
    images = np.round(digits.images * (255.0 / 16.0)).astype(np.uint8)
    suffix = ".gz" if gzip else ""
    img = directory / f"digits-images-idx3-ubyte{suffix}"
    lab = directory / f"digits-labels-idx1-ubyte{suffix}"
    write_idx_images(img, images)
    write_idx_labels(lab, digits.target)
    return img, lab


ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    """Remember (and print) a one-line verdict for an acceptance criterion."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
