import numpy as np
import pytest
from scipy import linalg

from mirtlink.linking import Transform
from mirtlink.model import DichotomousItem, Family, Format, PolytomousItem, loading_mask


def random_item(rng, family: Family, fmt: Format, id_="i"):
    mask = np.array(loading_mask(family, fmt))
    a = np.where(mask, np.exp(rng.normal(0, 0.4, mask.size)), 0.0)
    if fmt is Format.MC:
        return DichotomousItem(id_, tuple(a), float(rng.normal()), float(rng.uniform(0, 0.35)), fmt, family)
    K = int(rng.integers(2, 6))
    return PolytomousItem(id_, tuple(a), tuple(rng.normal(0, 1.2, K - 1)), fmt, family)


def random_anchors(rng, family: Family, n_mc=8, n_cr=3):
    items = [random_item(rng, family, Format.MC, f"m{j}") for j in range(n_mc)]
    return items + [random_item(rng, family, Format.CR, f"c{j}") for j in range(n_cr)]


def random_transform(rng, dim: int, spread=0.25, shift=0.4) -> Transform:
    """Random orientation-preserving transform, singular values in [exp(-spread), exp(spread)].

    Reflections are excluded: they flip a latent axis, so the new-form slopes
    would change sign, and they lie behind the singular-matrix barrier that
    the linking search never crosses from its identity start.
    """
    if dim == 1:
        return Transform([[float(np.exp(rng.uniform(-spread, spread)))]], [float(rng.normal(0, shift))])
    q1, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    q2, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    if np.linalg.det(q1 @ q2) < 0:
        q1[:, 0] = -q1[:, 0]
    s = np.exp(rng.uniform(-spread, spread, dim))
    return Transform(q1 @ np.diag(s) @ q2, rng.normal(0, shift, dim))


def linking_transform(rng, dim: int, angle=0.3, spread=0.25, shift=0.4) -> Transform:
    """Transform of the size linking meets: moderate rotations around a positive scaling.

    Rotations come from the exponential of a skew matrix with N(0, angle^2)
    entries, so anchor slopes keep their sign in expectation.
    """
    if dim == 1:
        return random_transform(rng, 1, spread, shift)
    k = np.triu(rng.normal(0, angle, (dim, dim)), 1)
    rot = linalg.expm(k - k.T)
    rot2 = linalg.expm(-(k - k.T) * rng.uniform(0, 1))
    s = np.exp(rng.uniform(-spread, spread, dim))
    return Transform(rot @ np.diag(s) @ rot2, rng.normal(0, shift, dim))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
