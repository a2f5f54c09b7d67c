import numpy as np
import pytest

from liestate import groups as grp

FAMILIES = ("O", "SO", "U", "SU", "Torus")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_skew(rng, d, n=None, scale=1.0):
    shape = (d, d) if n is None else (n, d, d)
    x = rng.normal(size=shape) * scale
    return x - np.swapaxes(x, -1, -2)


def random_skew_hermitian(rng, d, n=None, scale=1.0):
    shape = (d, d) if n is None else (n, d, d)
    x = (rng.normal(size=shape) + 1j * rng.normal(size=shape)) * scale
    return 0.5 * (x - np.conj(np.swapaxes(x, -1, -2)))


def random_raw(spec, rng, n=None):
    shape = (spec.d, spec.d) if n is None else (n, spec.d, spec.d)
    x = rng.normal(size=shape)
    if not spec.is_real:
        x = x + 1j * rng.normal(size=shape)
    return x


def random_algebra(spec, rng, n=None):
    return grp.project_tangent(spec, random_raw(spec, rng, n))


def eig_expm(a):
    """Exponential of a normal matrix through its eigendecomposition."""
    w, v = np.linalg.eig(a)
    out = v @ np.diag(np.exp(w)) @ np.linalg.inv(v)
    return out.real if not np.iscomplexobj(a) else out


# acceptance criteria report ------------------------------------------------------

CRITERIA = []


def record_criterion(number, passed, detail, gating=True, status=None):
    if status is None:
        status = "PASS" if passed else ("FAIL" if gating else "FAIL (non-gating)")
    line = f"criterion {number:>2}: {status:<5} {detail}"
    CRITERIA.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(CRITERIA, key=lambda item: item[0]):
        terminalreporter.write_line(line)
