import numpy as np
import pytest

from naign.net import FixedMap, MlpArch, MlpParams

_CRITERIA = {}


def circle_projector(dim=2):
    """Exact projector onto the unit circle (unit sphere for dim > 2)."""

    def fn(z):
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    return FixedMap(fn, dim)


def identity_params(dim=2, hidden=(4,)):
    """Residual net with zero weights: exactly the identity map."""
    arch = MlpArch(input_dim=dim, hidden_dims=hidden, residual_output=True)
    dims = arch.layer_dims
    ws = [np.zeros((a, b), dtype=np.float32) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b, dtype=np.float32) for b in dims[1:]]
    return MlpParams(arch, ws, bs)


def constant_params(value, hidden=(4,)):
    """Net whose output is the constant ``value`` (zero weights, final bias = value)."""
    value = np.asarray(value, dtype=np.float32)
    arch = MlpArch(input_dim=value.size, hidden_dims=hidden)
    dims = arch.layer_dims
    ws = [np.zeros((a, b), dtype=np.float32) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b, dtype=np.float32) for b in dims[1:]]
    bs[-1] = value.copy()
    return MlpParams(arch, ws, bs)


@pytest.fixture
def circle():
    return circle_projector()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {e['title']}")
