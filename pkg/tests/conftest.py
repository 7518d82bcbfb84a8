import numpy as np
import pytest

FD_STEP = 1e-5
GRAD_TOL = 1e-4


def numeric_grad(f, x, step=FD_STEP):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        grad[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(a, b):
    """Largest absolute deviation relative to the larger gradient magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return np.abs(a - b).max(initial=0.0) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ---------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by a test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    item.config._criteria[number] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
