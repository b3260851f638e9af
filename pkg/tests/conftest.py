import numpy as np
import pytest

from lrvq import tensor as T
from lrvq.config import Config
from lrvq.tensor import Tensor


def numeric_grad(fn, arrays, index, eps=1e-6):
    """Central differences of scalar ``fn(*arrays)`` wrt ``arrays[index]``."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = base[i]
        base[i] = old + eps
        hi = fn(*arrays)
        base[i] = old - eps
        lo = fn(*arrays)
        base[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(build, arrays, rng, wrt=None, tol=1e-4):
    """Compare autodiff and finite-difference gradients of ``sum(W * build(*tensors))``.

    ``W`` is a fixed random weight so non-scalar outputs are fully exercised.
    Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    weight = rng.normal(size=out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float((build(*[Tensor(a) for a in arrs]).data * weight).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = (build(*leaves) * weight).sum()
    T.backward(loss)
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        numeric = numeric_grad(scalar, arrays, i)
        err = rel_error(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"input {i}: relative error {err:.3e}"
    return worst


def tiny_config(**sections) -> Config:
    base = Config().replace(
        data={"num_scenes": 4, "agents_min": 1, "agents_max": 3, "past_len": 4, "future_len": 5},
        model={"d_model": 8, "heads": 2, "depth": 1, "ff_width": 16, "dtype": "float64"},
        codebook={"codes": 5, "rank": 2},
        diffusion={"steps": 6},
        train={"stage1_epochs": 2, "stage2_epochs": 2, "batch_size": 2},
        eval={"num_guesses": 6, "k": 3, "horizons": [0.8]},
    )
    return base.replace(**sections) if sections else base


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report -------------------------------------------------------------

_outcomes: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    verdict = "PASS" if call.excinfo is None else "FAIL"
    detail = getattr(item.module, "DETAILS", {}).get(number, "")
    if call.excinfo is not None:
        detail = f"{detail}; {call.excinfo.typename}: {str(call.excinfo.value).splitlines()[0][:160]}".lstrip("; ")
    _outcomes[number] = (verdict, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        verdict, title, detail = _outcomes[number]
        terminalreporter.write_line(f"[{verdict}] criterion {number:>2} {title}: {detail}")
