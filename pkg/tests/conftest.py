import numpy as np
import pytest


def numeric_grad(f, x, coords, eps=1e-6):
    """Central differences of scalar ``f`` at the given flat coordinates of ``x`` (modified in place, restored)."""
    flat = x.reshape(-1)
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * eps))
    return np.array(out)


def fd_error(f, x, analytic, n=20, seed=0, eps=1e-6):
    """Norm-wise relative error ``|num - ana| / max(|num|, |ana|)`` over ``n`` random coordinates."""
    rng = np.random.default_rng(seed)
    coords = rng.choice(x.size, size=min(n, x.size), replace=False)
    num = numeric_grad(f, x, coords, eps)
    ana = np.asarray(analytic).reshape(-1)[coords]
    scale = max(np.linalg.norm(num), np.linalg.norm(ana))
    return 0.0 if scale == 0 else float(np.linalg.norm(num - ana) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting and shared toy-training runs ------------------------------

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


class ToyRuns:
    """Lazily trained toy runs, memoised for the whole session."""

    def __init__(self):
        self._data = None
        self._runs = {}

    @property
    def data(self):
        if self._data is None:
            from hmamba.experiments import benchmark
            self._data = benchmark(n_train=2000, n_val=200)
        return self._data

    def get(self, ablation, seed):
        key = (ablation, seed)
        if key not in self._runs:
            from hmamba.experiments import train_run
            train, val = self.data
            self._runs[key] = train_run(ablation, seed, train, val, steps=2000)
        return self._runs[key]


_TOY_RUNS = ToyRuns()


@pytest.fixture(scope="session")
def toy_runs():
    return _TOY_RUNS
