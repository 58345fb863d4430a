import numpy as np
import pytest

from hybridnet.synthetic import make_shapes_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    """40 images, two classes, 32x32."""
    root = tmp_path_factory.mktemp("shapes")
    return make_shapes_dataset(root, num_classes=2, per_class=20, size=32, seed=0)


def away_from_zero(rng, shape, margin=0.05):
    """Uniform [-1, 1] entries with |x| >= margin, so kinks at 0 stay out of FD reach."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


_CRITERIA: list[tuple[str, bool, str]] = []


class Criterion:
    def __init__(self, name):
        self.name = name
        self.recorded = False

    def check(self, ok: bool, detail: str = "") -> None:
        self.recorded = True
        line = f"[{'PASS' if ok else 'FAIL'}] {self.name}" + (f": {detail}" if detail else "")
        print(line)
        _CRITERIA.append((self.name, ok, detail))
        assert ok, line


@pytest.fixture
def criterion(request):
    """Records one pass/fail line per acceptance criterion."""
    c = Criterion(request.node.function.__doc__.strip().splitlines()[0])
    yield c
    if not c.recorded:
        _CRITERIA.append((c.name, False, "raised before reaching its check"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(
            f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
