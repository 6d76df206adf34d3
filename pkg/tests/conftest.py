import numpy as np
import pytest

from gfss.head import ClassPartition
from gfss.synthgen import TaskSpec, generate_task, train_base_classifier


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_task():
    spec = TaskSpec(image_size=(8, 8), head_budget=64, n_base_images=4, n_support_images=2,
                    n_query_images=2, noise_std=0.1, similarity={5: (1, 0.9)}, seed=3)
    episode, base = generate_task(spec)
    return spec, episode, base, train_base_classifier(base, epochs=60)


@pytest.fixture
def part():
    return ClassPartition(2, 2)


# acceptance report: one line per criterion, printed after the run
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def record():
    def _record(number: int, title: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE.append((number, title, bool(passed), detail))
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} | {detail}")
        return bool(passed)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
