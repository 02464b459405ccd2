from pathlib import Path

import pytest

from codesign.morphology import load_agent, load_constraints

FIXTURES = Path(__file__).parent / "fixtures"
DATA = Path(__file__).resolve().parents[1] / "src" / "codesign" / "data"

# torso with one hinged leg on each side; small enough for fast training tests
TWO_LEG = """
root: torso
parts:
  - {id: torso, part_class: B, length: 0.5, radius: 0.08, density: 1000.0, init_dir: [0, -1, 0]}
  - {id: LL0, part_class: LL0, length: 0.3, radius: 0.04, density: 1000.0, attach_pos: 0.5, init_dir: [-0.3, 0, -0.9539392014169456]}
  - {id: RL0, part_class: RL0, length: 0.3, radius: 0.04, density: 1000.0, attach_pos: 0.5, init_dir: [0.3, 0, -0.9539392014169456]}
joints:
  - {parent: torso, child: LL0, axis: [1, 0, 0], range: [-0.8, 0.8], stiffness: 150.0, damping: 8.0, max_effort: 60.0}
  - {parent: torso, child: RL0, axis: [1, 0, 0], range: [-0.8, 0.8], stiffness: 150.0, damping: 8.0, max_effort: 60.0}
"""


@pytest.fixture(scope="session")
def quadruped():
    return load_agent(DATA / "quadruped.yaml")


@pytest.fixture(scope="session")
def quadruped_constraints(quadruped):
    return load_constraints(DATA / "quadruped_constraints.yaml", quadruped)


@pytest.fixture(scope="session")
def walker12():
    return load_agent(FIXTURES / "walker12.yaml")


@pytest.fixture(scope="session")
def walker8():
    return load_agent(FIXTURES / "walker8.yaml")


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
