import numpy as np
import pytest

from poiformer.data_pipeline import (CheckIn, Poi, PoiTable, SyntheticSpec, Trajectory,
                                     generate_synthetic, leave_last_out_split)


def make_traj(user, pois, t0=1_600_000_000, step=3600):
    return Trajectory(user, tuple(CheckIn(user, t0 + i * step, p) for i, p in enumerate(pois)))


def make_table(poi_ids, num_categories=3):
    table = PoiTable(category_labels=["<unk>"] + [f"c{k}" for k in range(num_categories)])
    for p in poi_ids:
        table.pois[p] = Poi(p, 103.6 + 0.01 * p, 1.3 + 0.005 * p, p % num_categories + 1)
    return table


@pytest.fixture(scope="session")
def small_split():
    trajs, table = generate_synthetic(SyntheticSpec(num_users=6, num_pois=12, num_categories=3,
                                                    seq_len=10, seed=3))
    return leave_last_out_split(trajs, table)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(criterion: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {title}" + (f" -- {detail}" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
