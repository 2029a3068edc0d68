import random
import shutil

import pytest

from rimbus.bench.testbed import bench_config
from rimbus.core import SystemConfig

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def make_cfg():
    """Config factory with a private port block and SHM directory."""
    made = []

    def factory(chip: str = "A1", **kw) -> SystemConfig:
        if made:
            base = made[0]
            cfg = base.for_chip(chip)
        else:
            cfg = bench_config(SystemConfig(chip_id=chip, beacon_interval_ms=100), shaping={},
                               port_base=random.randrange(40000, 60000, 200))
            made.append(cfg)
        for k, v in kw.items():
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    yield factory
    if made:
        shutil.rmtree(made[0].shm_dir, ignore_errors=True)


def record_criterion(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
