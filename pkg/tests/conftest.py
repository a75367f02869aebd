"""Shared operator fixtures.

Kernel matrices are cached on disk; set ``KLS_CACHE`` to reuse a cache
between sessions, otherwise a fresh per-session directory is used (the
first session then pays the assembly cost).
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest

from kls.collision import CollisionOperator, GammaOperator, assemble_LS
from kls.grids import AxiGrid, VelocityGrid
from kls.slab_solver import SolverConfig

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    env = os.environ.get("KLS_CACHE")
    if env:
        return Path(env)
    return tmp_path_factory.mktemp("kls-cache")


@pytest.fixture(scope="session")
def grid() -> VelocityGrid:
    return VelocityGrid(8, 16)


@pytest.fixture(scope="session")
def op(grid: VelocityGrid, cache_dir: Path) -> CollisionOperator:
    return CollisionOperator.assemble(grid, cache_dir=cache_dir)


@pytest.fixture(scope="session")
def op_fine(cache_dir: Path) -> CollisionOperator:
    return CollisionOperator.assemble(VelocityGrid(10, 20), cache_dir=cache_dir)


@pytest.fixture(scope="session")
def opS(cache_dir: Path):
    return assemble_LS(AxiGrid(8, 16), cache_dir=cache_dir)


@pytest.fixture(scope="session")
def small_grid() -> VelocityGrid:
    return VelocityGrid(6, 8)


@pytest.fixture(scope="session")
def op_small(small_grid: VelocityGrid, cache_dir: Path) -> CollisionOperator:
    return CollisionOperator.assemble(small_grid, cache_dir=cache_dir)


@pytest.fixture(scope="session")
def gamma(small_grid: VelocityGrid, cache_dir: Path) -> GammaOperator:
    return GammaOperator.assemble(small_grid, cache_dir=cache_dir)


@pytest.fixture(scope="session")
def cfg() -> SolverConfig:
    return SolverConfig()


def pytest_terminal_summary(terminalreporter, exitstatus, config):  # noqa: ARG001
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
