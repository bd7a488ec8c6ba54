"""Shared fixtures. Bench objects and closed-loop traces are built once per session."""
import os
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from irmpc.mpc import MpcConfig, MpcController  # noqa: E402
from irmpc.robot import RobotBench  # noqa: E402
from irmpc.simulator import run_closed_loop  # noqa: E402
import acceptance_log  # noqa: E402

# wall-clock seconds of the expensive session fixtures, read by the acceptance module
TIMINGS = {}


def _timed(name, fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    TIMINGS[name] = time.perf_counter() - t0
    return out


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bench():
    return RobotBench()


@pytest.fixture(scope="session")
def ref_ocp(bench):
    return _timed("reference_ocp", bench.reference_ocp)


@pytest.fixture(scope="session")
def rot(bench, ref_ocp):
    return bench.rotation()


def _trace(bench, rot, mode, steps):
    ctrl = MpcController(MpcConfig.for_bench(bench, mode), rot)
    return run_closed_loop(bench.model, ctrl, bench.reference, bench.x0, bench.cfg.k0, steps)


@pytest.fixture(scope="session")
def ideal_trace(bench, rot):
    return _timed("ideal_trace", _trace, bench, rot, "ideal", bench.cfg.steps)


@pytest.fixture(scope="session")
def practical_trace(bench, rot):
    return _timed("practical_trace", _trace, bench, rot, "practical", bench.cfg.steps)


@pytest.fixture(scope="session")
def feasible_bench(bench):
    return bench.feasible_variant()


@pytest.fixture(scope="session")
def feasible_trace(feasible_bench):
    def build():
        fb = RobotBench(replace(feasible_bench.cfg, steps=300), reference=feasible_bench.reference)
        fb._ocp = feasible_bench.reference_ocp()
        return _trace(fb, fb.rotation(), "practical", 300)
    return _timed("feasible_trace", build)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
