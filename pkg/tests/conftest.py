import numpy as np
import pytest

from covsteer.dynamics import AU_KM, DAY, NEWTON, PhysicalParams
from covsteer.reference import solve_reference
from covsteer.scenario import load_preset
from covsteer.steering import scp_solve


def small_transfer(gamma=9e-5, P_i=None, P_f=None, days=200.0, N=20, mass=5000.0, thrust_N=5.0):
    """Heliocentric raise from 1 AU to a 5% wider circular orbit."""
    base = load_preset("earth-mars-2d")
    mu = base.params.mu
    r0, r1 = AU_KM, 1.05 * AU_KM
    v0, v1 = np.sqrt(mu / r0), np.sqrt(mu / r1)
    t_f = days * DAY
    th = 0.5 * (v0 / r0 + v1 / r1) * t_f
    x_i = np.array([r0, 0.0, 0.0, v0, mass])
    x_f = np.array([r1 * np.cos(th), r1 * np.sin(th), -v1 * np.sin(th), v1 * np.cos(th), np.nan])
    params = PhysicalParams(mu=mu, isp=3000.0, g0=9.80665e-3, u_max=thrust_N * NEWTON, gamma=gamma)
    P_i = np.diag([100.0, 100.0, 0.01, 0.01, 0.0]) if P_i is None else P_i
    P_f = np.diag([1e10, 1e10, 0.01, 0.01, 1e4]) if P_f is None else P_f
    return base.replace(name="small", x_i=x_i, x_f=x_f, P_i=P_i, P_f=P_f, params=params, t_f=t_f, N=N)


@pytest.fixture(scope="session")
def small_scenario():
    return small_transfer()


@pytest.fixture(scope="session")
def small_reference(small_scenario):
    return solve_reference(small_scenario)


@pytest.fixture(scope="session")
def small_solution(small_scenario, small_reference):
    return scp_solve(small_scenario, small_reference, log_sink=lambda line: None)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one ``criterion N: PASS|FAIL`` line and fail the test on FAIL."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record
