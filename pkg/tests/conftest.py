import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sliceops.domains import DomainSpec

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DOMAINS = {
    "disk": DomainSpec.disk_slice(0.25, 0.75),
    "halfdisk": DomainSpec.end_disk_slice(0.2),
    "trapezium": DomainSpec.trapezium(0.5),
}


@pytest.fixture(params=list(DOMAINS))
def domain(request):
    return DOMAINS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def interior_points(domain, n, rng):
    """n points strictly inside the domain (uniform in x, then in y given x)."""
    x = rng.uniform(domain.alpha, domain.beta, n)
    x = np.clip(x, domain.alpha + 1e-6, domain.beta - 1e-6)
    r = domain.rho(x)
    t = rng.uniform(1e-6, 1 - 1e-6, n)
    y = domain.gamma * r + (domain.delta - domain.gamma) * r * t
    return x, y


def boundary_points(domain, n):
    """n points on the boundary with outward unit normals (nx, ny)."""
    m = n // 4
    s = (np.arange(m) + 0.5) / m
    a, b = domain.alpha, domain.beta
    xs, ys, nx, ny = [], [], [], []
    # x = alpha edge and x = beta edge (beta edge degenerates on the half-disk)
    for x0, sign in ((a, -1.0), (b, 1.0)):
        r = domain.rho(x0)
        if r == 0.0:
            continue
        xs.append(np.full(m, x0))
        ys.append(domain.gamma * r + (domain.delta - domain.gamma) * r * s)
        nx.append(np.full(m, sign))
        ny.append(np.zeros(m))
    # curved / slanted edges y = delta rho(x) and y = gamma rho(x)
    k = (n - sum(v.size for v in xs)) // 2
    x = a + (b - a) * (np.arange(k) + 0.5) / k
    r = domain.rho(x)
    if domain.circular:
        drho = -x / r
    else:
        drho = np.full_like(x, -domain.xi)
    for c, sign in ((domain.delta, 1.0), (domain.gamma, -1.0)):
        xs.append(x)
        ys.append(c * r)
        if c == 0.0:
            gx, gy = np.zeros_like(x), -np.ones_like(x)
        else:
            gx, gy = -c * drho * sign, np.full_like(x, sign)
        norm = np.hypot(gx, gy)
        nx.append(gx / norm)
        ny.append(gy / norm)
    return (np.concatenate(xs), np.concatenate(ys), np.concatenate(nx), np.concatenate(ny))


# ----------------------------------------------------------------------------
# one pass/fail line per acceptance criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[number] = (title, report.outcome, item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome, props = _CRITERIA[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        detail = "; ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}  [{detail}]")
