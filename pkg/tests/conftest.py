import numpy as np
import pytest

from dpfnet.core import ParamStore, Rng
from dpfnet.flow import PointFlow, PriorFlow
from dpfnet.model import DPFNet, ModelConfig


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of f: R^d -> R^d at a single point x (1-D)."""
    d = len(x)
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (f(x + e) - f(x - e)) / (2 * h)
    return J


def random_point_flow(seed, latent_dim=8, n_layers=6, std=0.3, hidden=64):
    store = ParamStore()
    flow = PointFlow(store, latent_dim, Rng(seed), n_layers=n_layers, hidden=hidden)
    store.randomize(Rng(seed + 1000), std)
    return store, flow


def random_prior(seed, latent_dim=4, n_layers=4, std=0.3, hidden=32):
    store = ParamStore()
    prior = PriorFlow(store, latent_dim, Rng(seed), n_layers=n_layers, hidden=hidden)
    store.randomize(Rng(seed + 1000), std)
    return store, prior


def small_net(seed=0, latent_dim=8, point_layers=6, prior_layers=4, prior_hidden=32, **kw):
    return DPFNet(ModelConfig(latent_dim=latent_dim, point_layers=point_layers,
                              prior_layers=prior_layers, prior_hidden=prior_hidden, **kw), seed=seed)


@pytest.fixture
def rng():
    return Rng(1234)


def contained_point_flow(seed=11, latent_dim=4, n_layers=4, hidden=32, std=0.15, trunk_std=2.0):
    """Random, visibly nonlinear point flow whose mass stays well inside [-3, 3]^3.

    Strong trunk weights make the log-scales vary with position; the base
    log-variance is pulled down by 2 so the pushforward does not leak out of
    the quadrature box.
    """
    store = ParamStore()
    flow = PointFlow(store, latent_dim, Rng(seed), n_layers=n_layers, hidden=hidden)
    r = Rng(seed + 1000)
    for name in store.names():
        store.randomize(r, trunk_std if ".trunk." in name else std, name)
    last = flow.base_net.layers[-1].b
    store.value(last)[0, 3:] -= 2.0
    return store, flow


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = f"failed during {rep.when}"
    _ACCEPTANCE[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {title}: {detail}")
