import numpy as np
import pytest

from stochabs.abstraction import Abstraction
from stochabs.certificate import certificate_gains
from stochabs.config import bundled, load_config
from stochabs.model import BoxUnion, Grid, GridAxis, SystemSpec


@pytest.fixture(scope="session")
def pend_cfg():
    return load_config(bundled("pendulum"))


@pytest.fixture(scope="session")
def dc_cfg():
    return load_config(bundled("dcmotor"))


@pytest.fixture(scope="session")
def pend(pend_cfg):
    cfg = pend_cfg
    sys = cfg.system.spec()
    cert = cfg.certificate.certificate()
    return sys, cert, certificate_gains(cert, sys, cfg.certificate.gamma_hat)


@pytest.fixture(scope="session")
def dc(dc_cfg):
    cfg = dc_cfg
    sys = cfg.system.spec()
    cert = cfg.certificate.certificate()
    return sys, cert, certificate_gains(cert, sys, cfg.certificate.gamma_hat)


def linear_system(A, B, sigmas, domain, input_set, L_x=None, L_u=None, Z=None):
    A, B = np.asarray(A, float), np.asarray(B, float)
    sigmas = np.asarray(sigmas, float)
    n, m = B.shape
    L_x = L_x if L_x is not None else float(np.abs(A).sum(axis=1).max())
    L_u = L_u if L_u is not None else float(np.abs(B).sum(axis=1).max())
    Z = Z if Z is not None else float(max(np.abs(s).sum(axis=1).max() for s in sigmas))
    return SystemSpec(n, m, len(sigmas), "linear", {"A": A, "B": B}, sigmas, L_x, L_u, Z,
                      BoxUnion.of(input_set), BoxUnion.of(domain))


def table_abstraction(succ) -> Abstraction:
    """Abstraction over a 1-D index grid carrying a hand-written successor table."""
    succ = np.asarray(succ, dtype=np.uint32)
    N, M = succ.shape
    grid = Grid(1.0, (GridAxis(0, N),))
    return Abstraction(1.0, 1.0, 1.0, 1, grid, np.arange(M, dtype=float)[:, None], succ)


# ------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
