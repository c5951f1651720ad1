import numpy as np
import pytest

from lqgdelay.model import ModelSpec


def delayed_spec(**kw):
    base = dict(A=0.1, Atil=0.3, B=1.0, Btil=0.2, Bhat=0.8, sigma=0.5, R=1.0, Rtil=0.5,
                Nc=1.0, Nctil=0.5, M=1.0, a=1.0, xi_hist=0.5, eta_hist=-0.2)
    base.update(kw)
    return ModelSpec.scalar(1.0, 0.25, 0.25, **base)


def case1_spec(**kw):
    return delayed_spec(Atil=0.0, Btil=0.0, **kw)


def case2_spec(**kw):
    base = dict(A=0.0, B=0.0, Atil=0.5, Btil=1.0, Bhat=0.5, sigma=0.3, R=0.0, Rtil=0.0,
                Nc=1.0, Nctil=0.5, M=1.0, a=1.0, xi_hist=0.0, eta_hist=0.0)
    base.update(kw)
    return ModelSpec.scalar(2.0, 0.5, 0.5, **base)


def random_scalar_spec(rng: np.random.Generator, T=1.0, delta=0.5, theta=0.5):
    """Random scalar spec that passes validation."""
    u = lambda lo, hi: float(rng.uniform(lo, hi))
    return ModelSpec.scalar(T, delta, theta, A=u(-0.5, 0.5), Atil=u(-0.5, 0.5), B=u(0.5, 1.5),
                            Btil=u(-0.5, 0.5), Bhat=u(-1, 1), sigma=u(0.1, 0.8), R=u(0.1, 2),
                            Rtil=u(0, 1), Nc=u(0.5, 2), Nctil=u(0, 1), M=u(0, 2), a=u(-1, 1),
                            xi_hist=u(-1, 1), eta_hist=u(-1, 1))


@pytest.fixture
def dspec():
    return delayed_spec()


@pytest.fixture
def c1spec():
    return case1_spec()


@pytest.fixture
def c2spec():
    return case2_spec()
