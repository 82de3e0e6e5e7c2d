import time

import numpy as np
import pytest

from maslag import validate_config, solve, SolverParams
from maslag.geometry import ConfigError

EDGE = np.sqrt(3.0)


def equilateral_config():
    return validate_config(
        [(1.0, 0.0), (-0.5, np.sqrt(3) / 2), (-0.5, -np.sqrt(3) / 2)],
        [0.0, 0.0, 0.0], 0.0)


def unit_square_config():
    return validate_config([(0, 0), (1, 0), (1, 1), (0, 1)], [0, 0, 0, 0], 0.0)


def centered_square_config():
    return validate_config([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)],
                           [0, 0, 0, 0], 0.0)


def quadratic_exact(u):
    return 0.5 * np.sum(np.asarray(u) ** 2, axis=-1)


def quadratic_rhs(u):
    return np.ones(len(np.atleast_2d(u)))


def exp_exact(u):
    return np.exp(0.5 * np.sum(np.asarray(u) ** 2, axis=-1))


def random_config(rng, n):
    """Convex position with jittered angles and radii; retries until valid."""
    while True:
        jitter = rng.uniform(-0.25, 0.25, n)
        ang = 2 * np.pi * (np.arange(n) + jitter) / n
        rad = rng.uniform(0.75, 1.25, n)
        pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
        b = rng.normal(0.0, 0.03, n)
        try:
            return validate_config(pts, b, 0.0)
        except ConfigError:
            continue


def random_config_suite(count=10, seed=0):
    rng = np.random.default_rng(seed)
    return [random_config(rng, 3 + (i % 3)) for i in range(count)]


def end_scale_h(cfg):
    """Spacing fine enough for four dyadic end levels on this polygon."""
    return min(cfg.min_width / 64.0, float(np.min(cfg.edge_lengths)) / 9.0)


@pytest.fixture(scope="session")
def eq_cfg():
    return equilateral_config()


@pytest.fixture(scope="session")
def eq_field_64(eq_cfg):
    return solve(eq_cfg, SolverParams(h=EDGE / 64))


@pytest.fixture(scope="session")
def eq_field_128(eq_cfg):
    return solve(eq_cfg, SolverParams(h=EDGE / 128))


@pytest.fixture(scope="session")
def square_quadratic_fields():
    """Manufactured test I at h in {1/32, 1/64, 1/128}, with wall times."""
    cfg = unit_square_config()
    out = {}
    for denom in (32, 64, 128):
        t0 = time.perf_counter()
        fld = solve(cfg, SolverParams(h=1.0 / denom),
                    rhs=quadratic_rhs, boundary=quadratic_exact)
        out[denom] = (fld, time.perf_counter() - t0)
    return out
