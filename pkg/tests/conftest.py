import dataclasses

import numpy as np
import pytest

from cmlab.worldgen import SyntheticWorldConfig, generate_world


def unit_rows(rng, m, d):
    x = rng.standard_normal((m, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def fd_gradient(value_fn, x, h=1e-6):
    """Central finite differences of a scalar function over one array."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (value_fn(xp) - value_fn(xm)) / (2 * h)
        it.iternext()
    return grad


def rel_err(analytic, numeric):
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_rel_err(analytic, numeric):
    """Relative error with a unit floor, so the ~1e-9 absolute roundoff of
    h=1e-6 central differences cannot dominate near-zero gradients."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1.0)
    return float(np.linalg.norm(analytic - numeric) / denom)


def tiny_world_config(**overrides) -> SyntheticWorldConfig:
    base = dict(
        n_classes=4,
        n_objects=6,
        n_cameras=2,
        n_keyframes=4,
        n_scenes=1,
        points_per_object=15,
        image_h=32,
        image_w=32,
        focal_px=24.0,
        seed=11,
    )
    base.update(overrides)
    return SyntheticWorldConfig(**base)


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_world")
    return generate_world(tiny_world_config(), root / "w")


@pytest.fixture(scope="session")
def reference_world(tmp_path_factory):
    """The fixed reference world of the paired proxy experiment."""
    root = tmp_path_factory.mktemp("reference_world")
    return generate_world(SyntheticWorldConfig(), root / "w")
