import numpy as np
import pytest

from mugat.tensor import Parameter


def finite_diff(loss_fn, param: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn() w.r.t. one parameter."""
    arr = param.data  # mutated in place, restored entry by entry
    ref = arr.copy()
    grad = np.zeros_like(ref)
    for i in range(arr.size):
        arr.flat[i] = ref.flat[i] + h
        lp = loss_fn().item()
        arr.flat[i] = ref.flat[i] - h
        lm = loss_fn().item()
        arr.flat[i] = ref.flat[i]
        grad.flat[i] = (lp - lm) / (2 * h)
    return grad


def assert_grads_match(loss_fn, params, rel_tol: float = 1e-4,
                       abs_floor: float = 1e-6, h: float = 1e-5):
    """Backprop gradients vs central differences, relative error < rel_tol
    on entries with |analytic| > abs_floor."""
    from mugat.tensor import gradients

    loss = loss_fn()
    grads = gradients(loss, params)
    for p in params:
        if not p.trainable:
            continue
        num = finite_diff(loss_fn, p, h=h)
        ana = grads[p.name]
        mask = np.abs(ana) > abs_floor
        if not mask.any():
            continue
        rel = np.abs(ana[mask] - num[mask]) / np.maximum(np.abs(ana[mask]), abs_floor)
        assert rel.max() < rel_tol, (
            f"gradient mismatch for {p.name}: max rel err {rel.max():.2e}")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
