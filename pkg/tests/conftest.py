"""Shared helpers: finite-difference oracles and tiny model builders."""

import numpy as np
import pytest

from factorcast import autodiff as ad
from factorcast.config import ComponentConfig, TaskSpec
from factorcast.model import init_model_params, prior_params
from factorcast.objective import ObjectiveWeights
from factorcast.training import batch_objective


def numeric_grad(fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar fn w.r.t. every entry of arr."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check_op_grad(build, *arrays, eps=1e-6, tol=5e-6, seed=0):
    """Verify backward() of `build(*nodes) -> Node` against finite differences.

    The op output is contracted with fixed random weights so the full
    Jacobian action is exercised. Arrays are modified in place during the
    probe and restored afterwards.
    """
    rng = np.random.default_rng(seed)
    nodes = [ad.Node(a, op="leaf") for a in arrays]
    out = build(*nodes)
    probe = rng.standard_normal(out.value.shape)

    def scalar():
        fresh = [ad.Node(a, op="leaf") for a in arrays]
        val = build(*fresh).value
        return float(np.sum(val * probe))

    root = ad.reduce_sum(out * ad.Node(probe, op="const"))
    ad.backward(root)
    for node, arr in zip(nodes, arrays):
        fd = numeric_grad(scalar, arr, eps=eps)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(node.grad)), 1e-4)
        rel = np.abs(fd - node.grad) / denom
        assert rel.max() < tol, (f"gradient mismatch: max rel {rel.max():.3g} "
                                 f"at {np.unravel_index(rel.argmax(), rel.shape)}")


@pytest.fixture
def tiny_setup():
    """D=2, T=12, K=2 (rates 1,2), L=2 model with a 2-window batch."""
    rng = np.random.default_rng(42)
    cfg = ComponentConfig(rates=(1, 2), factors=2, eps_window=2,
                          conv_channels=3, hidden=4, head_hidden=4)
    task = TaskSpec(kind="long_horizon", horizon=2, out_dim=2)
    x = rng.standard_normal((2, 2, 12))
    y = rng.standard_normal((2, 2, 2))
    starts = np.array([0, 3])
    prior = prior_params(np.arange(20), 2, 2, 99)
    params = init_model_params(2, cfg, task, seed=5)
    return dict(cfg=cfg, task=task, x=x, y=y, starts=starts, prior=prior,
                params=params)


def tiny_loss(setup, weights=None, beta=1.0, noise_seed=77, kl_per_term=True):
    if weights is None:
        weights = ObjectiveWeights.for_task("stock_trend")
    loss, parts, out, _ = batch_objective(
        setup["params"], setup["cfg"], setup["task"], setup["x"], setup["y"],
        setup["starts"], setup["prior"], weights, beta, t_scale=20.0,
        noise_seed=noise_seed, kl_per_term=kl_per_term)
    return loss, parts, out
