import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def grads_rel_err(analytic, numeric):
    """Relative error over the concatenation of all parameter gradients."""
    a = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in analytic])
    b = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in numeric])
    return rel_err(a, b)


def finite_difference_grad(fn, params, h=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def analytic_grad(fn, params):
    for p in params:
        p.grad = None
    fn().backward()
    return [p.grad.detach().clone() for p in params]
