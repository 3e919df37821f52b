"""Central finite-difference oracle, independent of the autodiff path.

Every differentiable operation is checked in double precision against
(f(x+eps) - f(x-eps)) / 2 eps, elementwise over all checked parameters.
"""

import numpy as np

EPS = 1e-5
REL_TOL = 1e-4


def max_rel_error(loss_fn, params, eps=EPS):
    """Worst relative error between autodiff and central differences.

    ``loss_fn`` rebuilds the scalar loss from scratch; ``params`` are the
    float64 leaf tensors to perturb.
    """
    for p in params:
        assert p.data.dtype == np.float64, "gradient checks run in double precision"
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(numeric), abs(ana_flat[i]), 1e-8)
            worst = max(worst, abs(numeric - ana_flat[i]) / denom)
    return worst


def assert_grads_match(loss_fn, params, tol=REL_TOL):
    err = max_rel_error(loss_fn, params)
    assert err < tol, f"finite-difference mismatch: rel err {err:.3e} >= {tol}"
