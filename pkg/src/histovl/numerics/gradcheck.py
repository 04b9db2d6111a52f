from __future__ import annotations

import numpy as np

from ..exceptions import InvalidArgumentError, NumericalError


def finite_diff_check(loss_fn, analytic_grad, point, step: float = 1e-5) -> float:
    """Max relative error between central differences and ``analytic_grad``.

    Error per coordinate is ``|fd - g| / (|g| + 1e-8)``.
    """
    if not step > 0:
        raise InvalidArgumentError("step must be positive")
    x = np.array(point, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g.shape != x.shape:
        raise InvalidArgumentError("analytic_grad and point differ in size")
    worst = 0.0
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = float(loss_fn(x.copy()))
        x[i] = orig - step
        fm = float(loss_fn(x.copy()))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite loss at probe of coordinate {i}")
        fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(fd - g[i]) / (abs(g[i]) + 1e-8))
    return worst


def directional_check(loss_of_params, grads: dict, params: dict, rng, step: float = 1e-5,
                      keys=None) -> float:
    """Gradient check for large parameter dicts.

    Draws one random unit direction per parameter tensor and checks the
    directional derivatives with :func:`finite_diff_check` over the vector of
    step sizes along those directions.
    """
    keys = sorted(params) if keys is None else list(keys)
    dirs = {}
    for k in keys:
        d = rng.normal(size=params[k].shape)
        dirs[k] = d / np.linalg.norm(d)

    def f(alpha):
        moved = dict(params)
        for a, k in zip(alpha, keys):
            moved[k] = params[k] + a * dirs[k]
        return loss_of_params(moved)

    analytic = np.array([np.sum(grads[k] * dirs[k]) for k in keys])
    return finite_diff_check(f, analytic, np.zeros(len(keys)), step)
