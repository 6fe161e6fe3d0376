"""Shared test utilities: finite-difference gradient oracle and data builders."""

from __future__ import annotations

from typing import Callable

import numpy as np

from osdg_sched import autodiff as ad


def finite_diff_grad(loss_fn: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of `loss_fn` w.r.t. the buffer `x` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(build_loss: Callable[[], ad.Tensor], params: list[ad.Tensor],
                    h: float = 1e-4, tol: float = 1e-4) -> float:
    """Compare analytic gradients of `build_loss` against central differences.

    `build_loss` must construct the loss afresh from the given parameter
    tensors (their buffers are perturbed in place for the numeric side).
    Returns the worst relative error across parameters.
    """
    ad.new_graph()
    loss = build_loss()
    ad.zero_grads(params)
    ad.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    ad.zero_grads(params)

    def value() -> float:
        ad.new_graph()
        return build_loss().item()

    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = finite_diff_grad(value, p.data, h=h)
        worst = max(worst, rel_error(ga, gn))
    ad.new_graph()
    return worst


def sampled_coordinate_grad_check(
    build_loss: Callable[[], ad.Tensor],
    params: list[ad.Tensor],
    rng: np.random.Generator,
    n_coords: int = 20,
    h: float = 1e-4,
) -> float:
    """Finite-difference check on a random subset of parameter coordinates.

    Used for composite losses whose full parameter vectors would make the
    exhaustive check too slow; coordinates are sampled across all parameters.
    """
    ad.new_graph()
    loss = build_loss()
    ad.zero_grads(params)
    ad.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    ad.zero_grads(params)

    def value() -> float:
        ad.new_graph()
        return build_loss().item()

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    coords = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    ga_all = []
    gn_all = []
    for coord in coords:
        pi = int(np.searchsorted(bounds, coord, side="right"))
        offset = int(coord - (bounds[pi - 1] if pi else 0))
        flat = params[pi].data.reshape(-1)
        orig = flat[offset]
        flat[offset] = orig + h
        fp = value()
        flat[offset] = orig - h
        fm = value()
        flat[offset] = orig
        gn_all.append((fp - fm) / (2.0 * h))
        ga_all.append(analytic[pi].reshape(-1)[offset])
    ad.new_graph()
    return rel_error(np.asarray(ga_all), np.asarray(gn_all))
