"""Shared test helpers: finite-difference gradient checks and tiny fixtures."""

from __future__ import annotations

import numpy as np
import torch


def finite_difference_check(
    loss_fn,
    parameters: list[tuple[str, torch.nn.Parameter]],
    eps: float = 1e-5,
    rel_tol: float = 1e-5,
    denom_floor: float = 1e-3,
) -> float:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    Every entry of every listed parameter is perturbed.  Returns the maximum
    relative error, defined as |fd - analytic| / max(|fd|, |analytic|, floor);
    the floor keeps near-zero gradients from amplifying finite-difference noise.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in parameters], allow_unused=True)
    worst = 0.0
    for (name, param), grad in zip(parameters, grads):
        analytic = torch.zeros_like(param) if grad is None else grad
        flat = param.detach().reshape(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + eps
            plus = float(loss_fn())
            with torch.no_grad():
                flat[i] = original - eps
            minus = float(loss_fn())
            with torch.no_grad():
                flat[i] = original
            fd = (plus - minus) / (2 * eps)
            an = float(analytic.reshape(-1)[i])
            err = abs(fd - an) / max(abs(fd), abs(an), denom_floor)
            if err > worst:
                worst = err
            assert err < rel_tol, f"{name}[{i}]: analytic {an:.3e} vs fd {fd:.3e} (rel {err:.2e})"
    return worst


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def coverage_corpus():
    """96 images covering every cell-pattern type the world can produce."""
    from stylesem import world

    sem = world.SemanticFactors(1, 1, 0)  # a square has interior and edge cells
    return [
        world.render(world.FactorSpec(world.style_from_index(i), sem), 0)
        for i in range(world.N_STYLE_COMBOS)
    ]
