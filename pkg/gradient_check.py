"""
Finite-difference gradient verification for float64 modules.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)


@dataclass
class GradientCheckReport:
    max_rel_error: float
    coordinates: int
    worst: Tuple[str, int] = ("", -1)
    errors: List[float] = field(default_factory=list)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def randomize_parameters(module: nn.Module, seed: int, scale: float = 0.1) -> nn.Module:
    """Overwrite every parameter, zero-initialized ones included, with seeded N(0, scale²)"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, param in sorted(module.named_parameters(), key=lambda item: item[0]):
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * scale)
    return module


def finite_difference_check(module: nn.Module, loss_fn: Callable[[], torch.Tensor], n_coords: int = 100,
                            step: float = 1e-6, seed: int = 0, floor: float = 1e-6) -> GradientCheckReport:
    """
    Compare autograd against central differences

    Parameters:
    module: Module whose parameters are checked (all float64)
    loss_fn: Closure recomputing a scalar loss from the module's current parameters
    n_coords: Number of sampled coordinates, round-robin over parameter tensors
    step: Central-difference half-width
    seed: Seed for coordinate sampling
    floor: Denominator floor of the relative error

    Returns:
    GradientCheckReport with the maximum relative error
    """
    params = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    if not params:
        raise ValueError("module has no trainable parameters to check")
    for name, p in params:
        if p.dtype != torch.float64:
            raise ValueError(f"gradient checks need float64 parameters; {name} is {p.dtype}")

    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params}

    rng = np.random.default_rng(seed)
    errors = []
    worst = ("", -1)
    worst_error = 0.0
    with torch.no_grad():
        for k in range(n_coords):
            name, p = params[k % len(params)]
            index = int(rng.integers(p.numel()))
            flat = p.view(-1)
            original = flat[index].item()

            flat[index] = original + step
            plus = loss_fn().item()
            flat[index] = original - step
            minus = loss_fn().item()
            flat[index] = original

            numeric = (plus - minus) / (2.0 * step)
            exact = analytic[name].view(-1)[index].item()
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            errors.append(rel)
            if rel >= worst_error:
                worst_error, worst = rel, (name, index)

    report = GradientCheckReport(max_rel_error=max(errors), coordinates=len(errors), worst=worst, errors=errors)
    logger.debug(f"gradient check: {report.coordinates} coords, max rel error {report.max_rel_error:.3e} at {worst}")
    return report
