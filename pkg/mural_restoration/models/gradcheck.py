"""Central finite-difference check of autograd gradients.

Run in double precision: `module.double()` before calling.

"""
import logging
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

__all__ = ['TensorCheck', 'check_gradients']

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TensorCheck:
    """Worst agreement found for one parameter tensor."""
    name: str
    entries: int
    max_relative_error: float

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def check_gradients(loss_fn: Callable[[], torch.Tensor],
                    module: nn.Module,
                    step: float = 1e-4,
                    per_tensor: int = 4,
                    floor: float = 1e-3,
                    generator: 'torch.Generator|None' = None,
                    ) -> 'list[TensorCheck]':
    """Compares autograd against (f(p+h) - f(p-h)) / 2h per parameter entry.

    The relative error of an entry is `|a - n| / max(|a|, |n|, floor)`; the
    floor keeps vanishing gradients from reporting noise as error.

    Args:
        loss_fn: Recomputes the scalar loss from the current parameters.
        module: Owner of the parameters to check.
        step: Finite-difference step.
        per_tensor: Entries sampled from each tensor (all if smaller).
        floor: Absolute floor of the denominator.
        generator: Chooses the sampled entries.

    Returns:
        One `TensorCheck` per parameter tensor.

    """
    module.zero_grad()
    loss_fn().backward()
    analytic = {name: p.grad.detach().clone() if p.grad is not None
                else torch.zeros_like(p)
                for name, p in module.named_parameters()}
    results = []
    for name, param in module.named_parameters():
        flat = param.data.view(-1)
        if flat.numel() <= per_tensor:
            indices = range(flat.numel())
        else:
            indices = torch.randperm(flat.numel(),
                                     generator=generator)[:per_tensor].tolist()
        worst = 0.0
        for index in indices:
            original = float(flat[index])
            with torch.no_grad():
                flat[index] = original + step
                upper = float(loss_fn())
                flat[index] = original - step
                lower = float(loss_fn())
                flat[index] = original
            numeric = (upper - lower) / (2 * step)
            exact = float(analytic[name].view(-1)[index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric),
                                               floor)
            worst = max(worst, error)
        results.append(TensorCheck(name, len(indices), worst))
        _log.debug('Gradient check %s: %.3g', name, worst)
    return results
