"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from dpnet.tensor import Tensor


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> List[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def merge(self, other: "GradCheckReport", prefix: str = "") -> None:
        for k, v in other.max_rel_error.items():
            self.max_rel_error[prefix + k] = v
            self.checked[prefix + k] = other.checked[k]


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-5,
    step: Union[float, Sequence[float]] = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from ``params`` on every call. With
    ``max_entries`` set, at most that many randomly chosen entries of each
    parameter are perturbed. A sequence of steps scores each entry against
    its best-matching difference quotient; truncation and kink-crossing errors
    grow with the step while rounding noise shrinks, so a correct gradient
    agrees at one of them.
    """
    steps = (step,) if isinstance(step, (int, float)) else tuple(step)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        g_ad = analytic[name].reshape(-1)[idx]
        err = np.full(len(idx), np.inf)
        for h in steps:
            fd = np.empty(len(idx))
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
                flat[i] = orig
                fd[n] = (up - down) / (2 * h)
            err = np.minimum(err, relative_error(g_ad, fd))
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.checked[name] = int(len(idx))
    return report
