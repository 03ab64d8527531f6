"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, get_precision


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    @property
    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if p.max_rel_err >= self.tolerance]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} tolerance={self.tolerance:.0e}"


def relative_error(analytic, numeric, floor: float = 1e-7):
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    max_per_param: int | None = None,
    seed: int = 0,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f(params)`` with central differences.

    ``f`` receives a dict of leaf tensors named like ``params`` and must
    return a scalar tensor.  When ``max_per_param`` is set, a seeded random
    subset of that many elements per parameter is checked.
    """
    if get_precision() != "float64":
        raise RuntimeError("finite_difference_check requires float64 precision mode")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in work.items()}
    analytic = backward(f(leaves))

    def value() -> float:
        return f({k: Tensor(v) for k, v in work.items()}).item()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in work.items():
        grad = analytic.get(name)
        if grad is None:
            grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        gflat = np.asarray(grad, dtype=np.float64).reshape(-1)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * step)
        err = relative_error(gflat[idx], numeric, floor)
        w = int(np.argmax(err)) if err.size else 0
        report.params.append(
            ParamCheck(
                name=name,
                checked=int(idx.size),
                max_rel_err=float(err[w]) if err.size else 0.0,
                worst_index=tuple(int(v) for v in np.unravel_index(idx[w], arr.shape)) if err.size else (),
                analytic=float(gflat[idx[w]]) if err.size else 0.0,
                numeric=float(numeric[w]) if err.size else 0.0,
            )
        )
    return report
