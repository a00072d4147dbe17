"""Finite-difference gradient oracle and analytic-vs-numeric comparison."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Union

import numpy as np

from ..exceptions import ParameterError
from .tensor import Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value).reshape(-1)[0])


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5,
                           indices: Optional[Sequence[int]] = None) -> Tensor:
    """Central-difference estimate of df/dx.

    ``f`` is evaluated with ``x.data`` perturbed in place, one flat element at a time.
    When ``indices`` is given only those flat positions are estimated; the rest stay 0.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        plus = _scalar(f(x))
        flat[i] = orig - eps
        minus = _scalar(f(x))
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * eps)
    return Tensor(out.reshape(x.shape))


GRAD_FLOOR = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    """Entry-wise |a - b| scaled by the larger of the two arrays' peak magnitudes.

    Scaling per array rather than per entry keeps tiny entries, where central
    differences carry ~1e-10 roundoff, from dominating.  ``floor`` bounds the
    scale from below so an all-zero gradient is compared in absolute terms.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return np.zeros(a.shape)
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()), floor)
    return np.abs(a - b) / scale


@dataclass
class GradReport:
    """Per-parameter worst relative error between backward() and finite differences."""

    rel_tol: float
    errors: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> Dict[str, bool]:
        return {name: err < self.rel_tol for name, err in self.errors.items()}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def merge(self, other: "GradReport", prefix: str = "") -> "GradReport":
        for name, err in other.errors.items():
            self.errors[prefix + name] = err
            self.checked[prefix + name] = other.checked.get(name, 0)
        return self

    def lines(self):
        for name, err in self.errors.items():
            status = "PASS" if err < self.rel_tol else "FAIL"
            yield f"{status} {name}: max rel err {err:.3e} over {self.checked.get(name, 0)} entries"


def grad_check(f: Callable[[], Tensor], params: Union[Mapping[str, Tensor], Sequence[Tensor]],
               eps: float = 1e-5, rel_tol: float = 1e-4,
               max_entries: Optional[int] = None) -> GradReport:
    """Compare backward() of the scalar ``f()`` with central differences for each parameter.

    ``f`` takes no arguments and must read the parameters it closes over, so in-place
    perturbation of ``param.data`` is visible to it.  With ``max_entries`` only the entries
    with the largest analytic gradient magnitude are probed (ties broken by position).
    """
    if not eps > 0 or not rel_tol > 0:
        raise ParameterError(f"eps and rel_tol must be > 0, got {eps}, {rel_tol}")
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}

    for p in params.values():
        p.grad = None
    f().backward()
    analytic = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    report = GradReport(rel_tol=rel_tol)
    for name, p in params.items():
        a = analytic[name].reshape(-1)
        if max_entries is None or max_entries >= a.size:
            idx = np.arange(a.size)
        else:
            idx = np.sort(np.argsort(-np.abs(a), kind="stable")[:max_entries])
        numeric = finite_difference_grad(lambda _x: f(), p, eps, indices=idx).data.reshape(-1)
        err = relative_error(a[idx], numeric[idx])
        report.errors[name] = float(err.max()) if err.size else 0.0
        report.checked[name] = int(idx.size)
    for p in params.values():
        p.grad = None
    return report
