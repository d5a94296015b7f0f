"""Finite-difference gradient checking in double precision.

The function under test is re-evaluated on float64 copies of its inputs. The
scalar objective is ``sum(f(x) * R)`` for a fixed random projection ``R`` so
that every output coordinate contributes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    rel_errors: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def checked(self) -> int:
        return int(self.all_errors.size)

    @property
    def skipped_total(self) -> int:
        return sum(self.skipped.values())

    @property
    def all_errors(self) -> np.ndarray:
        if not self.rel_errors:
            return np.zeros(0)
        return np.concatenate([e.reshape(-1) for e in self.rel_errors.values()])

    @property
    def max_error(self) -> float:
        errs = self.all_errors
        return float(errs.max()) if errs.size else 0.0

    def fraction_below(self, tol: float) -> float:
        errs = self.all_errors
        return float((errs < tol).mean()) if errs.size else 1.0

    def passed(self, tol95: float = 1e-4, tol_max: float = 1e-3) -> bool:
        return self.fraction_below(tol95) >= 0.95 and self.max_error < tol_max


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(
    fn: Callable[[dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    *,
    step: float = 1e-4,
    max_coords: int | None = 64,
    seed: int = 0,
    kink_signature: Callable[[dict[str, Tensor]], np.ndarray] | None = None,
) -> GradCheckResult:
    """Compare autograd gradients of ``fn`` with central differences.

    ``fn`` receives float64 tensors keyed like ``inputs``. At most
    ``max_coords`` randomly chosen coordinates per input are perturbed.

    ``kink_signature`` maps inputs to something like the on/off pattern of
    every ReLU. A coordinate whose +-step evaluations change that pattern
    straddles a non-differentiable point, where a central difference is not
    an estimate of the gradient; such coordinates are counted in
    ``skipped`` instead of being scored.
    """
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in arrays.items()}
    out = fn(leaves)
    proj = rng.standard_normal(out.shape)

    def objective(tensors) -> float:
        return float((fn(tensors).data * proj).sum())

    (out * Tensor(proj, dtype=np.float64)).sum().backward()
    reference = None
    if kink_signature is not None:
        reference = kink_signature({k: Tensor(v.copy(), dtype=np.float64) for k, v in arrays.items()})
    result = GradCheckResult()
    for name, base in arrays.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        flat_idx = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            flat_idx = rng.choice(base.size, size=max_coords, replace=False)
        numeric = np.empty(len(flat_idx))
        keep = np.ones(len(flat_idx), dtype=bool)
        for j, idx in enumerate(flat_idx):
            coord = np.unravel_index(idx, base.shape)
            vals = []
            for sign in (1.0, -1.0):
                shifted = {k: Tensor(v.copy(), dtype=np.float64) for k, v in arrays.items()}
                shifted[name].data[coord] += sign * step
                vals.append(objective(shifted))
                if kink_signature is not None and not np.array_equal(kink_signature(shifted), reference):
                    keep[j] = False
            numeric[j] = (vals[0] - vals[1]) / (2 * step)
        errors = relative_error(analytic.reshape(-1)[flat_idx], numeric)
        result.rel_errors[name] = errors[keep]
        result.skipped[name] = int((~keep).sum())
    return result
