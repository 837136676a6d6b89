"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, as_constants


@dataclass
class CoordCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    checked: list[CoordCheck]
    flagged: list[tuple[str, tuple[int, ...], str]] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checked), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.flagged and self.max_rel_error <= self.tol

    def worst(self, k: int = 5) -> list[CoordCheck]:
        return sorted(self.checked, key=lambda c: -c.rel_error)[:k]

    def tensors_covered(self) -> set[str]:
        return {c.name for c in self.checked}

    def summary(self) -> str:
        lines = [f"gradcheck: {'PASS' if self.passed else 'FAIL'}  "
                 f"checked={len(self.checked)}  max_rel_error={self.max_rel_error:.3e}  tol={self.tol:g}"]
        for c in self.worst():
            lines.append(f"  {c.name}{list(c.index)}  analytic={c.analytic:.6e}  "
                         f"numeric={c.numeric:.6e}  rel={c.rel_error:.2e}")
        for name, idx, why in self.flagged:
            lines.append(f"  FLAGGED {name}{list(idx)}: {why}")
        return "\n".join(lines)


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor turns the comparison absolute
    for gradients too small for a finite difference to resolve relatively."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def _sample_coords(params: dict[str, np.ndarray], n_samples: int,
                   rng: np.random.Generator) -> list[tuple[str, tuple[int, ...]]]:
    names = list(params)
    coords: list[tuple[str, tuple[int, ...]]] = []
    # at least one coordinate per tensor, the rest spread proportionally to sqrt(size)
    per = {name: 1 for name in names}
    extra = max(0, n_samples - len(names))
    weights = np.array([np.sqrt(params[n].size) for n in names], dtype=np.float64)
    if extra and weights.sum() > 0:
        alloc = np.floor(extra * weights / weights.sum()).astype(int)
        for name, a in zip(names, alloc):
            per[name] += int(a)
        for i in range(extra - int(alloc.sum())):
            per[names[i % len(names)]] += 1
    for name in names:
        size = params[name].size
        k = min(per[name], size)
        flat = rng.choice(size, size=k, replace=False)
        coords.extend((name, tuple(int(v) for v in np.unravel_index(f, params[name].shape))) for f in flat)
    return coords


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               h: float = 1e-5, tol: float = 1e-4, n_samples: int = 200, seed: int = 0,
               floor: float = 1e-6, tape_factory: Callable[[], Tape] = Tape) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``f`` receives a dict of tensors (tracked or constant) and must return a
    scalar Tensor. Params must be float64.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 params; {name} is {arr.dtype}")

    tape = tape_factory()
    tracked = tape.watch_all(params)
    loss = f(tracked)
    tape.backward(loss)
    analytic = {name: t.grad for name, t in tracked.items()}

    work = {name: arr.copy() for name, arr in params.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(checked=[], tol=tol)

    def evaluate() -> float:
        return f(as_constants(work)).item()

    for name, idx in _sample_coords(params, n_samples, rng):
        orig = work[name][idx]
        try:
            work[name][idx] = orig + h
            fp = evaluate()
            work[name][idx] = orig - h
            fm = evaluate()
        except NonFiniteError as exc:
            report.flagged.append((name, idx, f"non-finite output of op '{exc.op}'"))
            continue
        finally:
            work[name][idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            report.flagged.append((name, idx, "non-finite loss"))
            continue
        numeric = (fp - fm) / (2 * h)
        a = float(analytic[name][idx])
        report.checked.append(CoordCheck(name, idx, a, numeric, relative_error(a, numeric, floor)))
    return report
