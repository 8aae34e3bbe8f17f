"""Central finite-difference verification of recorded gradients.

`grad_check` runs one analytic backward pass, then sweeps every element of
every parameter with a symmetric perturbation. Everything is done in float64;
the relative error per element is |ga - gn| / max(1e-8, |ga| + |gn|).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import UsageError
from .tensor import Tensor, backward, no_grad, reset_tape


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    n_elements: int
    ok: bool
    note: str = ""

    def format(self, tolerance: float) -> str:
        status = "ok" if self.ok else "FAIL"
        line = (f"{self.name:<40s} max_rel_err={self.max_rel_err:.3e} "
                f"(n={self.n_elements}, tol={tolerance:.1e}) {status}")
        if self.note:
            line += f"  [{self.note}]"
        return line


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def format(self) -> str:
        return "\n".join(e.format(self.tolerance) for e in self.entries)


def _as_param_list(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        items = list(params.items())
    else:
        items = list(params)
    out = []
    for entry in items:
        if isinstance(entry, Tensor):
            out.append((entry.name or f"param{len(out)}", entry))
        else:
            name, tensor = entry
            out.append((str(name), tensor))
    return out


def grad_check(build: Callable[[], Tensor],
               params: Sequence[tuple[str, Tensor]] | Mapping[str, Tensor],
               step: float = 1e-4,
               tolerance: float = 1e-6) -> GradCheckReport:
    """Compare recorded gradients of `build()` against central differences.

    `build` must be a deterministic closure over `params` returning a scalar
    loss; it is re-evaluated ~2 * n_elements times under no_grad. Parameters
    must be float64 with requires_grad set.
    """
    plist = _as_param_list(params)
    for name, tensor in plist:
        if tensor.dtype != np.float64:
            raise UsageError(f"grad_check parameter {name!r} must be float64, got {tensor.dtype}")
        if not tensor.requires_grad:
            raise UsageError(f"grad_check parameter {name!r} must have requires_grad=True")

    report = GradCheckReport(tolerance=tolerance)

    reset_tape()
    for _, tensor in plist:
        tensor.zero_grad()
    loss = build()
    if loss.data.size != 1:
        raise UsageError(f"grad_check build() must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        for name, _ in plist:
            report.entries.append(GradCheckEntry(name, float("nan"), 0, False, "non-finite loss"))
        reset_tape()
        return report
    backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in plist}
    reset_tape()

    def eval_loss() -> float:
        with no_grad():
            return float(build().data.reshape(()))

    for name, tensor in plist:
        ga = analytic[name]
        gn = np.zeros_like(ga)
        flat = tensor.data.reshape(-1)
        gn_flat = gn.reshape(-1)
        bad = False
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = eval_loss()
            flat[i] = orig - step
            f_minus = eval_loss()
            flat[i] = orig
            gn_flat[i] = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(gn_flat[i]):
                bad = True
        if bad or not np.isfinite(ga).all():
            report.entries.append(GradCheckEntry(
                name, float("nan"), flat.size, False, "non-finite gradient"))
            continue
        rel = np.abs(ga - gn) / np.maximum(1e-8, np.abs(ga) + np.abs(gn))
        err = float(rel.max()) if rel.size else 0.0
        report.entries.append(GradCheckEntry(name, err, flat.size, err <= tolerance))
    return report
