"""Finite-difference gradient checking against a float64 shadow graph."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import Trace

# Pinned acceptance tolerances.
RTOL_FLOAT32 = 1e-3
RTOL_FLOAT64 = 1e-5
MIN_PASS_FRACTION = 0.99


@dataclass
class GradCheckResult:
    precision: str
    rtol: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    names: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.rel_errors)

    @property
    def pass_fraction(self):
        return float(np.mean(self.rel_errors <= self.rtol)) if self.n else 1.0

    @property
    def passed(self):
        return self.pass_fraction >= MIN_PASS_FRACTION

    def __str__(self):
        worst = float(self.rel_errors.max()) if self.n else 0.0
        return (
            f"{self.precision}: {self.pass_fraction:.2%} of {self.n} coords within {self.rtol:g} "
            f"(worst {worst:.2e})"
        )


def relative_error(analytic, numeric, floor):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _cast(tensors, modules, dtype):
    for t in tensors:
        t.data = t.data.astype(dtype)
        t.grad = None
    for m in modules:
        m.astype(dtype)


def gradcheck(
    fn,
    params,
    modules=(),
    constants=(),
    precision="float32",
    samples_per_tensor=16,
    rel_step=1e-3,
    floor=None,
    richardson=None,
    seed=0,
):
    """Compare analytic gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and returns a scalar loss built only from
    ``params`` (checked leaves), parameters of ``modules`` (also checked) and
    ``constants`` (cast, not checked); it must be deterministic. Numerical
    derivatives always come from a float64 re-evaluation of the same graph.
    ``precision="float32"`` takes the analytic gradient from the float32
    graph, ``"float64"`` from the shadow graph itself. Perturbation is
    ``rel_step * max(1, |theta|)``. With ``richardson`` (default on for
    float64) the central differences at ``h`` and ``h/2`` are combined as
    ``(4 D(h/2) - D(h)) / 3``, cancelling the O(h^2) truncation term.

    Everything is cast back to float32 before returning.
    """
    params = list(params)
    modules = list(modules)
    constants = list(constants)
    checked = list(params)
    names = [p.name or f"param{i}" for i, p in enumerate(params)]
    for j, m in enumerate(modules):
        for pname, p in m.named_parameters(f"m{j}."):
            if p.requires_grad:
                checked.append(p)
                names.append(pname)
    rng = np.random.default_rng(seed)
    rtol = RTOL_FLOAT32 if precision == "float32" else RTOL_FLOAT64
    if floor is None:
        floor = 1e-2 if precision == "float32" else 1e-4
    if richardson is None:
        richardson = precision != "float32"

    def central(flat, i, orig, h):
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        return (up - down) / (2 * h)

    def analytic_grads():
        for p in checked:
            p.grad = None
        with Trace() as tr:
            loss = fn()
        tr.backward(loss)
        return [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in checked]

    try:
        _cast(params + constants, modules, np.float32)
        if precision == "float32":
            grads = analytic_grads()
        _cast(params + constants, modules, np.float64)
        if precision != "float32":
            grads = analytic_grads()

        a_list, n_list, tags = [], [], []
        for p, g, name in zip(checked, grads, names):
            flat = p.data.reshape(-1)
            k = min(samples_per_tensor, flat.size)
            idx = rng.choice(flat.size, size=k, replace=False)
            for i in idx:
                orig = flat[i]
                h = rel_step * max(1.0, abs(orig))
                d = central(flat, i, orig, h)
                if richardson:
                    d = (4 * central(flat, i, orig, h / 2) - d) / 3
                a_list.append(g.reshape(-1)[i])
                n_list.append(d)
                tags.append(f"{name}[{i}]")
    finally:
        _cast(params + constants, modules, np.float32)

    a = np.array(a_list)
    n = np.array(n_list)
    return GradCheckResult(precision, rtol, relative_error(a, n, floor), a, n, tags)
