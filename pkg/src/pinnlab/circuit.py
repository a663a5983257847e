"""Ground-truth RC filter definitions: analytic step response, closed-form
poles for one and two stages, and a state-space eigenvalue oracle for
general ladders."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class CircuitError(ValueError):
    pass


@dataclass(frozen=True)
class SingleStageSpec:
    R: float  # ohms
    C: float  # farads

    def __post_init__(self):
        if not (self.R > 0 and self.C > 0):
            raise CircuitError("R and C must be positive")


@dataclass(frozen=True)
class TwoStageSpec:
    R1: float
    C1: float
    R2: float
    C2: float

    def __post_init__(self):
        if not all(v > 0 for v in (self.R1, self.C1, self.R2, self.C2)):
            raise CircuitError("all resistances and capacitances must be positive")


@dataclass(frozen=True)
class LadderSpec:
    stages: tuple  # ((R, C), ...) ordered from the input

    def __post_init__(self):
        stages = tuple((float(r), float(c)) for r, c in self.stages)
        if len(stages) < 1:
            raise CircuitError("ladder must have at least one stage")
        if not all(r > 0 and c > 0 for r, c in stages):
            raise CircuitError("all resistances and capacitances must be positive")
        object.__setattr__(self, "stages", stages)

    @property
    def n(self) -> int:
        return len(self.stages)


CircuitSpec = SingleStageSpec | TwoStageSpec | LadderSpec


@dataclass(frozen=True)
class Poles:
    """Real decay rates, sorted descending (closest to zero first)."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if any(v >= 0 for v in vals):
            raise CircuitError("poles of a passive RC ladder must be strictly negative")
        if list(vals) != sorted(vals, reverse=True):
            raise CircuitError("poles must be sorted descending")
        object.__setattr__(self, "values", vals)


def as_ladder(spec: CircuitSpec) -> LadderSpec:
    if isinstance(spec, SingleStageSpec):
        return LadderSpec(((spec.R, spec.C),))
    if isinstance(spec, TwoStageSpec):
        return LadderSpec(((spec.R1, spec.C1), (spec.R2, spec.C2)))
    if isinstance(spec, LadderSpec):
        return spec
    raise CircuitError(f"not a circuit spec: {spec!r}")


def pole_single(spec: SingleStageSpec) -> float:
    """-1/(RC); the product is formed first so (kR, C/k) round-trips exactly."""
    return -1.0 / (spec.R * spec.C)


def poles_two(spec: TwoStageSpec) -> tuple[float, float]:
    """Roots of R1C1R2C2 p^2 + (R2C2 + R1(C1+C2)) p + 1 = 0, descending.

    Uses the cancellation-safe quadratic form q = -(b + sign(b) sqrt(disc))/2
    with roots q/a and c/q; the pole magnitudes differ by more than 10x in
    typical configurations, so the naive formula would lose digits.
    """
    a = (spec.R1 * spec.C1) * (spec.R2 * spec.C2)
    b = spec.R2 * spec.C2 + spec.R1 * (spec.C1 + spec.C2)
    c = 1.0
    disc = b * b - 4.0 * a * c
    if disc <= 0.0:
        raise CircuitError("discriminant not positive; poles would not be real/distinct")
    q = -0.5 * (b + math.sqrt(disc))  # b > 0 for positive parts
    p_far = q / a
    p_near = c / q
    return (p_near, p_far)


def state_matrix(spec: CircuitSpec) -> np.ndarray:
    """A of dv/dt = A v + b v_in from per-node current balance."""
    ladder = as_ladder(spec)
    n = ladder.n
    A = np.zeros((n, n))
    for i, (r_i, c_i) in enumerate(ladder.stages):
        A[i, i] = -1.0 / (r_i * c_i)
        if i > 0:
            A[i, i - 1] = 1.0 / (r_i * c_i)
        if i < n - 1:
            r_next = ladder.stages[i + 1][0]
            A[i, i] -= 1.0 / (r_next * c_i)
            A[i, i + 1] = 1.0 / (r_next * c_i)
    return A


def input_vector(spec: CircuitSpec) -> np.ndarray:
    """b of dv/dt = A v + b v_in (input couples through the first resistor)."""
    ladder = as_ladder(spec)
    b = np.zeros(ladder.n)
    b[0] = 1.0 / (ladder.stages[0][0] * ladder.stages[0][1])
    return b


def _eig_2x2(H: np.ndarray) -> list[float]:
    tr = H[0, 0] + H[1, 1]
    det = H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
    disc = tr * tr - 4.0 * det
    if disc < 0.0:
        raise CircuitError("complex eigenvalues in a trailing 2x2 block")
    s = math.sqrt(disc)
    lam = 0.5 * (tr - s) if tr < 0 else 0.5 * (tr + s)
    if lam == 0.0:
        return [0.5 * (tr + s), 0.5 * (tr - s)]
    return [lam, det / lam]


def _qr_eigenvalues(A: np.ndarray, tol_rel: float, max_iter: int) -> list[float]:
    n = A.shape[0]
    if n == 1:
        return [float(A[0, 0])]
    if n == 2:
        return _eig_2x2(A)
    H = A.copy()
    scale = np.max(np.abs(H)) or 1.0
    tol = tol_rel * scale
    for _ in range(max_iter):
        # deflate: split at negligible subdiagonal entries
        for k in range(n - 1):
            if abs(H[k + 1, k]) <= tol:
                return _qr_eigenvalues(H[: k + 1, : k + 1], tol_rel, max_iter) + _qr_eigenvalues(
                    H[k + 1 :, k + 1 :], tol_rel, max_iter
                )
        Q, R = np.linalg.qr(H)
        H = R @ Q
    raise CircuitError(f"QR iteration did not converge within {max_iter} sweeps")


def poles_eig(spec: CircuitSpec, tol_rel: float = 1e-12, max_iter: int = 10_000) -> Poles:
    """Eigenvalues of the state matrix by unshifted QR iteration (n <= 8)."""
    ladder = as_ladder(spec)
    if ladder.n > 8:
        raise CircuitError("eigenvalue oracle is capped at 8 stages")
    vals = _qr_eigenvalues(state_matrix(ladder), tol_rel, max_iter)
    return Poles(tuple(sorted(vals, reverse=True)))


def analytic_step_single(spec: SingleStageSpec, V: float, t: float) -> float:
    """Charging response V (1 - exp(t p)) of a single stage from rest."""
    if t < 0:
        raise CircuitError("time must be non-negative")
    return V * (1.0 - math.exp(-t / (spec.R * spec.C)))


# -- JSON wiring (run-config serialization) ---------------------------------


def circuit_to_dict(spec: CircuitSpec) -> dict:
    if isinstance(spec, SingleStageSpec):
        return {"kind": "single", "R": [spec.R], "C": [spec.C]}
    if isinstance(spec, TwoStageSpec):
        return {"kind": "two_stage", "R": [spec.R1, spec.R2], "C": [spec.C1, spec.C2]}
    ladder = as_ladder(spec)
    return {
        "kind": "ladder",
        "R": [r for r, _ in ladder.stages],
        "C": [c for _, c in ladder.stages],
    }


def circuit_from_dict(d: dict) -> CircuitSpec:
    try:
        kind = d["kind"]
        R = [float(x) for x in d["R"]]
        C = [float(x) for x in d["C"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CircuitError(f"malformed circuit spec: {exc}") from exc
    if len(R) != len(C):
        raise CircuitError("R and C arrays must have equal length")
    if kind == "single":
        if len(R) != 1:
            raise CircuitError("single-stage circuit takes exactly one R/C pair")
        return SingleStageSpec(R[0], C[0])
    if kind == "two_stage":
        if len(R) != 2:
            raise CircuitError("two-stage circuit takes exactly two R/C pairs")
        return TwoStageSpec(R[0], C[0], R[1], C[1])
    if kind == "ladder":
        return LadderSpec(tuple(zip(R, C)))
    raise CircuitError(f"unknown circuit kind {kind!r}")
