"""The fixed feedforward nonlinearity applied after attention.

A link function here is a piecewise quadratic on [-1, 1].  Each piece covers a
half-open interval ``[lo, hi)``; the last piece is closed on the right.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class Piece:
    lo: float
    hi: float
    a: float  # coefficient of t**2
    b: float
    c: float

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "a": self.a, "b": self.b, "c": self.c}


@dataclass(frozen=True)
class LinkFunction:
    pieces: tuple[Piece, ...]

    def __post_init__(self):
        ps = self.pieces
        if not ps or ps[0].lo != -1.0 or ps[-1].hi != 1.0:
            raise ValueError("pieces must cover [-1, 1]")
        for p, q in zip(ps, ps[1:]):
            if p.hi != q.lo:
                raise ValueError("pieces must be contiguous")
        object.__setattr__(self, "_bounds", np.array([p.hi for p in ps[:-1]]))
        object.__setattr__(self, "_coef", np.array([[p.a, p.b, p.c] for p in ps]))

    def _select(self, t: np.ndarray) -> np.ndarray:
        # side="right": a value equal to a junction belongs to the piece on its right
        return np.searchsorted(self._bounds, t, side="right")

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(np.abs(t) > 1.0 + _RANGE_TOL) or np.any(np.isnan(t)):
            raise ValueError("link function argument outside [-1, 1]")
        return np.clip(t, -1.0, 1.0)

    def __call__(self, t):
        return phi_eval(self, t)

    def prime(self, t):
        return phi_prime(self, t)

    def to_json(self) -> list[dict]:
        return [p.to_json() for p in self.pieces]

    @classmethod
    def from_json(cls, spec) -> "LinkFunction":
        if isinstance(spec, str):
            spec = json.loads(spec)
        return cls(tuple(Piece(float(p["lo"]), float(p["hi"]), float(p["a"]), float(p["b"]), float(p["c"])) for p in spec))


DEFAULT_LINK = LinkFunction(
    (
        Piece(-1.0, -0.5, -4.0, -8.0, -3.0),
        Piece(-0.5, 0.5, 4.0, 0.0, -1.0),
        Piece(0.5, 1.0, -4.0, 8.0, -3.0),
    )
)


def phi_eval(f: LinkFunction, t):
    t = f._check(t)
    a, b, c = np.moveaxis(f._coef[f._select(t)], -1, 0)
    out = (a * t + b) * t + c
    return float(out) if out.ndim == 0 else out


def phi_prime(f: LinkFunction, t):
    t = f._check(t)
    a, b, _ = np.moveaxis(f._coef[f._select(t)], -1, 0)
    out = 2.0 * a * t + b
    return float(out) if out.ndim == 0 else out


def phi_and_prime(f: LinkFunction, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and derivative in one piece lookup (training hot path)."""
    t = f._check(t)
    a, b, c = np.moveaxis(f._coef[f._select(t)], -1, 0)
    return (a * t + b) * t + c, 2.0 * a * t + b


def link_constants(f: LinkFunction) -> tuple[float, float, float]:
    """``(c, supDeriv, g)``: curvature at 0, sup |phi'|, and the gradient-growth exponent."""
    centre = f.pieces[int(f._select(np.array(0.0)))]
    c = centre.a
    # phi' is affine on each piece, so |phi'| peaks at a piece endpoint
    sup = max(max(abs(2 * p.a * p.lo + p.b), abs(2 * p.a * p.hi + p.b)) for p in f.pieces)
    return c, sup, math.log2(sup) + 0.5


def edge_curvature(f: LinkFunction) -> float:
    """Constant ``c'`` in ``phi'(t) = 2c'(1 - t) + ...`` near ``t = 1``."""
    last = f.pieces[-1]
    # phi'(t) = 2at + b with phi'(1) = 0  =>  phi'(t) = -2a(1 - t)
    return -last.a


def verify_invariants(f: LinkFunction, tol: float = 1e-12, grid: int = 2001) -> list[str]:
    """Return a list of violated properties (empty when all hold)."""
    problems = []
    if abs(phi_eval(f, 0.0) + 1) > tol:
        problems.append("phi(0) != -1")
    if abs(phi_eval(f, 1.0) - 1) > tol or abs(phi_eval(f, -1.0) - 1) > tol:
        problems.append("phi(+-1) != 1")
    for t in (0.0, 1.0, -1.0):
        if abs(phi_prime(f, t)) > tol:
            problems.append(f"phi'({t}) != 0")
    ts = np.linspace(-1, 1, grid)
    vals = phi_eval(f, ts)
    if np.max(np.abs(vals - phi_eval(f, -ts))) > tol:
        problems.append("phi not symmetric")
    if vals.min() < -1 - tol or vals.max() > 1 + tol:
        problems.append("phi leaves [-1, 1]")
    for p, q in zip(f.pieces, f.pieces[1:]):
        x = p.hi
        left_v = (p.a * x + p.b) * x + p.c
        right_v = (q.a * x + q.b) * x + q.c
        if abs(left_v - right_v) > tol:
            problems.append(f"phi discontinuous at {x}")
        if abs((2 * p.a * x + p.b) - (2 * q.a * x + q.b)) > tol:
            problems.append(f"phi' discontinuous at {x}")
    return problems
