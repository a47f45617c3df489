"""Explicit integrators for the neural-memory ODE

    dy/dt = -y + f(y + g(x(t)))

States may be Python floats, numpy arrays, or :class:`~nmseg.tensor_ops.Tensor`
objects; everything here only needs ``+`` and scalar ``*``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConvergenceError, IntegrationError, ShapeError


class Method(str, enum.Enum):
    EULER = "euler"
    HEUN = "heun"
    LEAPFROG = "leapfrog"


def _identity(v):
    return v


@dataclass(frozen=True)
class NmOdeSystem:
    """Vector field pieces: state map ``f_map``, input map ``g_map`` and
    the external input ``input_schedule(n)`` seen at step ``n``."""

    f_map: Callable[[Any], Any]
    g_map: Callable[[Any], Any] = _identity
    input_schedule: Callable[[int], Any] = lambda n: 0.0

    @classmethod
    def constant(cls, f_map, x=0.0, g_map=_identity) -> "NmOdeSystem":
        return cls(f_map=f_map, g_map=g_map, input_schedule=lambda n: x)

    @classmethod
    def from_sequence(cls, f_map, inputs: Sequence, g_map=_identity) -> "NmOdeSystem":
        """Schedule that returns ``inputs[n]`` and fails past the end."""
        inputs = list(inputs)

        def schedule(n):
            if not 0 <= n < len(inputs):
                raise IndexError(f"no external input for step {n} (have {len(inputs)})")
            return inputs[n]

        return cls(f_map=f_map, g_map=g_map, input_schedule=schedule)


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.EULER
    delta: float = 0.1
    n_steps: int = 10
    # Heun needs the input one step ahead; on the last step it falls back
    # to Euler when this is set (the decoder's layer-1 rule).
    final_euler: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")


@dataclass
class Trajectory:
    states: list
    times: list[float]

    @property
    def final(self):
        return self.states[-1]

    def __len__(self):
        return len(self.states)


def _shape(v):
    return np.shape(v)


def nmode_rhs(y, x, sys: NmOdeSystem):
    """Return ``-y + f(y + g(x))``."""
    gx = sys.g_map(x)
    if _shape(gx) != _shape(y) and _shape(gx) != ():
        raise ShapeError(f"state shape {_shape(y)} does not match g(x) shape {_shape(gx)}")
    fy = sys.f_map(y + gx)
    if _shape(fy) != _shape(y):
        raise ShapeError(f"f_map changed the state shape: {_shape(y)} -> {_shape(fy)}")
    return -y + fy


def euler_step(y, rhs, delta: float):
    if _shape(rhs) != _shape(y):
        raise ShapeError(f"state shape {_shape(y)} does not match derivative shape {_shape(rhs)}")
    return y + delta * rhs


def heun_step(y, x_n, x_np1, delta: float, sys: NmOdeSystem):
    """Predictor-corrector step; the corrector sees the input ``x_np1``."""
    slope = nmode_rhs(y, x_n, sys)
    predicted = y + delta * slope
    slope_pred = nmode_rhs(predicted, x_np1, sys)
    return y + (0.5 * delta) * (slope + slope_pred)


def leapfrog_step(y_prev, y_curr, x_n, delta: float, sys: NmOdeSystem):
    """Two-step rule ``y_{n+1} = y_{n-1} + 2 delta F(y_n)``."""
    if _shape(y_prev) != _shape(y_curr):
        raise ShapeError(f"previous state {_shape(y_prev)} and current state {_shape(y_curr)} differ")
    return y_prev + (2.0 * delta) * nmode_rhs(y_curr, x_n, sys)


def integrate(sys: NmOdeSystem, y0, cfg: SolverConfig) -> Trajectory:
    """Integrate from ``y0`` for ``cfg.n_steps`` steps of size ``cfg.delta``.

    Leapfrog bootstraps its first step with Euler.
    """
    states = [y0]
    times = [0.0]
    prev = None
    y = y0
    for n in range(cfg.n_steps):
        try:
            x_n = sys.input_schedule(n)
            if cfg.method is Method.EULER or (cfg.method is Method.LEAPFROG and prev is None):
                new = euler_step(y, nmode_rhs(y, x_n, sys), cfg.delta)
            elif cfg.method is Method.HEUN:
                if cfg.final_euler and n == cfg.n_steps - 1:
                    new = euler_step(y, nmode_rhs(y, x_n, sys), cfg.delta)
                else:
                    new = heun_step(y, x_n, sys.input_schedule(n + 1), cfg.delta, sys)
            else:
                new = leapfrog_step(prev, y, x_n, cfg.delta, sys)
        except Exception as exc:
            raise IntegrationError(n, exc) from exc
        prev, y = y, new
        states.append(y)
        times.append((n + 1) * cfg.delta)
    return Trajectory(states, times)


def find_equilibrium(x, sys: NmOdeSystem, tol: float = 1e-10, max_iter: int = 10_000):
    """Fixed point of ``y = f(y + g(x))`` by plain iteration from zero.

    Converges whenever ``f`` is a contraction (e.g. the logistic sigmoid,
    whose slope never exceeds 1/4).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    gx = sys.g_map(x)
    y = np.zeros_like(np.asarray(gx, dtype=float)) if np.ndim(gx) else 0.0
    residual = math.inf
    for _ in range(max_iter):
        new = sys.f_map(y + gx)
        residual = float(np.max(np.abs(np.asarray(new) - np.asarray(y))))
        y = new
        if residual <= tol:
            # one more application so the reported residual is of the returned point
            check = float(np.max(np.abs(np.asarray(y) - np.asarray(sys.f_map(y + gx)))))
            if check <= tol:
                return y
            residual = check
    raise ConvergenceError(f"fixed-point iteration did not converge in {max_iter} iterations", residual)


def error_at_horizon(sys, y0, method, horizon: float, delta: float, reference) -> float:
    n = round(horizon / delta)
    if not math.isclose(n * delta, horizon, rel_tol=1e-9):
        raise ValueError(f"step {delta} does not divide horizon {horizon}")
    traj = integrate(sys, y0, SolverConfig(method=method, delta=delta, n_steps=n))
    return float(np.max(np.abs(np.asarray(traj.final) - np.asarray(reference(horizon)))))


def estimate_order(sys, y0, method, horizon: float, deltas: Sequence[float], reference) -> float:
    """Least-squares slope of log(error) against log(delta)."""
    if len(deltas) < 3:
        raise ValueError(f"need at least 3 step sizes, got {len(deltas)}")
    errors = [error_at_horizon(sys, y0, method, horizon, d, reference) for d in deltas]
    slope, _ = np.polyfit(np.log(deltas), np.log(errors), 1)
    return float(slope)


def linear_problem(a: float = 0.5, x: float = 1.0, y0: float = 0.0):
    """``f(z) = a z`` with constant input ``x``; returns ``(sys, y0, exact)``.

    The field is ``-(1 - a) y + a x`` so the solution relaxes
    exponentially to ``a x / (1 - a)``.
    """
    if a == 1.0:
        raise ValueError("a = 1 has no equilibrium")
    k, star = 1.0 - a, a * x / (1.0 - a)
    sys = NmOdeSystem.constant(lambda z: a * z, x)
    return sys, y0, lambda t: star + (y0 - star) * math.exp(-k * t)
