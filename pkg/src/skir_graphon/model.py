"""Pure model math for the controlled SKIR rumor game.

States are indexed S=0, K=1, I=2, R=3 everywhere in the package.  A
player's control is their communication rate; the natural rate is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np


class State(IntEnum):
    S = 0
    K = 1
    I = 2  # noqa: E741
    R = 3


STATES = (State.S, State.K, State.I, State.R)
N_STATES = 4


def _check_finite(name, *values):
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class GroupParams:
    """Coefficients shared by every player of one graphon block."""

    beta_s: float
    beta_k: float
    beta_i: float
    mu_k: float
    mu_i: float
    p0: tuple[float, float, float, float]
    gamma: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p0", tuple(float(x) for x in self.p0))
        for name in ("beta_s", "beta_k", "beta_i", "mu_k", "mu_i", "gamma", "c"):
            v = float(getattr(self, name))
            _check_finite(name, v)
            if v < 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")
            object.__setattr__(self, name, v)
        if self.mu_k <= 0 or self.mu_i <= 0:
            raise ValueError("forgetting rates mu_k, mu_i must be positive")
        if len(self.p0) != N_STATES:
            raise ValueError(f"p0 must have {N_STATES} entries, got {len(self.p0)}")
        _check_finite("p0", *self.p0)
        if any(x < 0 or x > 1 for x in self.p0):
            raise ValueError(f"p0 entries must lie in [0, 1], got {self.p0}")
        if abs(math.fsum(self.p0) - 1.0) > 1e-12:
            raise ValueError(f"p0 must sum to 1, got {math.fsum(self.p0)!r}")

    @property
    def beta_max(self):
        return max(self.beta_s, self.beta_k, self.beta_i)


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function on [0, T].

    ``values[j]`` holds on ``[breakpoints[j-1], breakpoints[j])``, so there
    is one more value than breakpoints.
    """

    values: tuple[float, ...]
    breakpoints: tuple[float, ...] = ()

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        bps = tuple(float(b) for b in self.breakpoints)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "breakpoints", bps)
        if len(vals) != len(bps) + 1:
            raise ValueError("need exactly one more value than breakpoints")
        _check_finite("values", *vals)
        _check_finite("breakpoints", *bps)
        if any(b1 >= b2 for b1, b2 in zip(bps, bps[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    @classmethod
    def constant(cls, value):
        return cls((value,))

    def __call__(self, t):
        idx = np.searchsorted(self.breakpoints, t, side="right")
        out = np.asarray(self.values)[idx]
        return float(out) if np.ndim(out) == 0 else out

    @property
    def sup_abs(self):
        return max(abs(v) for v in self.values)

    def snapped(self, dt):
        """Return a copy with every breakpoint moved to the nearest multiple of dt."""
        bps = [round(b / dt) * dt for b in self.breakpoints]
        vals = list(self.values)
        # drop breakpoints that collapse onto the previous one
        out_b, out_v = [], [vals[0]]
        for b, v in zip(bps, vals[1:]):
            if out_b and b <= out_b[-1]:
                out_v[-1] = v
                continue
            out_b.append(b)
            out_v.append(v)
        return PiecewiseConstant(tuple(out_v), tuple(out_b))


@dataclass(frozen=True)
class Policy:
    """Regulator levers: threshold communication rate and truth reward."""

    lambda_i: PiecewiseConstant
    lambda_k: PiecewiseConstant

    def __post_init__(self):
        for name in ("lambda_i", "lambda_k"):
            v = getattr(self, name)
            if not isinstance(v, PiecewiseConstant):
                object.__setattr__(self, name, PiecewiseConstant.constant(v))
        if min(self.lambda_k.values) < 0:
            raise ValueError("lambda_k must be nonnegative")

    @classmethod
    def constant(cls, lambda_i, lambda_k):
        return cls(PiecewiseConstant.constant(lambda_i), PiecewiseConstant.constant(lambda_k))

    @property
    def breakpoints(self):
        return tuple(sorted(set(self.lambda_i.breakpoints) | set(self.lambda_k.breakpoints)))

    @property
    def lambda_i_bar(self):
        return self.lambda_i.sup_abs

    @property
    def lambda_k_bar(self):
        return self.lambda_k.sup_abs

    def snapped(self, dt):
        return Policy(self.lambda_i.snapped(dt), self.lambda_k.snapped(dt))


@dataclass(frozen=True)
class BlockGraphon:
    """Piecewise-constant graphon: K blocks of widths ``masses``."""

    weights: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        m = np.array(self.masses, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weights must be a square matrix, got shape {w.shape}")
        if m.shape != (w.shape[0],):
            raise ValueError(f"masses must have length {w.shape[0]}, got shape {m.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m))):
            raise ValueError("graphon entries must be finite")
        if not np.array_equal(w, w.T):
            raise ValueError("weights must be symmetric")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")
        if np.any(m < 0):
            raise ValueError("masses must be nonnegative")
        if abs(math.fsum(m) - 1.0) > 1e-12:
            raise ValueError(f"masses must sum to 1, got {math.fsum(m)!r}")
        w.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "masses", m)

    @property
    def n_blocks(self):
        return self.masses.shape[0]

    def scaled(self, factor):
        return BlockGraphon(self.weights * factor, self.masses)


@dataclass(frozen=True)
class ControlBound:
    a_max: float = 5.0
    a_min: float = field(default=0.0, init=False)

    def __post_init__(self):
        _check_finite("a_max", self.a_max)
        if self.a_max < 1.0:
            raise ValueError(f"a_max must admit the natural rate 1, got {self.a_max}")


@dataclass(frozen=True)
class Aggregates:
    """Weighted communication mass felt by a player, in states K and I."""

    z_k: float
    z_i: float

    def __post_init__(self):
        _check_finite("aggregates", self.z_k, self.z_i)
        if self.z_k < 0 or self.z_i < 0:
            raise ValueError(f"aggregates must be nonnegative, got {self.z_k}, {self.z_i}")


def q_matrix(params: GroupParams, alpha: float, z: Aggregates, a_max: float | None = None):
    """Transition-rate matrix of one player using control ``alpha``.

    The R->S entry is the uncontrolled relapse rate ``gamma``.
    """
    _check_finite("alpha", alpha)
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    if a_max is not None and alpha > a_max:
        raise ValueError(f"alpha={alpha} exceeds a_max={a_max}")
    S, K, I, R = STATES
    q = np.zeros((N_STATES, N_STATES))
    q[S, K] = params.beta_s * alpha * z.z_k
    q[S, I] = params.beta_s * alpha * z.z_i
    q[K, I] = params.beta_k * alpha * z.z_i
    q[K, R] = params.mu_k
    q[I, K] = params.beta_i * alpha * z.z_k
    q[I, R] = params.mu_i
    q[R, S] = params.gamma
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


def running_cost(t, e, alpha, policy: Policy):
    e = State(e)
    cost = 0.5 * (1.0 - alpha) ** 2
    if e is State.I:
        cost += 0.5 * (policy.lambda_i(t) - alpha) ** 2
    elif e is State.K:
        cost -= policy.lambda_k(t)
    return cost


def terminal_cost(e, params: GroupParams):
    return params.c if State(e) is State.I else 0.0


def optimal_control_raw(t, e, z: Aggregates, u_row, params: GroupParams, policy: Policy):
    """Unconstrained minimizer of the Hamiltonian in state ``e``."""
    u = np.asarray(u_row, dtype=float)
    if u.shape != (N_STATES,) or not np.all(np.isfinite(u)):
        raise ValueError(f"u_row must be 4 finite values, got {u_row!r}")
    S, K, I, R = STATES
    e = State(e)
    if e is State.S:
        return 1.0 + params.beta_s * z.z_k * (u[S] - u[K]) + params.beta_s * z.z_i * (u[S] - u[I])
    if e is State.K:
        return 1.0 + params.beta_k * z.z_i * (u[K] - u[I])
    if e is State.I:
        return 0.5 * (policy.lambda_i(t) + 1.0 + params.beta_i * z.z_k * (u[I] - u[K]))
    return 1.0


def optimal_control(t, e, z: Aggregates, u_row, params: GroupParams, policy: Policy,
                    bound: ControlBound = ControlBound()):
    """Equilibrium feedback control, projected onto [0, a_max].

    The Hamiltonian is a convex quadratic in the control, so clipping the
    free minimizer gives the constrained argmin exactly.
    """
    raw = optimal_control_raw(t, e, z, u_row, params, policy)
    return min(max(raw, bound.a_min), bound.a_max)


def hamiltonian(t, e, z: Aggregates, u_row, alpha, params: GroupParams, policy: Policy):
    e = State(e)
    q = q_matrix(params, alpha, z)
    return float(q[e] @ np.asarray(u_row, dtype=float)) + running_cost(t, e, alpha, policy)


@dataclass(frozen=True)
class ExistenceCheck:
    value: float
    satisfied: bool
    beta_bar: float
    lambda_i_bar: float
    lambda_k_bar: float
    a_max: float
    horizon: float


def existence_bound(T, params: Sequence[GroupParams], policy: Policy, bound: ControlBound):
    """Left-hand side of the smallness condition guaranteeing an equilibrium.

    ``satisfied`` is True when the value is below 1.  The solver runs either
    way; this is reported as a diagnostic.
    """
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    beta_bar = max((p.beta_max for p in params), default=0.0)
    lam_i, lam_k, a = policy.lambda_i_bar, policy.lambda_k_bar, bound.a_max
    cost_bound = max(0.5 * (lam_i + a) ** 2, lam_k) + 0.5 * (1.0 + a) ** 2
    value = T * beta_bar * cost_bound
    return ExistenceCheck(value, value < 1.0, beta_bar, lam_i, lam_k, a, T)
