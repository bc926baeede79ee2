"""Forward-backward fixed-point solver for block-graphon equilibria.

Arrays are laid out as ``(time, block, state)`` for flows and
``(time, block)`` for aggregates.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels as _k
from .model import (
    N_STATES,
    BlockGraphon,
    ControlBound,
    GroupParams,
    Policy,
    existence_bound,
)

log = logging.getLogger(__name__)

S, K, I, R = range(N_STATES)
INTEGRATORS = ("euler", "rk4")
RENORM_TRIGGER = 1e-12
RENORM_WARN = 1e-9


class SolverError(RuntimeError):
    """Raised when an integrator produces non-finite values."""


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def nodes(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def midpoints(self):
        t = self.nodes
        return 0.5 * (t[:-1] + t[1:])


@dataclass
class FlowGrid:
    p: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    z_k: np.ndarray
    z_i: np.ndarray

    @property
    def n_blocks(self):
        return self.p.shape[1]

    def copy(self):
        return FlowGrid(*(a.copy() for a in (self.p, self.u, self.phi, self.z_k, self.z_i)))


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_iters: int = 500
    damping: float = 0.5
    integrator: str = "rk4"
    workers: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError(f"damping must lie in [0, 1), got {self.damping}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}, got {self.integrator!r}")
        if self.max_iters < 1 or self.workers < 1:
            raise ValueError("max_iters and workers must be >= 1")


@dataclass
class EquilibriumResult:
    flows: FlowGrid
    iterations: int
    final_residual: float
    converged: bool
    existence_value: float
    existence_satisfied: bool
    residuals: list[float] = field(default_factory=list)


class Coefficients(NamedTuple):
    """Per-block model coefficients stacked into arrays of shape (K,)."""

    beta_s: np.ndarray
    beta_k: np.ndarray
    beta_i: np.ndarray
    mu_k: np.ndarray
    mu_i: np.ndarray
    gamma: np.ndarray
    c: np.ndarray
    p0: np.ndarray

    @classmethod
    def from_params(cls, params: Sequence[GroupParams]):
        if isinstance(params, cls):
            return params
        params = list(params)
        if not params:
            raise ValueError("need at least one block")
        cols = [np.array([getattr(p, name) for p in params], dtype=float)
                for name in cls._fields[:-1]]
        return cls(*cols, np.array([p.p0 for p in params], dtype=float))

    def take(self, idx):
        return Coefficients(*(a[idx] for a in self))

    def __len__(self):  # number of blocks, not number of fields
        return self.beta_s.shape[0]


# ---------------------------------------------------------------------------
# right-hand sides


def compute_aggregates(graphon: BlockGraphon, phi, p):
    """Mass-weighted graphon sums of communication activity in K and I.

    Works on a single time slice ``(K, 4)`` or a whole field ``(n+1, K, 4)``
    and returns ``(z_k, z_i)`` with the state axis dropped.  The reduction
    over source blocks runs in fixed block order.
    """
    phi = np.asarray(phi, dtype=float)
    p = np.asarray(p, dtype=float)
    nb = graphon.n_blocks
    if phi.shape != p.shape or phi.shape[-2:] != (nb, N_STATES):
        raise ValueError(f"expected matching (..., {nb}, 4) arrays, got {phi.shape} and {p.shape}")
    act = phi * p
    wm = graphon.weights * graphon.masses[None, :]
    z_k = np.zeros(act.shape[:-1])
    z_i = np.zeros(act.shape[:-1])
    for l in range(nb):
        z_k += wm[:, l] * act[..., l, None, K]
        z_i += wm[:, l] * act[..., l, None, I]
    return z_k, z_i


def generator_matrices(co: Coefficients, phi, z_k, z_i):
    """Q-matrices for each block, row ``e`` built with the control ``phi[..., e]``."""
    shape = np.shape(phi)[:-1]
    q = np.zeros(shape + (N_STATES, N_STATES))
    q[..., S, K] = co.beta_s * phi[..., S] * z_k
    q[..., S, I] = co.beta_s * phi[..., S] * z_i
    q[..., K, I] = co.beta_k * phi[..., K] * z_i
    q[..., K, R] = co.mu_k
    q[..., I, K] = co.beta_i * phi[..., I] * z_k
    q[..., I, R] = co.mu_i
    q[..., R, S] = co.gamma
    diag = -q.sum(axis=-1)
    for e in range(N_STATES):
        q[..., e, e] = diag[..., e]
    return q


def _packed(co: Coefficients):
    return np.ascontiguousarray(np.column_stack(co[:-1]))


def kfp_rhs(p, phi, z_k, z_i, params):
    """Time derivative ``p Q`` of a ``(K, 4)`` distribution slice."""
    co = Coefficients.from_params(params)
    p = np.ascontiguousarray(p, dtype=float)
    dp = np.empty_like(p)
    _k.kfp_kernel(p, np.ascontiguousarray(phi, dtype=float),
                  np.ascontiguousarray(z_k, dtype=float), np.ascontiguousarray(z_i, dtype=float),
                  _packed(co), dp)
    return dp


def optimal_controls(u, z_k, z_i, lam_i, params, a_max):
    """Clipped Hamiltonian minimizers for a ``(K, 4)`` slice or a whole field.

    ``lam_i`` is a scalar or one value per leading (time) index.
    """
    coef = _packed(Coefficients.from_params(params))
    u = np.asarray(u, dtype=float)
    z_k = np.asarray(z_k, dtype=float)
    z_i = np.asarray(z_i, dtype=float)
    phi = np.empty_like(u)
    if u.ndim == 2:
        _k.phi_kernel(np.ascontiguousarray(u), np.ascontiguousarray(z_k),
                      np.ascontiguousarray(z_i), float(lam_i), coef, float(a_max), phi)
        return phi
    lam = np.broadcast_to(np.asarray(lam_i, dtype=float), u.shape[:1])
    for t in range(u.shape[0]):
        _k.phi_kernel(np.ascontiguousarray(u[t]), np.ascontiguousarray(z_k[t]),
                      np.ascontiguousarray(z_i[t]), float(lam[t]), coef, float(a_max), phi[t])
    return phi


def hjb_rhs(u, z_k, z_i, t, params, policy: Policy, bound: ControlBound = ControlBound()):
    """Time derivative of a ``(K, 4)`` value slice at the equilibrium control."""
    coef = _packed(Coefficients.from_params(params))
    u = np.ascontiguousarray(u, dtype=float)
    du = np.empty_like(u)
    phi = np.empty_like(u)
    _k.hjb_kernel(u, np.ascontiguousarray(z_k, dtype=float), np.ascontiguousarray(z_i, dtype=float),
                  float(policy.lambda_i(t)), float(policy.lambda_k(t)), coef, float(bound.a_max),
                  phi, du)
    return du


# ---------------------------------------------------------------------------
# time stepping


def policy_on_grid(policy: Policy, grid: TimeGrid):
    """Per-step and per-node lambda values, with breakpoints snapped to nodes.

    Each step carries the value at its midpoint; node ``k`` takes the value
    of the step starting there (the last node reuses the final step).
    """
    snapped = policy.snapped(grid.dt)
    mids = grid.midpoints
    lam_i_step = np.asarray(snapped.lambda_i(mids), dtype=float)
    lam_k_step = np.asarray(snapped.lambda_k(mids), dtype=float)
    lam_i_node = np.append(lam_i_step, lam_i_step[-1])
    lam_k_node = np.append(lam_k_step, lam_k_step[-1])
    return lam_i_step, lam_k_step, lam_i_node, lam_k_node


def _method(integrator):
    if integrator not in INTEGRATORS:
        raise ValueError(f"integrator must be one of {INTEGRATORS}, got {integrator!r}")
    return _k.EULER if integrator == "euler" else _k.RK4


def _run_blocks(fn, n_blocks, workers):
    """Apply ``fn(block_indices)`` to block chunks and stitch results along axis 1.

    Blocks are independent once the aggregates are frozen, so chunking
    never changes the arithmetic done for any block.
    """
    workers = max(1, min(int(workers), n_blocks))
    chunks = np.array_split(np.arange(n_blocks), workers)
    if len(chunks) == 1:
        return fn(chunks[0])
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(fn, chunks))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(items, axis=1) for items in zip(*parts))
    return np.concatenate(parts, axis=1)


def terminal_values(params):
    co = Coefficients.from_params(params)
    u_T = np.zeros((len(co), N_STATES))
    u_T[:, I] = co.c
    return u_T


def _cols(a, idx):
    return np.ascontiguousarray(a[:, idx])


def integrate_hjb_backward(grid: TimeGrid, params, policy: Policy, bound: ControlBound,
                           z_k, z_i, integrator="rk4", workers=1):
    """Solve the backward value-function system for given aggregates.

    RK4 stages use the aggregates averaged between neighbouring nodes.
    Returns ``(u, phi)``; ``phi`` is the clipped equilibrium control at
    every node.
    """
    co = Coefficients.from_params(params)
    z_k = np.asarray(z_k, dtype=float)
    z_i = np.asarray(z_i, dtype=float)
    lam_i_step, lam_k_step, lam_i_node, _ = policy_on_grid(policy, grid)
    method = _method(integrator)

    def solve(idx):
        c = co.take(idx)
        zk, zi = _cols(z_k, idx), _cols(z_i, idx)
        u, bad = _k.march_hjb(terminal_values(c), zk, zi, lam_i_step, lam_k_step,
                              _packed(c), float(bound.a_max), grid.dt, method)
        if bad >= 0:
            raise SolverError(f"HJB integration blew up at step {bad} (t={bad * grid.dt:.6g})")
        phi = optimal_controls(u, zk, zi, lam_i_node, c, bound.a_max)
        return u, phi

    return _run_blocks(solve, len(co), workers)


def integrate_kfp_forward(grid: TimeGrid, params, phi, z_k, z_i, integrator="rk4", workers=1):
    """Propagate the initial distributions under a fixed control and aggregate field.

    RK4 stages use ``phi`` and the aggregates averaged between nodes.  Rows
    drifting off the simplex by more than 1e-12 are clipped and renormalized.
    """
    co = Coefficients.from_params(params)
    phi = np.asarray(phi, dtype=float)
    z_k = np.asarray(z_k, dtype=float)
    z_i = np.asarray(z_i, dtype=float)
    method = _method(integrator)

    def solve(idx):
        c = co.take(idx)
        p, worst, bad = _k.march_kfp(np.ascontiguousarray(c.p0), np.ascontiguousarray(phi[:, idx]),
                                     _cols(z_k, idx), _cols(z_i, idx), _packed(c), grid.dt,
                                     method, RENORM_TRIGGER)
        if bad >= 0:
            raise SolverError(f"KFP integration blew up at step {bad} (t={bad * grid.dt:.6g})")
        if worst > RENORM_WARN:
            log.warning("renormalized probabilities (largest correction %.3g)", worst)
        return p

    return _run_blocks(solve, len(co), workers)


def uncontrolled_flow(grid: TimeGrid, graphon: BlockGraphon, params, integrator="rk4"):
    """Graphon SKIR flow with every player at the natural rate 1.

    Aggregates are rebuilt from the distribution at every stage, so this is
    a closed forward system.
    """
    co = Coefficients.from_params(params)
    wm = np.ascontiguousarray(graphon.weights * graphon.masses[None, :])
    p, bad = _k.march_uncontrolled(np.ascontiguousarray(co.p0), wm, _packed(co), grid.dt,
                                   grid.n_steps, _method(integrator), RENORM_TRIGGER)
    if bad >= 0:
        raise SolverError(f"uncontrolled flow blew up at step {bad}")
    return p


def residual_norm(a: FlowGrid, b: FlowGrid):
    """Sup-norm distance between two flow grids over ``u`` and ``p``."""
    if a.u.shape != b.u.shape or a.p.shape != b.p.shape:
        raise ValueError(f"shape mismatch: {a.u.shape} vs {b.u.shape}")
    return float(max(np.max(np.abs(a.u - b.u)), np.max(np.abs(a.p - b.p))))


def sweep(grid, params, policy, bound, z_k, z_i, config: SolverConfig):
    """One backward-then-forward pass for frozen aggregates."""
    u, phi = integrate_hjb_backward(grid, params, policy, bound, z_k, z_i,
                                    config.integrator, config.workers)
    p = integrate_kfp_forward(grid, params, phi, z_k, z_i, config.integrator, config.workers)
    return FlowGrid(p, u, phi, z_k, z_i)


def solve_equilibrium(grid: TimeGrid, graphon: BlockGraphon, params: Sequence[GroupParams],
                      policy: Policy, bound: ControlBound = ControlBound(),
                      config: SolverConfig = SolverConfig()) -> EquilibriumResult:
    """Damped fixed-point iteration on the coupled forward-backward system.

    Each iteration freezes the aggregates built from the current
    ``(phi, p)``, solves the value function backward, then the distribution
    forward under the new controls.  The residual is the sup-norm change of
    successive sweep outputs.  ``(phi, p)`` are relaxed with weight
    ``config.damping`` on the old iterate; the returned flows are the last
    undamped sweep together with the aggregates that produced it.
    """
    params = list(params)
    if len(params) != graphon.n_blocks:
        raise ValueError(f"{len(params)} parameter blocks for a {graphon.n_blocks}-block graphon")
    co = Coefficients.from_params(params)
    check = existence_bound(grid.T, params, policy, bound)
    theta = config.damping

    p = uncontrolled_flow(grid, graphon, co, config.integrator)
    phi = np.ones_like(p)
    u = np.broadcast_to(terminal_values(co), p.shape).copy()
    z_k, z_i = compute_aggregates(graphon, phi, p)
    current = FlowGrid(p, u, phi, z_k, z_i)

    residuals = []
    converged = False
    for it in range(1, config.max_iters + 1):
        z_k, z_i = compute_aggregates(graphon, phi, p)
        new = sweep(grid, co, policy, bound, z_k, z_i, config)
        res = residual_norm(new, current)
        residuals.append(res)
        current = new
        log.debug("iteration %d residual %.3e", it, res)
        if res <= config.tol:
            converged = True
            break
        phi = theta * phi + (1.0 - theta) * new.phi
        p = theta * p + (1.0 - theta) * new.p

    if not converged:
        log.warning("no convergence after %d iterations (residual %.3e)", it, residuals[-1])
    return EquilibriumResult(
        flows=current,
        iterations=it,
        final_residual=residuals[-1],
        converged=converged,
        existence_value=check.value,
        existence_satisfied=check.satisfied,
        residuals=residuals,
    )
