"""Independent checks of computed equilibria.

* closed-form flows for the decoupled (zero-graphon) model,
* best-response values and exploitability against frozen aggregates,
* a finite-player continuous-time Markov chain simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .model import N_STATES, BlockGraphon, ControlBound, GroupParams, Policy
from .solver import (
    Coefficients,
    EquilibriumResult,
    FlowGrid,
    TimeGrid,
    generator_matrices,
    integrate_hjb_backward,
    policy_on_grid,
)

S, K, I, R = range(N_STATES)

# transition channels per block: (from, to)
CHANNELS = ((S, K), (S, I), (K, I), (K, R), (I, K), (I, R), (R, S))


# ---------------------------------------------------------------------------
# analytic oracle


def _segments(policy: Policy, T):
    cuts = [b for b in policy.breakpoints if 0.0 < b < T]
    edges = [0.0] + cuts + [T]
    return list(zip(edges[:-1], edges[1:]))


def analytic_decoupled(grid: TimeGrid, params: Sequence[GroupParams], policy: Policy,
                       bound: ControlBound = ControlBound()) -> FlowGrid:
    """Closed-form flows when every aggregate vanishes.

    Without contacts S is frozen, K and I decay to R exponentially, and the
    K and I values solve scalar linear ODEs with piecewise-constant forcing.
    """
    params = list(params)
    if any(p.gamma != 0.0 for p in params):
        raise ValueError("no closed form is maintained for gamma > 0")
    t = grid.nodes
    nb = len(params)
    p = np.zeros((t.size, nb, N_STATES))
    u = np.zeros_like(p)
    phi = np.ones_like(p)
    segs = _segments(policy, grid.T)

    def clipped_i(lam_i):
        return min(max(0.5 * (lam_i + 1.0), 0.0), bound.a_max)

    for b, gp in enumerate(params):
        p0 = gp.p0
        p[:, b, S] = p0[S]
        p[:, b, K] = p0[K] * np.exp(-gp.mu_k * t)
        p[:, b, I] = p0[I] * np.exp(-gp.mu_i * t)
        p[:, b, R] = 1.0 - p[:, b, S] - p[:, b, K] - p[:, b, I]

        # backward over segments: u' = mu u - s on each, s constant
        u_k_end, u_i_end = 0.0, gp.c
        for lo, hi in reversed(segs):
            mid = 0.5 * (lo + hi)
            lam_i, lam_k = policy.lambda_i(mid), policy.lambda_k(mid)
            a_i = clipped_i(lam_i)
            s_k = -lam_k
            s_i = 0.5 * (1.0 - a_i) ** 2 + 0.5 * (lam_i - a_i) ** 2
            mask = (t >= lo) & (t <= hi)
            tt = t[mask]
            u[mask, b, K] = s_k / gp.mu_k + (u_k_end - s_k / gp.mu_k) * np.exp(gp.mu_k * (tt - hi))
            u[mask, b, I] = s_i / gp.mu_i + (u_i_end - s_i / gp.mu_i) * np.exp(gp.mu_i * (tt - hi))
            phi[mask, b, I] = a_i
            u_k_end = s_k / gp.mu_k + (u_k_end - s_k / gp.mu_k) * math.exp(gp.mu_k * (lo - hi))
            u_i_end = s_i / gp.mu_i + (u_i_end - s_i / gp.mu_i) * math.exp(gp.mu_i * (lo - hi))
        u[-1, b, I] = gp.c
        u[-1, b, K] = 0.0

    zeros = np.zeros((t.size, nb))
    return FlowGrid(p, u, phi, zeros, zeros.copy())


# ---------------------------------------------------------------------------
# best response and exploitability


def running_cost_field(phi, lam_i, lam_k):
    """Running cost for every state given controls; ``lam_*`` broadcast over time."""
    f = 0.5 * (1.0 - phi) ** 2
    f[..., I] += 0.5 * (np.asarray(lam_i)[..., None] - phi[..., I]) ** 2
    f[..., K] -= np.asarray(lam_k)[..., None]
    return f


def evaluate_controls(grid: TimeGrid, params, policy: Policy, phi, z_k, z_i):
    """Expected cost-to-go of a fixed feedback control against frozen aggregates.

    Solves the linear backward system ``u' = -(Q u + f)`` with classical
    RK4; stage values of ``phi`` and the aggregates are averaged between
    nodes.  No minimization takes place.
    """
    co = Coefficients.from_params(params)
    phi = np.asarray(phi, dtype=float)
    z_k = np.asarray(z_k, dtype=float)
    z_i = np.asarray(z_i, dtype=float)
    lam_i, lam_k, _, _ = policy_on_grid(policy, grid)
    n, dt = grid.n_steps, grid.dt
    u = np.empty_like(phi)
    u[n] = 0.0
    u[n, :, I] = co.c

    def rhs(ph, zk, zi, li, lk, y):
        q = generator_matrices(co, ph, zk, zi)
        return -(np.einsum("kef,kf->ke", q, y) + running_cost_field(ph, li, lk))

    y = u[n].copy()
    for k in range(n - 1, -1, -1):
        ph_m = 0.5 * (phi[k] + phi[k + 1])
        zk_m = 0.5 * (z_k[k] + z_k[k + 1])
        zi_m = 0.5 * (z_i[k] + z_i[k + 1])
        a = rhs(phi[k + 1], z_k[k + 1], z_i[k + 1], lam_i[k], lam_k[k], y)
        b = rhs(ph_m, zk_m, zi_m, lam_i[k], lam_k[k], y - 0.5 * dt * a)
        c = rhs(ph_m, zk_m, zi_m, lam_i[k], lam_k[k], y - 0.5 * dt * b)
        d = rhs(phi[k], z_k[k], z_i[k], lam_i[k], lam_k[k], y - dt * c)
        y = y - (dt / 6.0) * (a + 2.0 * b + 2.0 * c + d)
        u[k] = y
    return u


@dataclass
class BestResponse:
    u_br: np.ndarray  # (n+1, K, 4) optimal values against frozen aggregates
    u_eq: np.ndarray  # (n+1, K, 4) values of the candidate control

    @property
    def gap0(self):
        return self.u_eq[0] - self.u_br[0]


def best_response(eq: EquilibriumResult, grid: TimeGrid, params, policy: Policy,
                  bound: ControlBound = ControlBound(), integrator="rk4") -> BestResponse:
    f = eq.flows
    u_br, _ = integrate_hjb_backward(grid, params, policy, bound, f.z_k, f.z_i, integrator)
    u_eq = evaluate_controls(grid, params, policy, f.phi, f.z_k, f.z_i)
    return BestResponse(u_br, u_eq)


def best_response_value(eq: EquilibriumResult, block: int, grid: TimeGrid, params,
                        policy: Policy, bound: ControlBound = ControlBound()):
    """Time-0 values ``(u0_br, u0_eq)`` of one block's representative player."""
    br = best_response(eq, grid, params, policy, bound)
    return br.u_br[0, block].copy(), br.u_eq[0, block].copy()


def exploitability(eq: EquilibriumResult, grid: TimeGrid, params, policy: Policy,
                   bound: ControlBound = ControlBound()):
    """Largest expected gain from a unilateral deviation, over blocks.

    The per-block gain is weighted by the block's initial distribution.
    """
    br = best_response(eq, grid, params, policy, bound)
    p0 = Coefficients.from_params(params).p0
    return float(np.max(np.sum(p0 * br.gap0, axis=-1)))


def with_controls(eq: EquilibriumResult, phi) -> EquilibriumResult:
    """Copy of ``eq`` whose control field is replaced; aggregates stay frozen."""
    flows = eq.flows.copy()
    flows.phi = np.array(phi, dtype=float)
    return replace(eq, flows=flows)


def perturb_controls(eq: EquilibriumResult, delta, bound: ControlBound = ControlBound()):
    return with_controls(eq, np.clip(eq.flows.phi + delta, bound.a_min, bound.a_max))


# ---------------------------------------------------------------------------
# finite-player simulation

SIM_METHODS = ("exact_gillespie", "tau_leap")


@dataclass(frozen=True)
class SimConfig:
    """Finite-player run settings.

    Randomness comes from Philox generators seeded through
    ``numpy.random.SeedSequence(seed)``: child 0 draws the agents' blocks
    and initial states in agent-index order, child 1 drives the dynamics.
    """

    n_agents: int
    seed: int = 0
    method: str = "exact_gillespie"
    tau: float | None = None

    def __post_init__(self):
        if int(self.n_agents) != self.n_agents or self.n_agents < 1:
            raise ValueError(f"n_agents must be a positive integer, got {self.n_agents}")
        if self.method not in SIM_METHODS:
            raise ValueError(f"method must be one of {SIM_METHODS}, got {self.method!r}")
        if self.method == "tau_leap" and not (self.tau and self.tau > 0):
            raise ValueError("tau_leap needs a positive tau")


@dataclass
class SimResult:
    times: np.ndarray
    counts: np.ndarray  # (n+1, K, 4) agents per block and state
    agent_block: np.ndarray
    per_agent_cost: np.ndarray

    @property
    def block_sizes(self):
        return self.counts[0].sum(axis=-1)

    @property
    def empirical_p(self):
        """Occupancy fractions within each block (zero rows for empty blocks)."""
        sizes = self.block_sizes
        out = np.zeros(self.counts.shape)
        nz = sizes > 0
        out[:, nz] = self.counts[:, nz] / sizes[nz, None]
        return out

    @property
    def population_fractions(self):
        return self.counts / self.counts[0].sum()

    @property
    def mean_cost_per_block(self):
        nb = self.counts.shape[1]
        return np.array([self.per_agent_cost[self.agent_block == b].mean()
                         if np.any(self.agent_block == b) else np.nan for b in range(nb)])

    @property
    def cost_se_per_block(self):
        nb = self.counts.shape[1]
        out = np.full(nb, np.nan)
        for b in range(nb):
            c = self.per_agent_cost[self.agent_block == b]
            if c.size > 1:
                out[b] = c.std(ddof=1) / math.sqrt(c.size)
        return out


def _rngs(seed):
    setup, dynamics = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(setup)), np.random.Generator(np.random.Philox(dynamics))


def _step_tables(eq, grid, params, policy):
    """Per-step controls (node averages), running costs and their running integral."""
    phi = eq.flows.phi
    phi_step = 0.5 * (phi[:-1] + phi[1:])
    lam_i, lam_k, _, _ = policy_on_grid(policy, grid)
    f_step = running_cost_field(phi_step, lam_i, lam_k)
    F = np.zeros((grid.n_steps + 1,) + f_step.shape[1:])
    F[1:] = np.cumsum(f_step * grid.dt, axis=0)
    return phi_step, f_step, F


def _leave_rates(co, phi, z_k, z_i):
    """Per-block channel rates for a single agent, shape (K, 7)."""
    return np.stack([
        co.beta_s * phi[:, S] * z_k,
        co.beta_s * phi[:, S] * z_i,
        co.beta_k * phi[:, K] * z_i,
        co.mu_k,
        co.beta_i * phi[:, I] * z_k,
        co.mu_i,
        co.gamma,
    ], axis=1)


_FROM = np.array([c[0] for c in CHANNELS])
_TO = np.array([c[1] for c in CHANNELS])


def simulate_finite_player(eq: EquilibriumResult, grid: TimeGrid, graphon: BlockGraphon,
                           params, policy: Policy, sim: SimConfig) -> SimResult:
    """Simulate N players using the equilibrium feedback controls.

    Each player's block is drawn from the block masses and their initial state
    from that block's ``p0``.  A player in block k and state e sees the
    finite-population aggregate ``(1/N) sum_i w[k, b_i] phi^{b_i}(t, e) 1{X_i = e}``
    (the player included).  Controls are held at their step-average on every
    grid interval, which makes the rates piecewise constant between jumps
    and grid nodes; ``exact_gillespie`` is then exact for that process.
    """
    co = Coefficients.from_params(params)
    nb = graphon.n_blocks
    n_agents = int(sim.n_agents)
    setup, rng = _rngs(sim.seed)
    blocks = setup.choice(nb, size=n_agents, p=graphon.masses / graphon.masses.sum())
    cdf = np.cumsum(co.p0, axis=1)
    draws = setup.random(n_agents)
    states = np.minimum((draws[:, None] > cdf[blocks]).sum(axis=1), N_STATES - 1)

    phi_step, f_step, F = _step_tables(eq, grid, params, policy)
    if sim.method == "exact_gillespie":
        counts, cost = _gillespie(blocks, states, graphon, co, phi_step, f_step, F, grid, n_agents, rng)
    else:
        counts, cost = _tau_leap(blocks, states, graphon, co, phi_step, f_step, grid, n_agents,
                                 sim.tau, rng)
    return SimResult(grid.nodes, counts, blocks, cost)


def _finite_aggregates(counts, phi, wn):
    act_k = phi[:, K] * counts[:, K]
    act_i = phi[:, I] * counts[:, I]
    return wn @ act_k, wn @ act_i


def _gillespie(blocks, states, graphon, co, phi_step, f_step, F, grid, n_agents, rng):
    nb = graphon.n_blocks
    n, dt = grid.n_steps, grid.dt
    wn = graphon.weights / n_agents
    members = [[[] for _ in range(N_STATES)] for _ in range(nb)]
    pos = np.empty(n_agents, dtype=np.int64)
    for i in range(n_agents):
        lst = members[blocks[i]][states[i]]
        pos[i] = len(lst)
        lst.append(i)
    counts_now = np.zeros((nb, N_STATES))
    np.add.at(counts_now, (blocks, states), 1)
    counts = np.zeros((n + 1, nb, N_STATES), dtype=np.int64)
    counts[0] = counts_now
    cost = np.zeros(n_agents)
    entry = np.zeros(n_agents)  # running-cost integral at entry into current state
    states = states.copy()

    for k in range(n):
        t = k * dt
        t_next = (k + 1) * dt
        ph = phi_step[k]
        while True:
            z_k, z_i = _finite_aggregates(counts_now, ph, wn)
            props = _leave_rates(co, ph, z_k, z_i) * counts_now[:, _FROM]
            total = props.sum()
            if total <= 0.0:
                break
            t += rng.exponential(1.0 / total)
            if t >= t_next:
                break
            flat = np.cumsum(props.ravel())
            ch = min(int(np.searchsorted(flat, rng.random() * total, side="right")), flat.size - 1)
            b, c = divmod(ch, len(CHANNELS))
            src, dst = _FROM[c], _TO[c]
            lst = members[b][src]
            j = int(rng.integers(len(lst)))
            agent = lst[j]
            last = lst.pop()
            if last != agent:
                lst[j] = last
                pos[last] = j
            # close the sojourn in src, open one in dst
            f_now = F[k, b] + f_step[k, b] * (t - k * dt)
            cost[agent] += f_now[src] - entry[agent]
            entry[agent] = f_now[dst]
            states[agent] = dst
            pos[agent] = len(members[b][dst])
            members[b][dst].append(agent)
            counts_now[b, src] -= 1
            counts_now[b, dst] += 1
        counts[k + 1] = counts_now

    cost += F[n, blocks, states] - entry
    cost += np.where(states == I, co.c[blocks], 0.0)
    return counts, cost


def _tau_leap(blocks, states, graphon, co, phi_step, f_step, grid, n_agents, tau, rng):
    nb = graphon.n_blocks
    n, dt = grid.n_steps, grid.dt
    m = max(1, int(round(dt / tau)))
    h = dt / m
    wn = graphon.weights / n_agents
    states = states.copy()
    counts = np.zeros((n + 1, nb, N_STATES), dtype=np.int64)
    counts_now = np.zeros((nb, N_STATES))
    np.add.at(counts_now, (blocks, states), 1)
    counts[0] = counts_now
    cost = np.zeros(n_agents)
    for k in range(n):
        ph = phi_step[k]
        for _ in range(m):
            z_k, z_i = _finite_aggregates(counts_now, ph, wn)
            rates = _leave_rates(co, ph, z_k, z_i)  # (K, 7)
            table = np.zeros((nb, N_STATES, N_STATES))
            table[:, _FROM, _TO] = rates
            out = table.sum(axis=2)
            cost += f_step[k, blocks, states] * h
            agent_out = out[blocks, states]
            leave = rng.random(n_agents) < -np.expm1(-agent_out * h)
            pick = rng.random(n_agents)
            idx = np.nonzero(leave)[0]
            if idx.size:
                cum = np.cumsum(table[blocks[idx], states[idx]], axis=1)
                target = pick[idx] * cum[:, -1]
                dst = np.minimum((target[:, None] >= cum).sum(axis=1), N_STATES - 1)
                np.add.at(counts_now, (blocks[idx], states[idx]), -1)
                np.add.at(counts_now, (blocks[idx], dst), 1)
                states[idx] = dst
        counts[k + 1] = counts_now
    cost += np.where(states == I, co.c[blocks], 0.0)
    return counts, cost
