"""Scenario files, the two canned experiments, and report output.

A scenario is a TOML document::

    [grid]            T, n_steps
    [graphon]         weights (K x K, nested or flat row-major), masses
    [blocks.<name>]   beta_s, beta_k, beta_i, mu_k, mu_i, gamma, c, p0
    [policy]          lambda_k, lambda_i  (number or {breakpoints, values})
    [solver]          tol, max_iters, damping, integrator, a_max

Blocks are ordered as they appear in the file.
"""

from __future__ import annotations

import copy
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .model import BlockGraphon, ControlBound, GroupParams, PiecewiseConstant, Policy
from .solver import EquilibriumResult, SolverConfig, TimeGrid, solve_equilibrium

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SCENARIO_DIR = Path(__file__).parent / "scenarios"
STATE_NAMES = ("S", "K", "I", "R")
FLOW_HEADER = ("t", "block", "state", "p", "u", "phi", "z_k", "z_i")
DELTA_HEADER = ("t", "block", "state", "metric", "value_a", "value_b", "delta")
DELTA_METRICS = ("p", "u", "phi")

EXPERIMENT1_POLICIES = {0: "experiment1-policy0", 1: "experiment1-policy1", 2: "experiment1-policy2"}
EXPERIMENT2_SCHEMES = {j: f"experiment2-scheme{j}" for j in range(5)}

_SCHEMA = {
    "grid": {"T", "n_steps"},
    "graphon": {"weights", "masses"},
    "policy": {"lambda_k", "lambda_i"},
    "solver": {"tol", "max_iters", "damping", "integrator", "a_max"},
}
_BLOCK_KEYS = ("beta_s", "beta_k", "beta_i", "mu_k", "mu_i", "gamma", "c", "p0")
_REQUIRED = {"grid": {"T", "n_steps"}, "graphon": {"weights", "masses"}}


class ScenarioError(ValueError):
    """Malformed or invalid scenario file."""


@dataclass(frozen=True)
class Scenario:
    name: str
    grid: TimeGrid
    graphon: BlockGraphon
    block_names: tuple[str, ...]
    params: tuple[GroupParams, ...]
    policy: Policy
    bound: ControlBound
    solver: SolverConfig

    def solve(self) -> EquilibriumResult:
        return solve_equilibrium(self.grid, self.graphon, self.params, self.policy,
                                 self.bound, self.solver)


# ---------------------------------------------------------------------------
# loading


def resolve_path(path) -> Path:
    """Map a preset name (with or without .cfg/.toml) onto a file."""
    p = Path(path)
    if p.is_file():
        return p
    stem = p.name
    for suffix in (".cfg", ".toml"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    preset = SCENARIO_DIR / f"{stem}.toml"
    if preset.is_file():
        return preset
    raise FileNotFoundError(f"no scenario file or preset named {str(path)!r}")


def preset_names():
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.toml"))


def read_raw(path) -> tuple[str, dict]:
    p = resolve_path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{p}: {exc.strerror or exc}") from exc
    try:
        return p.stem, tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{p}: {exc}") from exc


def load_scenario(path, overrides: Mapping | None = None) -> Scenario:
    name, raw = read_raw(path)
    if overrides:
        raw = merge(raw, overrides)
    return build_scenario(name, raw)


def merge(base: Mapping, extra: Mapping) -> dict:
    """Recursive dict merge; ``extra`` wins."""
    out = copy.deepcopy(dict(base))
    for key, val in extra.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _field(path, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def _check_keys(path, table, allowed):
    if not isinstance(table, Mapping):
        raise ScenarioError(f"{path}: expected a table")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ScenarioError(f"{path}: unknown key(s) {', '.join(unknown)}")


def _number(path, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{path}: expected a number, got {v!r}")
    return float(v)


def _step_function(path, v):
    if isinstance(v, Mapping):
        _check_keys(path, v, ("breakpoints", "values"))
        if "values" not in v:
            raise ScenarioError(f"{path}: missing key values")
        vals = [_number(f"{path}.values[{j}]", x) for j, x in enumerate(v["values"])]
        bps = [_number(f"{path}.breakpoints[{j}]", x) for j, x in enumerate(v.get("breakpoints", []))]
        return _field(path, PiecewiseConstant, tuple(vals), tuple(bps))
    return PiecewiseConstant.constant(_number(path, v))


def _weights(raw, k):
    w = np.array(raw, dtype=float)
    if w.ndim == 1 and w.size == k * k:
        w = w.reshape(k, k)
    return w


def build_scenario(name: str, raw: Mapping) -> Scenario:
    _check_keys("<root>", raw, set(_SCHEMA) | {"blocks"})
    for sec, keys in _SCHEMA.items():
        if sec in raw:
            _check_keys(sec, raw[sec], keys)
    for sec, keys in _REQUIRED.items():
        missing = sorted(keys - set(raw.get(sec, {})))
        if missing:
            raise ScenarioError(f"{sec}: missing key(s) {', '.join(missing)}")

    g = raw["grid"]
    n_steps = g["n_steps"]
    if isinstance(n_steps, bool) or not isinstance(n_steps, int):
        raise ScenarioError(f"grid.n_steps: expected an integer, got {n_steps!r}")
    grid = _field("grid", TimeGrid, _number("grid.T", g["T"]), n_steps)

    blocks = raw.get("blocks")
    if not isinstance(blocks, Mapping) or not blocks:
        raise ScenarioError("blocks: at least one [blocks.<name>] table is required")
    names, params = [], []
    for bname, table in blocks.items():
        path = f"blocks.{bname}"
        _check_keys(path, table, _BLOCK_KEYS)
        missing = [k for k in _BLOCK_KEYS if k not in table and k not in ("gamma", "c")]
        if missing:
            raise ScenarioError(f"{path}: missing key(s) {', '.join(missing)}")
        kw = {k: _number(f"{path}.{k}", table[k]) for k in _BLOCK_KEYS[:-1] if k in table}
        p0 = table["p0"]
        if not isinstance(p0, list):
            raise ScenarioError(f"{path}.p0: expected 4 numbers")
        kw["p0"] = tuple(_number(f"{path}.p0[{j}]", x) for j, x in enumerate(p0))
        names.append(str(bname))
        params.append(_field(path, GroupParams, **kw))

    k = len(names)
    gr = raw["graphon"]
    try:
        w = _weights(gr["weights"], k)
        m = np.array(gr["masses"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"graphon: {exc}") from exc
    if w.shape != (k, k):
        raise ScenarioError(f"graphon.weights: expected {k}x{k} for {k} blocks, got shape {w.shape}")
    if m.shape != (k,):
        raise ScenarioError(f"graphon.masses: expected {k} entries, got shape {m.shape}")
    graphon = _field("graphon", BlockGraphon, w, m)

    pol = raw.get("policy", {})
    lam_k = _step_function("policy.lambda_k", pol.get("lambda_k", 0.0))
    lam_i = _step_function("policy.lambda_i", pol.get("lambda_i", 0.0))
    if min(lam_k.values) < 0:
        raise ScenarioError(f"policy.lambda_k: must be nonnegative, got {lam_k.values}")
    policy = _field("policy", Policy, lam_i, lam_k)

    s = dict(raw.get("solver", {}))
    a_max = _number("solver.a_max", s.pop("a_max", ControlBound.a_max))
    bound = _field("solver.a_max", ControlBound, a_max)
    for key in ("tol", "damping"):
        if key in s:
            s[key] = _number(f"solver.{key}", s[key])
    if "max_iters" in s and (isinstance(s["max_iters"], bool) or not isinstance(s["max_iters"], int)):
        raise ScenarioError(f"solver.max_iters: expected an integer, got {s['max_iters']!r}")
    solver = _field("solver", SolverConfig, **s)
    return Scenario(name, grid, graphon, tuple(names), tuple(params), policy, bound, solver)


# ---------------------------------------------------------------------------
# comparison reports


def _trapezoid(y, x):
    return np.trapezoid(y, x, axis=0) if hasattr(np, "trapezoid") else np.trapz(y, x, axis=0)


def summary_statistics(t, p, phi):
    """Per-block statistics as a dict of arrays of shape (K,)."""
    T = t[-1] - t[0]
    return {
        "sup_p_i": p[:, :, 2].max(axis=0),
        "terminal_p_i": p[-1, :, 2].copy(),
        "int_p_i": _trapezoid(p[:, :, 2], t),
        "int_p_k": _trapezoid(p[:, :, 1], t),
        "mean_phi_k": _trapezoid(phi[:, :, 1], t) / T,
        "mean_phi_i": _trapezoid(phi[:, :, 2], t) / T,
    }


@dataclass
class ComparisonReport:
    """Solved scenarios plus deltas of each against ``baseline``."""

    scenarios: dict[str, Scenario]
    results: dict[str, EquilibriumResult]
    baseline: str
    pairs: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        for a, b in self.pairs:
            if self.scenarios[a].grid != self.scenarios[b].grid:
                raise ValueError(f"cannot compare {a} and {b} on different grids")

    @property
    def names(self):
        return list(self.scenarios)

    @property
    def converged(self):
        return all(r.converged for r in self.results.values())

    def series(self, name):
        """Per-block time series shown in the figures."""
        f = self.results[name].flows
        return {"p_i": f.p[:, :, 2], "p_k": f.p[:, :, 1],
                "phi_k": f.phi[:, :, 1], "phi_i": f.phi[:, :, 2]}

    def summary(self, name):
        f = self.results[name].flows
        return summary_statistics(self.scenarios[name].grid.nodes, f.p, f.phi)

    def delta(self, a, b, metric):
        """``b - a`` on the common grid."""
        fa, fb = self.results[a].flows, self.results[b].flows
        return getattr(fb, metric) - getattr(fa, metric)


def compare(scenarios: Iterable[Scenario], baseline: str | None = None) -> ComparisonReport:
    scenarios = {s.name: s for s in scenarios}
    if not scenarios:
        raise ValueError("nothing to compare")
    baseline = baseline if baseline is not None else next(iter(scenarios))
    results = {name: s.solve() for name, s in scenarios.items()}
    pairs = [(baseline, name) for name in scenarios if name != baseline]
    return ComparisonReport(scenarios, results, baseline, pairs)


def _ids(ids, valid, what):
    ids = sorted(set(valid) if ids is None else set(int(i) for i in ids))
    bad = [i for i in ids if i not in valid]
    if bad or not ids:
        raise ValueError(f"{what} must be a non-empty subset of {sorted(valid)}, got {ids}")
    return ids


def run_experiment1(policy_ids=None, overrides: Mapping | None = None) -> ComparisonReport:
    """Solve the age-group policies; deltas are taken against policy 0 when selected."""
    ids = _ids(policy_ids, EXPERIMENT1_POLICIES, "policy ids")
    scen = [load_scenario(EXPERIMENT1_POLICIES[i], overrides) for i in ids]
    return compare(scen, baseline=scen[0].name)


def scheme_allocation(scheme, n_blocks=4, mass=0.03):
    """Initial rumor mass per block: even split for scheme 0, else all on block ``scheme``."""
    if scheme == 0:
        return [mass / n_blocks] * n_blocks
    if not 1 <= scheme <= n_blocks:
        raise ValueError(f"scheme must lie in 0..{n_blocks}, got {scheme}")
    return [mass if b == scheme - 1 else 0.0 for b in range(n_blocks)]


def run_experiment2(scheme_ids=None, overrides: Mapping | None = None,
                    mass: float = 0.03) -> ComparisonReport:
    """Solve the platform schemes with total initial rumor mass ``mass``.

    The shipped presets encode mass 0.03; other values rewrite p0(I) and
    p0(S) of every block, keeping p0(K) fixed.
    """
    ids = _ids(scheme_ids, EXPERIMENT2_SCHEMES, "scheme ids")
    if not 0.0 <= mass <= 1.0:
        raise ValueError(f"mass must lie in [0, 1], got {mass}")
    scen = []
    for j in ids:
        name, raw = read_raw(EXPERIMENT2_SCHEMES[j])
        if overrides:
            raw = merge(raw, overrides)
        alloc = scheme_allocation(j, len(raw["blocks"]), mass)
        for table, pi in zip(raw["blocks"].values(), alloc):
            pk = table["p0"][1]
            table["p0"] = [1.0 - pk - pi, pk, pi, 0.0]
        scen.append(build_scenario(name, raw))
    return compare(scen, baseline=scen[0].name)


# ---------------------------------------------------------------------------
# output


def _fmt(x):
    return repr(float(x))


def flow_rows(scenario: Scenario, result: EquilibriumResult):
    f = result.flows
    t = scenario.grid.nodes
    for n in range(t.shape[0]):
        tn = _fmt(t[n])
        for b, bname in enumerate(scenario.block_names):
            zk, zi = _fmt(f.z_k[n, b]), _fmt(f.z_i[n, b])
            for e, sname in enumerate(STATE_NAMES):
                yield (tn, bname, sname, _fmt(f.p[n, b, e]), _fmt(f.u[n, b, e]),
                       _fmt(f.phi[n, b, e]), zk, zi)


def delta_rows(report: ComparisonReport, a, b):
    sc = report.scenarios[a]
    fa, fb = report.results[a].flows, report.results[b].flows
    t = sc.grid.nodes
    for n in range(t.shape[0]):
        tn = _fmt(t[n])
        for k, bname in enumerate(sc.block_names):
            for e, sname in enumerate(STATE_NAMES):
                for metric in DELTA_METRICS:
                    va = getattr(fa, metric)[n, k, e]
                    vb = getattr(fb, metric)[n, k, e]
                    yield (tn, bname, sname, metric, _fmt(va), _fmt(vb), _fmt(vb - va))


def _write_csv(path: Path, header, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_flow_csv(path):
    """Load a flow CSV back into ``(t, block_names, p, u, phi)`` arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    blocks = list(dict.fromkeys(r["block"] for r in rows))
    k = len(blocks)
    n = len(rows) // (4 * k)
    arr = {m: np.array([float(r[m]) for r in rows]).reshape(n, k, 4) for m in ("p", "u", "phi")}
    t = np.array([float(r["t"]) for r in rows[:: 4 * k]])
    return t, blocks, arr["p"], arr["u"], arr["phi"]


def _plot(scenario: Scenario, result: EquilibriumResult, path: Path, metric: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "skir-graphon"
    t = scenario.grid.nodes
    data = getattr(result.flows, metric)
    k = len(scenario.block_names)
    fig, axes = plt.subplots(1, k, figsize=(3.2 * k, 3.0), sharey=True, squeeze=False)
    for b, ax in enumerate(axes[0]):
        for e, sname in enumerate(STATE_NAMES):
            ax.plot(t, data[:, b, e], label=sname, lw=1.2)
        ax.set_title(scenario.block_names[b])
        ax.set_xlabel("t")
    axes[0][0].set_ylabel("p(t, e)" if metric == "p" else "phi(t, e)")
    axes[0][-1].legend(loc="best", fontsize=8)
    fig.suptitle(scenario.name)
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    finally:
        plt.close(fig)


def emit_report(report: ComparisonReport, out_dir, plots: bool = False) -> list[Path]:
    """Write flow and delta CSVs (plus optional SVG charts) and a manifest.

    Returns the list of files written, manifest last.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: {exc.strerror or exc}") from exc
    written = []
    meta = {"baseline": report.baseline, "scenarios": {}, "comparisons": []}
    for name in report.names:
        sc, res = report.scenarios[name], report.results[name]
        path = out / f"{name}.csv"
        _write_csv(path, FLOW_HEADER, flow_rows(sc, res))
        written.append(path)
        files = [path.name]
        if plots:
            for metric in ("p", "phi"):
                ppath = out / f"{name}_{metric}.svg"
                _plot(sc, res, ppath, metric)
                written.append(ppath)
                files.append(ppath.name)
        stats = {k: [float(x) for x in v] for k, v in report.summary(name).items()}
        meta["scenarios"][name] = {
            "blocks": list(sc.block_names),
            "converged": res.converged,
            "iterations": res.iterations,
            "final_residual": res.final_residual,
            "existence_value": res.existence_value,
            "files": files,
            "summary": stats,
        }
    for a, b in report.pairs:
        path = out / f"delta_{a}_vs_{b}.csv"
        _write_csv(path, DELTA_HEADER, delta_rows(report, a, b))
        written.append(path)
        meta["comparisons"].append({"a": a, "b": b, "file": path.name})
    mpath = out / "manifest.json"
    try:
        mpath.write_text(json.dumps(meta, indent=2, sort_keys=True, allow_nan=True) + "\n",
                         encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{mpath}: {exc.strerror or exc}") from exc
    written.append(mpath)
    return written
