"""Conditioned backward dynamics via harmonic reweighting.

Multiplying each backward rate by the ratio of a space-time harmonic
function at target and source turns the weighted (non-conservative)
semigroup into an honest Markov chain: the backward chain conditioned on
compatibility with the observed sample types.  Two flavours:

* homogeneous, using the equilibrium indicator averages h (stationary
  start law);
* inhomogeneous, using the time-indexed averages h^T(t, .) built from an
  arbitrary start law and a horizon T.

The inhomogeneous sampler thins proposals against a dominating rate that
is exact for the tabulated field: between grid knots every transition
rate is a ratio of two linear functions of time, hence monotone, so the
supremum over any span is attained at a knot.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, ParamError, validate_params
from .backward import (BpPath, BpState, BpTransition, LinePath,
                       canonical_start, enumerate_transitions, feynman_kac_V,
                       reverse_to_lines)
from .exact import (GeneratorMatrix, build_bp_generator, build_type_generator,
                    compute_h, config_law_vector, expm_apply, h_star_vector)
from .forward import LineageForest, genealogical_distance, init_forest, run_until

__all__ = [
    "HTTable",
    "HTransformedKernel",
    "make_homogeneous_kernel",
    "make_inhomogeneous_kernel",
    "transformed_rates",
    "sample_transformed_path",
    "sample_conditioned_lines",
    "ConditionedSample",
    "first_coalescence_time",
    "forest_line",
    "conditioned_functional_check",
    "FunctionalCheck",
    "sample_config",
]


class HTTable:
    """Grid table of the time-indexed indicator averages.

    Stores the forward type law on a uniform backward-time grid over
    [0, T] (step at most `step`; endpoints exact) and serves linearly
    interpolated values per backward state.  Interpolation error is
    O(step^2) in t and is documented as part of the sampler's budget;
    exact single-time values should use the direct computation instead.
    """

    def __init__(self, p: ModelParams, mu, T: float, step: float = 1e-3,
                 type_gen: GeneratorMatrix | None = None):
        validate_params(p)
        if T <= 0:
            raise ParamError("positive horizon required")
        if type_gen is None:
            type_gen = build_type_generator(p)
        self.p = p
        self.T = float(T)
        n = max(int(np.ceil(T / step)), 1)
        self.grid = np.linspace(0.0, T, n + 1)
        self.step = T / n
        mu_vec = config_law_vector(p, mu, type_gen.states)
        self.configs_arr = np.array(type_gen.states, dtype=np.int64)
        # rho[k] = law of the types after running the forward chain for
        # time T - grid[k]; built by stepping the transposed semigroup
        rho = np.empty((n + 1, len(type_gen.states)))
        rho[n] = mu_vec
        for k in range(n - 1, -1, -1):
            rho[k] = expm_apply(type_gen, rho[k + 1], self.step, transpose=True)
        self.rho = rho
        self._proj = {}

    def series(self, state: BpState) -> np.ndarray:
        """Indicator average of `state` at every grid time."""
        ser = self._proj.get(state)
        if ser is None:
            mask = h_star_vector(state, self.configs_arr, self.p.d)
            ser = self.rho @ mask.astype(float)
            self._proj[state] = ser
        return ser

    def value(self, t: float, state: BpState) -> float:
        if not (0.0 <= t <= self.T):
            raise ParamError("time outside horizon")
        ser = self.series(state)
        k = min(int(t / self.step), len(self.grid) - 2)
        theta = (t - self.grid[k]) / self.step
        return float((1.0 - theta) * ser[k] + theta * ser[k + 1])


@dataclass(frozen=True)
class HTransformedKernel:
    """Reweighted backward dynamics, homogeneous or time-inhomogeneous."""

    p: ModelParams
    mode: str  # "homogeneous" | "inhomogeneous"
    gen: GeneratorMatrix | None = None
    h: np.ndarray | None = None
    ht: HTTable | None = None
    T: float | None = None

    def h_value(self, state: BpState, t: float | None = None) -> float:
        if self.mode == "homogeneous":
            idx = self.gen.index.get(state)
            if idx is None:
                raise ParamError("state outside the kernel's reachable set")
            return float(self.h[idx])
        if t is None:
            raise ParamError("time required for inhomogeneous kernel")
        return self.ht.value(t, state)


def make_homogeneous_kernel(p: ModelParams, start: BpState,
                            law=None) -> HTransformedKernel:
    gen = build_bp_generator(p, start, with_fk=True)
    h = compute_h(p, gen, law=law)
    return HTransformedKernel(p=p, mode="homogeneous", gen=gen, h=h)


def make_inhomogeneous_kernel(p: ModelParams, mu, T: float,
                              step: float = 1e-3) -> HTransformedKernel:
    ht = HTTable(p, mu, T, step=step)
    return HTransformedKernel(p=p, mode="inhomogeneous", ht=ht, T=float(T))


def transformed_rates(kernel: HTransformedKernel, state: BpState,
                      t: float | None = None) -> list:
    """Positive-rate transitions of the conditioned chain out of `state`.

    Each base rate is multiplied by the harmonic ratio target/source;
    both values must be strictly positive."""
    denom = kernel.h_value(state, t)
    if denom <= 0.0:
        raise ParamError("h positivity violated")
    out = []
    for tr in enumerate_transitions(state, kernel.p):
        num = kernel.h_value(tr.target, t)
        if num < 0.0:
            raise ParamError("h positivity violated")
        rate = tr.rate * num / denom
        if rate > 0.0:
            out.append(BpTransition(target=tr.target, rate=rate, kind=tr.kind))
    return out


class _StateTables:
    """Per-state grid series used by the inhomogeneous sampler: transition
    list, numerator series (sum of rate * target series), denominator
    series, and the suffix maximum of their knot ratios."""

    def __init__(self, state: BpState, kernel: HTransformedKernel):
        ht = kernel.ht
        self.trans = enumerate_transitions(state, kernel.p)
        self.den = ht.series(state)
        self.tgt = [ht.series(tr.target) for tr in self.trans]
        if self.trans:
            num = np.zeros_like(self.den)
            for tr, ser in zip(self.trans, self.tgt):
                num += tr.rate * ser
        else:
            num = np.zeros_like(self.den)
        self.num = num
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(self.den > 0.0, num / np.maximum(self.den, 1e-300),
                             0.0)
        self.suffix_max = np.maximum.accumulate(ratio[::-1])[::-1]


def _interp(ser: np.ndarray, t: float, ht: HTTable) -> float:
    k = min(int(t / ht.step), len(ht.grid) - 2)
    theta = (t - ht.grid[k]) / ht.step
    return float((1.0 - theta) * ser[k] + theta * ser[k + 1])


def sample_transformed_path(kernel: HTransformedKernel, start: BpState, rng,
                            t_end: float | None = None,
                            cache: dict | None = None) -> BpPath:
    """Trajectory of the conditioned backward chain on [0, t_end].

    Homogeneous kernels run plain event-by-event simulation with the
    reweighted rates.  Inhomogeneous kernels thin against the suffix
    maximum of the total-rate knot values, which dominates the true rate
    on the remaining span because rates are monotone between knots.
    """
    if kernel.mode == "homogeneous":
        if t_end is None:
            raise ParamError("explicit horizon required")
        tables = cache if cache is not None else {}
        t, state, events = 0.0, start, []
        while True:
            trans = tables.get(state)
            if trans is None:
                trans = transformed_rates(kernel, state)
                tables[state] = trans
            total = sum(tr.rate for tr in trans)
            if total <= 0.0:
                break
            t += rng.exponential(1.0 / total)
            if t >= t_end:
                break
            x = rng.uniform(0.0, total)
            acc, chosen = 0.0, trans[-1]
            for tr in trans:
                acc += tr.rate
                if x < acc:
                    chosen = tr
                    break
            events.append((t, chosen))
            state = chosen.target
        return BpPath(initial=start, events=tuple(events), horizon=t_end,
                      params=kernel.p)

    ht = kernel.ht
    if t_end is None:
        t_end = ht.T
    if t_end > ht.T:
        raise ParamError("horizon beyond table range")
    tables = cache if cache is not None else {}
    t, state, events = 0.0, start, []
    while True:
        tab = tables.get(state)
        if tab is None:
            tab = _StateTables(state, kernel)
            tables[state] = tab
        if not tab.trans:
            break
        k0 = min(int(t / ht.step), len(ht.grid) - 2)
        lam_bar = float(tab.suffix_max[k0])
        if lam_bar <= 0.0:
            break
        accepted = False
        while True:
            t = t + rng.exponential(1.0 / lam_bar)
            if t >= t_end:
                break
            den_t = _interp(tab.den, t, ht)
            if den_t <= 0.0:
                raise ParamError("h positivity violated")
            lam_t = _interp(tab.num, t, ht) / den_t
            if rng.uniform(0.0, lam_bar) < lam_t:
                accepted = True
                break
        if not accepted:
            break
        weights = [tr.rate * _interp(ser, t, ht)
                   for tr, ser in zip(tab.trans, tab.tgt)]
        x = rng.uniform(0.0, sum(weights))
        acc, chosen = 0.0, tab.trans[-1]
        for tr, w in zip(tab.trans, weights):
            acc += w
            if x < acc:
                chosen = tr
                break
        events.append((t, chosen))
        state = chosen.target
    return BpPath(initial=start, events=tuple(events), horizon=t_end,
                  params=kernel.p)


@dataclass(frozen=True)
class ConditionedSample:
    path: BpPath
    lines: dict


def sample_conditioned_lines(p: ModelParams, xi_star: dict, mu, T: float, rng,
                             kernel: HTransformedKernel | None = None,
                             cache: dict | None = None) -> ConditionedSample:
    """Ancestral lines over [-T, 0] of the tagged sites, conditioned on
    their observed types xi_star at time 0, started from law mu at -T."""
    start = canonical_start(p, xi_star)
    if kernel is None:
        kernel = make_inhomogeneous_kernel(p, mu, T)
    path = sample_transformed_path(kernel, start, rng, t_end=T, cache=cache)
    return ConditionedSample(path=path, lines=reverse_to_lines(path))


def first_coalescence_time(path: BpPath) -> float:
    """Backward time at which the number of blocks first drops; infinity
    if it never does within the horizon."""
    n_blocks = len(path.initial.blocks)
    for (t, tr) in path.events:
        m = len(tr.target.blocks)
        if m < n_blocks:
            return t
        n_blocks = m
    return float("inf")


def forest_line(forest: LineageForest, site: int) -> LinePath:
    """(type, site) line of the lineage at `site`, over shifted time
    [origin - now, 0], matching the reversed backward convention."""
    breaks = []
    idx = forest.heads[site]
    chain = []
    while idx is not None:
        chain.append(idx)
        idx = forest.nodes[idx].parent
    chain.reverse()
    exit_times = [forest.nodes[k].birth_time for k in chain[1:]] + [np.inf]
    for k, exit_t in zip(chain, exit_times):
        node = forest.nodes[k]
        breaks.append((node.birth_time, (node.type_at_birth, node.site)))
        for (mt, mu) in node.mutations:
            if mt < exit_t:
                breaks.append((mt, (mu, node.site)))
    shift = forest.now
    times = tuple(bt - shift for bt, _ in breaks)
    values = tuple(v for _, v in breaks)
    return LinePath(times=times, values=values,
                    domain=(forest.time_origin - shift, 0.0))


def sample_config(p: ModelParams, mu, rng) -> tuple:
    """Draw a type configuration from a start law (product or explicit)."""
    if isinstance(mu, (list, tuple, np.ndarray)):
        arr = np.asarray(mu, dtype=float)
        if arr.shape == (p.d,):
            return tuple(int(u) for u in rng.choice(p.d, size=p.N, p=arr))
    configs = tuple(itertools.product(range(p.d), repeat=p.N))
    vec = config_law_vector(p, mu, configs)
    k = int(rng.choice(len(configs), p=vec))
    return configs[k]


@dataclass(frozen=True)
class FunctionalCheck:
    mean_forward: float
    se_forward: float
    accepted: int
    mean_backward: float
    se_backward: float
    pooled_se: float

    @property
    def gap(self) -> float:
        return abs(self.mean_forward - self.mean_backward)


def conditioned_functional_check(p: ModelParams, xi_star: dict, mu, T: float,
                                 functional, reps_forward: int,
                                 reps_backward: int, seed: int) -> FunctionalCheck:
    """Two independent estimates of a path functional of the tagged lines
    given their time-zero types.

    Forward route: simulate populations from mu for time T, keep those
    whose tagged sites show the observed types, and evaluate the
    functional on their actual lines.  Backward route: sample the
    conditioned chain and evaluate on the reversed lines.
    """
    validate_params(p)
    j_sites = sorted(xi_star)
    rng_f = np.random.Generator(np.random.Philox(key=(seed, 0)))
    rng_b = np.random.Generator(np.random.Philox(key=(seed, 1)))

    vals_f = []
    for _ in range(reps_forward):
        types0 = sample_config(p, mu, rng_f)
        forest = init_forest(p, 0.0, types0)
        run_until(forest, p, T, rng_f)
        if all(forest.current_types[j] == xi_star[j] for j in j_sites):
            lines = {j: forest_line(forest, j) for j in j_sites}
            vals_f.append(float(functional(lines)))
    if len(vals_f) < 2:
        raise ParamError("too few accepted forward replicates")
    vf = np.array(vals_f)
    mean_f = float(vf.mean())
    se_f = float(vf.std(ddof=1) / np.sqrt(len(vf)))

    kernel = make_inhomogeneous_kernel(p, mu, T)
    cache: dict = {}
    vals_b = np.empty(reps_backward)
    for r in range(reps_backward):
        sample = sample_conditioned_lines(p, xi_star, mu, T, rng_b,
                                          kernel=kernel, cache=cache)
        vals_b[r] = float(functional(sample.lines))
    mean_b = float(vals_b.mean())
    se_b = float(vals_b.std(ddof=1) / np.sqrt(reps_backward))

    pooled = float(np.hypot(se_f, se_b))
    return FunctionalCheck(mean_forward=mean_f, se_forward=se_f,
                           accepted=len(vals_f), mean_backward=mean_b,
                           se_backward=se_b, pooled_se=pooled)
