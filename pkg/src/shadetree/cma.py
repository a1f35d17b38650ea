"""CMA-ES with basin restarts and a local polish step.

Covariance Matrix Adaptation Evolution Strategy in its standard
formulation (rank-one + rank-mu updates, cumulative step-size
adaptation), run `restarts` times from resampled start points with the
global best kept across runs, and optionally finished with a short
coordinate pattern search after each run.  Everything is driven by one
numpy Generator, so results are deterministic per seed.

The search space is unconstrained R^n; callers that need box constraints
wrap their objective in a squashing bijection (see optimize.BoxSquash).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["OptimizerConfig", "OptimizeResult", "cma_minimize"]


@dataclass
class OptimizerConfig:
    popsize: int | None = None      # default 4 + floor(3 ln n)
    sigma0: float = 0.3
    max_evals: int = 10_000
    restarts: int = 1               # total runs (basin restarts), >= 1
    refine_evals: int = 0           # pattern-search polish budget per restart
    seed: int | None = None         # used when no Generator is passed in
    ftarget: float | None = None
    tolfun: float = 1e-12
    tolx: float = 1e-11

    def __post_init__(self):
        if self.popsize is not None and self.popsize < 4:
            raise ValueError(f"population size must be >= 4, got {self.popsize}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")


@dataclass
class OptimizeResult:
    x: np.ndarray
    f: float
    evals: int
    stop: str                       # "ftarget" | "budget" | "converged"
    history: list[tuple[int, float]] = field(default_factory=list)
    # history is (cumulative evals, best-so-far f) per generation; the trace
    # written out as CSV for plots.


def _default_popsize(dim: int) -> int:
    return 4 + int(3 * np.log(dim))


class _CmaRun:
    """One CMA-ES run; ask/tell with standard parameter settings."""

    def __init__(self, x0: np.ndarray, sigma0: float, popsize: int,
                 rng: np.random.Generator):
        n = len(x0)
        self.n = n
        self.rng = rng
        self.mean = np.asarray(x0, dtype=np.float64).copy()
        self.sigma = float(sigma0)
        lam = popsize
        mu = lam // 2
        w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        w /= w.sum()
        self.lam, self.mu, self.weights = lam, mu, w
        self.mueff = 1.0 / np.sum(w * w)
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1,
                       2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, np.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chin = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.gen = 0
        self._decompose()

    def _decompose(self):
        self.C = (self.C + self.C.T) / 2
        d2, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(d2, 1e-20))

    def ask(self) -> np.ndarray:
        z = self.rng.standard_normal((self.lam, self.n))
        return self.mean + self.sigma * (z * self.D) @ self.B.T

    def tell(self, xs: np.ndarray, fs: np.ndarray) -> None:
        self.gen += 1
        order = np.argsort(fs)
        xs = xs[order[: self.mu]]
        old_mean = self.mean
        self.mean = self.weights @ xs
        y = (self.mean - old_mean) / self.sigma
        # C^(-1/2) y via the cached eigendecomposition
        cinv_y = self.B @ ((self.B.T @ y) / self.D)
        self.ps = ((1 - self.cs) * self.ps +
                   np.sqrt(self.cs * (2 - self.cs) * self.mueff) * cinv_y)
        hsig = (np.sum(self.ps ** 2) / self.n /
                (1 - (1 - self.cs) ** (2 * self.gen)) < 2 + 4 / (self.n + 1))
        self.pc = ((1 - self.cc) * self.pc +
                   hsig * np.sqrt(self.cc * (2 - self.cc) * self.mueff) * y)
        artmp = (xs - old_mean) / self.sigma
        c1a = self.c1 * (1 - (1 - hsig ** 2) * self.cc * (2 - self.cc))
        self.C = ((1 - c1a - self.cmu) * self.C +
                  self.c1 * np.outer(self.pc, self.pc) +
                  self.cmu * (artmp.T * self.weights) @ artmp)
        self.sigma *= np.exp((self.cs / self.damps) *
                             (np.linalg.norm(self.ps) / self.chin - 1))
        self.sigma = float(min(self.sigma, 1e6))
        self._decompose()

    def axis_scale(self) -> float:
        return self.sigma * float(self.D.max())


def _pattern_polish(objective, x, f, step, budget, tolx):
    """Greedy coordinate search with a shrinking step; returns (x, f, evals)."""
    evals = 0
    x = x.copy()
    n = len(x)
    while evals < budget and step > tolx:
        improved = False
        for i in range(n):
            for sign in (1.0, -1.0):
                if evals >= budget:
                    break
                trial = x.copy()
                trial[i] += sign * step
                ft = objective(trial)
                evals += 1
                if ft < f:
                    x, f = trial, ft
                    improved = True
                    break
        if not improved:
            step *= 0.5
    return x, f, evals


def cma_minimize(objective: Callable[[np.ndarray], float], dim: int,
                 config: OptimizerConfig, x0: np.ndarray | None = None,
                 prior: Callable[[np.random.Generator], np.ndarray] | None = None,
                 rng: np.random.Generator | None = None) -> OptimizeResult:
    """Minimize `objective` over R^dim.

    The first run starts from `x0` (or the prior, or the origin); each
    basin restart resamples its start point from `prior` (default: a
    standard normal scaled by sigma0).  Running out of budget is a normal
    outcome: the result carries the best point seen anywhere.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    popsize = config.popsize or _default_popsize(dim)

    def sample_start(run_index: int) -> np.ndarray:
        if run_index == 0 and x0 is not None:
            return np.asarray(x0, dtype=np.float64)
        if prior is not None:
            return np.asarray(prior(rng), dtype=np.float64)
        if run_index == 0:
            return np.zeros(dim)
        return rng.standard_normal(dim) * (3 * config.sigma0)

    best_x = None
    best_f = np.inf
    evals = 0
    history: list[tuple[int, float]] = []
    stop = "budget"

    for run in range(config.restarts):
        remaining = config.max_evals - evals
        if remaining <= popsize:
            break
        budget = remaining // (config.restarts - run)
        start = sample_start(run)
        f0 = float(objective(start))
        evals += 1
        used = 1
        if f0 < best_f:
            best_x, best_f = start.copy(), f0
        run_best_x, run_best_f = start.copy(), f0
        es = _CmaRun(start, config.sigma0, popsize, rng)
        recent: list[float] = []
        run_stop = "budget"
        while used + popsize <= budget - min(config.refine_evals, budget // 4):
            xs = es.ask()
            fs = np.array([objective(x) for x in xs])
            used += popsize
            evals += popsize
            es.tell(xs, fs)
            gen_best = int(np.argmin(fs))
            if fs[gen_best] < run_best_f:
                run_best_f = float(fs[gen_best])
                run_best_x = xs[gen_best].copy()
            if run_best_f < best_f:
                best_x, best_f = run_best_x.copy(), run_best_f
            history.append((evals, best_f))
            if config.ftarget is not None and best_f <= config.ftarget:
                return OptimizeResult(best_x, best_f, evals, "ftarget", history)
            recent.append(float(fs.min()))
            if len(recent) > 10 + int(30 * es.n / popsize):
                recent.pop(0)
            spread = max(recent) - min(recent) if len(recent) >= 5 else np.inf
            if (spread < config.tolfun and float(fs.max() - fs.min()) < config.tolfun):
                run_stop = "converged"
                break
            if es.axis_scale() < config.tolx:
                run_stop = "converged"
                break
            if not np.all(np.isfinite(es.mean)):
                break
        if config.refine_evals > 0:
            polish_budget = min(config.refine_evals, budget - used,
                                config.max_evals - evals)
            if polish_budget > 0:
                step = max(es.sigma, 1e-6)
                px, pf, pe = _pattern_polish(objective, run_best_x, run_best_f,
                                             step, polish_budget, config.tolx)
                evals += pe
                if pf < best_f:
                    best_x, best_f = px, pf
                history.append((evals, best_f))
                if config.ftarget is not None and best_f <= config.ftarget:
                    return OptimizeResult(best_x, best_f, evals, "ftarget", history)
        if run_stop == "converged":
            stop = "converged"

    return OptimizeResult(best_x if best_x is not None else np.zeros(dim),
                          best_f, evals, stop, history)
