"""No-U-Turn sampler with dual-averaging step size and diagonal metric adaptation.

Multinomial trajectory sampling with the generalised no-U-turn criterion
(including the extra checks across merged subtrees), biased progressive
sampling at the top level, and windowed warm-up: a fast initial buffer,
doubling slow windows for the inverse metric, and a terminal buffer that only
tunes the step size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import NumericError

LogDensity = Callable[[np.ndarray], "tuple[float, np.ndarray]"]
MAX_DELTA_H = 1000.0


@dataclass(frozen=True)
class SamplerSettings:
    warmup: int = 1000
    max_tree_depth: int = 10
    target_accept: float = 0.8
    adapt_metric: bool = True
    init_radius: float = 2.0
    algorithm: Literal["nuts", "hmc"] = "nuts"
    hmc_steps: int = 16  # debugging only: fixed-length HMC


@dataclass
class ChainResult:
    samples: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    warmup_divergent: int = 0

    def summary(self) -> dict:
        return {
            "step_size": float(self.step_size),
            "mean_accept_stat": float(self.accept_stat.mean()) if self.accept_stat.size else float("nan"),
            "mean_tree_depth": float(self.tree_depth.mean()) if self.tree_depth.size else float("nan"),
            "mean_leapfrog": float(self.n_leapfrog.mean()) if self.n_leapfrog.size else float("nan"),
            "divergences": int(self.divergent.sum()),
            "divergence_rate": float(self.divergent.mean()) if self.divergent.size else 0.0,
            "warmup_divergences": int(self.warmup_divergent),
            "inv_metric": [float(v) for v in self.inv_metric],
        }


class _Point:
    __slots__ = ("q", "p", "g", "lp")

    def __init__(self, q, p, g, lp):
        self.q, self.p, self.g, self.lp = q, p, g, lp


class _Tree:
    __slots__ = (
        "begin", "end", "p_sharp_begin", "p_sharp_end", "rho", "log_w",
        "proposal", "n_leapfrog", "sum_accept", "invalid", "divergent",
    )


class _Integrator:
    def __init__(self, logp: LogDensity, inv_metric: np.ndarray):
        self.logp = logp
        self.inv_metric = inv_metric

    def evaluate(self, q: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            lp, g = self.logp(q)
        except (NumericError, FloatingPointError, OverflowError):
            return -math.inf, np.zeros_like(q)
        if not math.isfinite(lp) or not np.all(np.isfinite(g)):
            return -math.inf, np.zeros_like(q)
        return lp, g

    def kinetic(self, p: np.ndarray) -> float:
        return 0.5 * float(np.dot(p, self.inv_metric * p))

    def hamiltonian(self, pt: _Point) -> float:
        if not math.isfinite(pt.lp):
            return math.inf
        return -pt.lp + self.kinetic(pt.p)

    def leapfrog(self, pt: _Point, eps: float) -> _Point:
        p = pt.p + 0.5 * eps * pt.g
        q = pt.q + eps * self.inv_metric * p
        lp, g = self.evaluate(q)
        p = p + 0.5 * eps * g
        return _Point(q, p, g, lp)


def _no_turn(p_sharp_a: np.ndarray, p_sharp_b: np.ndarray, rho: np.ndarray) -> bool:
    return float(np.dot(p_sharp_a, rho)) > 0 and float(np.dot(p_sharp_b, rho)) > 0


class _NUTS:
    def __init__(self, integ: _Integrator, rng: np.random.Generator, max_depth: int):
        self.integ = integ
        self.rng = rng
        self.max_depth = max_depth

    def _leaf(self, start: _Point, eps: float, h0: float) -> _Tree:
        pt = self.integ.leapfrog(start, eps)
        h = self.integ.hamiltonian(pt)
        if math.isnan(h):
            h = math.inf
        t = _Tree()
        t.begin = t.end = pt
        t.p_sharp_begin = t.p_sharp_end = self.integ.inv_metric * pt.p
        t.rho = pt.p.copy()
        t.log_w = h0 - h
        t.proposal = pt
        t.n_leapfrog = 1
        t.sum_accept = math.exp(min(0.0, h0 - h)) if math.isfinite(h) else 0.0
        t.divergent = (h - h0) > MAX_DELTA_H
        t.invalid = t.divergent
        return t

    def _build(self, start: _Point, depth: int, eps: float, h0: float) -> _Tree:
        if depth == 0:
            return self._leaf(start, eps, h0)
        a = self._build(start, depth - 1, eps, h0)
        if a.invalid:
            return a
        b = self._build(a.end, depth - 1, eps, h0)
        a.n_leapfrog += b.n_leapfrog
        a.sum_accept += b.sum_accept
        if b.invalid:
            a.invalid = True
            a.divergent = b.divergent
            return a
        log_w = np.logaddexp(a.log_w, b.log_w)
        if self.rng.uniform() < math.exp(b.log_w - log_w):
            a.proposal = b.proposal
        a.invalid = self._turning(a, b)
        a.rho = a.rho + b.rho
        a.log_w = log_w
        a.end = b.end
        a.p_sharp_end = b.p_sharp_end
        return a

    @staticmethod
    def _turning(a: _Tree, b: _Tree) -> bool:
        rho = a.rho + b.rho
        if not _no_turn(a.p_sharp_begin, b.p_sharp_end, rho):
            return True
        if not _no_turn(a.p_sharp_begin, b.p_sharp_begin, a.rho + b.begin.p):
            return True
        if not _no_turn(a.p_sharp_end, b.p_sharp_end, b.rho + a.end.p):
            return True
        return False

    def transition(self, current: _Point, eps: float):
        integ = self.integ
        p0 = self.rng.standard_normal(current.q.size) / np.sqrt(integ.inv_metric)
        start = _Point(current.q, p0, current.g, current.lp)
        h0 = integ.hamiltonian(start)
        p_sharp = integ.inv_metric * p0
        # "minus"/"plus" ends of the whole trajectory
        ends = {-1: (start, p_sharp), 1: (start, p_sharp)}
        rho = p0.copy()
        log_w = 0.0
        proposal = start
        n_leapfrog, sum_accept = 0, 0.0
        divergent = False
        depth = 0
        while depth < self.max_depth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            edge, _ = ends[direction]
            sub = self._build(edge, depth, direction * eps, h0)
            n_leapfrog += sub.n_leapfrog
            sum_accept += sub.sum_accept
            depth += 1
            if sub.invalid:
                divergent = sub.divergent
                break
            if sub.log_w > log_w or self.rng.uniform() < math.exp(sub.log_w - log_w):
                proposal = sub.proposal
            # old tree in build order: begin at the far side, end at the growing edge
            old = _Tree()
            old.begin, old.p_sharp_begin = ends[-direction]
            old.end, old.p_sharp_end = ends[direction]
            old.rho = rho
            turning = self._turning(old, sub)
            log_w = float(np.logaddexp(log_w, sub.log_w))
            rho = rho + sub.rho
            ends[direction] = (sub.end, sub.p_sharp_end)
            if turning:
                break
        accept = sum_accept / max(n_leapfrog, 1)
        return proposal, accept, depth, n_leapfrog, divergent


class _DualAveraging:
    def __init__(self, eps0: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0: float):
        self.mu = math.log(10 * eps0)
        self.hbar = 0.0
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept: float) -> float:
        self.count += 1
        m = self.count
        w = 1.0 / (m + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.hbar
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def _metric_windows(warmup: int, init_buffer=75, term_buffer=50, base_window=25) -> list[tuple[int, int]]:
    """(start, end) iteration ranges of the slow metric-adaptation windows."""
    if warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    windows = []
    start, size = init_buffer, base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


def _init_step(integ: _Integrator, pt: _Point, rng: np.random.Generator, eps: float = 1.0) -> float:
    def delta_h(e):
        p = rng.standard_normal(pt.q.size) / np.sqrt(integ.inv_metric)
        start = _Point(pt.q, p, pt.g, pt.lp)
        h0 = integ.hamiltonian(start)
        h = integ.hamiltonian(integ.leapfrog(start, e))
        return h0 - h if math.isfinite(h) else -math.inf

    direction = 1 if delta_h(eps) > math.log(0.8) else -1
    for _ in range(100):
        eps = eps * 2.0 if direction == 1 else eps / 2.0
        dh = delta_h(eps)
        if direction == 1 and not dh > math.log(0.8):
            break
        if direction == -1 and dh > math.log(0.8):
            break
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


def run_chain(
    logp: LogDensity,
    init: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
    settings: SamplerSettings = SamplerSettings(),
) -> ChainResult:
    dim = init.size
    integ = _Integrator(logp, np.ones(dim))
    lp, g = integ.evaluate(np.asarray(init, float))
    if not math.isfinite(lp):
        raise NumericError("log density is not finite at the initial point")
    current = _Point(np.asarray(init, float), np.zeros(dim), g, lp)
    nuts = _NUTS(integ, rng, settings.max_tree_depth)

    eps = _init_step(integ, current, rng)
    adapt = _DualAveraging(eps, settings.target_accept)
    windows = _metric_windows(settings.warmup) if settings.adapt_metric else []
    wsum = np.zeros(dim)
    wsq = np.zeros(dim)
    wn = 0
    warmup_div = 0

    def step(pt, e):
        if settings.algorithm == "hmc":
            return _hmc_transition(integ, pt, e, settings.hmc_steps, rng)
        return nuts.transition(pt, e)

    for it in range(settings.warmup):
        current, accept, _, _, div = step(current, eps)
        warmup_div += int(div)
        eps = adapt.update(accept)
        if windows and windows[0][0] <= it < windows[0][1]:
            wn += 1
            wsum += current.q
            wsq += current.q**2
            if it + 1 == windows[0][1]:
                mean = wsum / wn
                var = np.maximum(wsq / wn - mean**2, 0.0) * wn / max(wn - 1, 1)
                integ.inv_metric = (wn / (wn + 5.0)) * var + 1e-3 * (5.0 / (wn + 5.0))
                windows.pop(0)
                wsum[:] = 0.0
                wsq[:] = 0.0
                wn = 0
                eps = _init_step(integ, current, rng, eps)
                adapt.restart(eps)
    if settings.warmup:
        eps = adapt.final

    out = np.empty((n_samples, dim))
    acc = np.empty(n_samples)
    depth = np.empty(n_samples, int)
    nlf = np.empty(n_samples, int)
    div = np.zeros(n_samples, bool)
    for i in range(n_samples):
        current, acc[i], depth[i], nlf[i], div[i] = step(current, eps)
        out[i] = current.q
    return ChainResult(out, eps, integ.inv_metric.copy(), acc, depth, nlf, div, warmup_div)


def _hmc_transition(integ: _Integrator, current: _Point, eps: float, steps: int, rng):
    p0 = rng.standard_normal(current.q.size) / np.sqrt(integ.inv_metric)
    start = _Point(current.q, p0, current.g, current.lp)
    h0 = integ.hamiltonian(start)
    pt = start
    # jittered step size breaks periodic trajectories
    eps *= rng.uniform(0.8, 1.2)
    for _ in range(steps):
        pt = integ.leapfrog(pt, eps)
    h = integ.hamiltonian(pt)
    accept = math.exp(min(0.0, h0 - h)) if math.isfinite(h) else 0.0
    divergent = (h - h0) > MAX_DELTA_H
    if rng.uniform() < accept:
        return pt, accept, 0, steps, divergent
    return current, accept, 0, steps, divergent


def effective_sample_size(chains: np.ndarray) -> np.ndarray:
    """Multi-chain ESS per coordinate (Geyer initial monotone sequence).

    ``chains`` has shape (n_chains, n_draws, dim) or (n_chains, n_draws).
    """
    x = np.asarray(chains, float)
    if x.ndim == 2:
        x = x[..., None]
    m, n, dim = x.shape
    ess = np.empty(dim)
    for j in range(dim):
        c = x[:, :, j]
        centered = c - c.mean(axis=1, keepdims=True)
        size = 1 << int(np.ceil(np.log2(2 * n)))
        f = np.fft.rfft(centered, size, axis=1)
        acov = np.fft.irfft(f * np.conjugate(f), size, axis=1)[:, :n] / n
        chain_var = acov[:, 0] * n / max(n - 1, 1)
        w = chain_var.mean()
        b_over_n = c.mean(axis=1).var(ddof=1) if m > 1 else 0.0
        var_plus = w * (n - 1) / n + b_over_n
        if var_plus <= 0:
            ess[j] = float(m * n)
            continue
        rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
        rho[0] = 1.0
        # Geyer: sum of adjacent pairs while positive, forced monotone
        tau = -1.0
        prev_pair = math.inf
        for t in range(0, n - 1, 2):
            pair = rho[t] + rho[t + 1]
            if pair <= 0:
                break
            pair = min(pair, prev_pair)
            prev_pair = pair
            tau += 2 * pair
        ess[j] = m * n / max(tau, 1.0 / math.log10(max(m * n, 10)))
    return ess
