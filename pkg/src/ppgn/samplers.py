"""Gradient-based MCMC transitions and a generic chain runner.

States are float64 arrays.  Where a step takes ``rng`` it accepts either one
``numpy.random.Generator`` or a list with one generator per leading row, so a
batch of chains can advance together while each keeps its own stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, normal_array

Evaluator = Callable[[np.ndarray], np.ndarray]


class ChainError(RuntimeError):
    """A step failed; ``step`` is the index of the transition that failed."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class SamplerConfig:
    """Step multipliers for the prior term, condition term, and noise std."""

    eps1: float = 1e-5
    eps2: float = 1.0
    eps3: float = 1e-17
    steps: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("eps1", "eps2", "eps3"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def replace(self, **kw) -> "SamplerConfig":
        return SamplerConfig(**{**self.__dict__, **kw})


def _noise(shape, sigma, rng):
    return normal_array(shape, 0.0, sigma, rng)


def _uniform(rng, n):
    if isinstance(rng, np.random.Generator):
        return rng.random(n) if n > 1 else np.array([rng.random()])
    return np.array([r.random() for r in rng])


def _rows(x):
    return x.reshape(1, -1) if x.ndim <= 1 else x.reshape(x.shape[0], -1)


def mh_step(log_p: Evaluator, x, sigma: float, rng):
    """Random-walk Metropolis-Hastings with a Gaussian proposal.

    ``log_p`` maps a batch ``(n, ...)`` (or a single state) to log-density
    values.  Proposals with non-finite ``log_p`` are rejected.
    Returns ``(x_next, accepted)``.
    """
    x = np.asarray(x, dtype=np.float64)
    lp = np.asarray(log_p(x), dtype=np.float64)
    if not np.all(np.isfinite(lp)):
        raise NonFiniteError("log_p is not finite at the current state")
    prop = x + _noise(x.shape, sigma, rng)
    lq = np.asarray(log_p(prop), dtype=np.float64)
    return _accept(x, prop, lp, lq, np.zeros_like(lp), rng)


def _accept(x, prop, lp, lq, log_q_ratio, rng):
    log_alpha = np.where(np.isfinite(lq), lq - lp + log_q_ratio, -np.inf)
    u = _uniform(rng, np.size(lp)).reshape(np.shape(lp))
    accepted = np.log(u) < log_alpha
    if np.ndim(lp) == 0:
        acc = bool(accepted)
        return (prop if acc else x), acc
    mask = accepted.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.where(mask, prop, x), accepted


def mala_step(log_p: Evaluator, score: Evaluator, x, sigma: float, rng):
    """Metropolis-adjusted Langevin step.

    Proposal ``x' ~ N(x + sigma^2/2 * score(x), sigma^2)``; acceptance uses the
    full Hastings ratio for this asymmetric proposal.
    """
    x = np.asarray(x, dtype=np.float64)
    lp = np.asarray(log_p(x), dtype=np.float64)
    gx = np.asarray(score(x), dtype=np.float64)
    if not (np.all(np.isfinite(lp)) and np.all(np.isfinite(gx))):
        raise NonFiniteError("log_p or score is not finite at the current state")
    half = 0.5 * sigma * sigma
    prop = x + half * gx + _noise(x.shape, sigma, rng)
    lq = np.asarray(log_p(prop), dtype=np.float64)
    if sigma == 0:
        return _accept(x, prop, lp, lq, np.zeros_like(lp), rng)
    gp = np.asarray(score(prop), dtype=np.float64)
    fwd = _rows(prop - x - half * gx)
    bwd = _rows(x - prop - half * np.where(np.isfinite(gp), gp, 0.0))
    # log q(x | x') - log q(x' | x)
    log_q_ratio = -(np.sum(bwd * bwd, axis=1) - np.sum(fwd * fwd, axis=1)) / (2 * sigma * sigma)
    return _accept(x, prop, lp, lq, log_q_ratio.reshape(np.shape(lp)), rng)


def mala_approx_step(score: Evaluator, x, eps12: float, eps3: float, rng, step: int | None = None):
    """Rejection-free Langevin move ``x + eps12 * score(x) + N(0, eps3^2)``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(score(x), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        where = "" if step is None else f" at step {step}"
        raise NonFiniteError(f"score is not finite{where}")
    return x + eps12 * g + _noise(x.shape, eps3, rng)


def decoupled_step(prior_score: Evaluator | None, cond_grad: Evaluator | None, x, cfg: SamplerConfig, rng,
                   extra: np.ndarray | None = None):
    """``x + eps1 * prior_score(x) + eps2 * cond_grad(x) + N(0, eps3^2)``.

    A ``None`` evaluator contributes nothing.  ``extra`` is an optional
    additional term added before the noise.  One noise draw per step.
    An update that overflows raises :class:`NonFiniteError`.
    """
    x = np.asarray(x, dtype=np.float64)
    terms = []
    if prior_score is not None:
        p = np.asarray(prior_score(x), dtype=np.float64)
        if not np.all(np.isfinite(p)):
            raise NonFiniteError("prior term is not finite")
        terms.append((cfg.eps1, p))
    if cond_grad is not None:
        c = np.asarray(cond_grad(x), dtype=np.float64)
        if not np.all(np.isfinite(c)):
            raise NonFiniteError("condition term is not finite")
        terms.append((cfg.eps2, c))
    if extra is not None:
        if not np.all(np.isfinite(extra)):
            raise NonFiniteError("extra term is not finite")
        terms.append((1.0, extra))
    out = x
    with np.errstate(over="ignore", invalid="ignore"):
        for eps, term in terms:
            out = out + eps * term
        out = out + _noise(x.shape, cfg.eps3, rng)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("update overflowed to non-finite values")
    return out


@dataclass
class ChainRecord:
    """States of one chain (or a batch of chains) with per-step diagnostics.

    Index 0 holds the initial state.  With ``stride > 1`` only every
    ``stride``-th state (plus the last) is kept; ``steps`` gives the step
    number of each entry.
    """

    states: list[np.ndarray] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)
    confidences: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    energy_terms: list = field(default_factory=list)
    images: list[np.ndarray] = field(default_factory=list)
    extras: dict[str, list] = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def stacked(self, what: str = "states") -> np.ndarray:
        return np.stack(getattr(self, what))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def acceptance_rate(self) -> float:
        acc = np.asarray(self.accepted[1:], dtype=float)
        return float(acc.mean()) if acc.size else float("nan")


def run_chain(step_fn: Callable, x0, cfg: SamplerConfig, observers: Mapping[str, Callable] | None = None,
              stride: int = 1) -> ChainRecord:
    """Apply ``step_fn(x, t)`` ``cfg.steps`` times starting from ``x0``.

    ``step_fn`` returns either the next state or ``(state, info)`` where
    ``info`` may carry ``accepted`` and ``energy`` (prior, condition magnitudes).
    ``observers`` map names to callables of the state; the names
    ``confidence`` and ``image`` fill the matching record fields, anything
    else lands in ``extras``.  Errors are re-raised as :class:`ChainError`
    with the failing step index.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    observers = dict(observers or {})
    rec = ChainRecord()
    x = np.array(x0, dtype=np.float64)

    def record(t, state, accepted, energy):
        rec.states.append(state)
        rec.steps.append(t)
        rec.accepted.append(accepted)
        rec.energy_terms.append(energy)
        for name, fn in observers.items():
            val = fn(state)
            if name == "confidence":
                rec.confidences.append(val)
            elif name == "image":
                rec.images.append(val)
            else:
                rec.extras.setdefault(name, []).append(val)

    record(0, x, True, (0.0, 0.0))
    for t in range(1, cfg.steps + 1):
        try:
            out = step_fn(x, t)
        except ChainError:
            raise
        except Exception as exc:
            raise ChainError(t, exc) from exc
        info = {}
        if isinstance(out, tuple):
            out, info = out
        x = out
        if t % stride == 0 or t == cfg.steps:
            record(t, x, info.get("accepted", True), info.get("energy", (0.0, 0.0)))
    return rec
