"""Univariate Tree-structured Parzen Estimator search with a median pruner.

Studies persist as JSON after every trial so an interrupted search can resume.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import truncnorm

from .storage import atomic_write_text

log = logging.getLogger(__name__)

STATES = ("running", "complete", "pruned", "failed")


@dataclass(frozen=True)
class Param:
    name: str
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or not self.low < self.high:
            raise ValueError(f"parameter {self.name!r} needs finite low < high, got [{self.low}, {self.high}]")
        if self.log and self.low <= 0:
            raise ValueError(f"log-scale parameter {self.name!r} needs a positive lower bound")

    def to_internal(self, x):
        return np.log(x) if self.log else np.asarray(x, dtype=np.float64)

    def from_internal(self, y) -> float:
        x = float(np.exp(y)) if self.log else float(y)
        return min(max(x, self.low), self.high)

    @property
    def bounds(self) -> tuple[float, float]:
        if self.log:
            return math.log(self.low), math.log(self.high)
        return self.low, self.high


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[Param, ...]

    def __post_init__(self):
        names = [p.name for p in self.params]
        if not names:
            raise ValueError("search space is empty")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")

    @classmethod
    def from_dict(cls, spec: dict) -> "SearchSpace":
        """Build from ``{name: [low, high]}`` or ``{name: {"low", "high", "log"}}``."""
        params = []
        for name, bounds in spec.items():
            if isinstance(bounds, dict):
                params.append(Param(name, float(bounds["low"]), float(bounds["high"]), bool(bounds.get("log", False))))
            else:
                low, high = bounds
                params.append(Param(name, float(low), float(high)))
        return cls(tuple(params))

    def to_dict(self) -> dict:
        return {p.name: {"low": p.low, "high": p.high, "log": p.log} for p in self.params}

    def contains(self, assignment: dict) -> bool:
        return set(assignment) == {p.name for p in self.params} and all(
            p.low <= assignment[p.name] <= p.high for p in self.params
        )


@dataclass(frozen=True)
class SamplerConfig:
    n_startup: int = 5
    gamma: float = 0.25
    n_ei_candidates: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.n_startup < 0 or self.n_ei_candidates < 1 or not 0 < self.gamma < 1:
            raise ValueError("invalid sampler configuration")


@dataclass(frozen=True)
class PrunerConfig:
    n_startup_trials: int = 5
    n_warmup_steps: int = 30
    interval_steps: int = 10
    enabled: bool = True

    def __post_init__(self):
        if self.n_startup_trials < 0 or self.n_warmup_steps < 0 or self.interval_steps < 1:
            raise ValueError("invalid pruner configuration")


@dataclass
class Trial:
    id: int
    params: dict
    intermediates: dict = field(default_factory=dict)
    final: float | None = None
    state: str = "running"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "params": dict(self.params),
            "intermediates": [[int(s), float(v)] for s, v in sorted(self.intermediates.items())],
            "final": self.final,
            "state": self.state,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Trial":
        state = d["state"]
        if state not in STATES:
            raise ValueError(f"unknown trial state {state!r}")
        return cls(
            id=int(d["id"]),
            params={k: float(v) for k, v in d["params"].items()},
            intermediates={int(s): float(v) for s, v in d["intermediates"]},
            final=None if d["final"] is None else float(d["final"]),
            state=state,
        )


class TpeStudy:
    """Ordered trial history plus sampler and pruner settings."""

    def __init__(
        self,
        direction: str = "minimize",
        sampler: SamplerConfig = SamplerConfig(),
        pruner: PrunerConfig = PrunerConfig(),
        trials: list[Trial] | None = None,
    ):
        if direction not in ("minimize", "maximize"):
            raise ValueError(f"direction must be 'minimize' or 'maximize', got {direction!r}")
        self.direction = direction
        self.sampler = sampler
        self.pruner = pruner
        self.trials: list[Trial] = list(trials or [])
        for i, t in enumerate(self.trials):
            if t.id != i:
                raise ValueError("trial ids must be dense and ordered")
            if t.state == "complete" and (t.final is None or not math.isfinite(t.final)):
                raise ValueError(f"completed trial {i} has no finite final value")

    def sign(self) -> float:
        return 1.0 if self.direction == "minimize" else -1.0

    def completed(self) -> list[Trial]:
        return [t for t in self.trials if t.state == "complete"]

    def best_trial(self) -> Trial | None:
        done = self.completed()
        if not done:
            return None
        return min(done, key=lambda t: (self.sign() * t.final, t.id))

    def new_trial(self, params: dict) -> Trial:
        t = Trial(id=len(self.trials), params=dict(params))
        self.trials.append(t)
        return t

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "sampler": asdict(self.sampler),
            "pruner": asdict(self.pruner),
            "trials": [t.to_json() for t in self.trials],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TpeStudy":
        trials = [Trial.from_json(t) for t in d.get("trials", [])]
        for t in trials:
            # A trial still "running" on disk belongs to a process that died.
            if t.state == "running":
                t.state = "failed"
        return cls(d["direction"], SamplerConfig(**d["sampler"]), PrunerConfig(**d["pruner"]), trials)

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TpeStudy":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _parzen(obs: np.ndarray, low: float, high: float):
    """Truncated-Gaussian mixture over ``[low, high]``: observations plus a wide prior component.

    Each bandwidth is the larger gap to its sorted neighbours (bounds count as
    neighbours), clipped to ``[(high - low) / min(100, n + 1), high - low]``.
    """
    width = high - low
    prior_mu = 0.5 * (low + high)
    mus = np.append(np.asarray(obs, dtype=np.float64), prior_mu)
    order = np.argsort(mus, kind="stable")
    sorted_mus = mus[order]
    padded = np.concatenate([[low], sorted_mus, [high]])
    gaps = np.maximum(padded[1:-1] - padded[:-2], padded[2:] - padded[1:-1])
    sigmas = np.empty_like(mus)
    sigmas[order] = gaps
    n = len(mus)
    sigmas = np.clip(sigmas, width / min(100.0, n + 1.0), width)
    sigmas[-1] = width
    return mus, sigmas


def _parzen_logpdf(x: np.ndarray, mus, sigmas, low, high) -> np.ndarray:
    a = (low - mus) / sigmas
    b = (high - mus) / sigmas
    comps = truncnorm.logpdf(x[:, None], a[None, :], b[None, :], loc=mus[None, :], scale=sigmas[None, :])
    top = comps.max(axis=1, keepdims=True)
    return (top + np.log(np.mean(np.exp(comps - top), axis=1, keepdims=True)))[:, 0]


def _parzen_sample(rng: np.random.Generator, n: int, mus, sigmas, low, high) -> np.ndarray:
    which = rng.integers(len(mus), size=n)
    mu, sig = mus[which], sigmas[which]
    return truncnorm.rvs((low - mu) / sig, (high - mu) / sig, loc=mu, scale=sig, random_state=rng)


def tpe_suggest(study: TpeStudy, space: SearchSpace) -> dict:
    """Next parameter assignment; deterministic given the study contents and seed."""
    if not space.params:
        raise ValueError("search space is empty")
    rng = np.random.default_rng([study.sampler.seed, len(study.trials)])
    done = study.completed()
    if len(done) < study.sampler.n_startup:
        out = {}
        for p in space.params:
            lo, hi = p.bounds
            out[p.name] = p.from_internal(rng.uniform(lo, hi))
        return out

    losses = np.array([study.sign() * t.final for t in done])
    order = np.argsort(losses, kind="stable")
    n_good = max(1, math.ceil(study.sampler.gamma * len(done)))
    good, bad = order[:n_good], order[n_good:]
    out = {}
    for p in space.params:
        lo, hi = p.bounds
        values = np.array([float(p.to_internal(t.params[p.name])) for t in done])
        l_mu, l_sig = _parzen(values[good], lo, hi)
        g_mu, g_sig = _parzen(values[bad], lo, hi)
        cand = _parzen_sample(rng, study.sampler.n_ei_candidates, l_mu, l_sig, lo, hi)
        score = _parzen_logpdf(cand, l_mu, l_sig, lo, hi) - _parzen_logpdf(cand, g_mu, g_sig, lo, hi)
        out[p.name] = p.from_internal(cand[int(np.argmax(score))])
    return out


def should_prune(study: TpeStudy, trial: Trial, step: int) -> bool:
    """Median rule: prune when the trial is worse than the median of completed trials at ``step``."""
    cfg = study.pruner
    if not cfg.enabled:
        return False
    done = study.completed()
    if len(done) < cfg.n_startup_trials or step < cfg.n_warmup_steps or step % cfg.interval_steps != 0:
        return False
    if step not in trial.intermediates:
        raise KeyError(f"trial {trial.id} has no value at step {step}")
    others = [t.intermediates[step] for t in done if step in t.intermediates]
    if not others:
        return False
    value = trial.intermediates[step]
    if math.isnan(value):
        return True
    median = float(np.median(others))
    return value > median if study.direction == "minimize" else value < median


class TrialPruned(Exception):
    """Raised by an objective to stop a trial the pruner rejected."""


class TrialHandle:
    """What an objective sees: the suggested parameters and a reporting channel."""

    def __init__(self, study: TpeStudy, trial: Trial):
        self._study = study
        self._trial = trial

    @property
    def params(self) -> dict:
        return dict(self._trial.params)

    @property
    def id(self) -> int:
        return self._trial.id

    def report(self, step: int, value: float) -> None:
        self._trial.intermediates[int(step)] = float(value)

    def should_prune(self, step: int) -> bool:
        return should_prune(self._study, self._trial, step)


def run_study(
    objective: Callable[[TrialHandle], float],
    space: SearchSpace,
    n_trials: int,
    study: TpeStudy,
    path=None,
) -> Trial | None:
    """Run ``n_trials`` new trials sequentially and return the best completed trial.

    The study is saved to ``path`` (if given) after each trial. A trial whose
    objective raises is marked failed and the search continues.
    """
    if n_trials < 0:
        raise ValueError("n_trials must be >= 0")
    for _ in range(n_trials):
        trial = study.new_trial(tpe_suggest(study, space))
        try:
            value = float(objective(TrialHandle(study, trial)))
            if math.isfinite(value):
                trial.final, trial.state = value, "complete"
            else:
                log.warning("trial %d returned non-finite value %r", trial.id, value)
                trial.state = "failed"
        except TrialPruned:
            trial.state = "pruned"
        except Exception as exc:  # noqa: BLE001 - any objective failure is recorded, not fatal
            log.warning("trial %d failed: %s", trial.id, exc)
            trial.state = "failed"
        if path is not None:
            study.save(path)
    return study.best_trial()


def branin_unit(x: float, y: float) -> float:
    """Branin function with both inputs rescaled from the unit square; minimum about 0.397887."""
    x1 = 15.0 * x - 5.0
    x2 = 15.0 * y
    b = 5.1 / (4.0 * math.pi**2)
    c = 5.0 / math.pi
    t = 1.0 / (8.0 * math.pi)
    return (x2 - b * x1 * x1 + c * x1 - 6.0) ** 2 + 10.0 * (1.0 - t) * math.cos(x1) + 10.0
