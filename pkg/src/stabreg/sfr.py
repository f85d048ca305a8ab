"""Stochastic I-SFR supply: supports, joint enumeration, sampling, prediction."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, EnumerationCapError

DEFAULT_CAP = 4096
GUESSES = ("mean", "empirical")
SCOPES = ("movement", "node")


@dataclass(frozen=True, eq=False)
class SfrModel:
    """Independent per-movement I-SFR distributions (rates in veh/interval)."""

    supports: tuple  # per movement: sorted 1-d array of distinct rates
    probs: tuple     # per movement: matching probabilities

    def __post_init__(self):
        sup, prb = [], []
        for k, (s, p) in enumerate(zip(self.supports, self.probs)):
            s = np.asarray(s, dtype=float).ravel()
            p = np.asarray(p, dtype=float).ravel()
            if s.size == 0 or s.size != p.size:
                raise ConfigError(f"sfr[{k}]: support and probs must be non-empty and equal length")
            if np.any(s < 0) or not np.all(np.isfinite(s)):
                raise ConfigError(f"sfr[{k}]: rates must be finite and non-negative")
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ConfigError(f"sfr[{k}]: probabilities must be >= 0 and sum to 1")
            order = np.argsort(s)
            s, p = s[order], p[order]
            if np.any(np.diff(s) <= 0):
                raise ConfigError(f"sfr[{k}]: support values must be distinct")
            sup.append(s)
            prb.append(p)
        if len(self.supports) != len(self.probs):
            raise ConfigError("sfr: supports and probs differ in length")
        object.__setattr__(self, "supports", tuple(sup))
        object.__setattr__(self, "probs", tuple(prb))

    @property
    def size(self) -> int:
        return len(self.supports)

    @property
    def upper_bound(self) -> float:
        return max(float(s[-1]) for s in self.supports)

    @cached_property
    def _table(self):
        # padded support / cumulative-probability tables for vectorised sampling
        width = max(s.size for s in self.supports)
        vals = np.zeros((self.size, width))
        cdf = np.ones((self.size, width))
        for i, (s, p) in enumerate(zip(self.supports, self.probs)):
            vals[i, :s.size] = s
            vals[i, s.size:] = s[-1]
            cdf[i, :s.size] = np.cumsum(p)
        cdf[:, -1] = 1.0 + 1e-12
        return vals, cdf


@dataclass(frozen=True)
class JointValue:
    index: int
    p: float
    s: np.ndarray


@dataclass(frozen=True)
class Predictor:
    """Prediction ability ``theta`` with an unbiased fallback guess.

    ``scope`` controls the hit events: ``"movement"`` draws one independent
    hit per movement, ``"node"`` shares one draw among a node's movements.
    """

    theta: float
    guess: str = "mean"
    band: float = 1.0
    scope: str = "movement"

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"predictor.theta must lie in [0, 1], got {self.theta}")
        if self.guess not in GUESSES:
            raise ConfigError(f"predictor.guess must be one of {GUESSES}, got {self.guess!r}")
        if self.band < 0:
            raise ConfigError("predictor.band must be non-negative")
        if self.scope not in SCOPES:
            raise ConfigError(f"predictor.scope must be one of {SCOPES}")


@dataclass(frozen=True)
class PredictionOutcome:
    s_hat: np.ndarray
    hit_mask: np.ndarray


def sfr_model_from_config(blocks: Sequence[Mapping[str, Any]], movement_ids: Sequence) -> SfrModel:
    """Order the per-movement SFR blocks to match ``movement_ids``."""
    by_id = {}
    for k, b in enumerate(blocks):
        try:
            mid = b["movement_id"]
            by_id[mid] = (b["support"], b["probs"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"sfr[{k}]: missing field {exc}") from exc
    missing = [m for m in movement_ids if m not in by_id]
    if missing:
        raise ConfigError(f"sfr: no block for movements {missing}")
    extra = set(by_id) - set(movement_ids)
    if extra:
        raise ConfigError(f"sfr: blocks for unknown movements {sorted(map(str, extra))}")
    return SfrModel(tuple(by_id[m][0] for m in movement_ids),
                    tuple(by_id[m][1] for m in movement_ids))


def predictor_from_config(block: Mapping[str, Any]) -> Predictor:
    try:
        return Predictor(float(block["theta"]), block.get("guess", "mean"),
                         float(block.get("band", 1.0)), block.get("scope", "movement"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"predictor: {exc}") from exc


def mean_sfr(model: SfrModel) -> np.ndarray:
    return np.array([float(s @ p) for s, p in zip(model.supports, model.probs)])


def enumerate_joint_values(model: SfrModel, mask: Optional[Sequence[int]] = None,
                           cap: int = DEFAULT_CAP) -> list[JointValue]:
    """All joint rate combinations over ``mask`` (default: every movement).

    ``s`` of each joint value lists rates of the masked movements in mask
    order. The first movement varies fastest.
    """
    idx = list(range(model.size)) if mask is None else list(mask)
    count = 1
    for i in idx:
        count *= model.supports[i].size
    if count > cap:
        raise EnumerationCapError(f"{count} joint values exceed the cap of {cap}")
    out = []
    ranges = [range(model.supports[i].size) for i in reversed(idx)]
    for rev in itertools.product(*ranges):
        combo = rev[::-1]
        p = float(np.prod([model.probs[i][y] for i, y in zip(idx, combo)]))
        if p > 0:
            s = np.array([model.supports[i][y] for i, y in zip(idx, combo)])
            out.append(JointValue(len(out), p, s))
    return out


def joint_arrays(model: SfrModel, mask=None, cap: int = DEFAULT_CAP) -> tuple[np.ndarray, np.ndarray]:
    """(p, S) with S[e] the rate vector of joint value e."""
    jv = enumerate_joint_values(model, mask, cap)
    return np.array([j.p for j in jv]), np.array([j.s for j in jv]).reshape(len(jv), -1)


def sample_joint(model: SfrModel, rng: np.random.Generator) -> np.ndarray:
    """One iid draw of every movement's I-SFR."""
    vals, cdf = model._table
    u = rng.random(model.size)
    k = (u[:, None] >= cdf).sum(axis=1)
    return vals[np.arange(model.size), k]


def _guess(pred: Predictor, model: SfrModel, u: np.ndarray) -> np.ndarray:
    if pred.guess == "mean":
        return mean_sfr(model)
    vals, cdf = model._table
    k = (u[:, None] >= cdf).sum(axis=1)
    return vals[np.arange(model.size), k]


def predict(pred: Predictor, model: SfrModel, truth: np.ndarray, rng: np.random.Generator,
            groups: Optional[np.ndarray] = None) -> PredictionOutcome:
    """Reveal each true rate with probability theta, otherwise guess.

    Two uniforms per movement are always drawn so that runs with different
    theta on the same seed see the same random stream; hit sets are then
    nested in theta. ``groups`` (node index per movement) is required for
    node-scope predictors.
    """
    u_hit = rng.random(model.size)
    u_guess = rng.random(model.size)
    if pred.scope == "node":
        if groups is None:
            raise ValueError("node-scope prediction needs the movement-to-node grouping")
        u_hit = u_hit[np.asarray(groups)]
    hit = u_hit < pred.theta
    guess = _guess(pred, model, u_guess)
    return PredictionOutcome(np.where(hit, truth, guess), hit)


def _band_hits(values: np.ndarray, targets: np.ndarray, band: float) -> np.ndarray:
    """hits[i, y]: value i scores as correct for target y."""
    d = values[:, None] - targets[None, :]
    if band == 0:
        return d == 0
    return (d >= -band / 2) & (d < band / 2)


def guess_distribution(pred: Predictor, model: SfrModel, m: int) -> tuple[np.ndarray, np.ndarray]:
    if pred.guess == "mean":
        return np.array([mean_sfr(model)[m]]), np.array([1.0])
    return model.supports[m], model.probs[m]


def accuracy_from_ability(model: SfrModel, m: int, pred: Predictor) -> float:
    """Expected share of predictions within the accuracy band for movement m.

    eta = theta + (1 - theta) * sum_y rho_y * p_hat_y, where p_hat_y is the
    guess mass landing in [S_y - b/2, S_y + b/2) (exact match when b = 0).
    """
    s, rho = model.supports[m], model.probs[m]
    if s.size > 1 and pred.band > np.diff(s).min() + 1e-12:
        raise ValueError(f"band {pred.band} exceeds the smallest support gap {np.diff(s).min()}")
    gv, gp = guess_distribution(pred, model, m)
    p_hat = gp @ _band_hits(gv, s, pred.band)
    return float(pred.theta + (1.0 - pred.theta) * (rho @ p_hat))


def prediction_hits(s_hat: np.ndarray, s_true: np.ndarray, band: float) -> np.ndarray:
    """Elementwise accuracy scoring with the same band rule as the analytic formula."""
    d = np.asarray(s_hat) - np.asarray(s_true)
    if band == 0:
        return d == 0
    return (d >= -band / 2) & (d < band / 2)
