"""Set-level decision rules over Monte-Carlo posteriors.

Three rules are implemented:

* majority vote -- per-image argmax of the mean posterior, then the mode,
* soft vote -- per-pass per-class means; the single largest entry over all
  passes and classes wins,
* exponential weighted vote -- per-image weights exp(-beta * p) accumulated
  over the set, argmax of the totals.

Ties are broken by the configured rule: highest summed mean posterior among
the tied classes (default), then lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIE_MEAN_POSTERIOR = "highest-mean-posterior"
TIE_LOWEST_INDEX = "lowest-class-index"

_BETA_BOUND = 500.0


class VotingError(ValueError):
    pass


@dataclass(frozen=True)
class VotingConfig:
    beta: float = -1.0
    tie_break: str = TIE_MEAN_POSTERIOR

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise VotingError("beta must be finite")
        if abs(self.beta) > _BETA_BOUND:
            raise VotingError(f"|beta| must be <= {_BETA_BOUND} to avoid overflow")
        if self.tie_break not in (TIE_MEAN_POSTERIOR, TIE_LOWEST_INDEX):
            raise VotingError(f"unknown tie-break rule {self.tie_break!r}")


@dataclass
class VoteOutcome:
    mv: int
    sv: int
    ewv: int
    mv_scores: np.ndarray   # per-class vote counts
    sv_scores: np.ndarray   # per-class max over passes of the per-pass class mean
    ewv_scores: np.ndarray  # per-class accumulated exponential weights


def _break_tie(tied: np.ndarray, mean_per_image: np.ndarray, config: VotingConfig) -> int:
    if len(tied) == 1 or config.tie_break == TIE_LOWEST_INDEX:
        return int(tied[0])
    summed = mean_per_image.sum(axis=0)
    return int(tied[np.argmax(summed[tied])])


def majority_vote(posterior, config: VotingConfig = VotingConfig()) -> int:
    mean = posterior.mean_per_image
    preds = np.argmax(mean, axis=1)
    counts = np.bincount(preds, minlength=mean.shape[1])
    tied = np.flatnonzero(counts == counts.max())
    return _break_tie(tied, mean, config)


def soft_vote(posterior, config: VotingConfig = VotingConfig()) -> int:
    per_pass_class_mean = posterior.per_pass.mean(axis=1)  # (T, C)
    best = per_pass_class_mean.max()
    tied = np.flatnonzero(np.any(per_pass_class_mean == best, axis=0))
    return _break_tie(tied, posterior.mean_per_image, config)


def exp_weighted_vote(posterior, config: VotingConfig = VotingConfig()) -> int:
    mean = posterior.mean_per_image
    weights = np.exp(-config.beta * mean).sum(axis=0)  # (C,)
    tied = np.flatnonzero(weights == weights.max())
    return _break_tie(tied, mean, config)


def vote(posterior, config: VotingConfig = VotingConfig()) -> VoteOutcome:
    mean = posterior.mean_per_image
    preds = np.argmax(mean, axis=1)
    mv_scores = np.bincount(preds, minlength=mean.shape[1]).astype(np.float64)
    sv_scores = posterior.per_pass.mean(axis=1).max(axis=0)
    ewv_scores = np.exp(-config.beta * mean).sum(axis=0)
    return VoteOutcome(
        mv=majority_vote(posterior, config),
        sv=soft_vote(posterior, config),
        ewv=exp_weighted_vote(posterior, config),
        mv_scores=mv_scores,
        sv_scores=sv_scores,
        ewv_scores=ewv_scores,
    )
