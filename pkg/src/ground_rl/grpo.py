"""Group-relative advantages, the clipped token-level surrogate and its gradient.

The surrogate for one rollout group is::

    J = w * (1/N) * sum_i (1/L_i) * sum_t min(rho_it * A_i, clip(rho_it, 1-eps, 1+eps) * A_i)

where ``rho_it`` is the new/old probability ratio of token ``t`` of response
``i``, ``A_i`` the group-normalised reward broadcast to every token, ``L_i``
either the response length or a fixed ``max_tokens`` constant, and ``w`` an
optional per-query difficulty weight.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .policy_env import PolicyParams, RolloutGroup

STD_FLOOR = 1e-12


class LengthNorm(str, Enum):
    PER_RESPONSE = "per-response"
    MAX_TOKENS = "max-tokens"


@dataclass(frozen=True)
class ObjectiveConfig:
    clip_epsilon: float = 0.2
    length_norm: LengthNorm = LengthNorm.PER_RESPONSE
    max_tokens: int = 64
    difficulty_weighting: bool = False
    # 0 disables the KL penalty entirely (no reference policy needed).
    kl_coefficient: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "length_norm", LengthNorm(self.length_norm))
        if self.clip_epsilon <= 0:
            raise ValueError(f"clip_epsilon must be positive, got {self.clip_epsilon}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.kl_coefficient < 0:
            raise ValueError(f"kl_coefficient must be >= 0, got {self.kl_coefficient}")


@dataclass(frozen=True)
class AdvantageSet:
    advantages: np.ndarray
    degenerate: bool

    def __len__(self) -> int:
        return len(self.advantages)


class GroupSizeError(ValueError):
    pass


def group_advantages(rewards: Sequence[float]) -> AdvantageSet:
    """Normalise rewards within a group by their mean and population std.

    A zero-variance group yields all-zero advantages and is flagged degenerate.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupSizeError(f"a group needs at least 2 rewards, got {r.size}")
    std = r.std()
    if std < STD_FLOOR:
        return AdvantageSet(np.zeros_like(r), True)
    return AdvantageSet((r - r.mean()) / std, False)


def difficulty_weights(lambdas: Sequence[float]) -> np.ndarray:
    """Per-query weights in [0.5, 1.5] from min-max normalised inverse box size.

    The smallest relative box size gets 1.5 and the largest 0.5. When every
    size is equal the normalisation window is empty and all weights are 1.0.
    """
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim != 1 or lam.size == 0:
        raise ValueError("need at least one relative box size")
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0) or np.any(lam > 1):
        raise ValueError(f"relative box sizes must lie in (0, 1]: {lam.tolist()}")
    inv = 1.0 / lam
    lo, hi = inv.min(), inv.max()
    if hi == lo:
        return np.ones_like(lam)
    return 0.5 + (inv - lo) / (hi - lo)


def pad_sequences(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged per-token arrays into a zero-padded matrix and a mask."""
    lengths = np.array([len(s) for s in seqs])
    out = np.zeros((len(seqs), int(lengths.max(initial=0))))
    mask = np.arange(out.shape[1])[None, :] < lengths[:, None]
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, mask


def _normalizers(lengths: np.ndarray, cfg: ObjectiveConfig) -> np.ndarray:
    if cfg.length_norm is LengthNorm.PER_RESPONSE:
        return lengths.astype(np.float64)
    if lengths.max(initial=0) > cfg.max_tokens:
        raise ValueError(f"response of {lengths.max()} tokens exceeds max_tokens={cfg.max_tokens}")
    return np.full(lengths.shape, float(cfg.max_tokens))


def effective_weight(cfg: ObjectiveConfig, w_q: float) -> float:
    return float(w_q) if cfg.difficulty_weighting else 1.0


def _check_shapes(old: np.ndarray, new: np.ndarray, mask: np.ndarray) -> None:
    if old.shape != new.shape or old.shape != mask.shape:
        raise ValueError(f"token count mismatch: old {old.shape} vs new {new.shape}")


def padded_objective(
    old: np.ndarray,
    new: np.ndarray,
    mask: np.ndarray,
    advantages: np.ndarray,
    cfg: ObjectiveConfig,
    w_q: float = 1.0,
    ref: np.ndarray | None = None,
) -> float:
    """Surrogate on padded ``(N, T)`` log-prob matrices; see module docstring."""
    _check_shapes(old, new, mask)
    lengths = mask.sum(axis=1)
    ratio = np.where(mask, np.exp(new - old), 0.0)
    a = advantages[:, None]
    clipped = np.clip(ratio, 1 - cfg.clip_epsilon, 1 + cfg.clip_epsilon)
    terms = np.minimum(ratio * a, clipped * a)
    if cfg.kl_coefficient > 0:
        terms = terms - cfg.kl_coefficient * _kl_terms(ref, new)
    terms = np.where(mask, terms, 0.0)
    per_response = terms.sum(axis=1) / _normalizers(lengths, cfg)
    return effective_weight(cfg, w_q) * float(per_response.mean())


def padded_objective_grad(
    old: np.ndarray,
    new: np.ndarray,
    mask: np.ndarray,
    advantages: np.ndarray,
    cfg: ObjectiveConfig,
    w_q: float = 1.0,
    ref: np.ndarray | None = None,
) -> np.ndarray:
    """Derivative of :func:`padded_objective` w.r.t. every new token log-prob.

    The clip is treated PPO-style: zero derivative wherever the min selects the
    clipped branch strictly.
    """
    _check_shapes(old, new, mask)
    n = old.shape[0]
    lengths = mask.sum(axis=1)
    ratio = np.where(mask, np.exp(new - old), 0.0)
    a = advantages[:, None]
    clipped = np.clip(ratio, 1 - cfg.clip_epsilon, 1 + cfg.clip_epsilon)
    unclipped = ratio * a
    grad = np.where(unclipped <= clipped * a, unclipped, 0.0)
    if cfg.kl_coefficient > 0:
        grad = grad - cfg.kl_coefficient * (1.0 - np.exp(_require_ref(ref) - new))
    scale = effective_weight(cfg, w_q) / (n * _normalizers(lengths, cfg))
    return np.where(mask, grad * scale[:, None], 0.0)


def _require_ref(ref: np.ndarray | None) -> np.ndarray:
    if ref is None:
        raise ValueError("kl_coefficient > 0 needs reference log-probs on the group")
    return ref


def _kl_terms(ref: np.ndarray | None, new: np.ndarray) -> np.ndarray:
    # Non-negative estimator exp(d) - d - 1 with d = ref - new.
    d = _require_ref(ref) - new
    return np.exp(d) - d - 1.0


def surrogate_objective(
    group: RolloutGroup,
    new_logprobs: Sequence[np.ndarray],
    cfg: ObjectiveConfig,
    w_q: float = 1.0,
) -> float:
    """Evaluate the clipped surrogate of ``group`` at per-token log-probs ``new_logprobs``."""
    new, new_mask = pad_sequences([np.asarray(x, dtype=np.float64) for x in new_logprobs])
    old, mask = group.padded_old_logprobs()
    if new_mask.shape != mask.shape or not np.array_equal(new_mask, mask):
        raise ValueError("token count mismatch between old and new log-probs")
    return padded_objective(old, new, mask, group.advantages.advantages, cfg, w_q, group.padded_ref_logprobs())


def objective_gradient(
    params: PolicyParams,
    group: RolloutGroup,
    cfg: ObjectiveConfig,
    w_q: float = 1.0,
) -> PolicyParams:
    """Exact gradient of the surrogate w.r.t. every logit in ``params``.

    Only the entries belonging to ``group.sample`` are non-zero.
    """
    from .policy_env import logit_gradient, padded_token_logprobs

    old, mask = group.padded_old_logprobs()
    new = padded_token_logprobs(params, group)
    token_grad = padded_objective_grad(
        old, new, mask, group.advantages.advantages, cfg, w_q, group.padded_ref_logprobs()
    )
    return logit_gradient(params, group, token_grad)


def finite_diff_gradient(
    params: PolicyParams,
    group: RolloutGroup,
    cfg: ObjectiveConfig,
    w_q: float = 1.0,
    step: float = 1e-5,
) -> PolicyParams:
    """Central-difference approximation of :func:`objective_gradient`."""
    from .policy_env import padded_token_logprobs

    if step <= 0:
        raise ValueError("step must be positive")
    old, mask = group.padded_old_logprobs()
    adv = group.advantages.advantages
    ref = group.padded_ref_logprobs()

    def value(p: PolicyParams) -> float:
        return padded_objective(old, padded_token_logprobs(p, group), mask, adv, cfg, w_q, ref)

    grad = params.zeros_like()
    probe = params.copy()
    j = params.index_of(group.sample.id)
    for view, gview in ((probe.think_logit[j : j + 1], grad.think_logit[j : j + 1]),
                        (probe.coord_logits[j].reshape(-1), grad.coord_logits[j].reshape(-1))):
        for k in range(view.size):
            base = view[k]
            view[k] = base + step
            up = value(probe)
            view[k] = base - step
            down = value(probe)
            view[k] = base
            gview[k] = (up - down) / (2 * step)
    return grad
