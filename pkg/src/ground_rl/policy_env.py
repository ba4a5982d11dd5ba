"""Synthetic grounding environment and a tabular token-level policy.

Each query owns a think logit and four coordinate-bin logit vectors. A response
is ``k`` content-free THINK tokens followed by four coordinate tokens
``(x1, y1, x2, y2)``; bin ``b`` decodes to pixel ``b * extent / (G - 1)``.

Thinking stops voluntarily with probability ``1 - sigmoid(think_logit)`` at each
step, or is forced once ``max_tokens - 4`` THINK tokens have been emitted. The
log-probability of a voluntary stop is attached to the first coordinate token.

``think_dilution`` (default 0) optionally makes long thinking hurt grounding:
after ``k`` THINK tokens each coordinate distribution is mixed with the uniform
distribution with weight ``1 - (1 - think_dilution) ** k``.
"""

from __future__ import annotations

import itertools
import json
import math
import zlib
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .geometry import Box, ImageDims, relative_box_size
from .grpo import AdvantageSet, difficulty_weights, group_advantages
from .rewards import RewardBreakdown, RewardMode, RewardWeights, reward_for_mode

THINK = -1
NUM_COORDS = 4


class GenerationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# samples and datasets


@dataclass(frozen=True)
class GroundingSample:
    id: str
    dims: ImageDims
    gt: Box
    rel_size: float = field(default=float("nan"))
    w_q: float = 1.0
    tag: str | None = None

    def __post_init__(self) -> None:
        lam = relative_box_size(self.gt, self.dims)
        if math.isnan(self.rel_size):
            object.__setattr__(self, "rel_size", lam)
        elif self.rel_size != lam:
            raise ValueError(f"cached relative size {self.rel_size} != {lam} for {self.id}")


def bin_to_pixel(b: int, extent: float, grid_bins: int) -> float:
    return b * (extent / (grid_bins - 1))


def decode_bins(bins: Sequence[int], dims: ImageDims, grid_bins: int) -> Box | None:
    """Map four bins to a Box, or ``None`` when the corners are inverted."""
    x1, y1, x2, y2 = (
        bin_to_pixel(bins[0], dims.width, grid_bins),
        bin_to_pixel(bins[1], dims.height, grid_bins),
        bin_to_pixel(bins[2], dims.width, grid_bins),
        bin_to_pixel(bins[3], dims.height, grid_bins),
    )
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


def parse_answer(tokens: Sequence[int], dims: ImageDims, grid_bins: int) -> Box | None:
    """Decode the trailing four coordinate tokens of a response.

    Returns ``None`` (format failure) if fewer than four coordinate tokens end
    the sequence, a bin is out of range, or the decoded corners are inverted.
    """
    tail = list(tokens[-NUM_COORDS:])
    if len(tail) < NUM_COORDS or any(t == THINK or not 0 <= t < grid_bins for t in tail):
        return None
    return decode_bins(tail, dims, grid_bins)


def gt_bins(sample: GroundingSample, grid_bins: int) -> tuple[int, int, int, int] | None:
    """Bins that decode exactly to the ground truth, or ``None`` if off-grid."""
    extents = (sample.dims.width, sample.dims.height) * 2
    bins = tuple(int(round(v / (e / (grid_bins - 1)))) for v, e in zip(sample.gt.as_tuple(), extents))
    if any(not 0 <= b < grid_bins for b in bins) or decode_bins(bins, sample.dims, grid_bins) != sample.gt:
        return None
    return bins  # type: ignore[return-value]


def _feasible_sizes(dims: ImageDims, grid_bins: int, lo: float, hi: float) -> list[tuple[int, int, float]]:
    out = []
    for wb in range(1, grid_bins):
        for hb in range(1, grid_bins):
            box = Box(0.0, 0.0, bin_to_pixel(wb, dims.width, grid_bins), bin_to_pixel(hb, dims.height, grid_bins))
            lam = relative_box_size(box, dims)
            if lo - 1e-12 <= lam <= hi + 1e-12:
                out.append((wb, hb, lam))
    return out


def generate_dataset(
    num_samples: int,
    dims: ImageDims,
    grid_bins: int,
    lambda_range: tuple[float, float],
    seed: int,
) -> list[GroundingSample]:
    """Grid-aligned synthetic targets with relative sizes spread over ``lambda_range``.

    Each sample draws a target size uniformly from the range and takes the
    closest realisable grid box (ties broken at random, which also varies the
    aspect ratio), placed uniformly at random inside the image.
    """
    lo, hi = lambda_range
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"need 0 < lo <= hi <= 1, got {lambda_range}")
    if grid_bins < 2:
        raise ValueError(f"grid_bins must be >= 2, got {grid_bins}")
    sizes = _feasible_sizes(dims, grid_bins, lo, hi)
    if not sizes:
        raise GenerationError(f"no {grid_bins}-bin grid box has relative size in [{lo}, {hi}]")
    lams = np.array([s[2] for s in sizes])
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(num_samples):
        target = rng.uniform(lo, hi)
        dist = np.abs(lams - target)
        candidates = np.flatnonzero(dist <= dist.min() + 1e-12)
        wb, hb, _ = sizes[int(rng.choice(candidates))]
        xb = int(rng.integers(0, grid_bins - wb))
        yb = int(rng.integers(0, grid_bins - hb))
        gt = decode_bins((xb, yb, xb + wb, yb + hb), dims, grid_bins)
        assert gt is not None
        samples.append(GroundingSample(f"q{i:05d}", dims, gt))
    return with_difficulty_weights(samples)


def with_difficulty_weights(samples: Sequence[GroundingSample]) -> list[GroundingSample]:
    """Return copies carrying dataset-level difficulty weights."""
    if not samples:
        return []
    w = difficulty_weights([s.rel_size for s in samples])
    return [replace(s, w_q=float(wi)) for s, wi in zip(samples, w)]


def _num(v: float) -> float | int:
    return int(v) if float(v).is_integer() else float(v)


def write_dataset(path: str | Path, samples: Iterable[GroundingSample]) -> None:
    lines = []
    for s in samples:
        row = {
            "id": s.id,
            "image_width": _num(s.dims.width),
            "image_height": _num(s.dims.height),
            "bbox": [_num(v) for v in s.gt.as_tuple()],
        }
        if s.tag is not None:
            row["tag"] = s.tag
        lines.append(json.dumps(row) + "\n")
    atomic_write(path, "".join(lines))


def sample_from_row(row: dict) -> GroundingSample:
    bbox = row["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise ValueError(f"bbox must be a list of 4 numbers, got {bbox!r}")
    tag = row.get("tag")
    return GroundingSample(
        id=str(row["id"]),
        dims=ImageDims(float(row["image_width"]), float(row["image_height"])),
        gt=Box(*(float(v) for v in bbox)),
        tag=None if tag is None else str(tag),
    )


def read_dataset(path: str | Path) -> list[GroundingSample]:
    """Load a JSON-lines ground-truth file; difficulty weights span the whole file."""
    samples = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                s = sample_from_row(json.loads(line))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
            if s.id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {s.id!r}")
            seen.add(s.id)
            samples.append(s)
    return with_difficulty_weights(samples)


# ---------------------------------------------------------------------------
# policy parameters


class PolicyParams:
    """Tabular logits for every query id, stored in one flat buffer.

    ``think_logit`` has shape ``(M,)`` and ``coord_logits`` ``(M, 4, G)``; both
    are views into ``buffer`` so optimisers can update everything in place.
    """

    def __init__(
        self,
        ids: Sequence[str],
        grid_bins: int,
        think_logit: np.ndarray | None = None,
        coord_logits: np.ndarray | None = None,
        think_dilution: float = 0.0,
    ):
        if grid_bins < 2:
            raise ValueError(f"grid_bins must be >= 2, got {grid_bins}")
        if not 0.0 <= think_dilution < 1.0:
            raise ValueError(f"think_dilution must lie in [0, 1), got {think_dilution}")
        self.ids = tuple(ids)
        self.grid_bins = grid_bins
        self.think_dilution = float(think_dilution)
        m = len(self.ids)
        self.buffer = np.zeros(m + m * NUM_COORDS * grid_bins)
        self.think_logit = self.buffer[:m]
        self.coord_logits = self.buffer[m:].reshape(m, NUM_COORDS, grid_bins)
        if think_logit is not None:
            self.think_logit[:] = think_logit
        if coord_logits is not None:
            self.coord_logits[:] = coord_logits
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self._index) != m:
            raise ValueError("duplicate sample ids in policy parameters")

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]

    def copy(self) -> PolicyParams:
        return PolicyParams(self.ids, self.grid_bins, self.think_logit, self.coord_logits, self.think_dilution)

    def zeros_like(self) -> PolicyParams:
        return PolicyParams(self.ids, self.grid_bins, think_dilution=self.think_dilution)

    def __repr__(self) -> str:
        return f"PolicyParams(samples={len(self.ids)}, grid_bins={self.grid_bins})"


def init_params(
    samples: Sequence[GroundingSample],
    grid_bins: int,
    *,
    think_logit: float = -30.0,
    prior_sigma: float | None = None,
    think_dilution: float = 0.0,
) -> PolicyParams:
    """Starting policy.

    With ``prior_sigma=None`` every coordinate is uniform over the grid.
    Otherwise each coordinate's logits are a Gaussian bump of width
    ``prior_sigma`` bins around the ground-truth bin, a stand-in for a base
    model that roughly knows where the target is.
    """
    params = PolicyParams([s.id for s in samples], grid_bins, think_dilution=think_dilution)
    params.think_logit[:] = think_logit
    if prior_sigma is not None:
        grid = np.arange(grid_bins)
        for i, s in enumerate(samples):
            bins = gt_bins(s, grid_bins)
            if bins is None:
                raise ValueError(f"ground truth of {s.id} is not on the {grid_bins}-bin grid")
            for c, b in enumerate(bins):
                params.coord_logits[i, c] = -((grid - b) ** 2) / (2 * prior_sigma**2)
    return params


def perfect_params(samples: Sequence[GroundingSample], grid_bins: int, confidence: float = 30.0) -> PolicyParams:
    """Policy that answers immediately with the ground-truth bins."""
    params = PolicyParams([s.id for s in samples], grid_bins)
    params.think_logit[:] = -confidence
    for i, s in enumerate(samples):
        bins = gt_bins(s, grid_bins)
        if bins is None:
            raise ValueError(f"ground truth of {s.id} is not on the {grid_bins}-bin grid")
        for c, b in enumerate(bins):
            params.coord_logits[i, c, b] = confidence
    return params


# ---------------------------------------------------------------------------
# responses and groups


@dataclass(frozen=True)
class Response:
    n_think: int
    bins: tuple[int, int, int, int]
    voluntary_stop: bool
    old_logprobs: np.ndarray
    parsed: Box | None
    ref_logprobs: np.ndarray | None = None

    @property
    def tokens(self) -> tuple[int, ...]:
        return (THINK,) * self.n_think + self.bins

    @property
    def length(self) -> int:
        return self.n_think + NUM_COORDS


@dataclass
class RolloutGroup:
    sample: GroundingSample
    responses: list[Response]
    rewards: list[RewardBreakdown]
    advantages: AdvantageSet

    def __post_init__(self) -> None:
        n = len(self.responses)
        if len(self.rewards) != n or len(self.advantages) != n:
            raise ValueError("responses, rewards and advantages must have equal length")

    @cached_property
    def n_think(self) -> np.ndarray:
        return np.array([r.n_think for r in self.responses])

    @cached_property
    def bins(self) -> np.ndarray:
        return np.array([r.bins for r in self.responses]).reshape(-1, NUM_COORDS)

    @cached_property
    def voluntary_stop(self) -> np.ndarray:
        return np.array([r.voluntary_stop for r in self.responses])

    @property
    def lengths(self) -> np.ndarray:
        return self.n_think + NUM_COORDS

    @cached_property
    def _old(self) -> tuple[np.ndarray, np.ndarray]:
        from .grpo import pad_sequences

        return pad_sequences([r.old_logprobs for r in self.responses])

    def padded_old_logprobs(self) -> tuple[np.ndarray, np.ndarray]:
        return self._old

    @cached_property
    def _ref(self) -> np.ndarray | None:
        from .grpo import pad_sequences

        if any(r.ref_logprobs is None for r in self.responses):
            return None
        return pad_sequences([r.ref_logprobs for r in self.responses])[0]

    def padded_ref_logprobs(self) -> np.ndarray | None:
        return self._ref

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.rewards])


def _log_sigmoid(a: float) -> float:
    return -float(np.logaddexp(0.0, -a))


def _softmax(c: np.ndarray) -> np.ndarray:
    z = np.exp(c - c.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _dilution(n_think: np.ndarray, rho: float) -> np.ndarray:
    if rho == 0.0:
        return np.zeros(n_think.shape)
    return 1.0 - (1.0 - rho) ** n_think


def _coord_probs(coord_logits: np.ndarray, n_think: np.ndarray, rho: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-response coordinate distributions ``(N, 4, G)`` plus softmax and dilution."""
    soft = _softmax(coord_logits)
    delta = _dilution(n_think, rho)
    if rho == 0.0:
        return np.broadcast_to(soft, (len(n_think),) + soft.shape), soft, delta
    g = soft.shape[-1]
    probs = (1.0 - delta)[:, None, None] * soft[None] + (delta / g)[:, None, None]
    return probs, soft, delta


def _token_logprobs(
    think_logit: float,
    coord_logits: np.ndarray,
    rho: float,
    n_think: np.ndarray,
    bins: np.ndarray,
    voluntary: np.ndarray,
) -> np.ndarray:
    n = len(n_think)
    width = int(n_think.max(initial=0)) + NUM_COORDS
    probs, _, _ = _coord_probs(coord_logits, n_think, rho)
    rows = np.arange(n)[:, None]
    coord_lp = np.log(probs[rows, np.arange(NUM_COORDS)[None, :], bins])
    coord_lp[:, 0] += np.where(voluntary, -float(np.logaddexp(0.0, think_logit)), 0.0)
    out = np.zeros((n, width))
    out[np.arange(width)[None, :] < n_think[:, None]] = _log_sigmoid(think_logit)
    out[rows, n_think[:, None] + np.arange(NUM_COORDS)[None, :]] = coord_lp
    return out


def padded_token_logprobs(params: PolicyParams, group: RolloutGroup) -> np.ndarray:
    """Per-token log-probs of every response in ``group`` under ``params``, zero-padded."""
    j = params.index_of(group.sample.id)
    return _token_logprobs(
        params.think_logit[j], params.coord_logits[j], params.think_dilution,
        group.n_think, group.bins, group.voluntary_stop,
    )


def token_logprobs(params: PolicyParams, sample_id: str, response: Response) -> np.ndarray:
    j = params.index_of(sample_id)
    lp = _token_logprobs(
        params.think_logit[j], params.coord_logits[j], params.think_dilution,
        np.array([response.n_think]), np.array([response.bins]), np.array([response.voluntary_stop]),
    )
    return lp[0]


def logit_gradient(params: PolicyParams, group: RolloutGroup, token_grad: np.ndarray) -> PolicyParams:
    """Chain per-token derivatives ``dJ/dlogp`` through to the logits of ``group.sample``."""
    j = params.index_of(group.sample.id)
    a = params.think_logit[j]
    n_think, bins, voluntary = group.n_think, group.bins, group.voluntary_stop
    n = len(n_think)
    rows = np.arange(n)
    sig = 1.0 / (1.0 + math.exp(-a)) if a >= 0 else math.exp(a) / (1.0 + math.exp(a))

    think_mask = np.arange(token_grad.shape[1])[None, :] < n_think[:, None]
    first = token_grad[rows, n_think]
    g_think = (1.0 - sig) * token_grad[think_mask].sum() - sig * first[voluntary].sum()

    probs, soft, delta = _coord_probs(params.coord_logits[j], n_think, params.think_dilution)
    g_coord = np.zeros_like(soft)
    for c in range(NUM_COORDS):
        tg = token_grad[rows, n_think + c]
        b = bins[:, c]
        # d log p(b) / d logits = (1 - delta) * s_b * (onehot(b) - s) / p(b)
        w = tg * (1.0 - delta) * soft[c, b] / probs[rows, c, b]
        g_coord[c] = np.bincount(b, weights=w, minlength=params.grid_bins) - soft[c] * w.sum()

    grad = params.zeros_like()
    grad.think_logit[j] = g_think
    grad.coord_logits[j] = g_coord
    return grad


# ---------------------------------------------------------------------------
# sampling


def sample_rng(seed: int, sample_id: str, iteration: int) -> np.random.Generator:
    """Counter-based stream for one (run seed, sample, iteration) triple."""
    key = np.random.SeedSequence([seed, zlib.crc32(sample_id.encode()), iteration])
    return np.random.Generator(np.random.Philox(key))


def _sample_arrays(
    params: PolicyParams, j: int, n: int, max_tokens: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cap = max_tokens - NUM_COORDS
    log_p = _log_sigmoid(params.think_logit[j])
    u = rng.random(n)
    # P(k >= m) = p**m, so k = floor(log u / log p) before capping.
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.floor(np.log(u) / log_p) if log_p < 0 else np.full(n, np.inf)
    n_think = np.minimum(np.nan_to_num(raw, posinf=cap), cap).astype(np.int64)
    voluntary = n_think < cap
    probs, _, _ = _coord_probs(params.coord_logits[j], n_think, params.think_dilution)
    cdf = np.cumsum(probs, axis=-1)
    draws = rng.random((n, NUM_COORDS))
    bins = np.minimum((draws[..., None] >= cdf).sum(axis=-1), params.grid_bins - 1)
    return n_think, bins, voluntary


def _build_responses(
    params: PolicyParams,
    sample: GroundingSample,
    n_think: np.ndarray,
    bins: np.ndarray,
    voluntary: np.ndarray,
    ref_params: PolicyParams | None,
) -> list[Response]:
    j = params.index_of(sample.id)
    old = _token_logprobs(params.think_logit[j], params.coord_logits[j], params.think_dilution, n_think, bins, voluntary)
    ref = None
    if ref_params is not None:
        r = ref_params.index_of(sample.id)
        ref = _token_logprobs(
            ref_params.think_logit[r], ref_params.coord_logits[r], ref_params.think_dilution, n_think, bins, voluntary
        )
    out = []
    for i in range(len(n_think)):
        length = int(n_think[i]) + NUM_COORDS
        b = tuple(int(x) for x in bins[i])
        out.append(Response(
            n_think=int(n_think[i]),
            bins=b,  # type: ignore[arg-type]
            voluntary_stop=bool(voluntary[i]),
            old_logprobs=old[i, :length].copy(),
            parsed=decode_bins(b, sample.dims, params.grid_bins),
            ref_logprobs=None if ref is None else ref[i, :length].copy(),
        ))
    return out


def _check_max_tokens(max_tokens: int) -> None:
    if max_tokens < NUM_COORDS + 1:
        raise ValueError(f"max_tokens must be >= {NUM_COORDS + 1}, got {max_tokens}")


def sample_response(
    params: PolicyParams,
    sample: GroundingSample,
    max_tokens: int,
    rng: np.random.Generator,
) -> Response:
    _check_max_tokens(max_tokens)
    n_think, bins, voluntary = _sample_arrays(params, params.index_of(sample.id), 1, max_tokens, rng)
    return _build_responses(params, sample, n_think, bins, voluntary, None)[0]


def rollout_group(
    params: PolicyParams,
    sample: GroundingSample,
    n: int,
    max_tokens: int,
    weights: RewardWeights,
    rng: np.random.Generator,
    reward_mode: RewardMode = RewardMode.COMBINED,
    ref_params: PolicyParams | None = None,
) -> RolloutGroup:
    """Sample ``n`` responses, score them and normalise rewards within the group."""
    _check_max_tokens(max_tokens)
    if n < 2:
        raise ValueError(f"a rollout group needs n >= 2, got {n}")
    n_think, bins, voluntary = _sample_arrays(params, params.index_of(sample.id), n, max_tokens, rng)
    responses = _build_responses(params, sample, n_think, bins, voluntary, ref_params)
    rewards = [reward_for_mode(r.parsed, sample.gt, sample.dims, weights, reward_mode) for r in responses]
    return RolloutGroup(sample, responses, rewards, group_advantages([r.total for r in rewards]))


def enumerate_responses(
    params: PolicyParams, sample: GroundingSample, max_tokens: int
) -> list[tuple[Response, float]]:
    """Every possible response with its probability (small grids only)."""
    _check_max_tokens(max_tokens)
    cap = max_tokens - NUM_COORDS
    combos = list(itertools.product(range(params.grid_bins), repeat=NUM_COORDS))
    out = []
    for k in range(cap + 1):
        n_think = np.full(len(combos), k)
        voluntary = np.full(len(combos), k < cap)
        responses = _build_responses(params, sample, n_think, np.array(combos), voluntary, None)
        out.extend((r, math.exp(float(r.old_logprobs.sum()))) for r in responses)
    return out
