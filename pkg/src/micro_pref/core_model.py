"""Mixture of Bradley-Terry reward heads with a prompt-conditioned router.

Reward heads are affine maps of a per-(prompt, response) feature vector. The
router is a one-hidden-layer tanh MLP with a softmax output that maps the
prompt (plus optional context) features onto the K-simplex. The preference
probability is the router-weighted average of the per-head BT probabilities.

All batch-level functions accept either a list of ``PreferenceExample`` or a
pre-stacked ``PreferenceBatch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

LOG_CLAMP = 1e-12
_P_MIN = np.finfo(float).tiny
_P_MAX = 1.0 - 2.0**-53
DEFAULT_HIDDEN = 128


class DimensionError(ValueError):
    """Raised when a feature vector does not match the configured dimension."""

    def __init__(self, role: str, expected: int, actual: int):
        self.role = role
        self.expected = expected
        self.actual = actual
        super().__init__(f"{role}: expected dimension {expected}, got {actual}")


class EmptyBatchError(ValueError):
    pass


def _check_dim(role: str, expected: int, actual: int) -> None:
    if expected != actual:
        raise DimensionError(role, expected, actual)


@dataclass
class RewardHead:
    weights: np.ndarray
    bias: float = 0.0


@dataclass
class RouterParams:
    hidden_weights: np.ndarray  # (h, d_ctx)
    hidden_bias: np.ndarray  # (h,)
    output_weights: np.ndarray  # (K, h)
    output_bias: np.ndarray  # (K,)
    # mixing floor: outputs are floor + (1 - K*floor) * softmax(logits)
    floor: float = 0.0

    @property
    def hidden_size(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def ctx_dim(self) -> int:
        return self.hidden_weights.shape[1]

    @property
    def k(self) -> int:
        return self.output_weights.shape[0]

    @classmethod
    def zeros(cls, k: int, ctx_dim: int, hidden: int = DEFAULT_HIDDEN) -> "RouterParams":
        return cls(
            np.zeros((hidden, ctx_dim)),
            np.zeros(hidden),
            np.zeros((k, hidden)),
            np.zeros(k),
        )

    @classmethod
    def init_random(
        cls, k: int, ctx_dim: int, rng: np.random.Generator, hidden: int = DEFAULT_HIDDEN
    ) -> "RouterParams":
        # fan-in scaled hidden layer, near-uniform initial routing
        w1 = rng.normal(0.0, 1.0 / np.sqrt(max(ctx_dim, 1)), size=(hidden, ctx_dim))
        w2 = rng.normal(0.0, 0.02, size=(k, hidden))
        return cls(w1, np.zeros(hidden), w2, np.zeros(k))

    def copy(self) -> "RouterParams":
        return RouterParams(
            self.hidden_weights.copy(),
            self.hidden_bias.copy(),
            self.output_weights.copy(),
            self.output_bias.copy(),
            self.floor,
        )


@dataclass
class MixtureModel:
    """K affine reward heads stored as stacked arrays plus a router.

    ``head_weights`` has shape (K, d) and ``head_bias`` shape (K,).
    """

    head_weights: np.ndarray
    head_bias: np.ndarray
    router: RouterParams

    def __post_init__(self):
        self.head_weights = np.atleast_2d(np.asarray(self.head_weights, dtype=float))
        self.head_bias = np.asarray(self.head_bias, dtype=float).reshape(-1)
        k = self.head_weights.shape[0]
        if self.head_bias.shape[0] != k or self.router.k != k:
            raise ValueError(
                f"inconsistent mixture size: {k} head weight rows, "
                f"{self.head_bias.shape[0]} biases, router outputs {self.router.k}"
            )

    @property
    def k(self) -> int:
        return self.head_weights.shape[0]

    @property
    def pair_dim(self) -> int:
        return self.head_weights.shape[1]

    @property
    def ctx_dim(self) -> int:
        return self.router.ctx_dim

    @property
    def heads(self) -> list[RewardHead]:
        return [RewardHead(self.head_weights[i], float(self.head_bias[i])) for i in range(self.k)]

    @classmethod
    def from_heads(cls, heads: Sequence[RewardHead], router: RouterParams) -> "MixtureModel":
        return cls(
            np.stack([np.asarray(h.weights, dtype=float) for h in heads]),
            np.array([h.bias for h in heads], dtype=float),
            router,
        )

    @classmethod
    def init_random(
        cls,
        k: int,
        pair_dim: int,
        ctx_dim: int,
        rng: np.random.Generator,
        hidden: int = DEFAULT_HIDDEN,
        head_std: float = 0.02,
    ) -> "MixtureModel":
        return cls(
            rng.normal(0.0, head_std, size=(k, pair_dim)),
            np.zeros(k),
            RouterParams.init_random(k, ctx_dim, rng, hidden),
        )

    def copy(self) -> "MixtureModel":
        return MixtureModel(self.head_weights.copy(), self.head_bias.copy(), self.router.copy())

    def permuted(self, perm: Sequence[int]) -> "MixtureModel":
        """Return a copy with heads (and matching router outputs) reordered."""
        perm = np.asarray(perm)
        r = self.router
        router = RouterParams(
            r.hidden_weights.copy(),
            r.hidden_bias.copy(),
            r.output_weights[perm].copy(),
            r.output_bias[perm].copy(),
            r.floor,
        )
        return MixtureModel(self.head_weights[perm].copy(), self.head_bias[perm].copy(), router)


@dataclass
class PreferenceExample:
    prompt_ctx: np.ndarray
    winner: np.ndarray
    loser: np.ndarray
    group_id: Optional[int] = None
    attribute: Optional[str] = None
    context_group: Optional[str] = None

    def __post_init__(self):
        self.prompt_ctx = np.asarray(self.prompt_ctx, dtype=float).reshape(-1)
        self.winner = np.asarray(self.winner, dtype=float).reshape(-1)
        self.loser = np.asarray(self.loser, dtype=float).reshape(-1)
        _check_dim("loser", self.winner.shape[0], self.loser.shape[0])


@dataclass
class PreferenceBatch:
    """Column-stacked view of a list of examples."""

    prompt_ctx: np.ndarray  # (n, d_ctx)
    winner: np.ndarray  # (n, d)
    loser: np.ndarray  # (n, d)
    group_id: np.ndarray = field(default=None)  # (n,), -1 where unknown
    attribute: list = field(default=None)
    context_group: list = field(default=None)

    def __post_init__(self):
        n = self.prompt_ctx.shape[0]
        if self.group_id is None:
            self.group_id = np.full(n, -1, dtype=int)
        if self.attribute is None:
            self.attribute = [None] * n
        if self.context_group is None:
            self.context_group = [None] * n

    def __len__(self) -> int:
        return self.prompt_ctx.shape[0]

    def subset(self, idx) -> "PreferenceBatch":
        idx = np.asarray(idx, dtype=int)
        return PreferenceBatch(
            self.prompt_ctx[idx],
            self.winner[idx],
            self.loser[idx],
            self.group_id[idx],
            [self.attribute[i] for i in idx],
            [self.context_group[i] for i in idx],
        )

    def examples(self) -> list[PreferenceExample]:
        out = []
        for i in range(len(self)):
            g = int(self.group_id[i])
            out.append(
                PreferenceExample(
                    self.prompt_ctx[i].copy(),
                    self.winner[i].copy(),
                    self.loser[i].copy(),
                    g if g >= 0 else None,
                    self.attribute[i],
                    self.context_group[i],
                )
            )
        return out

    @classmethod
    def from_examples(cls, examples: Sequence[PreferenceExample]) -> "PreferenceBatch":
        if len(examples) == 0:
            raise EmptyBatchError("batch is empty")
        ctx_dim = examples[0].prompt_ctx.shape[0]
        pair_dim = examples[0].winner.shape[0]
        for i, ex in enumerate(examples):
            _check_dim(f"example {i} prompt_ctx", ctx_dim, ex.prompt_ctx.shape[0])
            _check_dim(f"example {i} winner", pair_dim, ex.winner.shape[0])
        return cls(
            np.stack([ex.prompt_ctx for ex in examples]),
            np.stack([ex.winner for ex in examples]),
            np.stack([ex.loser for ex in examples]),
            np.array([-1 if ex.group_id is None else ex.group_id for ex in examples], dtype=int),
            [ex.attribute for ex in examples],
            [ex.context_group for ex in examples],
        )


BatchLike = Union[PreferenceBatch, Sequence[PreferenceExample]]


def as_batch(batch: BatchLike) -> PreferenceBatch:
    if isinstance(batch, PreferenceBatch):
        if len(batch) == 0:
            raise EmptyBatchError("batch is empty")
        return batch
    if isinstance(batch, PreferenceExample):
        batch = [batch]
    return PreferenceBatch.from_examples(batch)


def check_compatible(model: MixtureModel, batch: PreferenceBatch) -> None:
    _check_dim("pair features", model.pair_dim, batch.winner.shape[1])
    _check_dim("prompt_ctx features", model.ctx_dim, batch.prompt_ctx.shape[1])


# ---------------------------------------------------------------------------
# scalar / elementwise maths
# ---------------------------------------------------------------------------


def head_reward(head: RewardHead, pair_features) -> float:
    w = np.asarray(head.weights, dtype=float)
    x = np.asarray(pair_features, dtype=float)
    _check_dim("pair features", w.shape[0], x.shape[-1])
    return float(w @ x + head.bias)


def bt_probability(delta):
    """Logistic function, evaluated without overflow for large |delta|."""
    d = np.asarray(delta, dtype=float)
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open interval (0, 1) even where float64 would round to 0 or 1
    out = np.clip(out, _P_MIN, _P_MAX)
    return float(out) if out.ndim == 0 else out


def log_sigmoid(delta):
    d = np.asarray(delta, dtype=float)
    return np.minimum(d, 0.0) - np.log1p(np.exp(-np.abs(d)))


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def router_hidden(router: RouterParams, prompt_ctx: np.ndarray) -> np.ndarray:
    x = np.asarray(prompt_ctx, dtype=float)
    _check_dim("prompt_ctx features", router.ctx_dim, x.shape[-1])
    return np.tanh(x @ router.hidden_weights.T + router.hidden_bias)


def router_logits(router: RouterParams, prompt_ctx: np.ndarray) -> np.ndarray:
    h = router_hidden(router, prompt_ctx)
    return h @ router.output_weights.T + router.output_bias


def router_forward(router: RouterParams, prompt_ctx) -> np.ndarray:
    """Mixture weights on the simplex; accepts a single vector or an (n, d_ctx) array."""
    f = _softmax(router_logits(router, prompt_ctx))
    if router.floor:
        f = router.floor + (1.0 - router.k * router.floor) * f
    return f


def router_log_forward(router: RouterParams, prompt_ctx) -> np.ndarray:
    if router.floor:
        return np.log(router_forward(router, prompt_ctx))
    z = router_logits(router, prompt_ctx)
    return z - _logsumexp(z)[..., None]


def head_deltas(model: MixtureModel, batch: PreferenceBatch) -> np.ndarray:
    """Per-head reward margins r_k(winner) - r_k(loser), shape (n, K)."""
    rw = batch.winner @ model.head_weights.T + model.head_bias
    rl = batch.loser @ model.head_weights.T + model.head_bias
    return rw - rl


def head_probabilities(model: MixtureModel, batch: BatchLike) -> np.ndarray:
    b = as_batch(batch)
    check_compatible(model, b)
    return bt_probability(head_deltas(model, b))


def mixture_probabilities(model: MixtureModel, batch: BatchLike) -> np.ndarray:
    b = as_batch(batch)
    check_compatible(model, b)
    f = router_forward(model.router, b.prompt_ctx)
    p = bt_probability(head_deltas(model, b))
    return np.sum(f * p, axis=1)


def mixture_probability(model: MixtureModel, ex: PreferenceExample) -> float:
    return float(mixture_probabilities(model, [ex])[0])


def mixture_log_probabilities(model: MixtureModel, batch: PreferenceBatch) -> np.ndarray:
    # log sum_k f_k sigma(delta_k), evaluated in log space so that saturated
    # heads never produce log(0)
    logf = router_log_forward(model.router, batch.prompt_ctx)
    return _logsumexp(logf + log_sigmoid(head_deltas(model, batch)), axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mle_loss(model: MixtureModel, batch: BatchLike) -> float:
    b = as_batch(batch)
    check_compatible(model, b)
    return float(-np.mean(mixture_log_probabilities(model, b)))


def neg_entropy(weights: np.ndarray) -> np.ndarray:
    """sum_k f_k log f_k per row, with log clamped at LOG_CLAMP."""
    return np.sum(weights * np.log(np.maximum(weights, LOG_CLAMP)), axis=-1)


def reg_loss(model: MixtureModel, batch: BatchLike) -> float:
    b = as_batch(batch)
    check_compatible(model, b)
    return float(np.mean(neg_entropy(router_forward(model.router, b.prompt_ctx))))


def _check_alpha(alpha: float) -> None:
    if not alpha >= 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")


def total_loss(model: MixtureModel, batch: BatchLike, alpha: float) -> float:
    _check_alpha(alpha)
    b = as_batch(batch)
    return mle_loss(model, b) + alpha * reg_loss(model, b)


def loss_terms(model: MixtureModel, batch: BatchLike) -> tuple[float, float, float]:
    """(mle_loss, reg_loss, mean router entropy) from a single forward pass."""
    b = as_batch(batch)
    check_compatible(model, b)
    logf = router_log_forward(model.router, b.prompt_ctx)
    f = np.exp(logf)
    mle = -np.mean(_logsumexp(logf + log_sigmoid(head_deltas(model, b)), axis=1))
    reg = np.mean(neg_entropy(f))
    return float(mle), float(reg), float(-reg)
