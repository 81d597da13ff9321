"""Planted heterogeneous-annotator populations and rated-corpus binarization."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core_model import (
    MixtureModel,
    PreferenceBatch,
    PreferenceExample,
    RouterParams,
    _logsumexp,
    bt_probability,
    log_sigmoid,
    router_forward,
    router_log_forward,
)
from .seeding import stream


class InvalidSpecError(ValueError):
    pass


@dataclass
class PopulationSpec:
    """Ground-truth generative model for planted preference corpora.

    Prompts are drawn from N(0, I) in ``prompt_dim`` dimensions. Response
    candidates are isotropic Gaussians with standard deviation ``pair_scale``;
    the first candidate of each pair is additionally offset by ``first_shift``
    (zero by default, which makes the pair distribution exchangeable).

    ``gamma`` maps prompts to mixing weights and carries ``rho`` as its floor,
    so every gamma_k(x) >= rho by construction.
    """

    k: int
    head_weights: np.ndarray  # (K, pair_dim)
    head_bias: np.ndarray  # (K,)
    gamma: RouterParams  # acts on prompt features only
    rho: float
    pair_scale: float = 1.0
    first_shift: Optional[np.ndarray] = None
    ctx_dim: int = 0
    context_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.head_weights = np.atleast_2d(np.asarray(self.head_weights, dtype=float))
        self.head_bias = np.asarray(self.head_bias, dtype=float).reshape(-1)
        if self.first_shift is not None:
            self.first_shift = np.asarray(self.first_shift, dtype=float).reshape(-1)
        self.gamma.floor = float(self.rho)
        self.validate()

    @property
    def pair_dim(self) -> int:
        return self.head_weights.shape[1]

    @property
    def prompt_dim(self) -> int:
        return self.gamma.ctx_dim

    @property
    def router_dim(self) -> int:
        return self.prompt_dim + self.ctx_dim

    def validate(self) -> None:
        if self.k < 1:
            raise InvalidSpecError(f"k must be positive, got {self.k}")
        if self.head_weights.shape[0] != self.k or self.head_bias.shape[0] != self.k:
            raise InvalidSpecError("number of true heads does not match k")
        if self.gamma.k != self.k:
            raise InvalidSpecError("mixing function output size does not match k")
        if not (self.rho > 0):
            raise InvalidSpecError(f"rho must be positive, got {self.rho}")
        if self.rho * self.k > 1 + 1e-12:
            raise InvalidSpecError(f"rho*K = {self.rho * self.k:g} exceeds 1")
        if self.pair_scale < 0:
            raise InvalidSpecError("pair_scale must be non-negative")
        if self.first_shift is not None and self.first_shift.shape[0] != self.pair_dim:
            raise InvalidSpecError("first_shift length does not match pair dimension")
        if self.ctx_dim and self.ctx_dim < self.k:
            raise InvalidSpecError("ctx_dim must be 0 or at least k for one-hot contexts")
        if not 0.0 <= self.context_noise <= 1.0:
            raise InvalidSpecError("context_noise must lie in [0, 1]")

    # ------------------------------------------------------------------

    def gamma_of(self, prompts: np.ndarray) -> np.ndarray:
        return router_forward(self.gamma, prompts)

    def scores(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        """True per-group score differences s*_k, shape (..., K)."""
        return (first - second) @ self.head_weights.T

    def true_model(self) -> MixtureModel:
        """The population itself as a MixtureModel over concat(prompt, context)."""
        g = self.gamma
        w1 = np.concatenate([g.hidden_weights, np.zeros((g.hidden_size, self.ctx_dim))], axis=1)
        router = RouterParams(w1, g.hidden_bias.copy(), g.output_weights.copy(), g.output_bias.copy(), self.rho)
        return MixtureModel(self.head_weights.copy(), self.head_bias.copy(), router)

    def sample_prompts(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.prompt_dim))

    def sample_pairs(self, rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
        shape = tuple(np.atleast_1d(shape))
        a = self.pair_scale * rng.standard_normal(shape + (self.pair_dim,))
        b = self.pair_scale * rng.standard_normal(shape + (self.pair_dim,))
        if self.first_shift is not None:
            a = a + self.first_shift
        return a, b

    def to_dict(self) -> dict:
        g = self.gamma
        return {
            "k": self.k,
            "head_weights": self.head_weights.tolist(),
            "head_bias": self.head_bias.tolist(),
            "gamma": {
                "hidden_weights": g.hidden_weights.tolist(),
                "hidden_bias": g.hidden_bias.tolist(),
                "output_weights": g.output_weights.tolist(),
                "output_bias": g.output_bias.tolist(),
            },
            "rho": self.rho,
            "pair_scale": self.pair_scale,
            "first_shift": None if self.first_shift is None else self.first_shift.tolist(),
            "ctx_dim": self.ctx_dim,
            "context_noise": self.context_noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PopulationSpec":
        g = d["gamma"]
        gamma = RouterParams(
            np.asarray(g["hidden_weights"], dtype=float).reshape(len(g["hidden_bias"]), -1),
            np.asarray(g["hidden_bias"], dtype=float),
            np.asarray(g["output_weights"], dtype=float).reshape(d["k"], -1),
            np.asarray(g["output_bias"], dtype=float),
        )
        return cls(
            k=int(d["k"]),
            head_weights=np.asarray(d["head_weights"], dtype=float),
            head_bias=np.asarray(d["head_bias"], dtype=float),
            gamma=gamma,
            rho=float(d["rho"]),
            pair_scale=float(d.get("pair_scale", 1.0)),
            first_shift=d.get("first_shift"),
            ctx_dim=int(d.get("ctx_dim", 0)),
            context_noise=float(d.get("context_noise", 0.0)),
            seed=int(d.get("seed", 0)),
        )


def make_population(
    k: int,
    pair_dim: int,
    rho: float,
    seed: int,
    prompt_dim: Optional[int] = None,
    head_scale: float = 3.0,
    gamma_scale: float = 2.0,
    gamma_hidden: int = 16,
    pair_scale: float = 1.0,
    shift_scale: float = 0.0,
    ctx_dim: Optional[int] = None,
    context_noise: float = 0.0,
    head_weights: Optional[np.ndarray] = None,
    head_cosine: Optional[float] = None,
) -> PopulationSpec:
    """Draw a random planted population.

    True head weights are Gaussian rescaled to norm ``head_scale`` unless given
    explicitly. ``shift_scale`` > 0 draws a random mean offset for the first
    candidate so per-group mean win probabilities differ from 1/2.
    ``head_cosine`` (K=2 only) fixes the cosine between the two true heads.
    """
    prompt_dim = pair_dim if prompt_dim is None else prompt_dim
    ctx_dim = k if ctx_dim is None else ctx_dim
    if rho * k > 1 + 1e-12:
        raise InvalidSpecError(f"rho*K = {rho * k:g} exceeds 1")
    rng = stream(seed, "population")
    if head_weights is None:
        w = rng.standard_normal((k, pair_dim))
        if head_cosine is not None:
            if k != 2 or not -1.0 <= head_cosine <= 1.0:
                raise InvalidSpecError("head_cosine needs k=2 and a value in [-1, 1]")
            u = w[0] / np.linalg.norm(w[0])
            v = w[1] - (w[1] @ u) * u
            v /= np.linalg.norm(v)
            w = np.stack([u, head_cosine * u + np.sqrt(1.0 - head_cosine**2) * v])
        w *= head_scale / np.linalg.norm(w, axis=1, keepdims=True)
    else:
        w = np.asarray(head_weights, dtype=float)
    gamma = RouterParams(
        rng.normal(0.0, 1.0 / np.sqrt(prompt_dim), size=(gamma_hidden, prompt_dim)),
        rng.normal(0.0, 0.5, size=gamma_hidden),
        rng.normal(0.0, gamma_scale / np.sqrt(gamma_hidden), size=(k, gamma_hidden)),
        np.zeros(k),
    )
    shift = rng.standard_normal(pair_dim) * shift_scale if shift_scale > 0 else None
    return PopulationSpec(
        k=k,
        head_weights=w,
        head_bias=np.zeros(k),
        gamma=gamma,
        rho=rho,
        pair_scale=pair_scale,
        first_shift=shift,
        ctx_dim=ctx_dim,
        context_noise=context_noise,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


@dataclass
class _Draws:
    prompts: np.ndarray
    gamma: np.ndarray
    groups: np.ndarray
    first: np.ndarray
    second: np.ndarray
    p_first: np.ndarray
    keep: np.ndarray
    context_groups: np.ndarray


def _draw(spec: PopulationSpec, n: int, tag) -> _Draws:
    seed = spec.seed
    prompts = spec.sample_prompts(stream(seed, tag, "prompts"), n)
    gamma = spec.gamma_of(prompts)
    u_group = stream(seed, tag, "groups").random(n)
    cdf = np.cumsum(gamma, axis=1)
    groups = np.minimum((u_group[:, None] > cdf).sum(axis=1), spec.k - 1)
    first, second = spec.sample_pairs(stream(seed, tag, "pairs"), n)
    s = np.einsum("nd,nd->n", first - second, spec.head_weights[groups])
    p_first = bt_probability(s)
    keep = stream(seed, tag, "labels").random(n) < p_first
    ctx_groups = groups.copy()
    if spec.context_noise > 0 and spec.k > 1:
        rng = stream(seed, tag, "context")
        flip = rng.random(n) < spec.context_noise
        other = (groups + rng.integers(1, spec.k, size=n)) % spec.k
        ctx_groups = np.where(flip, other, groups)
    return _Draws(prompts, gamma, groups, first, second, p_first, keep, ctx_groups)


def sample_corpus(
    spec: PopulationSpec,
    n: int,
    with_context: bool = False,
    tag="corpus",
    as_examples: bool = False,
):
    """Draw ``n`` labelled comparisons from the planted population.

    Router inputs are concat(prompt, context). Without context the context
    slots are zero; with context they hold the one-hot annotator group (after
    optional label-flip noise) and ``context_group`` records that group.
    ``tag`` selects an independent family of streams under the spec's seed,
    so train and held-out corpora never overlap.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    spec.validate()
    d = _draw(spec, n, tag)
    keep = d.keep[:, None]
    winner = np.where(keep, d.first, d.second)
    loser = np.where(keep, d.second, d.first)
    ctx = np.zeros((n, spec.ctx_dim))
    if with_context:
        if spec.ctx_dim == 0:
            raise InvalidSpecError("spec has no context slots (ctx_dim=0)")
        ctx[np.arange(n), d.context_groups] = 1.0
    batch = PreferenceBatch(
        np.concatenate([d.prompts, ctx], axis=1),
        winner,
        loser,
        d.groups.astype(int),
        [f"group{g}" for g in d.groups],
        [f"group{g}" for g in d.context_groups] if with_context else None,
    )
    return batch.examples() if as_examples else batch


def regenerate_orientation(spec: PopulationSpec, n: int, tag="corpus") -> np.ndarray:
    """Recompute the keep/swap decisions of ``sample_corpus`` from the label stream."""
    return _draw(spec, n, tag).keep


# ---------------------------------------------------------------------------
# population cross-entropy
# ---------------------------------------------------------------------------


@dataclass
class MCEstimate:
    value: float
    std_error: float
    n: int


def _mixture_log_pq(model: MixtureModel, prompt_ctx: np.ndarray, first, second):
    """log P(first beats second) and log P(second beats first) under ``model``."""
    logf = router_log_forward(model.router, prompt_ctx)
    delta = (first - second) @ model.head_weights.T
    if delta.ndim == 3:
        logf = logf[:, None, :]
    logp = _logsumexp(logf + log_sigmoid(delta), axis=-1)
    logq = _logsumexp(logf + log_sigmoid(-delta), axis=-1)
    return logp, logq


def oracle_population_ce(
    spec: PopulationSpec,
    model: MixtureModel,
    m: int,
    pairs_per_prompt: int = 1,
    seed=None,
) -> MCEstimate:
    """Monte Carlo population cross-entropy of ``model`` under the true mixture.

    Each prompt contributes sum_k gamma_k(x) * mean over its pairs of the
    Bernoulli cross-entropy between sigma(s*_k) and the model probability.
    The model sees the prompt with zeroed context slots.
    """
    spec.validate()
    if m < 1:
        raise ValueError("m must be positive")
    seed = spec.seed if seed is None else seed
    prompts = spec.sample_prompts(stream(seed, "oracle_ce", "prompts"), m)
    first, second = spec.sample_pairs(stream(seed, "oracle_ce", "pairs"), (m, pairs_per_prompt))
    gamma = spec.gamma_of(prompts)
    sig = bt_probability(spec.scores(first, second))  # (m, P, K)
    ctx = np.concatenate([prompts, np.zeros((m, spec.ctx_dim))], axis=1)
    logp, logq = _mixture_log_pq(model, ctx, first, second)  # (m, P)
    ce = -(sig * logp[..., None] + (1.0 - sig) * logq[..., None])  # (m, P, K)
    per_prompt = np.sum(gamma * ce.mean(axis=1), axis=1)
    return MCEstimate(float(per_prompt.mean()), float(per_prompt.std(ddof=1) / np.sqrt(m)) if m > 1 else float("nan"), m)


# ---------------------------------------------------------------------------
# rated corpora
# ---------------------------------------------------------------------------


@dataclass
class RatedItem:
    prompt_ctx: np.ndarray
    response: np.ndarray
    ratings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prompt_ctx = np.asarray(self.prompt_ctx, dtype=float).reshape(-1)
        self.response = np.asarray(self.response, dtype=float).reshape(-1)
        if not self.ratings:
            raise ValueError("ratings must be nonempty")


def binarize_rated_corpus(
    items: Sequence[RatedItem],
    attribute_set: Sequence[str],
    exclude_unanimous: bool = False,
) -> list[PreferenceExample]:
    """Turn per-response attribute ratings into tagged pairwise preferences.

    Responses sharing a prompt are paired; for each attribute the higher-rated
    response wins and ties are skipped. With ``exclude_unanimous`` a response
    pair is dropped entirely when every attribute that separates it points the
    same way.
    """
    if not attribute_set:
        raise ValueError("attribute_set must be nonempty")
    groups: dict[bytes, list[RatedItem]] = {}
    for item in items:
        groups.setdefault(item.prompt_ctx.tobytes(), []).append(item)

    out = []
    for members in groups.values():
        for a, b in itertools.combinations(members, 2):
            emitted = []
            for attr in attribute_set:
                if attr not in a.ratings or attr not in b.ratings:
                    continue
                ra, rb = a.ratings[attr], b.ratings[attr]
                if ra == rb:
                    continue
                win, lose = (a, b) if ra > rb else (b, a)
                emitted.append((ra > rb, PreferenceExample(a.prompt_ctx, win.response, lose.response, None, attr)))
            if exclude_unanimous and emitted and len({first for first, _ in emitted}) == 1:
                continue
            out.extend(ex for _, ex in emitted)
    return out
