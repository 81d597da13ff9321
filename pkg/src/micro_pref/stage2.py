"""Stage-2 context-aware router learning with Hedge soft labels.

Heads are frozen. Each round the current router's weights act as a prior
omega_i, get reweighted by exp(-L_ik / tau) where L_ik is head k's negative
log-likelihood on example i, and the router is then fit to these soft labels
by cross-entropy.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core_model import (
    MixtureModel,
    PreferenceBatch,
    PreferenceExample,
    RouterParams,
    _check_dim,
    as_batch,
    check_compatible,
    head_deltas,
    log_sigmoid,
    mixture_probabilities,
    neg_entropy,
    router_forward,
)
from .seeding import stream
from .stage1 import Adam, MomentumSGD


class MissingContextError(ValueError):
    pass


class BudgetError(ValueError):
    pass


TAU_PRESETS = {"helpsteer2": 1e-3, "rpr": 1e-4}


@dataclass
class Stage2Config:
    tau: float = 1e-3
    budget_per_attribute: int = 50
    batch_size: int = 32
    epochs: int = 10
    recompute_weights_once_per_epoch: bool = True
    router_lr: float = 1e-2
    optimizer: str = "sgd"  # "sgd" (heavy-ball, momentum 0.9) or "adam"
    seed: int = 0

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.budget_per_attribute < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("budget must be non-negative; batch_size and epochs positive")
        if not self.router_lr > 0:
            raise ValueError("router_lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class HedgeState:
    omega: np.ndarray  # (n, K)
    per_head_loss: np.ndarray  # (n, K)


@dataclass
class AdaptLogRow:
    epoch: int
    mean_soft_label_entropy: float
    router_ce: float
    heldout_accuracy: float


def per_head_losses(model: MixtureModel, ex) -> np.ndarray:
    """-log sigma(r_k(winner) - r_k(loser)) for every head; (K,) or (n, K)."""
    single = isinstance(ex, PreferenceExample)
    b = as_batch(ex)
    _check_dim("pair features", model.pair_dim, b.winner.shape[1])
    out = -log_sigmoid(head_deltas(model, b))
    return out[0] if single else out


def hedge_update(omega, losses, tau: float) -> np.ndarray:
    """Multiplicative-weights posterior omega * exp(-losses / tau), renormalized.

    Works row-wise on (n, K) arrays. The exponent is shifted by its maximum so
    tiny temperatures do not underflow.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    omega = np.asarray(omega, dtype=float)
    losses = np.asarray(losses, dtype=float)
    with np.errstate(divide="ignore"):
        a = np.log(omega) - losses / tau
    a = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(a)
    return e / np.sum(e, axis=-1, keepdims=True)


def hedge_state(model: MixtureModel, batch, tau: float) -> HedgeState:
    b = as_batch(batch)
    check_compatible(model, b)
    losses = per_head_losses(model, b)
    return HedgeState(hedge_update(router_forward(model.router, b.prompt_ctx), losses, tau), losses)


def route_and_score(model: MixtureModel, ex):
    """Router weights, mixture probability and the binary prediction p_mix > 0.5.

    A probability of exactly 0.5 is not a prediction for the winner.
    """
    b = as_batch(ex)
    check_compatible(model, b)
    weights = router_forward(model.router, b.prompt_ctx)
    p_mix = mixture_probabilities(model, b)
    pred = p_mix > 0.5
    if isinstance(ex, PreferenceExample):
        return weights[0], float(p_mix[0]), bool(pred[0])
    return weights, p_mix, pred


def _group_keys(b: PreferenceBatch) -> list:
    keys = b.context_group
    if any(k is None for k in keys):
        missing = next(i for i, k in enumerate(keys) if k is None)
        raise MissingContextError(f"example {missing} has no context_group; Stage 2 needs context features")
    return list(keys)


def select_budget(corpus, budget: int, seed: int) -> PreferenceBatch:
    """Draw ``budget`` examples per context group, without replacement."""
    b = as_batch(corpus)
    by_group = defaultdict(list)
    for i, g in enumerate(_group_keys(b)):
        by_group[g].append(i)
    chosen = []
    for g in sorted(by_group):
        idx = by_group[g]
        if budget > len(idx):
            raise BudgetError(f"budget {budget} exceeds the {len(idx)} examples of group {g!r}")
        rng = stream(seed, "budget", g)
        chosen.extend(np.asarray(idx)[rng.choice(len(idx), size=budget, replace=False)].tolist())
    return b.subset(sorted(chosen))


def _router_vec(r: RouterParams) -> np.ndarray:
    return np.concatenate([r.hidden_weights.ravel(), r.hidden_bias, r.output_weights.ravel(), r.output_bias])


def _router_from_vec(template: RouterParams, v: np.ndarray) -> RouterParams:
    h, d, k = template.hidden_size, template.ctx_dim, template.k
    o = 0
    w1 = v[o : o + h * d].reshape(h, d)
    o += h * d
    b1 = v[o : o + h]
    o += h
    w2 = v[o : o + k * h].reshape(k, h)
    o += k * h
    b2 = v[o : o + k]
    return RouterParams(w1.copy(), b1.copy(), w2.copy(), b2.copy())


def soft_label_gradient(router: RouterParams, prompt_ctx: np.ndarray, omega: np.ndarray):
    """Mean cross-entropy -sum_k omega_k log f_k and its router gradient (flat)."""
    n = prompt_ctx.shape[0]
    h = np.tanh(prompt_ctx @ router.hidden_weights.T + router.hidden_bias)
    z = h @ router.output_weights.T + router.output_bias
    z = z - np.max(z, axis=1, keepdims=True)
    logf = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    ce = float(-np.mean(np.sum(omega * logf, axis=1)))
    g_z = (np.exp(logf) - omega) / n
    g_a = (g_z @ router.output_weights) * (1.0 - h * h)
    grad = np.concatenate([(g_a.T @ prompt_ctx).ravel(), g_a.sum(axis=0), (g_z.T @ h).ravel(), g_z.sum(axis=0)])
    return ce, grad


def run_algorithm1(
    model: MixtureModel,
    corpus,
    config: Stage2Config,
    heldout=None,
) -> tuple[MixtureModel, list[AdaptLogRow]]:
    """Fine-tune the router on context-annotated pairs; heads stay untouched.

    With ``recompute_weights_once_per_epoch`` the soft labels are computed from
    the router at the start of each epoch and held fixed for that epoch;
    otherwise they are recomputed for every minibatch from the current router.
    """
    config.validate()
    b = as_batch(corpus)
    check_compatible(model, b)
    groups = _group_keys(b)
    counts = defaultdict(int)
    for g in groups:
        counts[g] += 1
    over = {g: c for g, c in counts.items() if c > config.budget_per_attribute}
    if over:
        raise BudgetError(f"groups exceed budget {config.budget_per_attribute}: {over}")
    held = as_batch(heldout) if heldout is not None else None

    losses = per_head_losses(model, b)  # heads are frozen, so these never change
    router = model.router.copy()
    theta = _router_vec(router)
    # Adam's scale-free steps amplify the vanishing soft-label gradients of
    # large tau into a random walk, so heavy-ball SGD is the default
    opt = Adam(theta.size) if config.optimizer == "adam" else MomentumSGD(theta.size)
    n = len(b)
    history = []

    for epoch in range(config.epochs):
        if config.recompute_weights_once_per_epoch:
            omega_all = hedge_update(router_forward(router, b.prompt_ctx), losses, config.tau)
        order = stream(config.seed, "stage2", "shuffle", epoch).permutation(n)
        ce_sum, ent_sum = 0.0, 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = b.prompt_ctx[idx]
            if config.recompute_weights_once_per_epoch:
                omega = omega_all[idx]
            else:
                omega = hedge_update(router_forward(router, x), losses[idx], config.tau)
            ce, grad = soft_label_gradient(router, x, omega)
            ce_sum += ce * len(idx)
            ent_sum += float(-np.sum(neg_entropy(omega)))
            theta = opt.step(theta, grad, config.router_lr)
            router = _router_from_vec(router, theta)
        acc = float("nan")
        if held is not None:
            adapted = MixtureModel(model.head_weights, model.head_bias, router)
            acc = float(np.mean(route_and_score(adapted, held)[2]))
        history.append(AdaptLogRow(epoch + 1, ent_sum / n, ce_sum / n, acc))

    adapted = MixtureModel(model.head_weights.copy(), model.head_bias.copy(), router)
    return adapted, history
