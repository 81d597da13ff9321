"""Stage-1 mixture training: regularized maximum likelihood with Adam.

Gradients are derived by hand. For one example with router weights f_k,
head probabilities p_k and mixture probability p = sum_k f_k p_k, write
w_k = f_k p_k / p for the posterior over heads. Then

    d(-log p)/d delta_k = -w_k (1 - p_k)
    d(-log p)/d z_j     = f_j - w_j          (z: router logits)

and the entropy term sum_k f_k log f_k contributes f_j (log f_j - sum_k f_k log f_k)
to d/d z_j. Reward biases cancel in every margin, so their gradient is zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core_model import (
    LOG_CLAMP,
    DEFAULT_HIDDEN,
    MixtureModel,
    PreferenceBatch,
    RouterParams,
    _check_alpha,
    _logsumexp,
    as_batch,
    check_compatible,
    log_sigmoid,
    total_loss,
)
from .seeding import stream

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index: int, what: str):
        self.index = index
        super().__init__(f"non-finite {what} at example {index}")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, last_finite_loss: float):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(f"loss became non-finite at step {step} (last finite loss {last_finite_loss:.6g})")


@dataclass
class Stage1Config:
    k: int = 2
    alpha: float = 0.5
    learning_rate: float = 2e-3
    batch_size: int = 4
    grad_accum_steps: int = 8
    warmup_ratio: float = 0.05
    epochs: int = 1
    seed: int = 0
    hidden: int = DEFAULT_HIDDEN
    weight_decay: float = 0.0
    head_init_std: float = 0.02

    def validate(self) -> None:
        _check_alpha(self.alpha)
        if self.k < 1 or self.batch_size < 1 or self.grad_accum_steps < 1 or self.epochs < 1:
            raise ValueError("k, batch_size, grad_accum_steps and epochs must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")


@dataclass
class GradientBundle:
    head_weights: np.ndarray
    head_bias: np.ndarray
    router: RouterParams
    loss: float
    mle_loss: float = float("nan")
    reg_loss: float = float("nan")

    def flat(self) -> np.ndarray:
        return flatten(self.head_weights, self.head_bias, self.router)


# ---------------------------------------------------------------------------
# parameter vector plumbing
# ---------------------------------------------------------------------------


def flatten(head_weights, head_bias, router: RouterParams) -> np.ndarray:
    return np.concatenate(
        [
            head_weights.ravel(),
            head_bias.ravel(),
            router.hidden_weights.ravel(),
            router.hidden_bias.ravel(),
            router.output_weights.ravel(),
            router.output_bias.ravel(),
        ]
    )


def model_vector(model: MixtureModel) -> np.ndarray:
    return flatten(model.head_weights, model.head_bias, model.router)


def _shapes(model: MixtureModel):
    r = model.router
    return [
        ("head_weights", model.head_weights.shape),
        ("head_bias", model.head_bias.shape),
        ("router.hidden_weights", r.hidden_weights.shape),
        ("router.hidden_bias", r.hidden_bias.shape),
        ("router.output_weights", r.output_weights.shape),
        ("router.output_bias", r.output_bias.shape),
    ]


def parameter_names(model: MixtureModel) -> list[str]:
    names = []
    for name, shape in _shapes(model):
        for idx in np.ndindex(*shape):
            names.append(f"{name}[{','.join(map(str, idx))}]")
    return names


def bias_coordinates(model: MixtureModel) -> np.ndarray:
    out, offset = [], 0
    for name, shape in _shapes(model):
        size = int(np.prod(shape))
        if name.endswith("bias"):
            out.extend(range(offset, offset + size))
        offset += size
    return np.asarray(out, dtype=int)


def model_from_vector(template: MixtureModel, vec: np.ndarray) -> MixtureModel:
    parts, offset = [], 0
    for _, shape in _shapes(template):
        size = int(np.prod(shape))
        parts.append(vec[offset : offset + size].reshape(shape).copy())
        offset += size
    hw, hb, w1, b1, w2, b2 = parts
    return MixtureModel(hw, hb, RouterParams(w1, b1, w2, b2, template.router.floor))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def compute_gradients(model: MixtureModel, batch, alpha: float) -> GradientBundle:
    """Exact gradient of mle_loss + alpha * reg_loss over the batch."""
    _check_alpha(alpha)
    if model.router.floor:
        raise ValueError("gradients are only defined for unfloored routers")
    b = as_batch(batch)
    check_compatible(model, b)
    n = len(b)
    r = model.router

    x = b.prompt_ctx
    h = np.tanh(x @ r.hidden_weights.T + r.hidden_bias)
    z = h @ r.output_weights.T + r.output_bias
    logf = z - _logsumexp(z)[:, None]
    f = np.exp(logf)

    diff = b.winner - b.loser
    delta = diff @ model.head_weights.T
    logjoint = logf + log_sigmoid(delta)
    logp = _logsumexp(logjoint, axis=1)
    post = np.exp(logjoint - logp[:, None])

    safe_log = np.log(np.maximum(f, LOG_CLAMP))
    negent = np.sum(f * safe_log, axis=1)
    bad = ~(np.isfinite(logp) & np.isfinite(negent))
    if bad.any():
        raise NonFiniteGradientError(int(np.argmax(bad)), "loss term")

    mle = float(-np.mean(logp))
    reg = float(np.mean(negent))

    # d/d delta_k of -log p, with 1 - p_k = sigma(-delta_k)
    g_delta = -post * np.exp(log_sigmoid(-delta)) / n
    g_hw = g_delta.T @ diff

    # d f_k of the clamped entropy term, then through the softmax
    g_f = np.where(f >= LOG_CLAMP, safe_log + 1.0, safe_log)
    g_ent = f * (g_f - np.sum(f * g_f, axis=1, keepdims=True))
    g_z = ((f - post) + alpha * g_ent) / n

    g_w2 = g_z.T @ h
    g_b2 = g_z.sum(axis=0)
    g_a = (g_z @ r.output_weights) * (1.0 - h * h)
    g_w1 = g_a.T @ x
    g_b1 = g_a.sum(axis=0)

    bundle = GradientBundle(
        g_hw,
        np.zeros_like(model.head_bias),
        RouterParams(g_w1, g_b1, g_w2, g_b2),
        mle + alpha * reg,
        mle,
        reg,
    )
    flat = bundle.flat()
    if not np.all(np.isfinite(flat)):
        rows = ~np.all(np.isfinite(g_z), axis=1) | ~np.all(np.isfinite(g_delta), axis=1)
        raise NonFiniteGradientError(int(np.argmax(rows)) if rows.any() else -1, "gradient")
    return bundle


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    step: float
    checked: int
    failing: list = field(default_factory=list)  # (index, name, analytic, numeric, rel_error)
    warnings: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def discretization_warning(self) -> bool:
        return any("discretization" in w for w in self.warnings)


def _rel_error(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    model: MixtureModel,
    batch,
    alpha: float,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    fraction: float = 0.05,
    seed: int = 0,
    analytic: Optional[np.ndarray] = None,
    coords: Optional[np.ndarray] = None,
) -> GradCheckReport:
    """Compare analytic gradients to central differences.

    Checks a random ``fraction`` of coordinates plus every bias. ``analytic``
    overrides the flat gradient under test (used for fault injection).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    b = as_batch(batch)
    theta = model_vector(model)
    if analytic is None:
        analytic = compute_gradients(model, b, alpha).flat()
    if coords is None:
        rng = stream(seed, "grad_check")
        n_pick = max(1, int(math.ceil(fraction * theta.size)))
        picked = rng.choice(theta.size, size=min(n_pick, theta.size), replace=False)
        coords = np.union1d(picked, bias_coordinates(model))
    coords = np.asarray(coords, dtype=int)

    def central(i, h):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        return (total_loss(model_from_vector(model, tp), b, alpha) - total_loss(model_from_vector(model, tm), b, alpha)) / (2 * h)

    numeric = np.array([central(i, step) for i in coords])
    half = np.array([central(i, step / 2) for i in coords])
    rel = _rel_error(analytic[coords], numeric)
    names = parameter_names(model)
    report = GradCheckReport(float(rel.max()), tolerance, step, int(coords.size))
    for j in np.flatnonzero(rel >= tolerance):
        i = int(coords[j])
        report.failing.append((i, names[i], float(analytic[i]), float(numeric[j]), float(rel[j])))
    # halving the step should not move a valid estimate by more than the tolerance
    drift = float(_rel_error(numeric, half).max())
    if drift >= tolerance:
        report.warnings.append(
            f"discretization-dominated comparison: halving step {step:g} moved estimates by {drift:.2e}"
        )
    return report


# ---------------------------------------------------------------------------
# optimizer and training loop
# ---------------------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay over a flat parameter vector."""

    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        if self.weight_decay:
            theta = theta * (1 - lr * self.weight_decay)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class MomentumSGD:
    """Heavy-ball gradient descent over a flat parameter vector."""

    def __init__(self, size: int, momentum: float = 0.9):
        self.buf = np.zeros(size)
        self.momentum = momentum

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.buf = self.momentum * self.buf + grad
        return theta - lr * self.buf


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps`` (1-indexed), then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


@dataclass
class TrainLogRow:
    step: int
    mle_loss: float
    reg_loss: float
    total_loss: float
    mean_router_entropy: float


def init_model(config: Stage1Config, pair_dim: int, ctx_dim: int) -> MixtureModel:
    return MixtureModel.init_random(
        config.k, pair_dim, ctx_dim, stream(config.seed, "stage1", "init"), config.hidden, config.head_init_std
    )


def train_stage1(
    corpus,
    config: Stage1Config,
    model: Optional[MixtureModel] = None,
) -> tuple[MixtureModel, list[TrainLogRow]]:
    """Minibatch Adam on the regularized mixture likelihood.

    Each optimizer step averages ``grad_accum_steps`` microbatches of
    ``batch_size`` examples. The learning rate warms up linearly over the
    first ``warmup_ratio`` of all steps. Shuffling and initialization are
    driven by ``config.seed`` only.
    """
    config.validate()
    data = as_batch(corpus)
    n = len(data)
    if n < config.batch_size:
        raise ValueError(f"corpus of {n} examples is smaller than batch_size {config.batch_size}")
    if model is None:
        model = init_model(config, data.winner.shape[1], data.prompt_ctx.shape[1])
    else:
        model = model.copy()
    check_compatible(model, data)
    if model.k != config.k:
        raise ValueError(f"initial model has {model.k} heads, config asks for {config.k}")

    micro_per_epoch = math.ceil(n / config.batch_size)
    steps_per_epoch = math.ceil(micro_per_epoch / config.grad_accum_steps)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = math.ceil(config.warmup_ratio * total_steps)

    theta = model_vector(model)
    opt = Adam(theta.size, weight_decay=config.weight_decay)
    history: list[TrainLogRow] = []
    last_finite = float("nan")
    step = 0

    for epoch in range(config.epochs):
        order = stream(config.seed, "stage1", "shuffle", epoch).permutation(n)
        for s in range(steps_per_epoch):
            lo = s * config.grad_accum_steps * config.batch_size
            hi = min(n, lo + config.grad_accum_steps * config.batch_size)
            starts = range(lo, hi, config.batch_size)
            if (hi - lo) % config.batch_size == 0:
                # equal-sized microbatches: the mean of their means is the mean
                # over the whole group, so one pass gives the accumulated gradient
                groups = [order[lo:hi]]
            else:
                groups = [order[i : i + config.batch_size] for i in starts]
            grad = np.zeros_like(theta)
            mle = reg = 0.0
            for idx in groups:
                mb = PreferenceBatch(data.prompt_ctx[idx], data.winner[idx], data.loser[idx])
                g = compute_gradients(model, mb, config.alpha)
                grad += g.flat()
                mle += g.mle_loss
                reg += g.reg_loss
            grad /= len(groups)
            mle /= len(groups)
            reg /= len(groups)
            step += 1
            total = mle + config.alpha * reg
            if not math.isfinite(total):
                raise TrainingDivergedError(step, last_finite)
            last_finite = total
            history.append(TrainLogRow(step, mle, reg, total, -reg))
            theta = opt.step(theta, grad, warmup_lr(config.learning_rate, step, warmup_steps))
            model = model_from_vector(model, theta)
        log.debug("epoch %d done, last loss %.5f", epoch, last_finite)
    return model, history
