"""Accuracy reports, head matching, and the single-BT irreducible-error check.

The lower bound on the cross-entropy of any single BT predictor is estimated
by Monte Carlo from a planted population:

    bound = 2 * rho * K * E_x Var_k[ pbar_k(x) ] + E_x sum_k gamma_k(x) E_pairs H_b(sigma(s*_k))

where pbar_k(x) is group k's mean win probability of the first candidate over
pairs drawn for prompt x, Var_k is the population variance across the K
groups, and H_b is the binary entropy in nats.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_model import (
    MixtureModel,
    as_batch,
    bt_probability,
    check_compatible,
    head_deltas,
    log_sigmoid,
    mle_loss,
)
from .population import PopulationSpec, oracle_population_ce, sample_corpus
from .seeding import stream
from .stage1 import Stage1Config, train_stage1
from .stage2 import Stage2Config, route_and_score, run_algorithm1, select_budget

DEFAULT_ATTRIBUTE = "all"


@dataclass
class EvalReport:
    per_attribute_accuracy: dict
    per_head_accuracy: list  # K rows, one column per attribute (same order as ``attributes``)
    best_head_per_attribute: dict
    average_accuracy: float
    ce_loss: float
    n_examples: int
    attributes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: MixtureModel, corpus) -> EvalReport:
    """Mixture and per-head accuracy, macro-averaged over attribute tags.

    A predicted probability of exactly 0.5 counts as an error.
    """
    b = as_batch(corpus)
    check_compatible(model, b)
    attrs = [DEFAULT_ATTRIBUTE if a is None else a for a in b.attribute]
    names = sorted(set(attrs))
    tags = np.asarray(attrs, dtype=object)

    correct = route_and_score(model, b)[2]
    head_correct = head_deltas(model, b) > 0  # sigma(delta) > 1/2

    per_attr, per_head = {}, np.zeros((model.k, len(names)))
    for j, name in enumerate(names):
        mask = tags == name
        per_attr[name] = float(np.mean(correct[mask]))
        per_head[:, j] = np.mean(head_correct[mask], axis=0)
    best = {name: int(np.argmax(per_head[:, j])) for j, name in enumerate(names)}
    return EvalReport(
        per_attribute_accuracy=per_attr,
        per_head_accuracy=per_head.tolist(),
        best_head_per_attribute=best,
        average_accuracy=float(np.mean(list(per_attr.values()))),
        ce_loss=mle_loss(model, b),
        n_examples=len(b),
        attributes=names,
    )


def bayes_accuracy(spec: PopulationSpec, corpus) -> float:
    """Expected accuracy of the group-aware Bayes predictor on these pairs."""
    b = as_batch(corpus)
    if np.any(b.group_id < 0):
        raise ValueError("Bayes accuracy needs ground-truth group ids")
    s = np.einsum("nd,nd->n", b.winner - b.loser, spec.head_weights[b.group_id])
    p = bt_probability(s)
    return float(np.mean(np.maximum(p, 1.0 - p)))


def match_heads(model: MixtureModel, spec: PopulationSpec, n: int = 20000, seed: int = 0):
    """Best assignment of learned heads to true heads by pairwise agreement.

    Returns (perm, agreement) where learned head ``perm[k]`` is matched to
    true head k and ``agreement[k]`` is the fraction of fresh pairs whose
    ordering the two heads agree on. The assignment maximizes the smallest
    agreement, then the total.
    """
    first, second = spec.sample_pairs(stream(seed, "match_heads"), n)
    learned = (first - second) @ model.head_weights.T
    true = spec.scores(first, second)
    agree = np.array([[np.mean(np.sign(learned[:, j]) == np.sign(true[:, k])) for j in range(model.k)] for k in range(spec.k)])
    best, best_key = None, None
    for perm in itertools.permutations(range(model.k), spec.k):
        vals = agree[np.arange(spec.k), perm]
        key = (vals.min(), vals.sum())
        if best_key is None or key > best_key:
            best, best_key = perm, key
    return np.asarray(best), agree[np.arange(spec.k), best]


# ---------------------------------------------------------------------------
# irreducible-error bound
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    rho: float
    variance_term: float
    entropy_term: float
    bound: float
    mc_std_error: float
    single_bt_ce: Optional[float] = None
    satisfied: Optional[bool] = None
    bound_std_error: float = float("nan")
    single_bt_std_error: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def binary_entropy_of_logit(s: np.ndarray) -> np.ndarray:
    p = bt_probability(s)
    return -(p * log_sigmoid(s) + (1.0 - p) * log_sigmoid(-s))


def bound_estimate(spec: PopulationSpec, m: int = 20000, pairs_per_prompt: int = 8, seed=None) -> BoundReport:
    """Monte Carlo estimate of the single-BT cross-entropy lower bound.

    The across-group variance of the mean win probabilities is estimated per
    prompt with an unbiased U-statistic over its pairs, so the noise in each
    pbar_k does not inflate the bound.
    """
    spec.validate()
    if m < 1:
        raise ValueError("m must be positive")
    if pairs_per_prompt < 2:
        raise ValueError("pairs_per_prompt must be at least 2")
    seed = spec.seed if seed is None else seed
    prompts = spec.sample_prompts(stream(seed, "bound", "prompts"), m)
    first, second = spec.sample_pairs(stream(seed, "bound", "pairs"), (m, pairs_per_prompt))
    gamma = spec.gamma_of(prompts)
    s = spec.scores(first, second)  # (m, P, K)
    sig = bt_probability(s)

    ent = np.sum(gamma * binary_entropy_of_logit(s).mean(axis=1), axis=1)

    k, P = spec.k, pairs_per_prompt
    c = sig - sig.mean(axis=2, keepdims=True)  # centred across groups, per pair
    total = c.sum(axis=1)
    cross = np.sum(total * total, axis=1) - np.sum(c * c, axis=(1, 2))
    var = cross / (P * (P - 1)) / k  # unbiased for Var_k(pbar_k(x))

    per_prompt_var = 2.0 * spec.rho * k * var
    per_prompt = per_prompt_var + ent
    variance_term = max(float(per_prompt_var.mean()), 0.0)
    entropy_term = float(ent.mean())
    se = float(per_prompt.std(ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
    return BoundReport(
        rho=spec.rho,
        variance_term=variance_term,
        entropy_term=entropy_term,
        bound=variance_term + entropy_term,
        mc_std_error=se,
        bound_std_error=se,
    )


def train_single_bt(
    spec: PopulationSpec,
    n_train: int = 20000,
    epochs: int = 3,
    restarts: int = 3,
    seed: int = 0,
    learning_rate: float = 2e-2,
    polish_epochs: int = 1,
) -> MixtureModel:
    """Best-of-``restarts`` single BT model fit to a fresh corpus from ``spec``.

    The winning restart is polished for ``polish_epochs`` at a tenth of the
    learning rate, which removes most of the constant-step Adam jitter.
    """
    corpus = sample_corpus(spec, n_train, tag=("single_bt", seed))
    best, best_loss = None, math.inf
    for r in range(restarts):
        cfg = Stage1Config(
            k=1,
            alpha=0.0,
            learning_rate=learning_rate,
            epochs=epochs,
            seed=int(stream(seed, "restart", r).integers(2**31)),
            hidden=1,
            head_init_std=1.0,
        )
        model, _ = train_stage1(corpus, cfg)
        loss = mle_loss(model, corpus)
        if loss < best_loss:
            best, best_loss = model, loss
    if polish_epochs > 0:
        cfg = Stage1Config(
            k=1, alpha=0.0, learning_rate=learning_rate / 10, epochs=polish_epochs, seed=seed, hidden=1, warmup_ratio=0.0
        )
        polished, _ = train_stage1(corpus, cfg, model=best)
        if mle_loss(polished, corpus) < best_loss:
            best = polished
    return best


def verify_irreducibility(
    spec: PopulationSpec,
    m: int = 20000,
    bt_training_budget: int = 20000,
    epochs: int = 3,
    restarts: int = 3,
    pairs_per_prompt: int = 8,
    seed: int = 0,
) -> BoundReport:
    """Fit a single BT model and check its population CE against the bound."""
    report = bound_estimate(spec, m, pairs_per_prompt, seed=seed)
    model = train_single_bt(spec, bt_training_budget, epochs, restarts, seed)
    ce = oracle_population_ce(spec, model, m, pairs_per_prompt=pairs_per_prompt, seed=seed + 1)
    report.single_bt_ce = ce.value
    report.single_bt_std_error = ce.std_error
    report.mc_std_error = math.hypot(report.bound_std_error, ce.std_error)
    report.satisfied = bool(ce.value >= report.bound - 3.0 * report.mc_std_error)
    return report


# ---------------------------------------------------------------------------
# Stage-2 budget sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    budget: int
    mean_acc: float
    std_acc: float
    accuracies: list


def budget_sweep(
    model: MixtureModel,
    context_corpus,
    heldout,
    budgets: Sequence[int],
    config: Stage2Config,
    repeats: int = 5,
) -> list[SweepPoint]:
    """Held-out average accuracy after Stage-2 adaptation at each budget.

    Every run starts from the same Stage-1 ``model``; repeat r draws its own
    per-group subsample and shuffling. Budget 0 means no adaptation.
    """
    budgets = list(budgets)
    if budgets != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    if repeats < 1:
        raise ValueError("repeats must be positive")
    pool = as_batch(context_corpus)
    held = as_batch(heldout)
    counts = {}
    for g in pool.context_group:
        counts[g] = counts.get(g, 0) + 1
    if budgets and counts and budgets[-1] > min(counts.values()):
        raise ValueError(f"budget {budgets[-1]} exceeds the smallest context group ({min(counts.values())} examples)")

    static = evaluate(model, held).average_accuracy
    points = []
    for budget in budgets:
        accs = []
        for r in range(repeats):
            if budget == 0:
                accs.append(static)
                continue
            run_seed = int(stream(config.seed, "sweep", budget, r).integers(2**31))
            sub = select_budget(pool, budget, run_seed)
            cfg = Stage2Config(**{**asdict(config), "budget_per_attribute": budget, "seed": run_seed})
            adapted, _ = run_algorithm1(model, sub, cfg)
            accs.append(evaluate(adapted, held).average_accuracy)
        points.append(SweepPoint(budget, float(np.mean(accs)), float(np.std(accs)), accs))
    return points
