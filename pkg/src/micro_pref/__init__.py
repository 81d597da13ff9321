"""Mixture-of-Bradley-Terry preference learning with Hedge-based router adaptation."""

import os as _os

__version__ = "0.1.0"

# MICRO_PREF_THREADS caps BLAS threading; it must be set before numpy loads
if _os.environ.get("MICRO_PREF_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MICRO_PREF_THREADS"])

from .core_model import (  # noqa: E402
    DimensionError,
    MixtureModel,
    PreferenceBatch,
    PreferenceExample,
    RewardHead,
    RouterParams,
    bt_probability,
    head_reward,
    mixture_probability,
    mle_loss,
    reg_loss,
    router_forward,
    total_loss,
)
from .population import PopulationSpec, make_population, oracle_population_ce, sample_corpus  # noqa: E402
from .stage1 import Stage1Config, compute_gradients, grad_check, train_stage1  # noqa: E402
from .stage2 import Stage2Config, hedge_update, per_head_losses, route_and_score, run_algorithm1  # noqa: E402
from .evaluation import bound_estimate, budget_sweep, evaluate, verify_irreducibility  # noqa: E402

__all__ = [
    "DimensionError",
    "MixtureModel",
    "PreferenceBatch",
    "PreferenceExample",
    "RewardHead",
    "RouterParams",
    "bt_probability",
    "head_reward",
    "mixture_probability",
    "mle_loss",
    "reg_loss",
    "router_forward",
    "total_loss",
    "PopulationSpec",
    "make_population",
    "oracle_population_ce",
    "sample_corpus",
    "Stage1Config",
    "compute_gradients",
    "grad_check",
    "train_stage1",
    "Stage2Config",
    "hedge_update",
    "per_head_losses",
    "route_and_score",
    "run_algorithm1",
    "bound_estimate",
    "budget_sweep",
    "evaluate",
    "verify_irreducibility",
]
