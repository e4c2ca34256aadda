"""Unlearning algorithms: importance-guided attenuation (with and without
layer smoothing), gradient ascent, and Hessian-guided attenuation.

All algorithms take a fitted model plus the records to forget and return a new
model with a report; the input model is never mutated. Reported wall time
covers the whole operation including importance estimation, since that is the
cost a deployer actually pays.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import importance as imp_mod
from . import nn
from .data import ResponseRecord, records_to_arrays
from .model import CDModel


@dataclass(frozen=True)
class HIFConfig:
    """Hyperparameters of hierarchical importance-guided forgetting.

    alpha    selection threshold: a parameter is attenuated when its smoothed
             forget-importance exceeds ``alpha`` times its retain-importance.
    lambda_  unlearning strength in [0, 1]; scales the attenuation.
    beta     smoothing factor in [0, 1]; how far forget-importance is shrunk
             toward its layer mean before selection.
    excluded_layers   layer ids exempt from attenuation.
    """

    alpha: float
    lambda_: float
    beta: float
    excluded_layers: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not (0.0 <= self.lambda_ <= 1.0):
            raise ValueError(f"lambda_ must be in [0, 1], got {self.lambda_}")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        object.__setattr__(self, "excluded_layers", frozenset(self.excluded_layers))

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "lambda_": self.lambda_,
            "beta": self.beta,
            "excluded_layers": sorted(self.excluded_layers),
        }


@dataclass
class UnlearnReport:
    algorithm: str
    parameters_modified: int
    wall_time_seconds: float
    config: dict = field(default_factory=dict)


def select_and_attenuate(
    params: nn.ParamStore,
    imp_forget: nn.ArrayBundle,
    imp_retain: nn.ArrayBundle,
    alpha: float,
    lambda_: float,
    excluded_layers: frozenset[str] = frozenset(),
) -> tuple[nn.ParamStore, int]:
    """Core attenuation rule, applied layer by layer.

    A parameter is selected when forget-importance > alpha * retain-importance
    (never when both are zero) and is then scaled by
    ``1 - lambda_ * min(forget / retain, 1)``; a zero retain-importance counts
    as an infinite ratio, so the cap at 1 applies. Unselected parameters are
    returned bit-unchanged.
    """
    params.require_congruent(imp_forget)
    params.require_congruent(imp_retain)
    unknown = excluded_layers - set(params.layer_ids)
    if unknown:
        raise ValueError(f"excluded layers not in model: {sorted(unknown)}")
    out = params.copy()
    n_selected = 0
    for layer_id, values in out.items():
        if layer_id in excluded_layers:
            continue
        f = imp_forget[layer_id]
        r = imp_retain[layer_id]
        selected = f > alpha * r
        if not selected.any():
            continue
        ratio = np.divide(f, r, out=np.full_like(f, np.inf), where=r > 0)
        factor = 1.0 - lambda_ * np.minimum(ratio, 1.0)
        values[selected] *= factor[selected]
        n_selected += int(selected.sum())
    return out, n_selected


def hif_unlearn(
    model: CDModel,
    forget_records: Sequence[ResponseRecord],
    retain_records: Sequence[ResponseRecord],
    config: HIFConfig,
) -> tuple[CDModel, UnlearnReport]:
    """Attenuate parameters over-specialized to ``forget_records``.

    Forget-side Fisher importance is smoothed toward its layer mean (weight
    ``config.beta``) before being compared against the raw retain-side
    importance. With ``beta=0`` this reduces to plain Fisher-guided
    attenuation.
    """
    _check_disjoint(forget_records, retain_records)
    t0 = time.perf_counter()
    imp_f = imp_mod.fim_diag(model, forget_records, source="forget")
    imp_r = imp_mod.fim_diag(model, retain_records, source="retain")
    layer_means = imp_mod.layer_importance(imp_f)
    adjusted = imp_mod.smooth_importance(imp_f, layer_means, config.beta)
    new_params, n_selected = select_and_attenuate(
        model.params_, adjusted, imp_r, config.alpha, config.lambda_, config.excluded_layers
    )
    wall = time.perf_counter() - t0
    report = UnlearnReport(
        algorithm="hif",
        parameters_modified=n_selected,
        wall_time_seconds=wall,
        config=config.to_dict(),
    )
    return model.with_params(new_params), report


def fim_unlearn(
    model: CDModel,
    forget_records: Sequence[ResponseRecord],
    retain_records: Sequence[ResponseRecord],
    alpha: float,
    lambda_: float,
    excluded_layers: frozenset[str] = frozenset(),
) -> tuple[CDModel, UnlearnReport]:
    """Fisher-guided attenuation without layer smoothing (beta = 0)."""
    cfg = HIFConfig(alpha=alpha, lambda_=lambda_, beta=0.0, excluded_layers=excluded_layers)
    unlearned, report = hif_unlearn(model, forget_records, retain_records, cfg)
    report.algorithm = "fim"
    report.config = {k: v for k, v in report.config.items() if k != "beta"}
    return unlearned, report


def gradient_ascent_unlearn(
    model: CDModel,
    forget_records: Sequence[ResponseRecord],
    lr: float,
    steps: int,
) -> tuple[CDModel, UnlearnReport]:
    """Full-batch gradient ascent on the forget-set loss.

    Each step moves every parameter along +lr times the gradient of the mean
    loss over ``forget_records``; parameters with no path to those records
    keep their exact values.
    """
    model._require_fitted()
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if len(forget_records) == 0:
        raise ValueError("forget set is empty")
    t0 = time.perf_counter()
    s, q, y = records_to_arrays(forget_records)
    params = model.params_.copy()
    wiring = model.wiring_
    for _ in range(steps):
        probs, cache = wiring.forward(params, s, q, train=False)
        dz = (probs - y) / len(y)
        grads = wiring.backward(params, cache, dz, mode="sum")
        for layer_id, values in params.items():
            values += lr * grads[layer_id]
    wall = time.perf_counter() - t0
    modified = sum(
        int(np.count_nonzero(params[k] != v)) for k, v in model.params_.items()
    )
    report = UnlearnReport(
        algorithm="gradasc",
        parameters_modified=modified,
        wall_time_seconds=wall,
        config={"lr": lr, "steps": steps},
    )
    return model.with_params(params), report


def hessian_unlearn(
    model: CDModel,
    forget_records: Sequence[ResponseRecord],
    retain_records: Sequence[ResponseRecord],
    alpha: float,
    lambda_: float,
    n_probe_samples: int,
    n_batches: int = 1,
    seed: int = 0,
    excluded_layers: frozenset[str] = frozenset(),
) -> tuple[CDModel, UnlearnReport]:
    """Select-and-attenuate guided by |Hessian diagonal| estimates.

    The same rule as :func:`fim_unlearn` but with the magnitude of a
    randomized Hessian-diagonal estimate standing in for Fisher importance on
    both the forget and retain side. Probe seeds for the two estimates derive
    deterministically from ``seed``.
    """
    _check_disjoint(forget_records, retain_records)
    HIFConfig(alpha=alpha, lambda_=lambda_, beta=0.0)  # validates ranges
    t0 = time.perf_counter()
    seed_f, seed_r = (int(x) for x in np.random.SeedSequence(seed).generate_state(2))
    imp_f = imp_mod.hutchinson_hessian_diag(
        model, forget_records, n_probe_samples, n_batches, seed=seed_f, source="forget"
    ).abs()
    imp_r = imp_mod.hutchinson_hessian_diag(
        model, retain_records, n_probe_samples, n_batches, seed=seed_r, source="retain"
    ).abs()
    new_params, n_selected = select_and_attenuate(
        model.params_, imp_f, imp_r, alpha, lambda_, excluded_layers
    )
    wall = time.perf_counter() - t0
    report = UnlearnReport(
        algorithm="hessian",
        parameters_modified=n_selected,
        wall_time_seconds=wall,
        config={
            "alpha": alpha,
            "lambda_": lambda_,
            "n_probe_samples": n_probe_samples,
            "n_batches": n_batches,
            "seed": seed,
        },
    )
    return model.with_params(new_params), report


def _check_disjoint(
    forget_records: Sequence[ResponseRecord], retain_records: Sequence[ResponseRecord]
) -> None:
    if len(forget_records) == 0 or len(retain_records) == 0:
        raise ValueError("forget and retain sets must both be nonempty")
    forget_students = {r.student_id for r in forget_records}
    retain_students = {r.student_id for r in retain_records}
    overlap = forget_students & retain_students
    if overlap:
        raise ValueError(
            f"forget and retain sets share students {sorted(overlap)[:5]}..."
            if len(overlap) > 5
            else f"forget and retain sets share students {sorted(overlap)}"
        )
