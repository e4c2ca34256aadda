"""Parameter-importance estimation.

Two estimators share the :class:`ImportanceMap` container:

* the diagonal of the empirical Fisher information — the mean over a dataset
  of squared per-example loss gradients (always nonnegative), and
* a randomized Hessian-diagonal estimate (Hutchinson probes with
  finite-difference Hessian-vector products), which may be negative.

On top of the Fisher values sit per-layer means and a convex smoothing step
that shrinks each parameter's importance toward its layer mean.
"""

from __future__ import annotations

import csv
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn, serialize
from .data import ResponseRecord, records_to_arrays
from .model import CDModel

KIND_FIM = "fim"
KIND_HESSIAN = "hessian"


class ImportanceMap(nn.ArrayBundle):
    """Per-parameter importance values congruent with a model's parameters."""

    def __init__(self, arrays: Mapping[str, np.ndarray], source: str = "", kind: str = KIND_FIM):
        super().__init__(arrays)
        self.source = source
        self.kind = kind
        if kind == KIND_FIM:
            for name, values in self.items():
                if values.size and values.min() < 0:
                    raise ValueError(f"negative Fisher importance in layer {name!r}")

    def copy(self) -> "ImportanceMap":
        return ImportanceMap(self.copy_arrays(), source=self.source, kind=self.kind)

    def abs(self) -> "ImportanceMap":
        return ImportanceMap(
            {k: np.abs(v) for k, v in self.items()}, source=self.source, kind=self.kind
        )

    def save(self, path: str) -> None:
        serialize.save_bundle(
            path,
            dict(self.items()),
            {"kind": "importance", "estimator": self.kind, "source": self.source},
        )

    @classmethod
    def load(cls, path: str) -> "ImportanceMap":
        arrays, meta = serialize.load_bundle(path)
        if meta.get("kind") != "importance":
            raise serialize.ContainerError(f"{path} is not an importance map")
        return cls(arrays, source=meta.get("source", ""), kind=meta.get("estimator", KIND_FIM))

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["layer_id", "index", "value"])
            for name, values in self.items():
                for idx, value in enumerate(values.ravel()):
                    writer.writerow([name, idx, repr(float(value))])


def fim_diag(
    model: CDModel,
    records: Sequence[ResponseRecord],
    source: str = "",
    batch_size: int = 4096,
) -> ImportanceMap:
    """Fisher-diagonal importance of every parameter with respect to ``records``.

    For each parameter this is the mean over records of the squared
    per-example loss gradient; parameters untouched by every record (for
    example embedding rows of students absent from ``records``) are exactly 0.
    """
    model._require_fitted()
    s, q, y = records_to_arrays(records)
    if len(y) == 0:
        raise ValueError("importance needs a nonempty dataset")
    sq = nn.accumulate_sq_grads(model.wiring_, model.params_, s, q, y, batch_size)
    return ImportanceMap(dict(sq.items()), source=source, kind=KIND_FIM)


def layer_importance(imp: ImportanceMap) -> dict[str, float]:
    """Arithmetic mean of the importance values within each layer."""
    return {name: float(np.mean(values)) for name, values in imp.items()}


def smooth_importance(
    imp: ImportanceMap, layer_means: dict[str, float], beta: float
) -> ImportanceMap:
    """Convex combination of each value with its layer mean:
    ``(1 - beta) * value + beta * layer_mean``.

    ``beta=0`` returns the input values bit-for-bit; ``beta=1`` floods every
    layer with its mean. The within-layer mean is invariant for any beta.
    """
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    missing = [name for name, _ in imp.items() if name not in layer_means]
    if missing:
        raise ValueError(f"layer means missing for {missing}")
    arrays = {
        name: (1.0 - beta) * values + beta * layer_means[name]
        for name, values in imp.items()
    }
    return ImportanceMap(arrays, source=imp.source, kind=imp.kind)


def hutchinson_diag(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    n_probe_samples: int,
    rng: np.random.Generator,
    return_samples: bool = False,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Randomized estimate of the Hessian diagonal of a function at ``x0``.

    Uses n_probe_samples Rademacher probes z and the identity
    diag(H) ~= E[z * (H z)], with H z obtained by central finite differences
    of ``grad_fn``: (g(x0 + eps z) - g(x0 - eps z)) / (2 eps), where
    eps = 1e-3 * (1 + max|x0|).
    """
    if n_probe_samples < 1:
        raise ValueError("n_probe_samples must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = 1e-3 * (1.0 + (np.max(np.abs(x0)) if x0.size else 0.0))
    samples = np.empty((n_probe_samples, x0.size))
    for k in range(n_probe_samples):
        z = rng.integers(0, 2, size=x0.size).astype(np.float64) * 2.0 - 1.0
        hz = (grad_fn(x0 + eps * z) - grad_fn(x0 - eps * z)) / (2.0 * eps)
        samples[k] = z * hz
    estimate = samples.mean(axis=0)
    if return_samples:
        return estimate, samples
    return estimate


def hutchinson_hessian_diag(
    model: CDModel,
    records: Sequence[ResponseRecord],
    n_probe_samples: int,
    n_batches: int = 1,
    seed: int = 0,
    batch_size: int = 256,
    source: str = "",
) -> ImportanceMap:
    """Hessian-diagonal importance of the model's mean loss over ``records``.

    The gradient behind each Hessian-vector product is evaluated on
    ``n_batches`` batches of ``batch_size`` records drawn (seeded) from
    ``records``. Values are signed; deterministic for a fixed seed.
    """
    model._require_fitted()
    if n_probe_samples < 1:
        raise ValueError("n_probe_samples must be >= 1")
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    s, q, y = records_to_arrays(records)
    if len(y) == 0:
        raise ValueError("importance needs a nonempty dataset")
    rng = np.random.default_rng(seed)
    take = min(len(y), n_batches * batch_size)
    chosen = rng.permutation(len(y))[:take]
    s, q, y = s[chosen], q[chosen], y[chosen]

    wiring = model.wiring_
    template = model.params_

    def grad_fn(vec: np.ndarray) -> np.ndarray:
        params = template.with_vector(vec)
        probs, cache = wiring.forward(params, s, q, train=False)
        dz = (probs - y) / len(y)
        return wiring.backward(params, cache, dz, mode="sum").to_vector()

    estimate = hutchinson_diag(grad_fn, template.to_vector(), n_probe_samples, rng)
    return ImportanceMap(
        dict(template.with_vector(estimate).items()), source=source, kind=KIND_HESSIAN
    )
