"""Neural cognitive-diagnosis architectures and the estimator around them.

Two architectures share one interface:

``decoupled``
    Students, exercises, and knowledge components (KCs) get independent
    embedding vectors. A student's proficiency over the K KCs is
    ``sigmoid(e_s @ E_C.T + prof_bias)`` and an exercise's difficulty is
    ``sigmoid(e_q @ E_C.T + diff_bias)``; their difference is masked by the
    exercise's Q-matrix row and fed to a small feed-forward network whose
    sigmoid output is the probability of a correct response. Each student's
    personal signal lives almost entirely in their own embedding row, which is
    what makes selective unlearning tractable.

``neuralcdm``
    A mastery-table variant: per-student K-dimensional mastery logits, per-item
    difficulty logits and a scalar discrimination, interaction
    ``Q_row * (mastery - difficulty) * disc``, and a monotonic feed-forward
    network whose dense weights are projected to be nonnegative after every
    optimizer step so that more mastery never lowers the predicted probability.

Backward passes are analytic (embedding lookup, dense, sigmoid, masked
subtract/multiply) and support two reductions: summed gradients for training
and summed *squared* per-example gradients for importance estimation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics, nn, serialize
from .data import QMatrix, ResponseRecord, records_to_arrays

ARCHITECTURES = ("decoupled", "neuralcdm")


@dataclass(frozen=True)
class CDArchConfig:
    """Architecture hyperparameters; student/item/KC counts come from data."""

    arch: str = "decoupled"
    embed_dim: int = 32
    ffn_hidden: tuple[int, ...] = (64, 32)
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if any(int(h) < 1 for h in self.ffn_hidden):
            raise ValueError("ffn_hidden sizes must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        object.__setattr__(self, "ffn_hidden", tuple(int(h) for h in self.ffn_hidden))


def _init_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


class _FfnMixin:
    """Shared feed-forward forward/backward over ``self.dims``."""

    dims: tuple[int, ...]
    dropout: float

    def _ffn_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for l, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            shapes.append((f"ffn_W_{l}", (dout, din)))
            shapes.append((f"ffn_b_{l}", (dout,)))
        return shapes

    def _ffn_forward(self, params, x, train, rng):
        n_dense = len(self.dims) - 1
        inputs = [x]
        acts = []
        drops: list[np.ndarray | None] = []
        h = x
        for l in range(n_dense - 1):
            z = h @ params[f"ffn_W_{l}"].T + params[f"ffn_b_{l}"]
            a = nn.sigmoid(z)
            acts.append(a)
            if train and self.dropout > 0.0:
                if rng is None:
                    raise ValueError("training forward pass needs an rng for dropout")
                mask = (rng.random(a.shape) >= self.dropout) / (1.0 - self.dropout)
                drops.append(mask)
                h = a * mask
            else:
                drops.append(None)
                h = a
            inputs.append(h)
        l = n_dense - 1
        z_out = h @ params[f"ffn_W_{l}"].T + params[f"ffn_b_{l}"]
        p = nn.sigmoid(z_out[:, 0])
        return p, inputs, acts, drops

    def _ffn_backward(self, params, grads, inputs, acts, drops, dz, squared):
        """Backpropagate dz (B,) through the dense stack; returns dL/d(input)."""
        n_dense = len(self.dims) - 1
        delta = dz[:, None]
        for l in reversed(range(n_dense)):
            x = inputs[l]
            if squared:
                grads[f"ffn_W_{l}"] = np.square(delta).T @ np.square(x)
                grads[f"ffn_b_{l}"] = np.square(delta).sum(axis=0)
            else:
                grads[f"ffn_W_{l}"] = delta.T @ x
                grads[f"ffn_b_{l}"] = delta.sum(axis=0)
            dx = delta @ params[f"ffn_W_{l}"]
            if l > 0:
                if drops[l - 1] is not None:
                    dx = dx * drops[l - 1]
                a = acts[l - 1]
                delta = dx * a * (1.0 - a)
            else:
                return dx
        return dx  # unreachable: n_dense >= 1


class DecoupledWiring(_FfnMixin):
    """Forward/backward for the decoupled embedding architecture."""

    arch = "decoupled"

    def __init__(
        self,
        n_students: int,
        n_items: int,
        n_kcs: int,
        embed_dim: int,
        ffn_hidden: Sequence[int],
        dropout: float,
        qrows: np.ndarray,
    ):
        self.n_students = n_students
        self.n_items = n_items
        self.n_kcs = n_kcs
        self.embed_dim = embed_dim
        self.dims = (n_kcs, *ffn_hidden, 1)
        self.dropout = float(dropout)
        self.qrows = np.asarray(qrows, dtype=np.float64)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("student_emb", (self.n_students, self.embed_dim)),
            ("exercise_emb", (self.n_items, self.embed_dim)),
            ("kc_emb", (self.n_kcs, self.embed_dim)),
            ("prof_bias", (self.n_kcs,)),
            ("diff_bias", (self.n_kcs,)),
            *self._ffn_shapes(),
        ]

    def init_params(self, rng: np.random.Generator, seed: int) -> nn.ParamStore:
        arrays = {}
        for name, shape in self.layer_shapes():
            if name.endswith("bias") or name.startswith("ffn_b_"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = _init_uniform(rng, shape)
        return nn.ParamStore(arrays, rng_seed=seed)

    def post_step(self, params: nn.ParamStore) -> None:
        pass

    def _check_indices(self, students, items):
        if len(students) and (students.min() < 0 or students.max() >= self.n_students):
            raise IndexError("student id out of range")
        if len(items) and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError("item id out of range")

    def proficiency_from(self, params: nn.ParamStore, students: np.ndarray) -> np.ndarray:
        e_s = params["student_emb"][students]
        return nn.sigmoid(e_s @ params["kc_emb"].T + params["prof_bias"])

    def difficulty_from(self, params: nn.ParamStore, items: np.ndarray) -> np.ndarray:
        e_q = params["exercise_emb"][items]
        return nn.sigmoid(e_q @ params["kc_emb"].T + params["diff_bias"])

    def forward(self, params, students, items, train=False, rng=None):
        students = np.asarray(students, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self._check_indices(students, items)
        e_s = params["student_emb"][students]
        e_q = params["exercise_emb"][items]
        prof = self.proficiency_from(params, students)
        diff = self.difficulty_from(params, items)
        qmask = self.qrows[items]
        gap = (prof - diff) * qmask
        p, inputs, acts, drops = self._ffn_forward(params, gap, train, rng)
        cache = {
            "students": students,
            "items": items,
            "e_s": e_s,
            "e_q": e_q,
            "prof": prof,
            "diff": diff,
            "qmask": qmask,
            "inputs": inputs,
            "acts": acts,
            "drops": drops,
        }
        return p, cache

    def backward(self, params, cache, dz, mode="sum"):
        if mode not in ("sum", "sq_sum"):
            raise ValueError(f"unknown mode {mode!r}")
        squared = mode == "sq_sum"
        grads: dict[str, np.ndarray] = {}
        dgap = self._ffn_backward(
            params, grads, cache["inputs"], cache["acts"], cache["drops"], dz, squared
        )
        prof, diff, qmask = cache["prof"], cache["diff"], cache["qmask"]
        e_s, e_q = cache["e_s"], cache["e_q"]
        masked = dgap * qmask
        d_ap = masked * prof * (1.0 - prof)
        d_ad = -masked * diff * (1.0 - diff)
        kc = params["kc_emb"]
        d_rows_s = d_ap @ kc
        d_rows_q = d_ad @ kc
        g_student = np.zeros((self.n_students, self.embed_dim))
        g_exercise = np.zeros((self.n_items, self.embed_dim))
        if squared:
            grads["prof_bias"] = np.square(d_ap).sum(axis=0)
            grads["diff_bias"] = np.square(d_ad).sum(axis=0)
            # per-example kc gradient is d_ap[b,k]*e_s[b] + d_ad[b,k]*e_q[b]
            grads["kc_emb"] = (
                np.einsum("bk,bd->kd", np.square(d_ap), np.square(e_s))
                + 2.0 * np.einsum("bk,bd->kd", d_ap * d_ad, e_s * e_q)
                + np.einsum("bk,bd->kd", np.square(d_ad), np.square(e_q))
            )
            np.add.at(g_student, cache["students"], np.square(d_rows_s))
            np.add.at(g_exercise, cache["items"], np.square(d_rows_q))
        else:
            grads["prof_bias"] = d_ap.sum(axis=0)
            grads["diff_bias"] = d_ad.sum(axis=0)
            grads["kc_emb"] = d_ap.T @ e_s + d_ad.T @ e_q
            np.add.at(g_student, cache["students"], d_rows_s)
            np.add.at(g_exercise, cache["items"], d_rows_q)
        grads["student_emb"] = g_student
        grads["exercise_emb"] = g_exercise
        ordered = {name: grads[name] for name, _ in self.layer_shapes()}
        return nn.GradientBuffer(ordered)


class MonotonicCdmWiring(_FfnMixin):
    """Forward/backward for the mastery-table architecture with a monotonic FFN."""

    arch = "neuralcdm"

    def __init__(
        self,
        n_students: int,
        n_items: int,
        n_kcs: int,
        ffn_hidden: Sequence[int],
        dropout: float,
        qrows: np.ndarray,
    ):
        self.n_students = n_students
        self.n_items = n_items
        self.n_kcs = n_kcs
        self.dims = (n_kcs, *ffn_hidden, 1)
        self.dropout = float(dropout)
        self.qrows = np.asarray(qrows, dtype=np.float64)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("student_emb", (self.n_students, self.n_kcs)),
            ("diff_emb", (self.n_items, self.n_kcs)),
            ("disc_emb", (self.n_items, 1)),
            *self._ffn_shapes(),
        ]

    def init_params(self, rng: np.random.Generator, seed: int) -> nn.ParamStore:
        arrays = {}
        for name, shape in self.layer_shapes():
            if name.startswith("ffn_b_"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = _init_uniform(rng, shape)
        params = nn.ParamStore(arrays, rng_seed=seed)
        self.post_step(params)  # start inside the monotonic feasible set
        return params

    def post_step(self, params: nn.ParamStore) -> None:
        # Monotonicity: dense weights stay nonnegative.
        for l in range(len(self.dims) - 1):
            np.maximum(params[f"ffn_W_{l}"], 0.0, out=params[f"ffn_W_{l}"])

    def _check_indices(self, students, items):
        if len(students) and (students.min() < 0 or students.max() >= self.n_students):
            raise IndexError("student id out of range")
        if len(items) and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError("item id out of range")

    def proficiency_from(self, params: nn.ParamStore, students: np.ndarray) -> np.ndarray:
        return nn.sigmoid(params["student_emb"][students])

    def forward(self, params, students, items, train=False, rng=None):
        students = np.asarray(students, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self._check_indices(students, items)
        mastery = nn.sigmoid(params["student_emb"][students])
        difficulty = nn.sigmoid(params["diff_emb"][items])
        disc = nn.sigmoid(params["disc_emb"][items])
        qmask = self.qrows[items]
        x = qmask * (mastery - difficulty) * disc
        p, inputs, acts, drops = self._ffn_forward(params, x, train, rng)
        cache = {
            "students": students,
            "items": items,
            "mastery": mastery,
            "difficulty": difficulty,
            "disc": disc,
            "qmask": qmask,
            "inputs": inputs,
            "acts": acts,
            "drops": drops,
        }
        return p, cache

    def backward(self, params, cache, dz, mode="sum"):
        if mode not in ("sum", "sq_sum"):
            raise ValueError(f"unknown mode {mode!r}")
        squared = mode == "sq_sum"
        grads: dict[str, np.ndarray] = {}
        dx = self._ffn_backward(
            params, grads, cache["inputs"], cache["acts"], cache["drops"], dz, squared
        )
        mastery, difficulty = cache["mastery"], cache["difficulty"]
        disc, qmask = cache["disc"], cache["qmask"]
        d_mastery = dx * qmask * disc
        d_difficulty = -d_mastery
        d_disc = (dx * qmask * (mastery - difficulty)).sum(axis=1, keepdims=True)
        d_ms = d_mastery * mastery * (1.0 - mastery)
        d_md = d_difficulty * difficulty * (1.0 - difficulty)
        d_mc = d_disc * disc * (1.0 - disc)
        g_student = np.zeros((self.n_students, self.n_kcs))
        g_diff = np.zeros((self.n_items, self.n_kcs))
        g_disc = np.zeros((self.n_items, 1))
        student_rows = np.square(d_ms) if squared else d_ms
        diff_rows = np.square(d_md) if squared else d_md
        disc_rows = np.square(d_mc) if squared else d_mc
        np.add.at(g_student, cache["students"], student_rows)
        np.add.at(g_diff, cache["items"], diff_rows)
        np.add.at(g_disc, cache["items"], disc_rows)
        grads["student_emb"] = g_student
        grads["diff_emb"] = g_diff
        grads["disc_emb"] = g_disc
        ordered = {name: grads[name] for name, _ in self.layer_shapes()}
        return nn.GradientBuffer(ordered)


def build_wiring(config: CDArchConfig, n_students: int, n_items: int, qmatrix: QMatrix):
    if config.arch == "decoupled":
        return DecoupledWiring(
            n_students,
            n_items,
            qmatrix.n_kcs,
            config.embed_dim,
            config.ffn_hidden,
            config.dropout,
            qmatrix.entries,
        )
    return MonotonicCdmWiring(
        n_students,
        n_items,
        qmatrix.n_kcs,
        config.ffn_hidden,
        config.dropout,
        qmatrix.entries,
    )


def _monitor_score(probs: np.ndarray, labels: np.ndarray) -> float:
    """Validation AUC; falls back to negative mean loss when one class is absent."""
    if 0 < labels.sum() < len(labels):
        return metrics.auc(probs, labels)
    return -float(np.mean(nn.bce_loss(probs, labels)))


class CDModel:
    """Trainable cognitive-diagnosis model with a scikit-learn style surface.

    Hyperparameters are constructor arguments (``get_params``/``set_params``
    compatible); everything learned during :meth:`fit` lives in
    trailing-underscore attributes. A fitted model is immutable for prediction
    purposes and can be shared across threads; unlearning algorithms produce
    modified copies via :meth:`with_params`.
    """

    _PARAM_NAMES = (
        "arch",
        "embed_dim",
        "ffn_hidden",
        "dropout",
        "optimizer",
        "lr",
        "batch_size",
        "max_epochs",
        "patience",
        "min_delta",
        "seed",
    )

    def __init__(
        self,
        arch: str = "decoupled",
        embed_dim: int = 32,
        ffn_hidden: tuple[int, ...] = (64, 32),
        dropout: float = 0.2,
        optimizer: str = "adam",
        lr: float = 0.002,
        batch_size: int = 256,
        max_epochs: int = 100,
        patience: int = 5,
        min_delta: float = 0.0,
        seed: int = 0,
    ):
        self.arch = arch
        self.embed_dim = embed_dim
        self.ffn_hidden = tuple(ffn_hidden)
        self.dropout = dropout
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.seed = seed

    # -- scikit-learn style plumbing ------------------------------------
    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **updates) -> "CDModel":
        for key, value in updates.items():
            if key not in self._PARAM_NAMES:
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def arch_config(self) -> CDArchConfig:
        return CDArchConfig(
            arch=self.arch,
            embed_dim=self.embed_dim,
            ffn_hidden=self.ffn_hidden,
            dropout=self.dropout,
        )

    def train_config(self) -> nn.TrainConfig:
        return nn.TrainConfig(
            optimizer=self.optimizer,
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
        )

    @property
    def is_fitted(self) -> bool:
        return hasattr(self, "params_")

    def _require_fitted(self) -> None:
        if not self.is_fitted:
            raise RuntimeError("model is not fitted")

    # -- training --------------------------------------------------------
    def fit(
        self,
        records: Sequence[ResponseRecord],
        qmatrix: QMatrix,
        valid_records: Sequence[ResponseRecord] | None = None,
        n_students: int | None = None,
        n_items: int | None = None,
    ) -> "CDModel":
        """Fit on ``records``; early-stop on AUC over ``valid_records``.

        When ``valid_records`` is None the training set itself is monitored.
        ``n_students``/``n_items`` size the embedding tables; by default they
        are inferred from the largest id seen, but callers holding out students
        for later evaluation should pass the full dataset counts explicitly.
        """
        if len(records) == 0:
            raise ValueError("training set is empty")
        arch_cfg = self.arch_config()  # validates architecture hyperparameters
        s, q, y = records_to_arrays(records)
        if valid_records is not None and len(valid_records) > 0:
            monitor = records_to_arrays(valid_records)
        else:
            monitor = (s, q, y)
        inferred_students = int(max(s.max(), monitor[0].max())) + 1
        inferred_items = int(max(q.max(), monitor[1].max())) + 1
        self.n_students_ = int(n_students) if n_students is not None else inferred_students
        self.n_items_ = int(n_items) if n_items is not None else qmatrix.n_items
        self.n_kcs_ = qmatrix.n_kcs
        if inferred_students > self.n_students_:
            raise ValueError("record student id exceeds n_students")
        if inferred_items > self.n_items_ or self.n_items_ != qmatrix.n_items:
            raise ValueError("item ids must index rows of the Q-matrix")
        self.qmatrix_ = qmatrix
        self.wiring_ = build_wiring(arch_cfg, self.n_students_, self.n_items_, qmatrix)
        params, result = nn.fit_params(
            self.wiring_, (s, q, y), monitor, self.train_config(), self.seed, _monitor_score
        )
        self.params_ = params
        self.fit_seconds_ = result.wall_seconds
        self.epochs_run_ = result.epochs_run
        self.best_epoch_ = result.best_epoch
        self.monitor_value_ = result.monitor_value
        return self

    # -- inference -------------------------------------------------------
    def _as_arrays(self, records) -> tuple[np.ndarray, np.ndarray]:
        pair = (
            isinstance(records, tuple)
            and len(records) == 2
            and not isinstance(records[0], ResponseRecord)
        )
        if pair:
            return (
                np.asarray(records[0], dtype=np.int64),
                np.asarray(records[1], dtype=np.int64),
            )
        s, q, _ = records_to_arrays(records)
        return s, q

    def predict_proba(self, records) -> np.ndarray:
        """Correct-response probabilities for records or an (students, items) pair."""
        self._require_fitted()
        s, q = self._as_arrays(records)
        return nn._predict_all(self.wiring_, self.params_, (s, q, None))

    def predict(self, student_id: int, item_id: int) -> float:
        self._require_fitted()
        p, _ = self.wiring_.forward(
            self.params_, np.asarray([student_id]), np.asarray([item_id]), train=False
        )
        return float(p[0])

    def proficiency(self, student_id: int) -> np.ndarray:
        """The student's per-KC proficiency vector, each entry in (0, 1)."""
        self._require_fitted()
        if not (0 <= student_id < self.n_students_):
            raise IndexError(f"student id {student_id} out of range")
        return self.wiring_.proficiency_from(
            self.params_, np.asarray([student_id], dtype=np.int64)
        )[0]

    def mean_loss(self, records: Sequence[ResponseRecord]) -> float:
        """Mean binary cross-entropy over the given records, dropout disabled."""
        self._require_fitted()
        s, q, y = records_to_arrays(records)
        probs = self.predict_proba((s, q))
        return float(np.mean(nn.bce_loss(probs, y)))

    # -- copies and persistence -------------------------------------------
    def with_params(self, params: nn.ParamStore) -> "CDModel":
        """A fitted copy of this model using ``params`` (shapes must match)."""
        self._require_fitted()
        self.params_.require_congruent(params)
        clone = CDModel(**self.get_params())
        for attr in ("n_students_", "n_items_", "n_kcs_", "qmatrix_", "wiring_"):
            setattr(clone, attr, getattr(self, attr))
        for attr in ("fit_seconds_", "epochs_run_", "best_epoch_", "monitor_value_"):
            if hasattr(self, attr):
                setattr(clone, attr, getattr(self, attr))
        clone.params_ = params
        return clone

    def copy(self) -> "CDModel":
        self._require_fitted()
        return self.with_params(self.params_.copy())

    def save(self, path: str) -> None:
        """Write a checkpoint; round trip is bit-exact (see ``serialize``)."""
        self._require_fitted()
        arrays = {name: arr for name, arr in self.params_.items()}
        arrays["qmatrix"] = self.qmatrix_.entries
        hyper = self.get_params()
        hyper["ffn_hidden"] = list(hyper["ffn_hidden"])
        meta = {
            "kind": "cd_model",
            "arch": self.arch,
            "hyperparameters": hyper,
            "layer_ids": list(self.params_.layer_ids),
            "rng_seed": self.params_.rng_seed,
            "n_students": self.n_students_,
            "n_items": self.n_items_,
            "n_kcs": self.n_kcs_,
        }
        serialize.save_bundle(path, arrays, meta)

    @classmethod
    def load(cls, path: str) -> "CDModel":
        arrays, meta = serialize.load_bundle(path)
        if meta.get("kind") != "cd_model":
            raise serialize.ContainerError(f"{path} is not a model checkpoint")
        hyper = dict(meta["hyperparameters"])
        hyper["ffn_hidden"] = tuple(hyper["ffn_hidden"])
        model = cls(**hyper)
        qmatrix = QMatrix(arrays.pop("qmatrix"))
        model.n_students_ = int(meta["n_students"])
        model.n_items_ = int(meta["n_items"])
        model.n_kcs_ = int(meta["n_kcs"])
        model.qmatrix_ = qmatrix
        model.wiring_ = build_wiring(
            model.arch_config(), model.n_students_, model.n_items_, qmatrix
        )
        ordered = {name: arrays[name] for name in meta["layer_ids"]}
        model.params_ = nn.ParamStore(ordered, rng_seed=int(meta["rng_seed"]))
        return model


def train(
    arch_config: CDArchConfig,
    train_records: Sequence[ResponseRecord],
    valid_records: Sequence[ResponseRecord] | None,
    qmatrix: QMatrix,
    train_config: nn.TrainConfig | None = None,
    seed: int = 0,
    n_students: int | None = None,
    n_items: int | None = None,
) -> tuple[CDModel, float]:
    """Train a model and return it with the wall-clock seconds spent fitting."""
    tc = train_config or nn.TrainConfig()
    model = CDModel(
        arch=arch_config.arch,
        embed_dim=arch_config.embed_dim,
        ffn_hidden=arch_config.ffn_hidden,
        dropout=arch_config.dropout,
        optimizer=tc.optimizer,
        lr=tc.lr,
        batch_size=tc.batch_size,
        max_epochs=tc.max_epochs,
        patience=tc.patience,
        min_delta=tc.min_delta,
        seed=seed,
    )
    model.fit(train_records, qmatrix, valid_records, n_students=n_students, n_items=n_items)
    return model, model.fit_seconds_
