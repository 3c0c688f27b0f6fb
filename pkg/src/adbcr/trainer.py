"""Adversarial training loop: factual step, head-adversary step, representation step.

Per batch the loop runs step_A (all parameters follow the factual loss),
step_B (heads follow factual loss minus the weighted distance, shared
representation frozen), step_C repeated k times (shared representation
follows the distance, heads frozen), and a trailing step_A. The a_tarnet
mode runs only the leading step_A. Each phase owns its own Adam instance,
so freezes hold structurally: a phase's optimizer never sees the frozen
tensors.

After every epoch the validation criterion (factual loss plus distance for
adbcr/uadbcr, factual loss alone for a_tarnet) is evaluated on the full
validation split in eval mode; the best epoch's parameters are returned
and training stops once `patience` consecutive epochs fail to improve the
criterion by more than 1e-12.

Outcomes are standardized from the training split inside train(); the
scalers are stored on the model, so predictions come back on the original
scale. Covariates are standardized the same way.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff, objectives
from .autodiff import Adam, Tape, grads_for
from .data import TRAIN, VAL, Dataset
from .errors import ConfigError, DatasetError, TrainingError
from .model import AdbcrModel, Scalers, canonical_fingerprint
from .objectives import BatchView, build_losses
from .seeding import generator

MODES = ("adbcr", "uadbcr", "a_tarnet", "danncr")

# Patience threshold: an epoch improves only if the criterion drops by more.
IMPROVEMENT_EPS = 1e-12


@dataclass
class TrainConfig:
    """One training run's hyper-parameters.

    adversary_weight weighs the distance inside step_B (and doubles as the
    gradient-reversal coefficient in danncr mode). imbalance_weight weighs
    the distance term of the validation criterion; 1.0 is the plain sum.
    trailing_step_a toggles the second factual step closing each batch.
    """

    shared_layers: tuple[int, ...] = (50, 50)
    head_layers: tuple[int, ...] = (50, 50)
    dropout_p: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 100
    learning_rate: float = 1e-3
    k: int = 1
    adversary_weight: float = 1.0
    patience: int = 100
    max_epochs: int = 1000
    seed: int = 0
    mode: str = "adbcr"
    metric: str = "l1"
    trailing_step_a: bool = True
    imbalance_weight: float = 1.0

    def __post_init__(self):
        self.shared_layers = tuple(int(s) for s in self.shared_layers)
        self.head_layers = tuple(int(s) for s in self.head_layers)
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.metric not in objectives.METRICS:
            raise ConfigError(f"metric must be one of {objectives.METRICS}, got {self.metric!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shared_layers"] = list(self.shared_layers)
        d["head_layers"] = list(self.head_layers)
        return d

    def fingerprint(self) -> str:
        return canonical_fingerprint(self.to_dict())


@dataclass
class EpochRecord:
    """Validation quantities of one epoch; distance is None in a_tarnet mode."""

    epoch: int
    factual: float
    distance: float | None
    criterion: float


@dataclass
class TrainResult:
    """Best model of a run plus the full per-epoch validation history."""

    model: AdbcrModel
    best_value: float
    best_epoch: int
    history: list[EpochRecord]
    config: TrainConfig

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def make_batches(view: BatchView, batch_size: int, rng: np.random.Generator) -> list[BatchView]:
    """Shuffled stratified partition of an epoch view into batches.

    Every batch gets at least one row from each arm; with fewer rows in an
    arm than ceil(n / batch_size) the epoch simply has fewer batches. Any
    unlabeled rows are shuffled and split proportionally across the batches.
    An empty unlabeled pool consumes no randomness at all.
    """
    treated = np.flatnonzero(view.t == 1)
    control = np.flatnonzero(view.t == 0)
    if treated.size < 2 or control.size < 2:
        raise DatasetError(
            f"training needs at least 2 rows per treatment, got {treated.size} treated "
            f"and {control.size} control")
    n = view.x.shape[0]
    n_batches = min(math.ceil(n / batch_size), treated.size, control.size)
    chunks_t = np.array_split(rng.permutation(treated), n_batches)
    chunks_c = np.array_split(rng.permutation(control), n_batches)
    if view.n_unlabeled > 0:
        chunks_u = np.array_split(rng.permutation(view.n_unlabeled), n_batches)
    else:
        chunks_u = [None] * n_batches
    batches = []
    for ct, cc, cu in zip(chunks_t, chunks_c, chunks_u):
        rows = np.concatenate([ct, cc])
        batches.append(BatchView(
            x=view.x[rows],
            t=view.t[rows],
            y=view.y[rows],
            unlabeled_x=None if cu is None or cu.size == 0 else view.unlabeled_x[cu],
            rows=None if view.rows is None else view.rows[rows],
        ))
    return batches


def _finite_scalar(value, what: str) -> float:
    v = float(value.data[0, 0])
    if not np.isfinite(v):
        raise TrainingError(f"non-finite {what}")
    return v


def step_A(model: AdbcrModel, batch: BatchView, opt: Adam,
           rng: np.random.Generator) -> float:
    """One Adam step of every parameter on the factual loss."""
    tape = Tape()
    loss, _ = build_losses(model, batch, tape, training=True, rng=rng,
                           need_distance=False)
    value = _finite_scalar(loss, "factual loss in step_A")
    tape.backward(loss)
    opt.step(grads_for(tape, opt.names()))
    return value


def step_B(model: AdbcrModel, batch: BatchView, opt: Adam, adversary_weight: float,
           rng: np.random.Generator, metric: str = "l1") -> float:
    """One Adam step of the head parameters on factual loss minus weighted distance.

    The shared representation is untouched: the optimizer owns head
    parameters only. With adversary_weight 0 the distance graph is skipped
    outright, which makes the step identical to step_A restricted to heads.
    """
    tape = Tape()
    if adversary_weight == 0.0:
        objective, _ = build_losses(model, batch, tape, training=True, rng=rng,
                                    need_distance=False)
    else:
        loss, dist = build_losses(model, batch, tape, training=True, rng=rng,
                                  metric=metric)
        _finite_scalar(dist, "distance in step_B")
        objective = autodiff.sub(tape, loss, autodiff.scale(tape, dist, adversary_weight))
    value = _finite_scalar(objective, "objective in step_B")
    tape.backward(objective)
    opt.step(grads_for(tape, opt.names()))
    return value


def step_C(model: AdbcrModel, batch: BatchView, opt: Adam, k: int,
           rng: np.random.Generator, metric: str = "l1") -> float:
    """k successive Adam steps of the shared representation on the distance.

    Head parameters are untouched: the optimizer owns Phi parameters only.
    Each inner step rebuilds the graph on the updated representation.
    """
    value = math.nan
    for _ in range(k):
        tape = Tape()
        _, dist = build_losses(model, batch, tape, training=True, rng=rng,
                               need_factual=False, metric=metric)
        value = _finite_scalar(dist, "distance in step_C")
        tape.backward(dist)
        opt.step(grads_for(tape, opt.names()))
    return value


def labeled_view(dataset: Dataset, split: int, scalers: Scalers,
                 unlabeled_x: np.ndarray | None = None) -> BatchView:
    """Standardized BatchView of a split's labeled rows."""
    rows = dataset.labeled_indices(split)
    return BatchView(
        x=scalers.standardize_x(dataset.x[rows]),
        t=dataset.t[rows],
        y=scalers.standardize_y(dataset.y_factual[rows]),
        unlabeled_x=unlabeled_x,
        rows=rows,
    )


def _validate_split_arms(dataset: Dataset) -> None:
    if dataset.split is None:
        raise DatasetError("dataset has no split assignment; call split() first")
    for split, name in ((TRAIN, "train"), (VAL, "validation")):
        rows = dataset.labeled_indices(split)
        t = dataset.t[rows]
        if (t == 1).sum() == 0 or (t == 0).sum() == 0:
            raise DatasetError(f"{name} split lacks a treatment arm")


def evaluate_validation(model: AdbcrModel, val_view: BatchView, config: TrainConfig) -> EpochRecord:
    """Eval-mode validation quantities for one epoch, full split, one pass."""
    tape = Tape()
    if config.mode == "a_tarnet":
        loss, _ = build_losses(model, val_view, tape, need_distance=False)
        factual = float(loss.data[0, 0])
        record = EpochRecord(0, factual, None, factual)
    else:
        loss, dist = build_losses(model, val_view, tape, metric=config.metric)
        factual = float(loss.data[0, 0])
        distance = float(dist.data[0, 0])
        record = EpochRecord(0, factual, distance,
                             factual + config.imbalance_weight * distance)
    if not np.isfinite(record.criterion):
        raise TrainingError("non-finite validation criterion")
    return record


class HistoryWriter:
    """Tab-separated per-epoch log; the distance column is omitted when absent."""

    def __init__(self, path: str | None, with_distance: bool):
        self._file = open(path, "w", encoding="utf-8") if path else None
        self._with_distance = with_distance
        if self._file:
            cols = ["epoch", "factual", "distance", "criterion"] if with_distance \
                else ["epoch", "factual", "criterion"]
            self._file.write("\t".join(cols) + "\n")

    def write(self, record: EpochRecord) -> None:
        if not self._file:
            return
        fields = [str(record.epoch), format(record.factual, ".17g")]
        if self._with_distance:
            fields.append(format(record.distance, ".17g"))
        fields.append(format(record.criterion, ".17g"))
        self._file.write("\t".join(fields) + "\n")
        self._file.flush()

    def close(self) -> None:
        if self._file:
            self._file.close()


def train(dataset: Dataset, config: TrainConfig,
          history_path: str | None = None) -> TrainResult:
    """Run the full loop and return the best epoch's model and the history."""
    if config.mode == "danncr":
        raise ConfigError("danncr training lives in baselines.danncr_train")
    _validate_split_arms(dataset)
    train_rows = dataset.labeled_indices(TRAIN)
    scalers = Scalers.fit(dataset.x[train_rows], dataset.y_factual[train_rows])

    unlabeled = None
    if config.mode == "uadbcr":
        pool = dataset.unlabeled_rows()
        if pool.size > 0:
            unlabeled = scalers.standardize_x(dataset.x[pool])
    train_view = labeled_view(dataset, TRAIN, scalers, unlabeled)
    val_view = labeled_view(dataset, VAL, scalers)

    model = AdbcrModel(dataset.x.shape[1], config.shared_layers, config.head_layers,
                       config.dropout_p, config.seed)
    model.scalers = scalers
    rng_batch = generator(config.seed, "batching")
    rng_drop = generator(config.seed, "dropout")

    opt_a = Adam(model.params.subset("phi.", "head."), config.learning_rate,
                 config.weight_decay)
    adversarial = config.mode in ("adbcr", "uadbcr")
    if adversarial:
        opt_b = Adam(model.params.subset("head."), config.learning_rate,
                     config.weight_decay)
        opt_c = Adam(model.params.subset("phi."), config.learning_rate,
                     config.weight_decay)

    history: list[EpochRecord] = []
    writer = HistoryWriter(history_path, with_distance=adversarial)
    best_value = math.inf
    best_epoch = 0
    best_params = None
    streak = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            for batch in make_batches(train_view, config.batch_size, rng_batch):
                step_A(model, batch, opt_a, rng_drop)
                if adversarial:
                    step_B(model, batch, opt_b, config.adversary_weight, rng_drop,
                           config.metric)
                    step_C(model, batch, opt_c, config.k, rng_drop, config.metric)
                    if config.trailing_step_a:
                        step_A(model, batch, opt_a, rng_drop)
            record = evaluate_validation(model, val_view, config)
            record.epoch = epoch
            history.append(record)
            writer.write(record)
            improved = record.criterion < best_value - IMPROVEMENT_EPS
            if record.criterion < best_value:
                best_value = record.criterion
                best_epoch = epoch
                best_params = model.params.snapshot()
            streak = 0 if improved else streak + 1
            if streak >= config.patience:
                break
    finally:
        writer.close()
    model.params.restore(best_params)
    return TrainResult(model, best_value, best_epoch, history, config)
