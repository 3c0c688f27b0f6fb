"""Comparison estimators: S-Lasso, T-Lasso, and the DANNCR contrast model.

The Lasso solver is cyclic coordinate descent with soft thresholding on
internally standardized covariates, minimizing

    (1/2n) * ||y - Xw - b||^2 + alpha * ||w||_1

with an unpenalized intercept; the penalty applies on the standardized
scale and the returned weights are mapped back to the input scale. The
a_tarnet ablation is a trainer mode, not a class here.

DANNCR keeps the shared representation but pairs one outcome head per
treatment with a two-logit domain discriminator; per batch it takes one
prediction step (representation and heads on factual MSE), one
discriminator step (cross entropy on the discriminator alone), and one
confusion step (representation against the discriminator via a negated
gradient). Selection uses factual validation MSE.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Adam, ParamSet, Tape, grads_for
from .data import TRAIN, VAL, Dataset
from .errors import ConfigError, DatasetError, DimensionError, TrainingError
from .model import (Scalers, _scalers_to_header, canonical_fingerprint, dense_forward,
                    init_dense, register_checkpoint_kind, scalers_from_header,
                    write_checkpoint)
from .objectives import BatchView
from .seeding import generator
from .trainer import (EpochRecord, HistoryWriter, TrainConfig, TrainResult,
                      labeled_view, make_batches, _finite_scalar,
                      _validate_split_arms)

DEFAULT_ALPHA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
LASSO_TOL = 1e-7
LASSO_MAX_SWEEPS = 10_000


def soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def coordinate_descent(z: np.ndarray, y_centered: np.ndarray, alpha: float,
                       max_sweeps: int = LASSO_MAX_SWEEPS,
                       tol: float = LASSO_TOL) -> tuple[np.ndarray, int]:
    """Cyclic soft-threshold sweeps from w = 0 on centered, scaled columns.

    Returns the weights and the number of sweeps run. Converged when the
    largest coordinate change in a sweep drops below tol. Zero columns
    keep weight 0.
    """
    n, d = z.shape
    norms = (z * z).sum(axis=0) / n
    w = np.zeros(d)
    residual = y_centered.copy()
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in range(d):
            if norms[j] == 0.0:
                continue
            old = w[j]
            rho = z[:, j] @ residual / n + norms[j] * old
            new = soft_threshold(rho, alpha) / norms[j]
            if new != old:
                residual += z[:, j] * (old - new)
                w[j] = new
                max_change = max(max_change, abs(new - old))
        if max_change < tol:
            break
    return w, sweeps


def lasso_fit(x: np.ndarray, y: np.ndarray, alpha: float,
              max_sweeps: int = LASSO_MAX_SWEEPS,
              tol: float = LASSO_TOL) -> tuple[np.ndarray, float]:
    """Input-scale weights and intercept of the standardized-penalty Lasso."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DimensionError(f"lasso_fit got x {x.shape} and y {y.shape}")
    if x.shape[0] < 2:
        raise DatasetError(f"lasso_fit needs at least 2 rows, got {x.shape[0]}")
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    scale = np.where(sd == 0.0, 1.0, sd)
    z = (x - mean) / scale
    z[:, sd == 0.0] = 0.0
    y_mean = y.mean()
    w_std, _ = coordinate_descent(z, y - y_mean, alpha, max_sweeps, tol)
    w = w_std / scale
    w[sd == 0.0] = 0.0
    intercept = y_mean - float(w @ mean)
    return w, intercept


def lasso_objective(x: np.ndarray, y: np.ndarray, w: np.ndarray, intercept: float,
                    alpha: float) -> float:
    """The solver's objective for input-scale weights (penalty on the standardized scale)."""
    sd = x.std(axis=0)
    residual = y - x @ w - intercept
    return float(0.5 * np.mean(residual * residual) + alpha * np.sum(np.abs(w * sd)))


@dataclass
class LassoModel:
    """Fitted Lasso in either the single-learner or per-treatment variant.

    single: one model on [x, t]; weights has d + 1 entries with the
    treatment coefficient last, so the estimated effect is constant.
    per_treatment: an independent model per arm.
    """

    variant: str
    alpha: float
    input_dim: int
    weights: np.ndarray | None = None
    intercept: float = 0.0
    weights0: np.ndarray | None = None
    intercept0: float = 0.0
    weights1: np.ndarray | None = None
    intercept1: float = 0.0

    kind = "lasso"

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected covariates with {self.input_dim} columns, got shape {x.shape}")
        return x

    def predict_potential_outcomes(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self._check(x)
        if self.variant == "single":
            y0 = x @ self.weights[:-1] + self.intercept
            return y0, y0 + self.weights[-1]
        return (x @ self.weights0 + self.intercept0,
                x @ self.weights1 + self.intercept1)

    def save(self, path: str, *, config: dict | None = None,
             data_seed: int | None = None,
             split_fractions: tuple[float, float, float] | None = None) -> None:
        arch = {"variant": self.variant, "alpha": self.alpha, "input_dim": self.input_dim}
        if self.variant == "single":
            arrays = {"w": self.weights.reshape(-1, 1),
                      "b": np.array([[self.intercept]])}
        else:
            arrays = {"w0": self.weights0.reshape(-1, 1),
                      "b0": np.array([[self.intercept0]]),
                      "w1": self.weights1.reshape(-1, 1),
                      "b1": np.array([[self.intercept1]])}
        extra = {
            "config": config,
            "fingerprint": canonical_fingerprint(config) if config is not None else None,
            "validation_criterion": None,
            "data_seed": data_seed,
            "split_fractions": list(split_fractions) if split_fractions else None,
        }
        write_checkpoint(path, self.kind, arch, arrays, extra)


def _load_lasso(arch: dict, arrays: dict[str, np.ndarray], header: dict) -> LassoModel:
    model = LassoModel(arch["variant"], float(arch["alpha"]), int(arch["input_dim"]))
    if model.variant == "single":
        model.weights = arrays["w"][:, 0]
        model.intercept = float(arrays["b"][0, 0])
    else:
        model.weights0 = arrays["w0"][:, 0]
        model.intercept0 = float(arrays["b0"][0, 0])
        model.weights1 = arrays["w1"][:, 0]
        model.intercept1 = float(arrays["b1"][0, 0])
    return model


register_checkpoint_kind("lasso", _load_lasso)


def lasso_cate(model: LassoModel, x: np.ndarray) -> np.ndarray:
    """Estimated effect per row: constant for single, model difference otherwise."""
    if model.variant == "single":
        x = model._check(x)
        return np.full(x.shape[0], model.weights[-1])
    y0, y1 = model.predict_potential_outcomes(x)
    return y1 - y0


def _stratified_folds(t: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold labels spreading each arm round-robin over the folds."""
    assignment = np.empty(t.size, dtype=np.int64)
    for arm in (1, 0):
        rows = rng.permutation(np.flatnonzero(t == arm))
        assignment[rows] = np.arange(rows.size) % folds
    return assignment


def select_alpha(x: np.ndarray, t: np.ndarray, y: np.ndarray, variant: str,
                 grid=DEFAULT_ALPHA_GRID, seed: int = 0, folds: int = 5) -> float:
    """Treatment-stratified cross-validated factual-MSE minimizer over the grid.

    Ties take the last grid entry, so with the ascending default grid the
    strongest of the tied shrinkage levels wins.
    """
    if len(grid) == 0:
        raise ConfigError("alpha grid is empty")
    if len(grid) == 1:
        return float(grid[0])
    rng = generator(seed, "lasso-cv")
    fold_of = _stratified_folds(t, folds, rng)
    errors = np.zeros(len(grid))
    counts = np.zeros(len(grid))
    for fold in range(folds):
        hold = fold_of == fold
        if not hold.any() or hold.all():
            continue
        for gi, alpha in enumerate(grid):
            pred = np.empty(hold.sum())
            if variant == "single":
                design = np.column_stack([x[~hold], t[~hold]])
                w, b = lasso_fit(design, y[~hold], alpha)
                pred = np.column_stack([x[hold], t[hold]]) @ w + b
            else:
                for arm in (0, 1):
                    train_rows = ~hold & (t == arm)
                    w, b = lasso_fit(x[train_rows], y[train_rows], alpha)
                    arm_rows = t[hold] == arm
                    pred[arm_rows] = x[hold][arm_rows] @ w + b
            errors[gi] += float(np.mean((pred - y[hold]) ** 2))
            counts[gi] += 1
    if counts[0] == 0:
        raise DatasetError("cross validation produced no usable folds")
    means = errors / counts
    return float(grid[len(grid) - 1 - int(np.argmin(means[::-1]))])


def fit_lasso(x: np.ndarray, t: np.ndarray, y: np.ndarray, variant: str,
              grid=DEFAULT_ALPHA_GRID, seed: int = 0,
              alpha: float | None = None) -> LassoModel:
    """Fit either variant, cross-validating alpha unless one is given."""
    if variant not in ("single", "per_treatment"):
        raise ConfigError(f"variant must be 'single' or 'per_treatment', got {variant!r}")
    if alpha is None:
        alpha = select_alpha(x, t, y, variant, grid, seed)
    model = LassoModel(variant, float(alpha), x.shape[1])
    if variant == "single":
        design = np.column_stack([x, t])
        model.weights, model.intercept = lasso_fit(design, y, alpha)
    else:
        for arm in (0, 1):
            rows = t == arm
            w, b = lasso_fit(x[rows], y[rows], alpha)
            if arm == 0:
                model.weights0, model.intercept0 = w, b
            else:
                model.weights1, model.intercept1 = w, b
    return model


def fit_lasso_on_dataset(dataset: Dataset, variant: str,
                         grid=DEFAULT_ALPHA_GRID, seed: int = 0) -> LassoModel:
    """Fit on the labeled train and validation rows together."""
    rows = np.concatenate([dataset.labeled_indices(TRAIN), dataset.labeled_indices(VAL)])
    return fit_lasso(dataset.x[rows], dataset.t[rows], dataset.y_factual[rows],
                     variant, grid, seed)


class DanncrModel:
    """Shared representation, one outcome head per treatment, domain discriminator."""

    kind = "danncr"

    def __init__(self, input_dim: int, shared_layers, head_layers,
                 dropout_p: float, seed: int):
        if input_dim < 1:
            raise ConfigError(f"input_dim must be at least 1, got {input_dim}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {dropout_p}")
        self.input_dim = int(input_dim)
        self.shared_layers = tuple(int(s) for s in shared_layers)
        self.head_layers = tuple(int(s) for s in head_layers)
        if not self.shared_layers or not self.head_layers:
            raise ConfigError("layer lists must be nonempty")
        if any(s < 1 for s in self.shared_layers + self.head_layers):
            raise ConfigError("zero-width layer")
        self.dropout_p = float(dropout_p)
        self.seed = int(seed)
        self.scalers = Scalers.identity(self.input_dim)
        self.params = ParamSet()
        init_dense(self.params, "phi", [self.input_dim, *self.shared_layers],
                   generator(seed, "init", "phi"))
        head_sizes = [self.shared_layers[-1], *self.head_layers, 1]
        for t in (0, 1):
            init_dense(self.params, f"head.{t}", head_sizes,
                       generator(seed, "init", f"head.{t}"))
        disc_sizes = [self.shared_layers[-1], *self.head_layers, 2]
        init_dense(self.params, "disc", disc_sizes, generator(seed, "init", "disc"))

    def phi_forward(self, tape: Tape, x, training: bool = False, rng=None):
        return dense_forward(tape, self.params, "phi", len(self.shared_layers), x,
                             self.dropout_p, training, rng, final_plain=False)

    def head_forward_graph(self, tape: Tape, t: int, h, training: bool = False, rng=None):
        return dense_forward(tape, self.params, f"head.{t}", len(self.head_layers) + 1,
                             h, self.dropout_p, training, rng, final_plain=True)

    def disc_forward_graph(self, tape: Tape, h, training: bool = False, rng=None):
        return dense_forward(tape, self.params, "disc", len(self.head_layers) + 1,
                             h, self.dropout_p, training, rng, final_plain=True)

    def predict_potential_outcomes(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected covariates with {self.input_dim} columns, got shape {x.shape}")
        tape = Tape()
        h = self.phi_forward(tape, tape.constant(self.scalers.standardize_x(x)))
        y = [self.scalers.destandardize_y(
            self.head_forward_graph(tape, t, h).data[:, 0]) for t in (0, 1)]
        return y[0], y[1]

    def save(self, path: str, *, config: dict | None = None,
             validation_criterion: float | None = None,
             data_seed: int | None = None,
             split_fractions: tuple[float, float, float] | None = None) -> None:
        arch = {
            "input_dim": self.input_dim,
            "shared_layers": list(self.shared_layers),
            "head_layers": list(self.head_layers),
            "dropout_p": self.dropout_p,
            "seed": self.seed,
        }
        extra = {
            "scalers": _scalers_to_header(self.scalers),
            "config": config,
            "fingerprint": canonical_fingerprint(config) if config is not None else None,
            "validation_criterion": validation_criterion,
            "data_seed": data_seed,
            "split_fractions": list(split_fractions) if split_fractions else None,
        }
        write_checkpoint(path, self.kind, arch, dict(self.params.items()), extra)


def _load_danncr(arch: dict, arrays: dict[str, np.ndarray], header: dict) -> DanncrModel:
    model = DanncrModel(arch["input_dim"], arch["shared_layers"], arch["head_layers"],
                        arch["dropout_p"], arch["seed"])
    model.params.restore(arrays)
    model.scalers = scalers_from_header(header["scalers"])
    return model


register_checkpoint_kind("danncr", _load_danncr)


def _danncr_factual_graph(model: DanncrModel, batch: BatchView, tape: Tape,
                          training: bool, rng) -> autodiff.Tensor:
    h = model.phi_forward(tape, tape.constant(batch.x), training, rng)
    loss = None
    for t in (0, 1):
        rows = np.flatnonzero(batch.t == t)
        if rows.size == 0:
            raise DatasetError(f"batch lacks treatment {t}")
        out = model.head_forward_graph(tape, t, h, training, rng)
        pred = autodiff.take_rows(tape, out, rows)
        target = tape.constant(batch.y[rows].reshape(-1, 1))
        term = autodiff.mse_loss(tape, pred, target)
        loss = term if loss is None else autodiff.add(tape, loss, term)
    return loss


def _danncr_ce_graph(model: DanncrModel, batch: BatchView, tape: Tape,
                     training: bool, rng) -> autodiff.Tensor:
    h = model.phi_forward(tape, tape.constant(batch.x), training, rng)
    logits = model.disc_forward_graph(tape, h, training, rng)
    return autodiff.softmax_cross_entropy(tape, logits, batch.t)


def danncr_step_predict(model: DanncrModel, batch: BatchView, opt: Adam, rng) -> float:
    """Representation and outcome heads follow the factual MSE."""
    tape = Tape()
    loss = _danncr_factual_graph(model, batch, tape, True, rng)
    value = _finite_scalar(loss, "factual loss in the danncr prediction step")
    tape.backward(loss)
    opt.step(grads_for(tape, opt.names()))
    return value


def danncr_step_discriminate(model: DanncrModel, batch: BatchView, opt: Adam, rng) -> float:
    """Discriminator alone follows the treatment cross entropy."""
    tape = Tape()
    ce = _danncr_ce_graph(model, batch, tape, True, rng)
    value = _finite_scalar(ce, "cross entropy in the danncr discriminator step")
    tape.backward(ce)
    opt.step(grads_for(tape, opt.names()))
    return value


def danncr_step_confuse(model: DanncrModel, batch: BatchView, opt: Adam,
                        reversal_weight: float, rng) -> float:
    """Representation climbs the discriminator's loss (negated-gradient flow)."""
    tape = Tape()
    ce = _danncr_ce_graph(model, batch, tape, True, rng)
    value = _finite_scalar(ce, "cross entropy in the danncr confusion step")
    objective = autodiff.scale(tape, ce, -reversal_weight)
    tape.backward(objective)
    opt.step(grads_for(tape, opt.names()))
    return value


def danncr_validation(model: DanncrModel, val_view: BatchView) -> tuple[float, float]:
    """Eval-mode factual MSE and discriminator cross entropy on the full split."""
    tape = Tape()
    loss = _danncr_factual_graph(model, val_view, tape, False, None)
    ce = _danncr_ce_graph(model, val_view, tape, False, None)
    return float(loss.data[0, 0]), float(ce.data[0, 0])


def danncr_train(dataset: Dataset, config: TrainConfig,
                 history_path: str | None = None) -> TrainResult:
    """Three-phase loop; early stopping and selection on factual validation MSE.

    config.adversary_weight is reused as the gradient-reversal coefficient.
    """
    if config.mode != "danncr":
        raise ConfigError(f"danncr_train requires mode 'danncr', got {config.mode!r}")
    _validate_split_arms(dataset)
    train_rows = dataset.labeled_indices(TRAIN)
    scalers = Scalers.fit(dataset.x[train_rows], dataset.y_factual[train_rows])
    train_view = labeled_view(dataset, TRAIN, scalers)
    val_view = labeled_view(dataset, VAL, scalers)

    model = DanncrModel(dataset.x.shape[1], config.shared_layers, config.head_layers,
                        config.dropout_p, config.seed)
    model.scalers = scalers
    rng_batch = generator(config.seed, "batching")
    rng_drop = generator(config.seed, "dropout")
    opt_predict = Adam(model.params.subset("phi.", "head."), config.learning_rate,
                       config.weight_decay)
    opt_disc = Adam(model.params.subset("disc."), config.learning_rate,
                    config.weight_decay)
    opt_confuse = Adam(model.params.subset("phi."), config.learning_rate,
                       config.weight_decay)

    history: list[EpochRecord] = []
    writer = HistoryWriter(history_path, with_distance=True)
    best_value = math.inf
    best_epoch = 0
    best_params = None
    streak = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            for batch in make_batches(train_view, config.batch_size, rng_batch):
                danncr_step_predict(model, batch, opt_predict, rng_drop)
                danncr_step_discriminate(model, batch, opt_disc, rng_drop)
                danncr_step_confuse(model, batch, opt_confuse,
                                    config.adversary_weight, rng_drop)
            factual, ce = danncr_validation(model, val_view)
            if not np.isfinite(factual):
                raise TrainingError("non-finite validation loss")
            record = EpochRecord(epoch, factual, ce, factual)
            history.append(record)
            writer.write(record)
            improved = record.criterion < best_value - 1e-12
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
