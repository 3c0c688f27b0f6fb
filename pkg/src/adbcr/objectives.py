"""Factual loss, discriminative distance, and the validation criterion.

All three quantities share one graph builder that forwards the shared
representation once over the batch (labeled rows stacked with any unlabeled
rows) and every head once over all rows, then slices rows per term. Phases
that skip a term therefore consume exactly the same dropout randomness as
phases that build it, which is what makes ablation modes reduce to each
other bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tape, Tensor
from .errors import BatchCompositionError, ConfigError, DimensionError
from .model import HEAD_KEYS, AdbcrModel

METRICS = ("l1", "squared")

# Instrumentation: how many times a distance graph has been constructed.
# Adversary-free modes must leave this untouched for a whole run.
distance_graph_builds = 0


def reset_distance_counter() -> None:
    global distance_graph_builds
    distance_graph_builds = 0


@dataclass
class BatchView:
    """Aligned standardized covariates, treatments, and standardized outcomes.

    unlabeled_x optionally carries outcome-free covariate rows that join
    every head pair's distance pool. rows optionally records the source
    indices of the labeled rows for instrumentation.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    unlabeled_x: np.ndarray | None = None
    rows: np.ndarray | None = None

    def __post_init__(self):
        n = self.x.shape[0]
        if self.t.shape != (n,) or self.y.shape != (n,):
            raise DimensionError(
                f"batch rows misaligned: x {self.x.shape}, t {self.t.shape}, y {self.y.shape}")
        if self.unlabeled_x is not None and self.unlabeled_x.shape[1] != self.x.shape[1]:
            raise DimensionError(
                f"unlabeled rows have {self.unlabeled_x.shape[1]} columns, labeled {self.x.shape[1]}")

    @property
    def n_unlabeled(self) -> int:
        return 0 if self.unlabeled_x is None else self.unlabeled_x.shape[0]


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")


def build_losses(model: AdbcrModel, batch: BatchView, tape: Tape, *,
                 training: bool = False, rng: np.random.Generator | None = None,
                 need_factual: bool = True, need_distance: bool = True,
                 metric: str = "l1") -> tuple[Tensor | None, Tensor | None]:
    """Build the factual loss and/or the discriminative distance on one tape.

    Returns (factual, distance); entries not asked for are None. The shared
    representation and all four heads forward exactly once regardless of
    which terms are requested, so the dropout stream advances identically.
    """
    _check_metric(metric)
    n = batch.x.shape[0]
    m = batch.n_unlabeled
    stacked = np.vstack([batch.x, batch.unlabeled_x]) if m > 0 else batch.x
    x_node = tape.constant(stacked)
    h = model.phi_forward(tape, x_node, training, rng)
    outs = {key: model.head_forward_graph(tape, *key, h, training, rng) for key in HEAD_KEYS}
    idx = {arm: np.flatnonzero(batch.t == arm) for arm in (0, 1)}

    factual = None
    if need_factual:
        if idx[0].size == 0 or idx[1].size == 0:
            raise BatchCompositionError(
                f"factual loss needs both treatments in the batch, got {idx[1].size} treated "
                f"and {idx[0].size} control rows")
        for t, r in HEAD_KEYS:
            target = tape.constant(batch.y[idx[t]].reshape(-1, 1))
            pred = autodiff.take_rows(tape, outs[(t, r)], idx[t])
            term = autodiff.mse_loss(tape, pred, target)
            factual = term if factual is None else autodiff.add(tape, factual, term)

    distance = None
    if need_distance:
        global distance_graph_builds
        distance_graph_builds += 1
        point_metric = autodiff.l1_mean if metric == "l1" else autodiff.mse_loss
        for t in (0, 1):
            pool = idx[1 - t]
            if m > 0:
                pool = np.concatenate([pool, n + np.arange(m)])
            if pool.size == 0:
                raise BatchCompositionError(
                    f"distance pool for treatment {t} is empty: no rows with treatment {1 - t} "
                    "and no unlabeled rows")
            a = autodiff.take_rows(tape, outs[(t, 0)], pool)
            b = autodiff.take_rows(tape, outs[(t, 1)], pool)
            term = point_metric(tape, a, b)
            distance = term if distance is None else autodiff.add(tape, distance, term)

    return factual, distance


def factual_loss(model: AdbcrModel, batch: BatchView, tape: Tape | None = None,
                 training: bool = False, rng: np.random.Generator | None = None):
    """Sum over arms and heads of each head's MSE on its arm's rows.

    Without a tape: a plain eval-mode float. With one: the loss tensor on
    that tape, ready for backward.
    """
    if tape is None:
        local = Tape()
        loss, _ = build_losses(model, batch, local, need_distance=False)
        return float(loss.data[0, 0])
    loss, _ = build_losses(model, batch, tape, training=training, rng=rng,
                           need_distance=False)
    return loss


def discriminative_distance(model: AdbcrModel, batch: BatchView, metric: str = "l1",
                            tape: Tape | None = None, training: bool = False,
                            rng: np.random.Generator | None = None):
    """Sum over arms of the mean pointwise gap between adjacent heads.

    Each arm's head pair is evaluated on the rows of the opposite arm plus
    any unlabeled rows. Without a tape: an eval-mode float.
    """
    if tape is None:
        local = Tape()
        _, dist = build_losses(model, batch, local, need_factual=False, metric=metric)
        return float(dist.data[0, 0])
    _, dist = build_losses(model, batch, tape, training=training, rng=rng,
                           need_factual=False, metric=metric)
    return dist


def validation_criterion(model: AdbcrModel, batch: BatchView, metric: str = "l1",
                         imbalance_weight: float = 1.0) -> float:
    """Factual loss plus weighted distance, eval mode, in one deterministic pass."""
    tape = Tape()
    loss, dist = build_losses(model, batch, tape, metric=metric)
    return float(loss.data[0, 0]) + imbalance_weight * float(dist.data[0, 0])
