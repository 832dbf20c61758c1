"""Training loops and per-epoch metric emission.

One generic loop drives every regularization scheme through a small strategy
interface, so a scheme that never acts produces a trace byte-identical to
plain gradient descent under the same seed.  Random draws are split across
dedicated streams (shuffling vs. selection), so adding or removing a
regularizer never perturbs the data path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import netcore
from .netcore import SampleBatch, TrainingDiverged
from .regularizers import (
    EMPTY_SELECTION,
    AlrSelection,
    OverfitDetector,
    add_lowrank_pull,
    alr_select,
    condition_profile,
    dlr_select_and_substitute,
    lowrank_residual,
    overfit_ratio,
    sncn,
)


@dataclass
class TrainSettings:
    step_size: float = 0.05
    epsilon: float = 1e-6
    patience: int = 3
    max_epochs: int = 200
    batch_size: int = 0  # 0 means full batch
    loss: str = "mse"
    lrf_rank: int = 1


@dataclass
class RunData:
    """Train/val/test splits plus the fixed probe batch for condition numbers."""

    train: SampleBatch
    val: SampleBatch
    test: SampleBatch
    probe_inputs: np.ndarray


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    test_loss: float
    test_acc: float
    v: float
    v_window_mean: float
    sncn: float
    gamma: tuple
    selected: tuple
    substituted: tuple


class Regularizer:
    """Strategy hooks; the default implementations are plain gradient descent."""

    name = "none"

    def select(self, profile, t, rng):
        return EMPTY_SELECTION

    def gradient(self, net, inputs, targets, loss_kind, selection, rng):
        _, cache = netcore.forward(net, inputs)
        return netcore.backward(net, cache, targets, loss_kind)

    def stopping_gradient(self, net, inputs, targets, loss_kind, selection):
        _, cache = netcore.forward(net, inputs)
        return netcore.backward(net, cache, targets, loss_kind)

    def observe_validation(self, net, val_loss):
        pass

    def after_epoch(self, net, triggered, probe_inputs, rng):
        """Called once per epoch after evaluation; returns substituted indices."""
        return ()


class NoRegularizer(Regularizer):
    pass


class DlrRegularizer(Regularizer):
    """Rank-1 weight substitution on overfit triggers."""

    name = "dlr"

    def __init__(self, k=1):
        self.k = k

    def after_epoch(self, net, triggered, probe_inputs, rng):
        if not triggered:
            return ()
        profile = condition_profile(net, probe_inputs)
        return dlr_select_and_substitute(net, profile, rng, self.k)


class AlrRegularizer(Regularizer):
    """Per-epoch damped selection plus a low-rank Tikhonov pull."""

    name = "alr"

    def __init__(self, damping, k=1, clamp_zero=()):
        self.damping = damping
        self.k = k
        # layers whose selection probability is forced to zero (lazy-layer studies)
        self.clamp_zero = frozenset(clamp_zero)

    def select(self, profile, t, rng):
        if t < self.damping.t_min:
            return EMPTY_SELECTION
        if self.clamp_zero:
            gamma = profile.gamma.copy()
            for l in self.clamp_zero:
                gamma[l] = 0.0
            profile = type(profile)(kappa=profile.kappa, gamma=gamma)
        return alr_select(profile, self.damping, t, rng)

    def gradient(self, net, inputs, targets, loss_kind, selection, rng):
        _, cache = netcore.forward(net, inputs)
        grads = netcore.backward(net, cache, targets, loss_kind)
        return add_lowrank_pull(grads, net, selection, self.k)

    def stopping_gradient(self, net, inputs, targets, loss_kind, selection):
        _, cache = netcore.forward(net, inputs)
        grads = netcore.backward(net, cache, targets, loss_kind)
        return add_lowrank_pull(grads, net, selection, self.k)


class DropoutRegularizer(Regularizer):
    """Inverted dropout on hidden-layer outputs during gradient computation."""

    name = "dropout"

    def __init__(self, rate):
        if not 0.0 < rate < 1.0:
            raise ValueError(f"dropout rate must be in (0, 1), got {rate}")
        self.rate = rate

    def _masks(self, net, inputs, rng):
        masks = []
        shape_probe = np.asarray(inputs, dtype=np.float64)
        for i, layer in enumerate(net.layers):
            shape_probe = layer.forward(shape_probe)[0]
            if i == len(net.layers) - 1:
                masks.append(None)
            else:
                keep = (rng.random(shape_probe.shape) >= self.rate).astype(np.float64)
                masks.append(keep / (1.0 - self.rate))
        return masks

    def gradient(self, net, inputs, targets, loss_kind, selection, rng):
        masks = self._masks(net, inputs, rng)
        _, cache = netcore.forward(net, inputs, dropout_masks=masks)
        return netcore.backward(net, cache, targets, loss_kind)


class WeightDecayRegularizer(Regularizer):
    """L2 penalty lambda * ||W||_F^2 on weights (biases excluded)."""

    name = "weight_decay"

    def __init__(self, lam):
        if lam < 0:
            raise ValueError(f"weight decay must be nonnegative, got {lam}")
        self.lam = lam

    def _decay(self, grads, net):
        for layer, g in zip(net.layers, grads.layers):
            g.dw = g.dw + 2.0 * self.lam * np.asarray(layer.weights)
        return grads

    def gradient(self, net, inputs, targets, loss_kind, selection, rng):
        grads = super().gradient(net, inputs, targets, loss_kind, selection, rng)
        return self._decay(grads, net)

    def stopping_gradient(self, net, inputs, targets, loss_kind, selection):
        grads = super().stopping_gradient(net, inputs, targets, loss_kind, selection)
        return self._decay(grads, net)


class SnapshotLowRankRegularizer(Regularizer):
    """Fixed-strength pull of every layer toward the rank-1 factorization of
    the best-validation weights seen so far (degenerate non-adaptive scheme,
    shipped for baseline comparisons only)."""

    name = "asr"

    def __init__(self, gamma_coeff, k=1):
        self.gamma_coeff = gamma_coeff
        self.k = k
        self.best_val = math.inf
        self.best_params = None

    def observe_validation(self, net, val_loss):
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_params = net.copy_params()

    def gradient(self, net, inputs, targets, loss_kind, selection, rng):
        grads = super().gradient(net, inputs, targets, loss_kind, selection, rng)
        if self.best_params is None:
            return grads
        for l, (w_best, _) in enumerate(self.best_params):
            target = np.asarray(w_best) - lowrank_residual(w_best, self.k)
            grads.layers[l].dw = grads.layers[l].dw + 2.0 * self.gamma_coeff * (
                np.asarray(net.layers[l].weights) - target
            )
        return grads


def _evaluate(net, batch, loss_kind):
    outputs, _ = netcore.forward(net, batch.inputs)
    return netcore.loss(outputs, batch.targets, loss_kind), netcore.accuracy(
        outputs, batch.targets
    )


def _batches(batch, batch_size, rng):
    n = batch.size
    if not batch_size or batch_size >= n:
        yield batch.inputs, batch.targets
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield batch.inputs[idx], batch.targets[idx]


def run_training(net, data, settings, regularizer, rng_train, rng_select):
    """Train until the gradient norm drops to epsilon or max_epochs elapse.

    Per epoch: evaluate the condition profile on the probe batch, let the
    regularizer pick its layer subset, take the descent step(s), evaluate all
    splits, update the overfit detector, and hand the trigger to the
    regularizer (substitution happens there for DLR).  Returns the trained
    network and the full metrics trace.
    """
    detector = OverfitDetector(patience=settings.patience)
    metrics = []
    for t in range(1, settings.max_epochs + 1):
        profile = condition_profile(net, data.probe_inputs)
        selection = regularizer.select(profile, t, rng_select)

        try:
            for xb, yb in _batches(data.train, settings.batch_size, rng_train):
                grads = regularizer.gradient(net, xb, yb, settings.loss, selection, rng_select)
                netcore.sgd_step(net, grads, settings.step_size)
        except TrainingDiverged as exc:
            exc.metrics = metrics
            raise

        train_loss, train_acc = _evaluate(net, data.train, settings.loss)
        val_loss, val_acc = _evaluate(net, data.val, settings.loss)
        test_loss, test_acc = _evaluate(net, data.test, settings.loss)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss) and math.isfinite(test_loss)):
            exc = TrainingDiverged(f"non-finite loss at epoch {t}")
            exc.metrics = metrics
            raise exc

        regularizer.observe_validation(net, val_loss)
        v = overfit_ratio(val_loss, train_loss)
        triggered = detector.update(v)
        substituted = regularizer.after_epoch(net, triggered, data.probe_inputs, rng_select)

        stop_grads = regularizer.stopping_gradient(
            net, data.train.inputs, data.train.targets, settings.loss, selection
        )
        grad_norm = stop_grads.norm()

        metrics.append(
            EpochMetrics(
                epoch=t,
                train_loss=train_loss,
                train_acc=train_acc,
                val_loss=val_loss,
                val_acc=val_acc,
                test_loss=test_loss,
                test_acc=test_acc,
                v=v,
                v_window_mean=detector.window_mean,
                sncn=sncn(profile),
                gamma=tuple(float(g) for g in profile.gamma),
                selected=selection.selected,
                substituted=tuple(substituted),
            )
        )
        if grad_norm <= settings.epsilon:
            break
    return net, metrics


def train_plain(net, data, settings, rng_train, rng_select):
    return run_training(net, data, settings, NoRegularizer(), rng_train, rng_select)


def train_dlr(net, data, settings, rng_train, rng_select, k=None):
    reg = DlrRegularizer(k=k if k is not None else settings.lrf_rank)
    return run_training(net, data, settings, reg, rng_train, rng_select)


def train_alr(net, data, settings, damping, rng_train, rng_select, k=None, clamp_zero=()):
    reg = AlrRegularizer(
        damping, k=k if k is not None else settings.lrf_rank, clamp_zero=clamp_zero
    )
    return run_training(net, data, settings, reg, rng_train, rng_select)
