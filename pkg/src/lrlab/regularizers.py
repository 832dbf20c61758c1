"""Overfitting detection and condition-number-driven low-rank regularization.

Two schemes are built on the same layer-selection machinery:

* DLR (direct low-rank): when the smoothed validation/train loss ratio rises,
  layers are selected with probability proportional to their normalized
  condition number and their weights are replaced by a rank-1 reconstruction.
* ALR (adaptive low-rank): every epoch a layer subset is selected, with a
  damping sequence boosting late-epoch selection, and a Tikhonov penalty
  pulls the selected weights toward their rank-1 factorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg, netcore

SENTINEL_MAX = math.inf
TRAIN_ERR_FLOOR = 1e-12


def overfit_ratio(val_err, train_err):
    """Validation error divided by training error; +inf once train error hits zero."""
    if train_err <= TRAIN_ERR_FLOOR:
        return SENTINEL_MAX
    return float(val_err) / float(train_err)


@dataclass
class OverfitDetector:
    """Smooths the overfit ratio over a patience window and flags increases.

    The ratio oscillates epoch to epoch, so raw increases are too noisy to act
    on.  A trigger fires only when the mean of the last `patience` values
    strictly exceeds the mean of the window one step earlier, which needs at
    least patience + 1 observations.
    """

    patience: int = 3
    v_history: list = field(default_factory=list)

    def update(self, v):
        self.v_history.append(float(v))
        p = self.patience
        if len(self.v_history) < p + 1:
            return False
        new_mean = sum(self.v_history[-p:]) / p
        old_mean = sum(self.v_history[-p - 1 : -1]) / p
        return new_mean > old_mean

    @property
    def window(self):
        return tuple(self.v_history[-self.patience :])

    @property
    def window_mean(self):
        w = self.window
        return sum(w) / len(w) if w else math.nan


@dataclass
class ConditionProfile:
    """Per-layer condition numbers and their max-normalized values in (0, 1]."""

    kappa: np.ndarray
    gamma: np.ndarray


def normalize_kappa(kappa):
    kappa = np.asarray(kappa, dtype=np.float64)
    kmax = kappa.max()
    if kmax == 0.0:
        # degenerate all-zero profile: treat every layer as equally suspect
        return np.ones_like(kappa)
    if math.isinf(kmax):
        return np.where(np.isinf(kappa), 1.0, 0.0)
    return kappa / kmax


def condition_profile(net, probe_inputs):
    """Evaluate every layer's condition number on a fixed probe batch."""
    x = np.asarray(probe_inputs, dtype=np.float64)
    kappa = []
    for layer in net.layers:
        kappa.append(netcore.layer_condition_number(layer, x))
        x = layer.forward(x)[0]
    kappa = np.asarray(kappa, dtype=np.float64)
    return ConditionProfile(kappa=kappa, gamma=normalize_kappa(kappa))


def sncn(profile):
    """Sum of normalized condition numbers; lower means more stable layers."""
    return float(np.sum(profile.gamma))


DAMPING_KINDS = ("none", "inv_log_log", "inv_log", "inv_t", "inv_t_squared")


@dataclass(frozen=True)
class DampingSequence:
    """Nonincreasing sequence dividing into the selection test.

    Values above 1 damp selection below the base probability; values in
    (0, 1] boost it.  Each kind has a first epoch t_min where the sequence is
    defined and positive.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in DAMPING_KINDS:
            raise ValueError(f"unknown damping kind {self.kind!r}; choose from {DAMPING_KINDS}")

    @property
    def t_min(self):
        return {"inv_log": 2, "inv_log_log": 3}.get(self.kind, 1)

    def value(self, t):
        if t < self.t_min:
            raise ValueError(f"damping {self.kind} is undefined at epoch {t} (t_min={self.t_min})")
        if self.kind == "none":
            return 1.0
        if self.kind == "inv_log":
            return 1.0 / math.log(t)
        if self.kind == "inv_log_log":
            return 1.0 / math.log(math.log(t))
        if self.kind == "inv_t":
            return 1.0 / t
        return 1.0 / (t * t)


@dataclass
class AlrSelection:
    """Layer subset regularized this epoch; the penalty weight is 1/|subset|."""

    selected: tuple
    gamma_reg: float

    @classmethod
    def of(cls, indices):
        indices = tuple(indices)
        return cls(selected=indices, gamma_reg=1.0 / len(indices) if indices else 0.0)


EMPTY_SELECTION = AlrSelection((), 0.0)


def alr_select(profile, damping, t, rng):
    """Draw the epoch-t layer subset: layer l joins iff DS(t) * r <= gamma_l.

    With r uniform on (0, 1) the selection probability is min(1, gamma/DS(t)).
    One draw per layer, in layer order, so runs replay exactly under a seed.
    """
    ds = damping.value(t)
    picked = []
    for l, g in enumerate(profile.gamma):
        if ds * rng.random() <= g:
            picked.append(l)
    return AlrSelection.of(picked)


def _rank1_reconstruction(w, k=1):
    """Rank-k reconstruction of a matrix, or None when there is nothing to truncate."""
    if linalg.matrix_rank(w) <= k:
        return None
    return linalg.lrf_reconstruct(linalg.lrf(w, k))


def _substitute_layer(layer, k=1):
    """Replace a layer's weights by their low-rank reconstruction. Bias untouched."""
    if layer.kind == "dense":
        sub = _rank1_reconstruction(layer.weights, k)
        if sub is None:
            return False
        layer.weights = sub
        return True
    slices = linalg.slice_tensor(layer.kernel)
    changed = False
    for i, s in enumerate(slices):
        sub = _rank1_reconstruction(s, k)
        if sub is not None:
            slices[i] = sub
            changed = True
    if changed:
        layer.kernel = linalg.unslice_tensor(slices, layer.kernel.shape[:2])
    return changed


def dlr_select_and_substitute(net, profile, rng, k=1):
    """Stochastic low-rank substitution pass over all layers.

    Each layer draws its own uniform r and is substituted when r <= gamma_l.
    Layers already at rank <= k are left alone.  Returns the indices whose
    weights actually changed.
    """
    substituted = []
    for l, layer in enumerate(net.layers):
        r = rng.random()
        if r <= profile.gamma[l] and _substitute_layer(layer, k):
            substituted.append(l)
    if substituted:
        net.bump_version()
    return tuple(substituted)


def lowrank_residual(weights, k=1):
    """W minus its rank-k reconstruction; exact zeros when rank(W) <= k."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        sub = _rank1_reconstruction(w, k)
        return np.zeros_like(w) if sub is None else w - sub
    slices = linalg.slice_tensor(w)
    resid = []
    for s in slices:
        sub = _rank1_reconstruction(s, k)
        resid.append(np.zeros_like(s) if sub is None else s - sub)
    return linalg.unslice_tensor(resid, w.shape[:2])


def add_lowrank_pull(grads, net, selection, k=1):
    """Add the low-rank penalty gradient 2/|W| * (W - LRF_k(W)) in place.

    The factorization target is held constant, so the term is linear in W and
    vanishes exactly on weights already at rank <= k.
    """
    if not selection.selected:
        return grads
    coeff = 2.0 * selection.gamma_reg
    for l in selection.selected:
        layer = net.layers[l]
        grads.layers[l].dw = grads.layers[l].dw + coeff * lowrank_residual(layer.weights, k)
    return grads


def alr_regularized_gradient(net, inputs, targets, selection, loss_kind="mse", k=1):
    """Gradient of the loss plus the low-rank Tikhonov term on selected layers."""
    _, cache = netcore.forward(net, inputs)
    grads = netcore.backward(net, cache, targets, loss_kind)
    return add_lowrank_pull(grads, net, selection, k)
