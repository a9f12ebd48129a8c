"""Value-function learning on top of learned models.

Four schemes share one schedule object:

* ``train_itervaml``: alternate an IterVAML model fit (value frozen) with
  fitted value iteration under the learned model.
* ``train_mle``: maximum-likelihood model fit, then fitted value iteration.
* ``train_muzero_joint``: Adam on the MuZero loss w.r.t. model *and* value,
  with a periodically hard-copied target table.
* ``train_muzero_model_with_td``: MuZero loss for the model only, value by
  fitted value iteration (same outer structure as IterVAML).

Training uses the fused kernels in :mod:`vamlab.kernels`; everything is
deterministic given the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .autodiff import AdamState
from .errors import ConfigurationError
from .mdp import TransitionDataset
from .models import LowRankModel, target_moments


@dataclass(frozen=True)
class TrainSchedule:
    outer_iterations: int = 50
    model_steps_per_outer: int = 200
    value_sweeps_per_outer: int = 100
    target_refresh_period: int = 100
    model_lr: float = 1e-2
    value_lr: float = 1e-2
    tolerance: float = 1e-6
    itervaml_horizon: int = 1
    record_every: int = 0

    def __post_init__(self):
        for name in ("outer_iterations", "model_steps_per_outer", "value_sweeps_per_outer",
                     "target_refresh_period", "itervaml_horizon"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.record_every < 0:
            raise ConfigurationError("record_every must be >= 0")
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be > 0")
        if not (self.model_lr > 0 and self.value_lr > 0):
            raise ConfigurationError("learning rates must be > 0")

    def updated(self, **overrides) -> TrainSchedule:
        return replace(self, **overrides)


@dataclass
class TrainResult:
    model: LowRankModel
    values: np.ndarray
    diverged: bool = False
    message: str = ""
    model_steps: int = 0
    losses: list[tuple[int, float]] = field(default_factory=list)

    def __iter__(self):
        # allows ``model, values = train_*(...)``
        yield self.model
        yield self.values


@dataclass(frozen=True)
class ValueErrorRecord:
    mae: float
    rmse: float
    max: float


def value_error(V_hat, V_star) -> ValueErrorRecord:
    V_hat = np.asarray(V_hat, dtype=np.float64).ravel()
    V_star = np.asarray(V_star, dtype=np.float64).ravel()
    if V_hat.shape != V_star.shape:
        raise ConfigurationError(f"length mismatch {V_hat.shape} vs {V_star.shape}")
    d = np.abs(V_hat - V_star)
    return ValueErrorRecord(float(d.mean()), float(np.sqrt(np.mean(d * d))), float(d.max()))


def divergence_threshold(reward, gamma: float) -> float:
    return 10.0 * float(np.max(np.abs(reward))) / (1.0 - gamma)


def fitted_value_iteration(P_hat, reward, gamma: float, V0, sweeps: int) -> np.ndarray:
    """``V <- r + gamma * P_hat @ V``, ``sweeps`` times."""
    P = np.ascontiguousarray(P_hat, dtype=np.float64)
    r = np.ascontiguousarray(reward, dtype=np.float64).ravel()
    V = np.ascontiguousarray(V0, dtype=np.float64).ravel()
    return kernels.value_iteration(P, r, float(gamma), V, int(sweeps))


def mve_target(P_hat, reward, gamma: float, V_bar, start: int, horizon: int) -> float:
    """``h``-step model rollout return from ``start`` bootstrapped with ``V_bar``."""
    if horizon < 1:
        raise ConfigurationError(f"horizon must be >= 1, got {horizon}")
    P = np.asarray(P_hat, dtype=np.float64)
    r = np.asarray(reward, dtype=np.float64).ravel()
    dist = np.zeros(P.shape[0])
    dist[start] = 1.0
    total = 0.0
    for i in range(horizon):
        total += gamma**i * (dist @ r)
        dist = dist @ P
    return float(total + gamma**horizon * (dist @ np.asarray(V_bar, dtype=np.float64).ravel()))


# ---------------------------------------------------------------------------
# training loops


class _Fitter:
    """Adam loop over a fused value-and-grad kernel with relative-change stopping.

    Every call to :meth:`run` starts a fresh Adam state.  The objective changes
    between outer iterations (new value table), and moments carried over from
    the previous one stall the first steps enough to trip the stopping test.
    """

    def __init__(self, model: LowRankModel, schedule: TrainSchedule, result: TrainResult):
        self.model = model
        self.Psi = np.ascontiguousarray(model.Psi.data)
        self.Phi = np.ascontiguousarray(model.Phi)
        self.schedule = schedule
        self.result = result

    def run(self, value_and_grad, steps: int) -> float:
        self.adam = AdamState.for_param(self.Psi, lr=self.schedule.model_lr)
        tol = self.schedule.tolerance
        every = self.schedule.record_every
        prev = math.inf
        loss = math.nan
        for _ in range(steps):
            loss, grad = value_and_grad(self.Phi, self.Psi)
            self.adam.update(self.Psi, grad)
            self.result.model_steps += 1
            if every and self.result.model_steps % every == 0:
                self.result.losses.append((self.result.model_steps, float(loss)))
            if prev != math.inf and abs(prev - loss) <= tol * max(abs(prev), 1e-12):
                break
            prev = loss
        self.model.Psi.assign(self.Psi)
        return float(loss)

    def probs(self) -> np.ndarray:
        return kernels.softmax_rows(self.Phi @ self.Psi.T)


def _check_divergence(V, threshold: float) -> str:
    if not np.all(np.isfinite(V)):
        return "non-finite value estimate"
    peak = float(np.max(np.abs(V)))
    if peak > threshold:
        return f"|V| reached {peak:.4g} > threshold {threshold:.4g}"
    return ""


def _prepare(dataset: TransitionDataset, reward, model: LowRankModel):
    n = dataset.n_states
    r = np.ascontiguousarray(reward, dtype=np.float64).ravel()
    if r.shape != (n,) or model.n != n:
        raise ConfigurationError(f"reward/model/dataset state counts disagree: {r.shape}, {model.n}, {n}")
    return n, r, float(len(dataset))


def train_itervaml(dataset: TransitionDataset, reward, gamma: float, model: LowRankModel,
                   schedule: TrainSchedule = TrainSchedule(),
                   V0=None, fixed_transition=None) -> TrainResult:
    """Alternate the IterVAML model fit with fitted value iteration.

    ``fixed_transition`` skips model learning and runs value iteration under
    the given matrix instead (a check of the outer loop on its own).
    """
    n, r, N = _prepare(dataset, reward, model)
    h = schedule.itervaml_horizon
    if h > dataset.horizon:
        raise ConfigurationError(f"itervaml_horizon {h} exceeds dataset horizon {dataset.horizon}")
    counts = [dataset.step_counts(j) for j in range(1, h + 1)]
    c0 = dataset.c0
    V = np.zeros(n) if V0 is None else np.array(V0, dtype=np.float64).ravel()
    threshold = divergence_threshold(r, gamma)
    result = TrainResult(model, V)
    fitter = _Fitter(model, schedule, result)
    for it in range(schedule.outer_iterations):
        cv = np.ascontiguousarray(np.stack([C @ V for C in counts]))
        cv2 = np.ascontiguousarray(np.stack([C @ (V * V) for C in counts]))
        Vc = np.ascontiguousarray(V)
        if fixed_transition is None:
            fitter.run(lambda Phi, Psi: kernels.itervaml_value_grad(Phi, Psi, Vc, c0, cv, cv2, N),
                       schedule.model_steps_per_outer)
            P_hat = fitter.probs()
        else:
            P_hat = fixed_transition
        V = fitted_value_iteration(P_hat, r, gamma, V, schedule.value_sweeps_per_outer)
        msg = _check_divergence(V, threshold)
        if msg:
            result.diverged, result.message = True, f"outer {it}: {msg}"
            break
    result.values = V
    return result


def train_mle(dataset: TransitionDataset, reward, gamma: float, model: LowRankModel,
              schedule: TrainSchedule = TrainSchedule(), V0=None) -> TrainResult:
    """Likelihood fit with the whole model-step budget, then value iteration."""
    n, r, N = _prepare(dataset, reward, model)
    C = np.ascontiguousarray(dataset.C01)
    result = TrainResult(model, np.zeros(n))
    fitter = _Fitter(model, schedule, result)
    fitter.run(lambda Phi, Psi: kernels.mle_value_grad(Phi, Psi, C, N),
               schedule.outer_iterations * schedule.model_steps_per_outer)
    V = np.zeros(n) if V0 is None else np.array(V0, dtype=np.float64).ravel()
    V = fitted_value_iteration(fitter.probs(), r, gamma, V,
                               schedule.outer_iterations * schedule.value_sweeps_per_outer)
    msg = _check_divergence(V, divergence_threshold(r, gamma))
    if msg:
        result.diverged, result.message = True, msg
    result.values = V
    return result


def train_muzero_joint(dataset: TransitionDataset, reward, gamma: float, model: LowRankModel,
                       V0=None, schedule: TrainSchedule = TrainSchedule()) -> TrainResult:
    n, r, N = _prepare(dataset, reward, model)
    c0 = dataset.c0
    C01r = dataset.C01 @ r
    C02 = dataset.C02
    V = np.zeros(n) if V0 is None else np.array(V0, dtype=np.float64).ravel()
    V = np.ascontiguousarray(V)
    Psi = np.ascontiguousarray(model.Psi.data)
    Phi = np.ascontiguousarray(model.Phi)
    adam_psi = AdamState.for_param(Psi, lr=schedule.model_lr)
    adam_v = AdamState.for_param(V, lr=schedule.value_lr)
    threshold = divergence_threshold(r, gamma)
    result = TrainResult(model, V)
    total = schedule.outer_iterations * schedule.model_steps_per_outer
    period = schedule.target_refresh_period
    every = schedule.record_every
    s1 = s2 = None
    for step in range(total):
        if step % period == 0:
            V_target = V.copy()
            s1 = np.ascontiguousarray(C01r + gamma * (C02 @ V_target))
            s2 = np.ascontiguousarray(target_moments(r, gamma, V_target, dataset)[1]) if every else np.zeros(n)
        loss, g_psi, g_v = kernels.muzero_value_grad(Phi, Psi, V, c0, s1, s2, N)
        adam_psi.update(Psi, g_psi)
        adam_v.update(V, g_v)
        result.model_steps += 1
        if every and result.model_steps % every == 0:
            result.losses.append((result.model_steps, float(loss)))
        if (step + 1) % period == 0:
            msg = _check_divergence(V, threshold)
            if msg:
                result.diverged, result.message = True, f"step {step + 1}: {msg}"
                break
    model.Psi.assign(Psi)
    result.values = V
    return result


def train_muzero_model_with_td(dataset: TransitionDataset, reward, gamma: float,
                               model: LowRankModel,
                               schedule: TrainSchedule = TrainSchedule(),
                               V0=None) -> TrainResult:
    n, r, N = _prepare(dataset, reward, model)
    c0 = dataset.c0
    C01r = dataset.C01 @ r
    C02 = dataset.C02
    V = np.zeros(n) if V0 is None else np.array(V0, dtype=np.float64).ravel()
    threshold = divergence_threshold(r, gamma)
    result = TrainResult(model, V)
    fitter = _Fitter(model, schedule, result)
    for it in range(schedule.outer_iterations):
        Vc = np.ascontiguousarray(V)
        s1 = np.ascontiguousarray(C01r + gamma * (C02 @ V))
        # the constant term keeps the relative-change stopping rule meaningful
        s2 = np.ascontiguousarray(target_moments(r, gamma, V, dataset)[1])
        fitter.run(lambda Phi, Psi: kernels.muzero_value_grad(Phi, Psi, Vc, c0, s1, s2, N)[:2],
                   schedule.model_steps_per_outer)
        V = fitted_value_iteration(fitter.probs(), r, gamma, V, schedule.value_sweeps_per_outer)
        msg = _check_divergence(V, threshold)
        if msg:
            result.diverged, result.message = True, f"outer {it}: {msg}"
            break
    result.values = V
    return result


ALGORITHMS = {
    "itervaml": train_itervaml,
    "mle": train_mle,
    "muzero_joint": train_muzero_joint,
    "muzero_td": train_muzero_model_with_td,
}
