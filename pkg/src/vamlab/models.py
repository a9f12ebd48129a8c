"""Low-rank softmax transition models and the three model-learning losses.

The model is ``P_hat = softmax_rows(Phi @ Psi.T)`` with a fixed random
``Phi`` and a trainable ``Psi``, both ``(n, k)``.  The rank ``k`` caps model
capacity.  Losses are built on the autodiff tape and return a 1x1 tensor;
the training loops in :mod:`vamlab.valuelearn` use the fused kernels from
:mod:`vamlab.kernels`, which compute the same numbers.

All losses are full-batch and use per-state sufficient statistics (counts
and count-weighted value sums) of the dataset.  For a squared error this is
an exact rewrite of the per-sample average, not an approximation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError
from .mdp import TransitionDataset, stream

MODEL_FORMAT = "vamlab.model/1"


@dataclass
class LowRankModel:
    n: int
    k: int
    Phi: np.ndarray
    Psi: Tensor
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Phi = np.array(self.Phi, dtype=np.float64)
        self.Phi.setflags(write=False)
        if not isinstance(self.Psi, Tensor):
            self.Psi = Tensor(self.Psi, requires_grad=True, name="Psi")
        if self.Phi.shape != (self.n, self.k) or self.Psi.shape != (self.n, self.k):
            raise ConfigurationError(
                f"Phi {self.Phi.shape} and Psi {self.Psi.shape} must both be ({self.n}, {self.k})"
            )

    @classmethod
    def random(cls, n: int, k: int, seed: int, init_scale: float = 0.0) -> LowRankModel:
        """Standard-normal ``Phi``; ``Psi`` zero (uniform ``P_hat``) unless ``init_scale``."""
        if not 1 <= k:
            raise ConfigurationError(f"rank k must be >= 1, got {k}")
        Phi = stream(seed, "model/phi").standard_normal((n, k))
        Psi = init_scale * stream(seed, "model/psi").standard_normal((n, k))
        return cls(n, k, Phi, Tensor(Psi, requires_grad=True, name="Psi"), seed)

    def probs(self) -> np.ndarray:
        """Materialized ``P_hat`` (no tape)."""
        return kernels.softmax_rows(self.Phi @ self.Psi.data.T)

    def copy(self) -> LowRankModel:
        return LowRankModel(self.n, self.k, self.Phi.copy(),
                            Tensor(self.Psi.numpy(), requires_grad=True, name="Psi"),
                            self.seed, dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "n": self.n,
            "k": self.k,
            "seed": self.seed,
            "Phi": self.Phi.tolist(),
            "Psi": self.Psi.data.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> LowRankModel:
        if d.get("format") != MODEL_FORMAT:
            raise ConfigurationError(f"unexpected model format {d.get('format')!r}")
        return cls(int(d["n"]), int(d["k"]), np.array(d["Phi"]),
                   Tensor(np.array(d["Psi"]), requires_grad=True, name="Psi"), d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> LowRankModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def model_probs(model: LowRankModel) -> Tensor:
    """``softmax_rows(Phi @ Psi.T)`` on the tape; differentiable in ``Psi``."""
    return ad.row_softmax(ad.matmul(Tensor(model.Phi), ad.transpose(model.Psi)))


def _column(values, n: int, what: str) -> np.ndarray:
    v = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64).ravel()
    if v.shape != (n,):
        raise ConfigurationError(f"{what} must have {n} entries, got {v.shape}")
    return v


def _frozen_value(V, n: int) -> Tensor:
    if isinstance(V, Tensor):
        if V.shape != (n, 1):
            V = Tensor(V.data.reshape(n, 1))
        return ad.stop_gradient(V)
    return Tensor(_column(V, n, "V").reshape(n, 1))


def mle_loss(model: LowRankModel, dataset: TransitionDataset) -> Tensor:
    """Mean negative log-likelihood of observed ``x0 -> x1`` transitions."""
    C = dataset.C01
    P = model_probs(model)
    if np.any(P.data[C > 0] < 1e-30):
        raise NumericError("mle_loss: model assigns < 1e-30 to an observed transition")
    return ad.scale(ad.dot(Tensor(C), ad.log(P)), -1.0 / len(dataset))


def itervaml_loss(model: LowRankModel, V, dataset: TransitionDataset, steps: int = 1) -> Tensor:
    """Multi-step IterVAML loss; ``V`` is held fixed.

    Averages ``((P_hat^j V)(x0) - V(x_j))**2`` over samples and ``j = 1..steps``.
    """
    if steps < 1 or steps > dataset.horizon:
        raise ConfigurationError(
            f"horizon {steps} not available: dataset sequences cover {dataset.horizon} steps"
        )
    n, N = model.n, len(dataset)
    Vt = _frozen_value(V, n)
    v = Vt.data.ravel()
    c0 = Tensor(dataset.c0.reshape(n, 1))
    P = model_probs(model)
    total = None
    m = Vt
    for j in range(1, steps + 1):
        Cj = dataset.step_counts(j)
        m = ad.matmul(P, m)
        cross = Tensor((Cj @ v).reshape(n, 1))
        const = float(np.sum(Cj @ (v * v)))
        term = ad.sub(ad.dot(c0, ad.square(m)), ad.scale(ad.dot(m, cross), 2.0))
        term = ad.add(term, Tensor(const))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / (N * steps))


def bootstrap_targets(reward, gamma: float, V_target, dataset: TransitionDataset) -> np.ndarray:
    """Per-sample ``r(x1) + gamma * V_target(x2)``."""
    r = np.asarray(reward, dtype=np.float64).ravel()
    vt = np.asarray(V_target.data if isinstance(V_target, Tensor) else V_target,
                    dtype=np.float64).ravel()
    return r[dataset.x1] + gamma * vt[dataset.x2]


def target_moments(reward, gamma: float, V_target, dataset: TransitionDataset):
    """Per-start-state sums of the bootstrap target and its square."""
    t = bootstrap_targets(reward, gamma, V_target, dataset)
    n = dataset.n_states
    s1 = np.bincount(dataset.x0, weights=t, minlength=n)
    s2 = np.bincount(dataset.x0, weights=t * t, minlength=n)
    return s1, s2


def muzero_model_loss(model: LowRankModel, V_hat, V_target, reward, gamma: float,
                      dataset: TransitionDataset) -> Tensor:
    """``((P_hat V_hat)(x0) - (r(x1) + gamma V_target(x2)))**2`` averaged over samples.

    Differentiable in ``Psi`` and, when ``V_hat`` is a trainable tensor, in
    ``V_hat``.  ``V_target`` never receives gradient.
    """
    n, N = model.n, len(dataset)
    if isinstance(V_hat, Tensor):
        if V_hat.shape != (n, 1):
            raise ConfigurationError(f"V_hat must be ({n}, 1), got {V_hat.shape}")
        Vh = V_hat
    else:
        Vh = Tensor(_column(V_hat, n, "V_hat").reshape(n, 1))
    if isinstance(V_target, Tensor):
        V_target = ad.stop_gradient(V_target).data
    s1, s2 = target_moments(reward, gamma, _column(V_target, n, "V_target"), dataset)
    c0 = Tensor(dataset.c0.reshape(n, 1))
    m = ad.matmul(model_probs(model), Vh)
    loss = ad.sub(ad.dot(c0, ad.square(m)), ad.scale(ad.dot(m, Tensor(s1.reshape(n, 1))), 2.0))
    loss = ad.add(loss, Tensor(float(s2.sum())))
    return ad.scale(loss, 1.0 / N)
