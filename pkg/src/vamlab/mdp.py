"""Ground-truth Markov reward processes: Garnet generation, exact values, data.

Random draws go through :func:`stream`, which keys a Philox counter-based
generator on ``(seed, purpose)``.  Garnet structure, rewards and dataset
draws therefore never share a stream, and any one of them can be regenerated
without replaying the others.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericError

MRP_FORMAT = "vamlab.mrp/1"
DATASET_FORMAT = "vamlab.dataset/1"


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one ``purpose`` under a run seed."""
    tag = zlib.crc32(purpose.encode("utf-8"))
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag])
    return np.random.Generator(np.random.Philox(seq))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GarnetSpec:
    n: int = 50
    m: int = 10
    rho: float = 0.5
    reward_bonus: float = 10.0
    discount: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError(f"n must be positive, got {self.n}")
        if not 1 <= self.m <= self.n:
            raise ConfigurationError(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigurationError(f"discount must lie in [0, 1), got {self.discount}")


@dataclass(frozen=True)
class TabularMRP:
    """Row-stochastic ``transition``, ``reward`` vector and ``discount``."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    spec: GarnetSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        P = _frozen(self.transition)
        r = _frozen(self.reward).ravel()
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        n = r.shape[0]
        if P.shape != (n, n):
            raise ConfigurationError(f"transition shape {P.shape} does not match {n} rewards")
        if np.any(P < 0.0) or np.any(P > 1.0):
            raise ConfigurationError("transition entries must lie in [0, 1]")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-9:
            raise ConfigurationError("transition rows must sum to 1")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigurationError(f"discount must lie in [0, 1), got {self.discount}")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    def to_dict(self) -> dict:
        return {
            "format": MRP_FORMAT,
            "n_states": self.n_states,
            "discount": self.discount,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "spec": asdict(self.spec) if self.spec is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TabularMRP:
        if d.get("format") != MRP_FORMAT:
            raise ConfigurationError(f"unexpected MRP format {d.get('format')!r}")
        spec = GarnetSpec(**d["spec"]) if d.get("spec") else None
        return cls(np.array(d["transition"]), np.array(d["reward"]), float(d["discount"]), spec)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> TabularMRP:
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_garnet(spec: GarnetSpec) -> TabularMRP:
    """Permutation base successor with mass ``rho`` plus ``m - 1`` distinct extras."""
    n, m, rho = spec.n, spec.m, spec.rho
    rng = stream(spec.seed, "garnet/structure")
    base = rng.permutation(n)
    P = np.zeros((n, n))
    if m == 1:
        P[np.arange(n), base] = 1.0
    else:
        extra_mass = (1.0 - rho) / (m - 1)
        for x in range(n):
            others = np.delete(np.arange(n), base[x])
            extras = rng.choice(others, size=m - 1, replace=False)
            P[x, extras] = extra_mass
            P[x, base[x]] = rho
    reward = stream(spec.seed, "garnet/reward").standard_normal(n)
    reward[0] += spec.reward_bonus
    return TabularMRP(P, reward, spec.discount, spec)


def bellman_operator(P, r, gamma: float, V) -> np.ndarray:
    """``r + gamma * P @ V``."""
    return np.asarray(r, dtype=np.float64) + gamma * (np.asarray(P) @ np.asarray(V, dtype=np.float64))


def exact_value(mrp: TabularMRP) -> np.ndarray:
    """Solve ``(I - gamma P) V = r``."""
    n = mrp.n_states
    A = np.eye(n) - mrp.discount * mrp.transition
    try:
        V = np.linalg.solve(A, mrp.reward)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular Bellman system: {exc}") from exc
    residual = np.max(np.abs(A @ V - mrp.reward)) if n else 0.0
    if not np.isfinite(residual) or residual >= 1e-8:
        raise NumericError(f"Bellman solve residual {residual:.3e} exceeds 1e-8")
    return V


def _sampling_cdf(P: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(P, axis=1)
    # pin the cdf to exactly 1 from each row's last positive entry onward so
    # zero-probability tail states can never be drawn through rounding
    for x in range(P.shape[0]):
        last = np.flatnonzero(P[x] > 0.0)[-1]
        cdf[x, last:] = 1.0
    return cdf


@dataclass(frozen=True)
class TransitionDataset:
    """Sampled state sequences ``(x0, x1, x2)`` from a uniform start."""

    x0: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    n_states: int
    seed: int | None = None

    def __post_init__(self):
        arrays = []
        for name in ("x0", "x1", "x2"):
            a = np.array(getattr(self, name), dtype=np.int64).ravel()
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrays.append(a)
        if not (arrays[0].shape == arrays[1].shape == arrays[2].shape):
            raise ConfigurationError("x0, x1, x2 must have equal length")
        if arrays[0].size == 0:
            raise ConfigurationError("dataset must be nonempty")
        for a in arrays:
            if a.min() < 0 or a.max() >= self.n_states:
                raise ConfigurationError("state index out of range")

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def horizon(self) -> int:
        """Number of transitions per sample (sequence length minus one)."""
        return 2

    def states(self, j: int) -> np.ndarray:
        return (self.x0, self.x1, self.x2)[j]

    @property
    def triples(self) -> np.ndarray:
        return np.stack([self.x0, self.x1, self.x2], axis=1)

    def start_counts(self) -> np.ndarray:
        return np.bincount(self.x0, minlength=self.n_states).astype(np.float64)

    def pair_counts(self, i: int = 0, j: int = 1) -> np.ndarray:
        """``C[a, b]`` = number of samples with ``x_i = a`` and ``x_j = b``."""
        return kernels.pair_counts(self.states(i), self.states(j), self.n_states)

    # cached sufficient statistics for the full-batch losses
    @cached_property
    def c0(self) -> np.ndarray:
        return self.start_counts()

    @cached_property
    def C01(self) -> np.ndarray:
        return self.pair_counts(0, 1)

    @cached_property
    def C02(self) -> np.ndarray:
        return self.pair_counts(0, 2)

    def step_counts(self, j: int) -> np.ndarray:
        """Counts of ``(x0, x_j)`` for ``j`` in 1..horizon."""
        if j == 1:
            return self.C01
        if j == 2:
            return self.C02
        raise ConfigurationError(f"step {j} outside dataset horizon {self.horizon}")

    def to_dict(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "n_states": self.n_states,
            "seed": self.seed,
            "triples": self.triples.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> TransitionDataset:
        if d.get("format") != DATASET_FORMAT:
            raise ConfigurationError(f"unexpected dataset format {d.get('format')!r}")
        t = np.array(d["triples"], dtype=np.int64).reshape(-1, 3)
        return cls(t[:, 0], t[:, 1], t[:, 2], int(d["n_states"]), d.get("seed"))


def sample_transitions(mrp: TabularMRP, N: int, seed: int) -> TransitionDataset:
    """Uniform ``x0``, then two steps of the true kernel."""
    if N < 1:
        raise ConfigurationError(f"need at least one sample, got N={N}")
    n = mrp.n_states
    cdf = _sampling_cdf(np.asarray(mrp.transition))
    x0 = stream(seed, "data/start").integers(0, n, size=N, dtype=np.int64)
    u = stream(seed, "data/steps").random((2, N))
    x1 = kernels.sample_next(cdf, x0, u[0])
    x2 = kernels.sample_next(cdf, x1, u[1])
    return TransitionDataset(x0, x1, x2, n, seed)
