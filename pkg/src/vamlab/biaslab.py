"""Exact-enumeration checks of the value-equivalence theory.

Everything here works on small tabular problems with a uniform start
distribution unless ``mu`` is given, and computes population quantities by
enumerating all transition sequences, never by sampling.

Two independent routes are provided for each minimizer: a closed-form
solve of the normal equations and a brute-force grid search over the raw
objective.  :func:`verification_report` runs them against each other.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .mdp import TabularMRP, exact_value
from .models import LowRankModel

# ---------------------------------------------------------------------------
# Lemma-2 functional


@dataclass(frozen=True)
class DiscreteFunctional:
    """Target ``g`` on a finite support weighted by ``mu``."""

    support: np.ndarray
    mu: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).ravel()
        g = np.array(self.g, dtype=np.float64).ravel()
        support = np.arange(g.size) if self.support is None else np.asarray(self.support).ravel()
        if not (mu.shape == g.shape == support.shape):
            raise ConfigurationError("support, mu and g must have equal length")
        if np.any(mu < 0.0) or abs(mu.sum() - 1.0) > 1e-12:
            raise ConfigurationError("mu must be nonnegative and sum to 1 within 1e-12")
        for name, a in (("support", support), ("mu", mu), ("g", g)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def uniform(cls, g) -> DiscreteFunctional:
        g = np.asarray(g, dtype=np.float64).ravel()
        return cls(np.arange(g.size), np.full(g.size, 1.0 / g.size), g)

    def mean(self, f=None) -> float:
        return float(self.mu @ (self.g if f is None else np.asarray(f, dtype=np.float64)))

    @property
    def variance(self) -> float:
        d = self.g - self.mean()
        return float(self.mu @ (d * d))


def lemma2_loss(f, functional: DiscreteFunctional) -> float:
    """``E[(f-g)^2] + E[f g] - E[f] E[g]`` under ``mu``."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != functional.g.size:
        raise ConfigurationError(f"f must have {functional.g.size} entries")
    mu, g = functional.mu, functional.g
    d = f - g
    Ef = f @ mu
    return (d * d) @ mu + (f * g) @ mu - Ef * functional.mean()


def lemma2_minimizer(functional: DiscreteFunctional) -> np.ndarray:
    """Solve ``2 diag(mu) f = mu (g + E g)`` on the weighted support.

    Points with zero weight do not enter the loss; they keep ``f = g``.
    """
    mu, g = functional.mu, functional.g
    f = g.copy()
    on = mu > 0.0
    H = np.diag(2.0 * mu[on])
    b = mu[on] * (g[on] + functional.mean())
    f[on] = np.linalg.solve(H, b)
    return f


@dataclass(frozen=True)
class DescentCheck:
    variance: float         # value the proof reports
    analytic_slope: float   # d/de L(g - e g) at e = 0
    fd_slope: float
    step: float             # e used for the descent test
    descends: bool


def lemma2_directional_derivative(functional: DiscreteFunctional, h: float = 1e-6) -> DescentCheck:
    var = functional.variance
    g = functional.g

    def along(e):
        return lemma2_loss(g - e * g, functional)

    fd = (along(h) - along(-h)) / (2.0 * h)
    # L(g - e g) = e^2 E[g^2] + (1 - e) Var: any e below Var / E[g^2] descends
    second = float(functional.mu @ (g * g))
    step = 1e-2 if second == 0.0 else min(1e-2, 0.5 * var / second)
    descends = var > 0.0 and step > 0.0 and along(step) < along(0.0)
    return DescentCheck(var, -var, fd, step, bool(descends))


# ---------------------------------------------------------------------------
# grid-search oracle


def grid_minimize(objective, center, radius: float = 2.0, step: float = 1e-3,
                  chunk: int = 1 << 20):
    """Exhaustive minimum of ``objective`` on a regular grid around ``center``.

    ``objective`` maps an ``(m, d)`` array of points to ``m`` values.  Up to
    two dimensions the grid is searched in full; in three or more a grid at
    ``100 * step`` spacing over the whole box is refined by a full grid at
    ``step`` spacing within one coarse cell of the coarse optimum.
    """
    center = np.asarray(center, dtype=np.float64).ravel()
    if center.size <= 2:
        return _full_grid(objective, center, radius, step, chunk)
    coarse = 100.0 * step
    best, _ = _full_grid(objective, center, radius, coarse, chunk)
    return _full_grid(objective, best, coarse, step, chunk)


def _full_grid(objective, center, radius, step, chunk):
    n_side = int(round(radius / step))
    axis = np.arange(-n_side, n_side + 1) * step
    d = center.size
    side = axis.size
    total = side**d
    best_val, best_idx = np.inf, 0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        coords = np.empty((idx.size, d))
        rem = idx
        for j in range(d - 1, -1, -1):
            coords[:, j] = axis[rem % side]
            rem = rem // side
        vals = objective(center + coords)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_idx = float(vals[i]), int(idx[i])
    point = np.empty(d)
    rem = best_idx
    for j in range(d - 1, -1, -1):
        point[j] = axis[rem % side]
        rem //= side
    return center + point, best_val


# ---------------------------------------------------------------------------
# MuZero population minimizer


def _start_weights(n: int, mu) -> np.ndarray:
    if mu is None:
        return np.full(n, 1.0 / n)
    mu = np.asarray(mu, dtype=np.float64).ravel()
    if mu.shape != (n,) or np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
        raise ConfigurationError("mu must be a distribution over the states")
    return mu


def bellman_backup(mrp: TabularMRP, V) -> np.ndarray:
    return mrp.reward + mrp.discount * (mrp.transition @ np.asarray(V, dtype=np.float64))


def target_moments_exact(mrp: TabularMRP, V_target):
    """First and second moments of ``r(x1) + gamma V_target(x2)`` given ``x0``.

    Enumerates every ``(x1, x2)`` pair explicitly.
    """
    P, r, gamma = mrp.transition, mrp.reward, mrp.discount
    Vt = np.asarray(V_target, dtype=np.float64)
    t = r[:, None] + gamma * Vt[None, :]                 # t[x1, x2]
    w = P[:, :, None] * P[None, :, :]                   # w[x0, x1, x2]
    m1 = np.einsum("abc,bc->a", w, t)
    m2 = np.einsum("abc,bc->a", w, t * t)
    return m1, m2


@dataclass(frozen=True)
class MinimizerResult:
    values: np.ndarray      # minimizer; NaN on excluded states
    backup: np.ndarray      # Bellman backup of V'
    excluded: tuple         # states never drawn as a model successor
    gap: np.ndarray         # values - backup, zero on excluded states

    @property
    def gap_norm(self) -> float:
        return float(np.linalg.norm(self.gap))


def muzero_population_minimizer(mrp: TabularMRP, V_prime, mu=None,
                                inject_fault: bool = False) -> MinimizerResult:
    """Minimize ``E[(V(x^1_hat) - r(x1) - gamma V'(x2))^2]`` over tabular ``V``.

    ``x^1_hat`` is the model's successor of ``x0`` drawn independently of the
    data successor ``x1``; the model is fixed to the true kernel.  The normal
    equations are diagonal: ``A[y] V[y] = b[y]`` with
    ``A[y] = sum_x0 mu(x0) p(y|x0)`` and ``b[y] = sum_x0 mu(x0) p(y|x0) E[target|x0]``.
    """
    P = mrp.transition
    n = mrp.n_states
    w = _start_weights(n, mu)
    Vp = np.asarray(V_prime, dtype=np.float64).ravel()
    m1, _ = target_moments_exact(mrp, Vp)
    A = w @ P
    b = (w * m1) @ P
    if inject_fault:
        # negative control: a corrupted normal-equation matrix
        A = A * 1.05
    reach = A > 0.0
    values = np.full(n, np.nan)
    values[reach] = b[reach] / A[reach]
    backup = bellman_backup(mrp, Vp)
    gap = np.where(reach, values - backup, 0.0)
    return MinimizerResult(values, backup, tuple(int(i) for i in np.flatnonzero(~reach)), gap)


def muzero_population_loss(mrp: TabularMRP, V_prime, V_hat, mu=None) -> np.ndarray:
    """Population loss at one or many tabular ``V_hat`` (rows of a 2-D array)."""
    P = mrp.transition
    w = _start_weights(mrp.n_states, mu)
    m1, m2 = target_moments_exact(mrp, V_prime)
    Vh = np.atleast_2d(np.asarray(V_hat, dtype=np.float64))
    wp = w[:, None] * P                                   # wp[x0, y]
    # sum_{x0,y} wp (V(y)^2 - 2 V(y) m1(x0) + m2(x0))
    return (Vh * Vh) @ wp.sum(axis=0) - 2.0 * Vh @ (wp.T @ m1) + w @ m2


def muzero_grid_minimizer(mrp: TabularMRP, V_prime, mu=None, radius: float = 2.0,
                          step: float = 1e-3):
    """Grid-search oracle for :func:`muzero_population_minimizer`, centered on the backup."""
    center = bellman_backup(mrp, V_prime)
    return grid_minimize(lambda X: muzero_population_loss(mrp, V_prime, X, mu),
                         center, radius, step)


# ---------------------------------------------------------------------------
# families of small MRPs


def two_state_uniform(reward=(1.0, 0.0), gamma: float = 0.9) -> TabularMRP:
    return TabularMRP(np.full((2, 2), 0.5), np.asarray(reward, dtype=np.float64), gamma)


def random_mrp(n: int, rng: np.random.Generator, gamma: float = 0.9,
               deterministic: bool = False) -> TabularMRP:
    if deterministic:
        P = np.zeros((n, n))
        P[np.arange(n), rng.integers(0, n, size=n)] = 1.0
    else:
        P = rng.dirichlet(np.ones(n), size=n)
    return TabularMRP(P, rng.standard_normal(n), gamma)


def value_variance(mrp: TabularMRP, V, mu=None) -> float:
    """``E_mu[Var(V(x') | x)]``."""
    P = mrp.transition
    V = np.asarray(V, dtype=np.float64)
    w = _start_weights(mrp.n_states, mu)
    mean = P @ V
    return float(w @ (P @ (V * V) - mean * mean))


@dataclass(frozen=True)
class SweepRow:
    scale: float
    variance: float
    bias_norm: float


def bias_vs_variance_sweep(scales=(0.0, 0.5, 1.0, 2.0, 4.0), gamma: float = 0.9) -> list[SweepRow]:
    """Two-state uniform MRPs with reward ``(s, 0)``, ``V' = V*``."""
    rows = []
    for s in scales:
        mrp = two_state_uniform((s, 0.0), gamma)
        V = exact_value(mrp)
        res = muzero_population_minimizer(mrp, V)
        rows.append(SweepRow(float(s), value_variance(mrp, V), res.gap_norm))
    return rows


# ---------------------------------------------------------------------------
# IterVAML floor


def population_itervaml_loss(mrp: TabularMRP, P_hat, V, mu=None) -> float:
    """``E_mu E_p[((P_hat V)(x) - V(x'))^2]``."""
    P = mrp.transition
    V = np.asarray(V, dtype=np.float64)
    w = _start_weights(mrp.n_states, mu)
    pred = np.asarray(P_hat, dtype=np.float64) @ V
    diff = pred[:, None] - V[None, :]
    return float(w @ np.sum(P * diff * diff, axis=1))


def predictor_itervaml_loss(mrp: TabularMRP, predictor, V, mu=None) -> float:
    """Same loss for a predictor given directly in value space."""
    P = mrp.transition
    V = np.asarray(V, dtype=np.float64)
    w = _start_weights(mrp.n_states, mu)
    diff = np.asarray(predictor, dtype=np.float64)[:, None] - V[None, :]
    return float(w @ np.sum(P * diff * diff, axis=1))


@dataclass(frozen=True)
class FloorCheck:
    floor: float
    achieved: float
    excess: float


def itervaml_floor_check(mrp: TabularMRP, V, mu=None) -> FloorCheck:
    floor = value_variance(mrp, V, mu)
    achieved = predictor_itervaml_loss(mrp, mrp.transition @ np.asarray(V, dtype=np.float64), V, mu)
    return FloorCheck(floor, achieved, achieved - floor)


# ---------------------------------------------------------------------------
# model-loss equivalence


def muzero_model_objectives(mrp: TabularMRP, P_hats, V_hat, V_target, mu=None):
    """Population MuZero model loss and the two-step comparison objective.

    ``P_hats`` is a stack ``(m, n, n)``.  Returns ``(muzero, comparison,
    literal)`` where ``comparison`` is ``E_mu[((P_hat V_hat)(x) - (P T V_target)(x))^2]``
    and ``literal`` uses ``(T V_target)(x)`` in place of ``(P T V_target)(x)``.
    """
    w = _start_weights(mrp.n_states, mu)
    m1, m2 = target_moments_exact(mrp, V_target)
    pred = np.asarray(P_hats) @ np.asarray(V_hat, dtype=np.float64)   # (m, n)
    muzero = (pred * pred - 2.0 * pred * m1 + m2) @ w
    comparison = ((pred - m1) ** 2) @ w
    literal = ((pred - bellman_backup(mrp, V_target)) ** 2) @ w
    return muzero, comparison, literal


def _softmax_stack(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class EquivalenceCheck:
    same_argmin: bool
    offset_spread: float    # max - min of (muzero - comparison) over the grid
    literal_same_argmin: bool
    grid_points: int


def model_loss_equivalence(mrp: TabularMRP, V_hat, V_target, Phi, radius: float = 3.0,
                           step: float = 0.1, mu=None) -> EquivalenceCheck:
    """Grid over ``Psi`` (rank one, one coordinate per state) for ``softmax(Phi Psi^T)``."""
    Phi = np.asarray(Phi, dtype=np.float64).reshape(mrp.n_states, 1)
    axis = np.arange(-radius, radius + step / 2, step)
    grid = np.array(list(itertools.product(axis, repeat=mrp.n_states)))
    P_hats = _softmax_stack(Phi[None, :, :] * grid[:, None, :])       # (m, n, n)
    mz, cmp_, lit = muzero_model_objectives(mrp, P_hats, V_hat, V_target, mu)
    diff = mz - cmp_
    return EquivalenceCheck(
        bool(np.argmin(mz) == np.argmin(cmp_)),
        float(diff.max() - diff.min()),
        bool(np.argmin(mz) == np.argmin(lit)),
        int(grid.shape[0]),
    )


# ---------------------------------------------------------------------------
# report


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "measured": float(self.measured),
                "tolerance": float(self.tolerance), "detail": self.detail}


@dataclass
class VerificationReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, passed, measured, tolerance, detail=""):
        self.checks.append(Check(name, bool(passed), float(measured), float(tolerance), detail))

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "n_checks": len(self.checks),
                "n_failed": sum(not c.passed for c in self.checks),
                "checks": [c.to_dict() for c in self.checks]}

    def render(self) -> str:
        width = max(len(c.name) for c in self.checks) if self.checks else 0
        lines = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"{tag}  {c.name:<{width}}  measured={c.measured:.3e}  tol={c.tolerance:.1e}"
                         + (f"  {c.detail}" if c.detail else ""))
        failed = sum(not c.passed for c in self.checks)
        lines.append(f"{len(self.checks) - failed}/{len(self.checks)} checks passed")
        return "\n".join(lines)


def _lemma2_checks(report, rng, trials):
    worst_slope = 0.0
    wrong = 0
    for _ in range(trials):
        size = int(rng.integers(1, 21))
        mu = rng.dirichlet(np.ones(size))
        g = rng.standard_normal(size) * rng.uniform(0.1, 3.0)
        if rng.random() < 0.1:
            g[:] = g[0]
        fn = DiscreteFunctional(np.arange(size), mu, g)
        d = lemma2_directional_derivative(fn)
        worst_slope = max(worst_slope, abs(d.fd_slope + d.variance))
        gap = lemma2_loss(g, fn) - lemma2_loss(lemma2_minimizer(fn), fn)
        if (fn.variance > 1e-9) != (gap > 0.0) and not (fn.variance <= 1e-9 and gap <= 1e-12):
            wrong += 1
    report.add("lemma2.slope_equals_minus_variance", worst_slope <= 1e-6, worst_slope, 1e-6,
               f"{trials} random functionals")
    report.add("lemma2.g_minimizer_iff_constant", wrong == 0, wrong, 0, f"{trials} random functionals")

    fn = DiscreteFunctional.uniform([0.0, 1.0])
    f_star = lemma2_minimizer(fn)
    f_grid, _ = grid_minimize(lambda X: lemma2_loss(X, fn), f_star, 2.0, 1e-3)
    dev = float(np.max(np.abs(f_grid - f_star)))
    report.add("lemma2.minimizer_matches_grid", dev <= 2e-3, dev, 2e-3,
               f"f*={np.round(f_star, 6).tolist()}")


def _muzero_checks(report, rng, inject_fault, deterministic_trials):
    worst = 0.0
    cases = [("2-state uniform", two_state_uniform())]
    cases += [(f"3-state random #{i}", random_mrp(3, rng)) for i in range(3)]
    for label, mrp in cases:
        V = exact_value(mrp)
        res = muzero_population_minimizer(mrp, V, inject_fault=inject_fault)
        grid, _ = muzero_grid_minimizer(mrp, V)
        dev = float(np.max(np.abs(res.values - grid)))
        worst = max(worst, dev)
        report.add(f"prop2.closed_form_vs_grid[{label}]", dev <= 2e-3 and res.gap_norm > 0.0,
                   dev, 2e-3, f"gap_norm={res.gap_norm:.6g}")

    det_worst = 0.0
    for _ in range(deterministic_trials):
        mrp = random_mrp(int(rng.integers(2, 8)), rng, deterministic=True)
        V = rng.standard_normal(mrp.n_states)
        res = muzero_population_minimizer(mrp, V, inject_fault=inject_fault)
        det_worst = max(det_worst, float(np.max(np.abs(res.gap))))
    report.add("prop2.deterministic_kernel_no_bias", det_worst < 1e-9, det_worst, 1e-9,
               f"{deterministic_trials} random deterministic MRPs")

    const_worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 6))
        base = random_mrp(n, rng)
        mrp = TabularMRP(base.transition, np.full(n, rng.standard_normal()), base.discount)
        res = muzero_population_minimizer(mrp, np.full(n, rng.standard_normal()),
                                          inject_fault=inject_fault)
        const_worst = max(const_worst, float(np.max(np.abs(res.gap))))
    report.add("prop2.constant_target_no_bias", const_worst < 1e-9, const_worst, 1e-9,
               "constant reward and constant V'")

    rows = bias_vs_variance_sweep()
    diffs = np.diff([r.bias_norm for r in rows])
    ok = rows[0].bias_norm == 0.0 and rows[0].variance == 0.0 and np.all(diffs >= -1e-9)
    report.add("prop2.bias_monotone_in_variance", ok, float(diffs.min()), -1e-9,
               "bias=" + ",".join(f"{r.bias_norm:.4g}" for r in rows))


def _floor_checks(report, rng, n_models):
    mrp = two_state_uniform()
    fc = itervaml_floor_check(mrp, np.array([0.0, 1.0]))
    report.add("prop1.two_state_floor", abs(fc.floor - 0.25) <= 1e-12 and abs(fc.excess) <= 1e-12,
               abs(fc.floor - 0.25), 1e-12)

    mrp = random_mrp(10, rng)
    V = rng.standard_normal(10)
    fc = itervaml_floor_check(mrp, V)
    report.add("prop1.floor_attained", abs(fc.excess) <= 1e-12, abs(fc.excess), 1e-12)
    lowest = np.inf
    for i in range(n_models):
        model = LowRankModel.random(10, int(rng.integers(1, 11)), seed=i,
                                    init_scale=float(rng.uniform(0.1, 3.0)))
        lowest = min(lowest, population_itervaml_loss(mrp, model.probs(), V) - fc.floor)
    report.add("prop1.no_model_below_floor", lowest >= -1e-12, lowest, -1e-12,
               f"{n_models} random low-rank models")


def _equivalence_checks(report, rng):
    for i in range(2):
        mrp = random_mrp(3, rng)
        V_hat = rng.standard_normal(3)
        V_target = rng.standard_normal(3)
        eq = model_loss_equivalence(mrp, V_hat, V_target, rng.standard_normal(3))
        report.add(f"a2.model_loss_equivalence[{i}]", eq.same_argmin and eq.offset_spread < 1e-9,
                   eq.offset_spread, 1e-9,
                   f"{eq.grid_points} grid points; literal-form same argmin: {eq.literal_same_argmin}")


def verification_report(seed: int = 0, inject_fault: bool = False, trials: int = 1000,
                        n_models: int = 100) -> VerificationReport:
    rng = np.random.default_rng(seed)
    report = VerificationReport()
    _lemma2_checks(report, rng, trials)
    _muzero_checks(report, rng, inject_fault, trials)
    _floor_checks(report, rng, n_models)
    _equivalence_checks(report, rng)
    return report


__all__ = [
    "DiscreteFunctional", "lemma2_loss", "lemma2_minimizer", "lemma2_directional_derivative",
    "grid_minimize", "muzero_population_minimizer", "muzero_population_loss",
    "muzero_grid_minimizer", "bias_vs_variance_sweep", "itervaml_floor_check",
    "population_itervaml_loss", "model_loss_equivalence", "verification_report",
]
