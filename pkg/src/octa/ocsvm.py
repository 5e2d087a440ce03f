"""Linear nu-one-class SVM.

Dual problem solved here::

    min_a  1/2 || sum_i a_i z_i ||^2   s.t.  0 <= a_i <= 1/(nu N),  sum_i a_i = 1

with pairwise (SMO) updates. The primal weight ``w = sum_i a_i z_i`` is kept
explicitly, so each update costs O(N d). Decision value is ``w.z - rho``;
negative means anomaly, zero counts as normal.

Features are rescaled per dimension before fitting and at classification
time; the stored shift/scale/offset make the two consistent. Three modes:

``scale``        ``z / std``; keeps the origin where the encoder put it
``standardize``  ``(z - mean) / std + offset``; plain centering would put the
                 origin inside the data and collapse ``w`` to 0, hence ``offset``
``none``         raw features
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceError, OctaError, ShapeError

log = logging.getLogger(__name__)

NU_GRID = (0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
SUBSAMPLE_ABOVE = 300_000
SUBSAMPLE_TO = 100_000
SCALING_MODES = ("scale", "standardize", "none")


@dataclass
class DualSolution:
    alpha: np.ndarray
    rho: float
    violation: float
    iterations: int


def solve_dual(z: np.ndarray, nu: float, tol: float = 1e-4, max_iter: int = 1_000_000) -> DualSolution:
    """SMO on the nu-one-class dual with a linear kernel (float64)."""
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    if n < 2:
        raise ValueError("need at least two samples")
    if not 0 < nu <= 1:
        raise ValueError("nu must lie in (0, 1]")
    upper = 1.0 / (nu * n)
    alpha = np.zeros(n)
    # fill the first floor(nu N) coefficients to the bound, the remainder goes to the next one
    full = min(int(np.floor(nu * n)), n)
    alpha[:full] = upper
    if full < n:
        alpha[full] = max(0.0, 1.0 - full * upper)
    alpha /= alpha.sum()
    alpha = np.minimum(alpha, upper)
    w = alpha @ z
    grad = z @ w
    sq = np.einsum("ij,ij->i", z, z)
    eps_bound = 1e-12 * upper

    it = 0
    violation = np.inf
    while it < max_iter:
        can_up = alpha < upper - eps_bound
        can_down = alpha > eps_bound
        if not can_up.any() or not can_down.any():
            violation = 0.0
            break
        g_up = np.where(can_up, grad, np.inf)
        i = int(np.argmin(g_up))
        g_down = np.where(can_down, grad, -np.inf)
        violation = float(g_down.max() - grad[i])
        if violation < tol:
            break
        # second-order choice of the partner among violating candidates
        diff = grad - grad[i]
        curv = np.maximum(sq + sq[i] - 2.0 * (z @ z[i]), 1e-12)
        score = np.where(can_down & (diff > 0), diff * diff / curv, -np.inf)
        j = int(np.argmax(score))
        step = diff[j] / curv[j]
        step = min(step, upper - alpha[i], alpha[j])
        if step <= 0:
            violation = float(g_down.max() - grad[i])
            break
        alpha[i] += step
        alpha[j] -= step
        dw = step * (z[i] - z[j])
        w += dw
        grad += z @ dw
        it += 1
    if violation >= tol:
        raise ConvergenceError(f"one-class SVM did not converge in {max_iter} pair updates", violation)

    return DualSolution(alpha, _rho(grad, alpha, upper), violation, it)


def _rho(grad, alpha, upper):
    eps_bound = 1e-12 * upper
    free = (alpha > eps_bound) & (alpha < upper - eps_bound)
    if free.any():
        return float(grad[free].mean())
    at_upper = alpha >= upper - eps_bound
    # rho lies between the largest bounded and the smallest zero-weight gradient
    lo = grad[at_upper].max() if at_upper.any() else grad.min()
    hi = grad[~at_upper].min() if (~at_upper).any() else lo
    return float((lo + hi) / 2)


class OcsvmModel:
    kind = "ocsvm"

    def __init__(self, w, rho, nu, shift, scale, offset: float):
        self.w = np.asarray(w, dtype=np.float32)
        self.rho = np.float32(rho)
        self.nu = float(nu)
        self.shift = np.asarray(shift, dtype=np.float32)
        self.scale = np.asarray(scale, dtype=np.float32)
        self.offset = float(offset)
        self.solution: DualSolution | None = None
        self.n_train = 0

    def transform(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        if z.shape[-1] != len(self.w):
            raise ShapeError(f"expected {len(self.w)}-d features, got {z.shape[-1]}")
        return (z - self.shift) / self.scale + np.float32(self.offset)

    def decision(self, z) -> np.ndarray:
        return self.transform(z) @ self.w - self.rho

    def classify(self, z) -> np.ndarray:
        """1 for anomaly (strictly outside the boundary), 0 for normal."""
        return (self.decision(z) < 0).astype(np.uint8)

    def to_arrays(self):
        meta = {"nu": self.nu, "offset": self.offset, "n_train": self.n_train}
        return meta, {"w": self.w, "rho": np.array([self.rho]), "shift": self.shift, "scale": self.scale}

    @classmethod
    def from_arrays(cls, meta, arrays):
        m = cls(arrays["w"], arrays["rho"][0], meta["nu"], arrays["shift"], arrays["scale"], meta["offset"])
        m.n_train = meta.get("n_train", 0)
        return m


def fit(z, nu: float, offset: float = 2.0, scaling: str = "scale", tol: float = 1e-4,
        max_iter: int = 1_000_000, seed: int = 0) -> OcsvmModel:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise ShapeError("need an N x d feature matrix with N >= 2")
    if scaling not in SCALING_MODES:
        raise ValueError(f"scaling must be one of {SCALING_MODES}")
    if len(z) > SUBSAMPLE_ABOVE:
        idx = np.sort(np.random.default_rng(seed).choice(len(z), SUBSAMPLE_TO, replace=False))
        log.info("subsampling %d of %d embeddings for the SVM fit", SUBSAMPLE_TO, len(z))
        z = z[idx]
    d = z.shape[1]
    shift, scale = np.zeros(d), np.ones(d)
    if scaling != "none":
        sd = z.std(axis=0)
        scale = np.where(sd > 1e-8, sd, 1.0)
    if scaling == "standardize":
        shift = z.mean(axis=0)
    else:
        offset = 0.0
    model = OcsvmModel(np.zeros(d), 0.0, nu, shift, scale, offset)
    zs = model.transform(z).astype(np.float64)
    sol = solve_dual(zs, nu, tol=tol, max_iter=max_iter)
    model.w = (sol.alpha @ zs).astype(np.float32)
    # recompute rho in the same float32 arithmetic used by decision()
    g = model.transform(z) @ model.w
    model.rho = np.float32(_rho(g.astype(np.float64), sol.alpha, 1.0 / (nu * len(z))))
    model.solution = sol
    model.n_train = len(z)
    return model


def sweep_nu(z, score: Callable[[OcsvmModel], dict] | None = None, grid=NU_GRID, **fit_kwargs):
    """Fit one model per ``nu`` and score it.

    ``score`` maps a fitted model to a metrics dict (validation dice etc.).
    A failing grid point is recorded and the sweep continues. Returns
    ``(rows, models, chosen_nu)`` where the choice maximizes ``dice`` (the
    first successful value when nothing is scored).
    """
    rows, models = [], {}
    for nu in grid:
        try:
            model = fit(z, nu, **fit_kwargs)
        except (OctaError, ValueError) as exc:
            log.warning("nu=%g failed: %s", nu, exc)
            rows.append({"nu": nu, "status": f"failed: {exc}"})
            continue
        models[nu] = model
        row = {"nu": nu, "status": "ok", "train_anomalous_fraction": float(model.classify(z).mean())}
        if score is not None:
            row.update(score(model))
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise ConvergenceError("every nu in the sweep failed", float("nan"))
    chosen = max(ok, key=lambda r: r.get("dice", 0.0)) if score is not None else ok[0]
    return rows, models, chosen["nu"]


def classify(model: OcsvmModel, z) -> np.ndarray:
    return model.classify(z)
