"""Random intercept + slope linear mixed model fitted by maximum likelihood.

Model, for group i and observation j:

    y_ij = b0 + b1 * x_ij + g0_i + g1_i * x_ij + e_ij,
    (g0_i, g1_i) ~ N(0, D),  e_ij ~ N(0, s2)

with a full 2x2 covariance D. Fitting uses ECME: an EM update of (D, s2)
from the posterior moments of the random effects, then the exact GLS
maximizer for the fixed effects. Every per-group quantity reduces to 2x2
algebra through Z' V^-1 = (S D + s2 I)^-1 Z' with S = Z'Z.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import special

from .volume import PathLike

Z975 = 1.959963984540054


class SingularDesignError(ValueError):
    pass


@dataclass
class LmmFit:
    beta: np.ndarray  # (intercept, slope)
    cov_re: np.ndarray  # 2x2 random-effect covariance
    sigma2: float
    std_err: np.ndarray
    z: np.ndarray
    p_values: np.ndarray
    ci: np.ndarray  # (2, 2): rows = coefficients, cols = lower/upper
    loglik: float
    converged: bool
    n_iter: int
    n_groups: int
    n_obs: int
    loglik_trace: List[float] = field(default_factory=list)

    @property
    def beta0(self) -> float:
        return float(self.beta[0])

    @property
    def beta1(self) -> float:
        return float(self.beta[1])

    def table(self) -> List[dict]:
        rows = []
        for k, name in enumerate(("intercept", "latent")):
            rows.append({
                "term": name,
                "coef": float(self.beta[k]),
                "std_err": float(self.std_err[k]),
                "z": float(self.z[k]),
                "p": float(self.p_values[k]),
                "ci_low": float(self.ci[k, 0]),
                "ci_high": float(self.ci[k, 1]),
            })
        return rows


def _prepare(groups: Sequence[Sequence[Tuple[float, float]]]):
    if len(groups) < 3:
        raise ValueError("need at least 3 groups")
    xs, ys = [], []
    for g in groups:
        arr = np.asarray(g, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
            raise ValueError("each group needs at least 2 (x, y) points")
        xs.append(arr[:, 0])
        ys.append(arr[:, 1])
    # sufficient statistics per group: S = Z'Z, Z'y, y'y, n
    S = np.array([[[x.size, x.sum()], [x.sum(), x @ x]] for x in xs])
    Zy = np.array([[y.sum(), x @ y] for x, y in zip(xs, ys)])
    yy = np.array([y @ y for y in ys])
    n = np.array([x.size for x in xs], dtype=np.float64)
    return S, Zy, yy, n


def _loglik_parts(S, Zy, yy, n, beta, D, s2):
    eye = np.eye(2)
    A = np.linalg.inv(S @ D + s2 * eye)  # (m, 2, 2)
    t = Zy - S @ beta  # Z'r
    rr = yy - 2.0 * Zy @ beta + np.einsum("i,mij,j->m", beta, S, beta)  # r'r
    At = np.einsum("mij,mj->mi", A, t)
    quad = (rr - np.einsum("mi,ij,mj->m", t, D, At)) / s2
    _, logdet_small = np.linalg.slogdet(s2 * eye + D @ S)
    logdet = (n - 2.0) * math.log(s2) + logdet_small
    ll = -0.5 * float(np.sum(n * math.log(2 * math.pi) + logdet + quad))
    return ll, A, t, rr, At


def lmm_fit(
    groups: Sequence[Sequence[Tuple[float, float]]],
    max_iter: int = 500,
    tol: float = 1e-8,
) -> LmmFit:
    """Maximum-likelihood random intercept and slope model, one group per list."""
    S, Zy, yy, n = _prepare(groups)
    m, N = S.shape[0], float(n.sum())
    XtX = S.sum(axis=0)
    if abs(np.linalg.det(XtX)) <= 1e-12 * max(1.0, np.abs(XtX).max()) ** 2:
        raise SingularDesignError("design is singular: x has no spread")
    beta = np.linalg.solve(XtX, Zy.sum(axis=0))
    resid_var = max(float(yy.sum() - Zy.sum(axis=0) @ beta) / N, 0.0)
    scale = max(float(yy.sum() / N - (Zy.sum(axis=0)[0] / N) ** 2), 1e-300)
    floor = 1e-14 * scale
    s2 = max(resid_var, floor)
    D = np.diag([s2, s2 / max(float(XtX[1, 1] / N), 1e-12)]) * 0.5
    eye = np.eye(2)

    ll, A, t, rr, At = _loglik_parts(S, Zy, yy, n, beta, D, s2)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # E-step: posterior mean and covariance of the random effects
        b_hat = At @ D.T  # (m, 2): D A t
        C = D - np.einsum("ij,mjk,mkl,lq->miq", D, A, S, D)
        # CM-step 1: covariance parameters
        D_new = (np.einsum("mi,mj->ij", b_hat, b_hat) + C.sum(axis=0)) / m
        D_new = 0.5 * (D_new + D_new.T)
        w, v = np.linalg.eigh(D_new)
        D_new = (v * np.clip(w, 0.0, None)) @ v.T
        # ||r - Z b||^2 + tr(Z C Z') per group
        sse = rr - 2.0 * np.einsum("mi,mi->m", b_hat, t) + np.einsum("mi,mij,mj->m", b_hat, S, b_hat)
        sse += np.einsum("mij,mji->m", S, C)
        s2_new = max(float(sse.sum() / N), floor)
        # CM-step 2: GLS fixed effects under the new covariance
        A_new = np.linalg.inv(S @ D_new + s2_new * eye)
        info = np.einsum("mij,mjk->ik", A_new, S)
        rhs = np.einsum("mij,mj->i", A_new, Zy)
        beta_new = np.linalg.solve(info, rhs)
        ll_new, A, t, rr, At = _loglik_parts(S, Zy, yy, n, beta_new, D_new, s2_new)
        beta, D, s2 = beta_new, D_new, s2_new
        trace.append(ll_new)
        if abs(ll_new - ll) < tol:
            ll = ll_new
            converged = True
            break
        ll = ll_new

    info = np.einsum("mij,mjk->ik", A, S)
    cov_beta = np.linalg.inv(0.5 * (info + info.T))
    se = np.sqrt(np.clip(np.diag(cov_beta), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.copysign(np.inf, beta))
    p = special.erfc(np.abs(z) / math.sqrt(2.0))
    ci = np.stack([beta - Z975 * se, beta + Z975 * se], axis=1)
    return LmmFit(beta, D, float(s2), se, z, p, ci, float(ll), converged, it, m, int(N), trace)


def groups_from_curves(curves: Dict[str, List[tuple]]) -> List[List[tuple]]:
    """Dictionary image_id -> [(x, y), ...] to an ordered list of groups."""
    return [curves[k] for k in sorted(curves)]


LMM_COLUMNS = ["model", "term", "Coef.", "Std.Err.", "z", "P>|z|", "[0.025", "0.975]"]


def write_lmm_csv(fits: Dict[str, LmmFit], path: PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LMM_COLUMNS)
        for name, fit in fits.items():
            for row in fit.table():
                w.writerow([name, row["term"], repr(row["coef"]), repr(row["std_err"]), repr(row["z"]),
                            repr(row["p"]), repr(row["ci_low"]), repr(row["ci_high"])])
    return path
