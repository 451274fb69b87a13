"""Multivariate linear mixed-effects regression with Kronecker-structured covariance.

Per patient i the latent response Z_i (m_i x d) follows

    Z_i = X_i B + T_i U_i + E_i,
    vec(U_i) ~ N(0, Phi),   vec(E_i) ~ N(0, Sigma kron I_{m_i}),

with column-major vec throughout. Phi and Sigma are diagonal and optimized
over their logs; B is profiled out via generalized least squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import optim
from .errors import ConditioningError, IngestionError, ShapeError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)


def vec(a: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.ravel(a, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.reshape(v, (rows, cols), order="F")


# ---------------------------------------------------------------------------
# model specification and design matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Which fixed and random effects the latent (or sum-score) model carries.

    Fixed-effect columns, in order: optional intercept; one max(0, dt) column
    per treatment in ``treatments`` (dt = time minus switch time, active only
    for patients who switched to that treatment); age at visit; the named
    patient-level covariates; then, if ``age_interactions``, age times each
    switch column and age times each covariate. Covariates and age are
    z-scored with training-cohort statistics; switch columns never are.

    Random-effect columns: intercept, min(0, dt) pre-switch slope and
    max(0, dt) post-switch slope.
    """

    covariates: tuple[str, ...] = ()
    treatments: tuple[str, ...] = ("A",)
    include_age: bool = True
    age_interactions: bool = True
    intercept: bool = False
    random_intercept: bool = True
    random_pre_slope: bool = True
    random_post_slope: bool = True
    standardize: bool = True

    @property
    def n_random(self) -> int:
        return int(self.random_intercept) + int(self.random_pre_slope) + int(self.random_post_slope)

    def fixed_labels(self) -> tuple[str, ...]:
        labels = []
        if self.intercept:
            labels.append("intercept")
        labels += [f"switch:{tr}" for tr in self.treatments]
        if self.include_age:
            labels.append("age")
        labels += [f"cov:{c}" for c in self.covariates]
        if self.age_interactions:
            labels += [f"age*switch:{tr}" for tr in self.treatments]
            labels += [f"age*cov:{c}" for c in self.covariates]
        return tuple(labels)

    def random_labels(self) -> tuple[str, ...]:
        labels = []
        if self.random_intercept:
            labels.append("re:intercept")
        if self.random_pre_slope:
            labels.append("re:pre_switch")
        if self.random_post_slope:
            labels.append("re:post_switch")
        return tuple(labels)


@dataclass(frozen=True)
class DesignPair:
    """Fixed and random design matrices for one patient on one time grid."""

    X: np.ndarray       # (m, p)
    T: np.ndarray       # (m, q)
    times: np.ndarray   # (m,) visit times in years
    dt: np.ndarray      # (m,) time relative to the switch


def compute_standardization(patients, spec: ModelSpec) -> dict[str, tuple[float, float]]:
    """Training-cohort mean/sd per standardized column, over visit rows."""
    stats: dict[str, tuple[float, float]] = {}
    if not spec.standardize:
        return stats
    cols: dict[str, list] = {}
    if spec.include_age:
        cols["age"] = []
    for c in spec.covariates:
        cols[f"cov:{c}"] = []
    for pat in patients:
        for t in pat.visits:
            if spec.include_age:
                cols["age"].append(pat.baseline_age + t)
            for c in spec.covariates:
                if c not in pat.covariates:
                    raise IngestionError(f"patient {pat.pid}: missing covariate {c!r}")
                cols[f"cov:{c}"].append(pat.covariates[c])
    for name, vals in cols.items():
        arr = np.asarray(vals, dtype=float)
        sd = float(arr.std())
        stats[name] = (float(arr.mean()), sd if sd > 1e-12 else 1.0)
    return stats


def _zscore(values: np.ndarray, name: str, stats) -> np.ndarray:
    if name not in stats:
        return values
    mean, sd = stats[name]
    return (values - mean) / sd


def build_design(patient, spec: ModelSpec, stats=None, times=None,
                 counterfactual: bool = False) -> DesignPair:
    """Design matrices for one patient at its visit times (or a custom grid).

    With ``counterfactual=True`` the post-switch columns are zeroed and the
    pre-switch slope extends linearly through the whole grid, producing the
    no-switch scenario. Patients without a recorded switch have
    ``t_switch = +inf``; all switch-derived columns vanish for them.
    """
    stats = stats or {}
    t = np.asarray(patient.visits if times is None else times, dtype=float)
    if t.size < 1:
        raise ValidationError(f"patient {patient.pid}: needs at least one visit")
    has_switch = np.isfinite(patient.t_switch)
    dt = t - patient.t_switch if has_switch else np.full_like(t, -np.inf)
    post = np.maximum(0.0, dt) if has_switch else np.zeros_like(t)
    pre = np.minimum(0.0, dt) if has_switch else np.zeros_like(t)
    if counterfactual:
        post = np.zeros_like(t)
        pre = dt.copy() if has_switch else np.zeros_like(t)

    age = _zscore(patient.baseline_age + t, "age", stats)
    cols = []
    for label in spec.fixed_labels():
        if label == "intercept":
            cols.append(np.ones_like(t))
        elif label.startswith("switch:"):
            tr = label.split(":", 1)[1]
            cols.append(post if patient.switch_to == tr else np.zeros_like(t))
        elif label == "age":
            cols.append(age)
        elif label.startswith("cov:"):
            name = label.split(":", 1)[1]
            if name not in patient.covariates:
                raise IngestionError(f"patient {patient.pid}: missing covariate {name!r}")
            vals = np.full_like(t, float(patient.covariates[name]))
            cols.append(_zscore(vals, label, stats))
        elif label.startswith("age*switch:"):
            tr = label.split(":", 1)[1]
            cols.append(age * (post if patient.switch_to == tr else np.zeros_like(t)))
        elif label.startswith("age*cov:"):
            name = label.split(":", 1)[1]
            vals = np.full_like(t, float(patient.covariates[name]))
            cols.append(age * _zscore(vals, "cov:" + name, stats))
        else:
            raise ValidationError(f"unknown design label {label!r}")
    X = np.column_stack(cols) if cols else np.zeros((t.size, 0))

    rcols = []
    if spec.random_intercept:
        rcols.append(np.ones_like(t))
    if spec.random_pre_slope:
        rcols.append(pre)
    if spec.random_post_slope:
        rcols.append(post)
    T = np.column_stack(rcols) if rcols else np.zeros((t.size, 0))
    return DesignPair(X, T, t, dt)


def block_columns(labels, block: str) -> list[int]:
    """Column indices belonging to a named covariate block.

    ``switch`` selects the switch columns plus their age interactions;
    a covariate name selects its main column plus its age interaction;
    ``knockoff`` selects appended knockoff columns; any exact label matches
    itself.
    """
    idx = []
    for i, lab in enumerate(labels):
        if block == "switch" and (lab.startswith("switch:") or lab.startswith("age*switch:")):
            idx.append(i)
        elif block == "knockoff" and lab.startswith("knockoff:"):
            idx.append(i)
        elif lab == block or lab == f"cov:{block}" or lab == f"age*cov:{block}":
            idx.append(i)
    if not idx:
        raise ValidationError(f"block {block!r} matches no design column in {labels}")
    return idx


def drop_columns(design: DesignPair, idx) -> DesignPair:
    keep = [j for j in range(design.X.shape[1]) if j not in set(idx)]
    return replace(design, X=design.X[:, keep])


def augment_fixed(design: DesignPair, W: np.ndarray) -> DesignPair:
    if W.shape[0] != design.X.shape[0]:
        raise ShapeError("knockoff rows do not match design rows")
    return replace(design, X=np.column_stack([design.X, W]))


def augment_random(design: DesignPair, W: np.ndarray) -> DesignPair:
    if W.shape[0] != design.T.shape[0]:
        raise ShapeError("knockoff rows do not match design rows")
    return replace(design, T=np.column_stack([design.T, W]))


# ---------------------------------------------------------------------------
# parameters and data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixedModelParams:
    """Fixed effects plus log-diagonals of the two covariance matrices."""

    B: np.ndarray          # (p, d)
    log_phi: np.ndarray    # (q*d,)
    log_sigma: np.ndarray  # (d,)

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.log_phi)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


@dataclass
class MixedModelData:
    """Per-patient designs and latent responses, in fixed patient order."""

    designs: list[DesignPair]
    Z: list[np.ndarray]
    pids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.designs) != len(self.Z):
            raise ShapeError("designs and responses must align")
        if not self.designs:
            raise ValidationError("need at least one patient")
        for dp, z in zip(self.designs, self.Z):
            if z.shape[0] != dp.X.shape[0]:
                raise ShapeError("response rows do not match design rows")
        if not self.pids:
            self.pids = [str(i) for i in range(len(self.designs))]

    @property
    def d(self) -> int:
        return self.Z[0].shape[1]

    @property
    def p(self) -> int:
        return self.designs[0].X.shape[1]

    @property
    def q(self) -> int:
        return self.designs[0].T.shape[1]


class CompiledData:
    """Kronecker-expanded designs, built once and reused across evaluations."""

    def __init__(self, data: MixedModelData):
        d = data.d
        eye = np.eye(d)
        self.d = d
        self.p = data.p
        self.q = data.q
        self.m = [dp.X.shape[0] for dp in data.designs]
        self.Xk = [np.kron(eye, dp.X) for dp in data.designs]
        self.Tk = [np.kron(eye, dp.T) for dp in data.designs]
        self.z = [vec(zi) for zi in data.Z]
        self.n_rows = sum(self.m)


def compile_data(data: MixedModelData) -> CompiledData:
    return CompiledData(data)


def _as_diag(mat_or_diag, size: int, name: str) -> np.ndarray:
    a = np.asarray(mat_or_diag, dtype=float)
    if a.ndim == 1:
        if a.shape[0] != size:
            raise ShapeError(f"{name} diagonal has length {a.shape[0]}, expected {size}")
        return a
    if a.shape != (size, size):
        raise ShapeError(f"{name} has shape {a.shape}, expected ({size}, {size})")
    if not np.allclose(a, np.diag(np.diag(a))):
        raise ValidationError(f"{name} must be diagonal")
    return np.diag(a).copy()


def _chol(C: np.ndarray, context: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(C)[0]) if C.size else 0.0
        raise ConditioningError(f"Cholesky failed in {context}", smallest)


def marginal_covariance(T: np.ndarray, phi, sigma) -> tuple[np.ndarray, np.ndarray, float]:
    """Marginal covariance of vec(Z_i), its inverse (the precision) and log det of the precision.

    cov = (I_d kron T) Phi (I_d kron T)' + Sigma kron I_m, inverted via Cholesky.
    """
    m, q = T.shape
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 2:
        phi = _as_diag(phi, phi.shape[0], "Phi")
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        sigma = _as_diag(sigma, sigma.shape[0], "Sigma")
    d = sigma.shape[0]
    if phi.shape[0] != q * d:
        raise ShapeError(f"Phi diagonal has length {phi.shape[0]}, expected q*d = {q * d}")
    if (phi < 0).any() or (sigma <= 0).any():
        raise ValidationError("variance parameters must be positive")
    Tk = np.kron(np.eye(d), T)
    cov = (Tk * phi) @ Tk.T
    cov[np.diag_indices_from(cov)] += np.repeat(sigma, m)
    L = _chol(cov, "marginal covariance")
    logdet_cov = 2.0 * float(np.sum(np.log(np.diag(L))))
    V = cho_solve((L, True), np.eye(m * d))
    return cov, V, -logdet_cov


def _patient_cov_chol(Tk: np.ndarray, phi: np.ndarray, sigma: np.ndarray, m: int):
    C = (Tk * phi) @ Tk.T
    C[np.diag_indices_from(C)] += np.repeat(sigma, m)
    if not np.isfinite(C).all():
        raise ConditioningError("non-finite marginal covariance (variance overflow)")
    L = _chol(C, "marginal covariance")
    logdet_v = -2.0 * float(np.sum(np.log(np.diag(L))))
    V = cho_solve((L, True), np.eye(C.shape[0]))
    return V, logdet_v


# ---------------------------------------------------------------------------
# likelihoods, BLUE, BLUP
# ---------------------------------------------------------------------------

def loglik_ml(params: MixedModelParams, data: MixedModelData) -> float:
    """Gaussian marginal log-likelihood at explicit fixed effects B."""
    comp = compile_data(data)
    phi, sigma = params.phi, params.sigma
    vb = vec(params.B)
    ll = 0.0
    for Xk, Tk, z, m in zip(comp.Xk, comp.Tk, comp.z, comp.m):
        V, logdet_v = _patient_cov_chol(Tk, phi, sigma, m)
        r = z - Xk @ vb
        ll += 0.5 * (logdet_v - float(r @ V @ r) - m * comp.d * LOG_2PI)
    return ll


def blue(phi, sigma, data: MixedModelData) -> np.ndarray:
    """Generalized-least-squares estimate of the fixed effects, solved via Cholesky."""
    comp = compile_data(data)
    phi = np.asarray(phi, float) if np.asarray(phi).ndim == 1 else _as_diag(phi, comp.q * comp.d, "Phi")
    sigma = np.asarray(sigma, float) if np.asarray(sigma).ndim == 1 else _as_diag(sigma, comp.d, "Sigma")
    return _blue_compiled(comp, phi, sigma)[0]


def _blue_compiled(comp: CompiledData, phi, sigma):
    pd_ = comp.p * comp.d
    M = np.zeros((pd_, pd_))
    rhs = np.zeros(pd_)
    Vs = []
    for Xk, Tk, z, m in zip(comp.Xk, comp.Tk, comp.z, comp.m):
        V, logdet_v = _patient_cov_chol(Tk, phi, sigma, m)
        Vs.append((V, logdet_v))
        VX = V @ Xk
        M += Xk.T @ VX
        rhs += VX.T @ z
    if pd_ == 0:
        return np.zeros((0, comp.d)), Vs, np.zeros((0, 0)), 0.0
    LM = _chol(M, "fixed-effect normal equations")
    vb = cho_solve((LM, True), rhs)
    logdet_m = 2.0 * float(np.sum(np.log(np.diag(LM))))
    return unvec(vb, comp.p, comp.d), Vs, LM, logdet_m


def blup(B: np.ndarray, phi, sigma, data: MixedModelData) -> list[np.ndarray]:
    """Best linear unbiased predictor of each patient's random effects."""
    comp = compile_data(data)
    vb = vec(B)
    out = []
    for Xk, Tk, z, m in zip(comp.Xk, comp.Tk, comp.z, comp.m):
        V, _ = _patient_cov_chol(Tk, np.asarray(phi, float), np.asarray(sigma, float), m)
        u = np.asarray(phi, float) * (Tk.T @ (V @ (z - Xk @ vb)))
        out.append(unvec(u, comp.q, comp.d))
    return out


def loglik_reml(phi, sigma, data: MixedModelData) -> float:
    """Restricted log-likelihood with the GLS fixed effects profiled in.

    Uses the classical error-contrast form: the per-patient Gaussian terms at
    B-hat, minus half the log determinant of the pooled normal-equation
    matrix, with (sum_i m_i - p) d log(2 pi) as the constant.
    """
    comp = compile_data(data)
    value, _ = _criterion_value_grad_compiled(
        comp, np.log(np.asarray(phi, float)), np.log(np.asarray(sigma, float)),
        method="REML", want_grad=False)
    return value


def criterion_value_grad(log_phi, log_sigma, data: MixedModelData, method: str = "ML"):
    """Profiled criterion (ML or REML) and its gradient w.r.t. the log-variances."""
    comp = compile_data(data)
    return _criterion_value_grad_compiled(comp, np.asarray(log_phi, float),
                                          np.asarray(log_sigma, float), method, want_grad=True)


def _criterion_value_grad_compiled(comp: CompiledData, log_phi, log_sigma,
                                   method: str, want_grad: bool):
    if method not in ("ML", "REML"):
        raise ValidationError(f"unknown criterion {method!r}")
    phi = np.exp(log_phi)
    sigma = np.exp(log_sigma)
    d, p, q = comp.d, comp.p, comp.q
    qd = q * d
    B, Vs, LM, logdet_m = _blue_compiled(comp, phi, sigma)
    vb = vec(B)
    ll = 0.0
    grad = np.zeros(qd + d) if want_grad else None
    Minv = cho_solve((LM, True), np.eye(p * d)) if (want_grad and method == "REML" and p * d > 0) else None
    for Xk, Tk, z, m, (V, logdet_v) in zip(comp.Xk, comp.Tk, comp.z, comp.m, Vs):
        r = z - Xk @ vb
        Vr = V @ r
        ll += 0.5 * (logdet_v - float(r @ Vr) - m * d * LOG_2PI)
        if not want_grad:
            continue
        VT = V @ Tk                          # (md, qd)
        for k in range(qd):
            u = Tk[:, k]
            tr_term = float(u @ VT[:, k])    # u' V u
            quad = float(u @ Vr) ** 2
            grad[k] += 0.5 * phi[k] * (quad - tr_term)
        Vr2 = Vr * Vr
        diagV = np.diag(V)
        for j in range(d):
            blk = slice(j * m, (j + 1) * m)
            grad[qd + j] += 0.5 * sigma[j] * (float(Vr2[blk].sum()) - float(diagV[blk].sum()))
        if method == "REML" and Minv is not None:
            VX = V @ Xk                      # (md, pd)
            for k in range(qd):
                a = VX.T @ Tk[:, k]          # Xk' V u
                grad[k] += 0.5 * phi[k] * float(a @ Minv @ a)
            MVX = VX @ Minv                  # (md, pd)
            rowq = np.einsum("ij,ij->i", MVX, VX)   # row_t' Minv row_t
            for j in range(d):
                blk = slice(j * m, (j + 1) * m)
                grad[qd + j] += 0.5 * sigma[j] * float(rowq[blk].sum())
    if method == "REML":
        ll += -0.5 * logdet_m + 0.5 * p * d * LOG_2PI
    return ll, grad


@dataclass
class FitResult:
    """Fitted mixed model: parameters, per-patient BLUPs and diagnostics."""

    params: MixedModelParams
    blups: list[np.ndarray]
    loglik: float
    method: str
    converged: bool
    n_iter: int
    grad_norm: float

    @property
    def loglik_ml_value(self) -> float:
        return self.loglik if self.method == "ML" else float("nan")


def fit(data: MixedModelData, init: MixedModelParams | None = None, method: str = "ML",
        gtol: float = 1e-6, max_iter: int = 500, memory: int = 10,
        lbfgs_initial_step: float = 0.15) -> FitResult:
    """Maximize the chosen criterion over the log-variance parameters.

    B is profiled out via GLS at every step. Non-convergence is reported in
    the result rather than raised; conditioning failures abort with a
    :class:`ConditioningError`.

    Parameters
    ----------
    data : MixedModelData
        Per-patient designs and responses.
    init : MixedModelParams, optional
        Warm start; defaults to unit variances.
    method : {"ML", "REML"}
    lbfgs_initial_step : float
        Step length tried first in the very first line search.
    """
    comp = compile_data(data)
    qd = comp.q * comp.d
    if init is not None:
        theta0 = np.concatenate([init.log_phi, init.log_sigma])
        if theta0.shape != (qd + comp.d,):
            raise ShapeError(
                f"warm start has {theta0.size} variance parameters, model needs {qd + comp.d}")
    else:
        theta0 = np.zeros(qd + comp.d)

    def objective(theta):
        # ill-conditioned line-search probes read as +inf so the search backs off;
        # a broken initial point is structural and aborts
        try:
            value, grad = _criterion_value_grad_compiled(comp, theta[:qd], theta[qd:], method, True)
        except ConditioningError:
            if np.array_equal(theta, theta0):
                raise
            return np.inf, np.zeros_like(theta)
        return -value, -grad

    res = optim.minimize_lbfgs(objective, theta0, memory=memory, gtol=gtol,
                               max_iter=max_iter, initial_step=lbfgs_initial_step)
    log_phi, log_sigma = res.x[:qd], res.x[qd:]
    phi, sigma = np.exp(log_phi), np.exp(log_sigma)
    B, _, _, _ = _blue_compiled(comp, phi, sigma)
    params = MixedModelParams(B, log_phi, log_sigma)
    value, _ = _criterion_value_grad_compiled(comp, log_phi, log_sigma, method, False)
    blups = blup(B, phi, sigma, data)
    return FitResult(params, blups, value, method, res.converged, res.n_iter, res.grad_norm)


def predict(params: MixedModelParams, blup_i: np.ndarray, design: DesignPair) -> np.ndarray:
    """Z-hat = X B + T U for one patient."""
    if design.X.shape[1] != params.B.shape[0]:
        raise ShapeError(f"design has {design.X.shape[1]} fixed columns, B has {params.B.shape[0]}")
    if design.T.shape[1] != blup_i.shape[0]:
        raise ShapeError(f"design has {design.T.shape[1]} random columns, BLUP has {blup_i.shape[0]}")
    return design.X @ params.B + design.T @ blup_i
