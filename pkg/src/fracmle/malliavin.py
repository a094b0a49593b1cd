"""Malliavin derivative arrays, the Malliavin matrix, and iterated-divergence weights.

Per driving path this module computes the triangular first/second derivative
arrays (each solves a linear equation started on the diagonal), the parameter
gradients, the matrix gamma_t of kernel inner products and its inverse eta_t,
and the weights H_(j1..jn) obtained by nesting the Skorohod-corrected operator

    U_p(G) = sum_{j,i} [ G int_0^t Q^pji_st dB^i_s
                         - c_H int int D^i_s(G Q^pji_rt) |r-s|^(2H-2) dr ds ],

with Q^pji_st = eta_t^pj D^i_s Y^j_t and H_(j1..jn) = U_jn o ... o U_j1 (1).

Two model classes are supported exactly:

* linear drift + additive noise (constant drift Jacobian A, constant sigma):
  D_s Y_t is the deterministic kernel P^(t-s) sigma with P = I + A dt, every
  higher Malliavin derivative vanishes, and the U-recursion closes over
  polynomials in the m Gaussian integrals G_p = int q^p dB. The recursion then
  *is* the Hermite (Wick) recursion P -> P*X_p - sum_j C[j,p] dP/dX_j with
  C = eta, and expectations of every weight vanish exactly on the grid because
  the quadrature weights equal the exact increment covariance.

* scalar models with nonlinear coefficients: depth-1 weights, built from the
  realized triangular arrays (the correction needs D^2 Y and the derivative of
  eta through gamma). Deeper weights would require third derivatives and raise
  CapabilityError.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigError, DivergenceError, NearSingularityError
from .fbm import FbmPath, HurstParam, TimeGrid, singular_cell_weights
from .models import ModelSpec
from .pathwise import SolutionPath

__all__ = [
    "TriangularArray",
    "MalliavinMatrixPath",
    "WeightValue",
    "KernelLevel",
    "derivative_first",
    "derivative_second",
    "theta_gradient",
    "theta_gradient_batch",
    "grad_derivative_first",
    "malliavin_matrix",
    "invert_gamma",
    "eta_sde_diagnostic",
    "inverse_matrix_path",
    "grad_eta",
    "q_process",
    "skorohod_U",
    "h_weight",
    "grad_h_weight",
    "PathBundle",
    "AdditiveKernels",
]

_COND_LIMIT = 1e12


@dataclass
class TriangularArray:
    """Realized derivative array on the grid triangle.

    order 1: values[i1, r, i, t] = D^{i1}_r Y^i_t, shape (d, M+1, m, M+1);
    zero for t < r. order 2 (scalar models, fixed target node): values[r1, r2]
    = D^2_{r1,r2} Y_target, shape (M+1, M+1); zero outside r1, r2 <= target.
    """

    order: int
    grid: TimeGrid
    values: np.ndarray
    target: int | None = None


@dataclass
class MalliavinMatrixPath:
    """gamma, its direct inverse eta, and the SDE-integrated diagnostic."""

    nodes: np.ndarray  # grid node indices, shape (K,)
    gamma: np.ndarray  # (K, m, m)
    eta: np.ndarray  # (K, m, m)
    eta_sde: np.ndarray | None = None  # (K, m, m) diagnostic, may drift


@dataclass
class KernelLevel:
    """One U-level: realized kernel value and its first-derivative field."""

    value: float
    dfield: np.ndarray | None  # (cells, d) realized D^i_s of the kernel


@dataclass
class WeightValue:
    indices: tuple
    value: float
    levels: list = field(default_factory=list)


# --------------------------------------------------------------------------
# Derivative arrays
# --------------------------------------------------------------------------


def _sigma_at(model: ModelSpec, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(model.sigma(y, theta), float), (model.m, model.d))


def derivative_first(
    model: ModelSpec, theta: np.ndarray, fbm: FbmPath, y: SolutionPath
) -> TriangularArray:
    """First derivative triangle: each row r solves the linearized equation
    with initial value sigma^{., i1}(Y_r) placed at node r."""
    theta = model.check_theta(theta)
    grid = fbm.grid
    m1 = grid.steps + 1
    db = fbm.increments
    dt = grid.dt
    vals = np.zeros((model.d, m1, model.m, m1))
    cur = np.zeros((model.d, m1, model.m))  # slice at current time
    for k in range(grid.steps):
        yk = y.values[:, k]
        cur[:, k, :] = _sigma_at(model, yk, theta).T
        dmu = np.broadcast_to(np.asarray(model.dmu(yk, theta), float), (model.m, model.m))
        step = dmu * dt
        if not model.additive_noise:
            dsig = np.broadcast_to(
                np.asarray(model.dsigma(yk, theta), float), (model.m, model.d, model.m)
            )
            step = step + np.einsum("ilk,l->ik", dsig, db[:, k])
        vals[:, :, :, k] = cur
        cur = cur + np.einsum("ik,ark->ari", step, cur)
    cur[:, grid.steps, :] = _sigma_at(model, y.values[:, grid.steps], theta).T
    vals[:, :, :, grid.steps] = cur
    return TriangularArray(order=1, grid=grid, values=vals)


def derivative_second(
    model: ModelSpec,
    theta: np.ndarray,
    fbm: FbmPath,
    y: SolutionPath,
    d1: TriangularArray,
    target: int | None = None,
) -> TriangularArray:
    """Second derivative slice D^2_{r1,r2} Y at the target node.

    Exactly zero for linear drift + additive noise. For scalar models the
    source terms are products of first derivatives against the second
    spatial derivatives of the coefficients.
    """
    theta = model.check_theta(theta)
    grid = fbm.grid
    m1 = grid.steps + 1
    target = grid.steps if target is None else int(target)
    if model.linear_additive:
        return TriangularArray(order=2, grid=grid, values=np.zeros((m1, m1)), target=target)
    if model.m != 1 or model.d != 1:
        raise CapabilityError(
            "second derivatives implemented for scalar models and for "
            "linear-drift additive-noise models only"
        )
    db = fbm.increments[0]
    dt = grid.dt
    dd1 = d1.values[0, :, 0, :]  # (r, t)
    cur = np.zeros((m1, m1))
    for k in range(target):
        yk = y.values[0, k]
        # frontier r1 = k (and symmetric r2 = k): derivative of the initial term
        front = float(model.dsigma(y.values[:, k], theta).reshape(-1)[0]) * dd1[: k + 1, k]
        cur[k, : k + 1] = front
        cur[: k + 1, k] = front
        cur[k, k] = 2.0 * front[k]
        d2m = float(np.asarray(model.d2mu(y.values[:, k], theta)).reshape(-1)[0])
        d1m = float(np.asarray(model.dmu(y.values[:, k], theta)).reshape(-1)[0])
        d2s = float(np.asarray(model.d2sigma(y.values[:, k], theta)).reshape(-1)[0])
        d1s = float(np.asarray(model.dsigma(y.values[:, k], theta)).reshape(-1)[0])
        outer = np.outer(dd1[: k + 1, k], dd1[: k + 1, k])
        block = cur[: k + 1, : k + 1]
        block += (d2m * outer + d1m * block) * dt + (d2s * outer + d1s * block) * db[k]
    # entries born exactly at the target node
    k = target
    dsig_t = float(np.asarray(model.dsigma(y.values[:, k], theta)).reshape(-1)[0])
    front = dsig_t * dd1[: k + 1, k]
    cur[k, : k + 1] = front
    cur[: k + 1, k] = front
    cur[k, k] = 2.0 * front[k]
    return TriangularArray(order=2, grid=grid, values=cur, target=target)


def theta_gradient(
    model: ModelSpec, theta: np.ndarray, fbm: FbmPath, y: SolutionPath
) -> np.ndarray:
    """Parameter gradients of the state, shape (q, m, M+1), zero at t = 0."""
    paths = theta_gradient_batch(
        model, theta, fbm.increments[None, ...], y.values.T[None, ...], fbm.grid.dt
    )
    return np.moveaxis(paths[0], 0, -1)  # (q, m, M+1)


def theta_gradient_batch(
    model: ModelSpec,
    theta: np.ndarray,
    increments: np.ndarray,
    paths: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Batched gradient recursion; increments (N, d, M), paths (N, M+1, m).

    Returns (N, M+1, q, m).
    """
    theta = model.check_theta(theta)
    n, d, msteps = increments.shape
    out = np.zeros((n, msteps + 1, model.q, model.m))
    state = np.zeros((n, model.q, model.m))
    for k in range(msteps):
        yk = paths[:, k]
        dmu = np.asarray(model.dmu(yk, theta), float)
        gmu = np.broadcast_to(np.asarray(model.grad_mu(yk, theta), float), (n, model.q, model.m))
        drift = np.einsum("...ik,...lk->...li", dmu, state) + gmu
        incr = drift * dt
        gsig = np.broadcast_to(
            np.asarray(model.grad_sigma(yk, theta), float), (n, model.q, model.m, model.d)
        )
        incr = incr + np.einsum("...lij,...j->...li", gsig, increments[:, :, k])
        if not model.additive_noise:
            dsig = np.asarray(model.dsigma(yk, theta), float)
            incr = incr + np.einsum(
                "...ijk,...lk,...j->...li", dsig, state, increments[:, :, k]
            )
        state = state + incr
        out[:, k + 1] = state
    return out


def grad_derivative_first(
    model: ModelSpec,
    theta: np.ndarray,
    fbm: FbmPath,
    y: SolutionPath,
    d1: TriangularArray,
    grad_y: np.ndarray,
) -> np.ndarray:
    """Theta-gradient of the first-derivative triangle for scalar models.

    Returns (q, M+1, M+1) indexed [l, r, t]. The evolution is the linearized
    equation with sources (grad of the coefficient Jacobians along the path)
    times the first derivatives.
    """
    theta = model.check_theta(theta)
    if model.m != 1 or model.d != 1:
        raise CapabilityError("per-path grad-derivative arrays are scalar-only")
    grid = fbm.grid
    m1 = grid.steps + 1
    db = fbm.increments[0]
    dt = grid.dt
    dd1 = d1.values[0, :, 0, :]
    out = np.zeros((model.q, m1, m1))
    cur = np.zeros((model.q, m1))
    for k in range(grid.steps):
        yk = y.values[:, k]
        gy = grad_y[:, 0, k]  # (q,)
        gsig = np.asarray(model.grad_sigma(yk, theta), float).reshape(model.q)
        dsig = float(np.asarray(model.dsigma(yk, theta)).reshape(-1)[0])
        cur[:, k] = gsig + dsig * gy
        d1m = float(np.asarray(model.dmu(yk, theta)).reshape(-1)[0])
        gdmu = np.asarray(model.grad_dmu(yk, theta), float).reshape(model.q)
        d2m = float(np.asarray(model.d2mu(yk, theta)).reshape(-1)[0])
        gdsig = np.asarray(model.grad_dsigma(yk, theta), float).reshape(model.q)
        d2s = float(np.asarray(model.d2sigma(yk, theta)).reshape(-1)[0])
        out[:, :, k] = cur
        source = (gdmu + d2m * gy)[:, None] * dd1[None, :, k]
        source_s = (gdsig + d2s * gy)[:, None] * dd1[None, :, k]
        cur = cur + (d1m * cur + source) * dt + (dsig * cur + source_s) * db[k]
    out[:, :, grid.steps] = cur
    gyT = grad_y[:, 0, grid.steps]
    gsigT = np.asarray(model.grad_sigma(y.values[:, -1], theta), float).reshape(model.q)
    dsigT = float(np.asarray(model.dsigma(y.values[:, -1], theta)).reshape(-1)[0])
    out[:, grid.steps, grid.steps] = gsigT + dsigT * gyT
    return out


# --------------------------------------------------------------------------
# Malliavin matrix
# --------------------------------------------------------------------------


def malliavin_matrix(
    d1: TriangularArray, h: HurstParam | float, nodes: np.ndarray | list[int]
) -> np.ndarray:
    """gamma_t at the requested nodes from the first-derivative triangle.

    gamma^{ii'}_t = sum_j <D^j Y^i_t, D^j Y^{i'}_t> with the cell-exact
    singular quadrature; O(M^2) per node.
    """
    if d1.order != 1:
        raise ConfigError("malliavin_matrix needs an order-1 array")
    w = singular_cell_weights(d1.grid, h)
    nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
    d, _, m, _ = d1.values.shape
    out = np.zeros((nodes.size, m, m))
    for a, t in enumerate(nodes):
        ker = d1.values[:, :t, :, t]  # (d, cells, m)
        g = np.einsum("jri,rp,jpk->ik", ker, w[:t, :t], ker)
        out[a] = 0.5 * (g + g.T)  # the double integral is exactly symmetric
    return out


def invert_gamma(gamma: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Per-node inverse with a condition-number guard."""
    out = np.empty_like(gamma)
    for a in range(gamma.shape[0]):
        cond = np.linalg.cond(gamma[a])
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise NearSingularityError(node=int(nodes[a]), condition=float(cond))
        out[a] = np.linalg.inv(gamma[a])
    return out


def eta_sde_diagnostic(
    model: ModelSpec,
    theta: np.ndarray,
    fbm: FbmPath,
    y: SolutionPath,
    h: HurstParam | float,
    nodes: np.ndarray,
) -> np.ndarray:
    """Euler integration of the stated linear equation for the inverse matrix.

    Anchored at the first grid node. Returned for diagnostics only: the
    equation's leading term ignores the flow inside the kernel quadrature, so
    away from zero drift it drifts from the true inverse (and its du-integral
    of eta is divergent at 0), which is why the primary inverse is direct.
    """
    grid = fbm.grid
    hp = HurstParam.coerce(h)
    msteps = grid.steps
    m = model.m
    w = singular_cell_weights(grid, hp)
    sig = np.empty((msteps, m, model.d))
    for k in range(msteps):
        sig[k] = _sigma_at(model, y.values[:, k], theta)
    # alpha0(t_k) = sum_j int_0^tk int_0^tk sigma(Y_r) sigma(Y_r')^T kernel
    cross = np.einsum("aij,ab,bkj->abik", sig, w, sig)
    prefua = np.cumsum(np.cumsum(cross, axis=0), axis=1)
    a0 = np.empty((msteps + 1, m, m))
    a0[0] = 0.0
    for k in range(1, msteps + 1):
        a0[k] = prefua[k - 1, k - 1]
    db = fbm.increments
    dt = grid.dt
    eta = np.zeros((msteps + 1, m, m))
    eta[1] = np.linalg.inv(a0[1])
    cur = eta[1].copy()
    for k in range(1, msteps):
        beta = np.broadcast_to(np.asarray(model.dmu(y.values[:, k], theta), float), (m, m))
        incr = np.linalg.inv(a0[k + 1]) - np.linalg.inv(a0[k])
        incr = incr - (cur @ beta + beta.T @ cur) * dt
        if not model.additive_noise:
            dsig = np.broadcast_to(
                np.asarray(model.dsigma(y.values[:, k], theta), float), (m, model.d, m)
            )
            for l in range(model.d):
                al = dsig[:, l, :]
                incr = incr - (cur @ al + al.T @ cur) * db[l, k]
        cur = cur + incr
        eta[k + 1] = cur
    return eta[np.asarray(nodes, dtype=int)]


def inverse_matrix_path(
    model: ModelSpec,
    theta: np.ndarray,
    fbm: FbmPath,
    y: SolutionPath,
    d1: TriangularArray,
    h: HurstParam | float,
    nodes: np.ndarray | list[int] | None = None,
) -> MalliavinMatrixPath:
    """gamma at the nodes, its direct inverse, and the SDE diagnostic."""
    nodes = (
        np.arange(1, fbm.grid.steps + 1)
        if nodes is None
        else np.atleast_1d(np.asarray(nodes, dtype=int))
    )
    gamma = malliavin_matrix(d1, h, nodes)
    eta = invert_gamma(gamma, nodes)
    eta_sde = eta_sde_diagnostic(model, theta, fbm, y, h, nodes)
    return MalliavinMatrixPath(nodes=nodes, gamma=gamma, eta=eta, eta_sde=eta_sde)


def grad_eta(
    d1: TriangularArray,
    grad_d1: np.ndarray,
    eta: np.ndarray,
    h: HurstParam | float,
    nodes: np.ndarray,
) -> np.ndarray:
    """Theta-gradient of the inverse at the nodes via grad(eta) = -eta grad(gamma) eta.

    Scalar layout: grad_d1 is (q, M+1, M+1); eta is (K, 1, 1) at the nodes.
    """
    if d1.values.shape[0] != 1 or d1.values.shape[2] != 1:
        raise CapabilityError("per-path grad_eta is scalar-only; linear-additive models use kernels")
    w = singular_cell_weights(d1.grid, h)
    nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
    q = grad_d1.shape[0]
    out = np.zeros((q, nodes.size, 1, 1))
    for a, t in enumerate(nodes):
        ker = d1.values[0, :t, 0, t]
        for l in range(q):
            gker = grad_d1[l, :t, t]
            dgamma = 2.0 * float(gker @ w[:t, :t] @ ker)
            e = float(eta[a, 0, 0])
            out[l, a, 0, 0] = -e * dgamma * e
    return out


# --------------------------------------------------------------------------
# Deterministic weight kernels for linear-drift additive-noise models
# --------------------------------------------------------------------------


class _Poly:
    """Sparse polynomial in m commuting variables: {exponent tuple: coef}."""

    __slots__ = ("m", "terms")

    def __init__(self, m: int, terms: dict | None = None):
        self.m = m
        self.terms = dict(terms or {})

    @classmethod
    def one(cls, m: int) -> "_Poly":
        return cls(m, {(0,) * m: 1.0})

    @classmethod
    def zero(cls, m: int) -> "_Poly":
        return cls(m, {})

    def times_var(self, p: int) -> "_Poly":
        out = {}
        for e, c in self.terms.items():
            e2 = list(e)
            e2[p] += 1
            out[tuple(e2)] = out.get(tuple(e2), 0.0) + c
        return _Poly(self.m, out)

    def deriv(self, j: int) -> "_Poly":
        out = {}
        for e, c in self.terms.items():
            if e[j] == 0:
                continue
            e2 = list(e)
            e2[j] -= 1
            out[tuple(e2)] = out.get(tuple(e2), 0.0) + c * e[j]
        return _Poly(self.m, out)

    def axpy(self, a: float, other: "_Poly") -> "_Poly":
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0.0) + a * c
            if out[e] == 0.0:
                del out[e]
        return _Poly(self.m, out)

    def __call__(self, g: np.ndarray) -> np.ndarray:
        """Evaluate at g of shape (..., m)."""
        g = np.asarray(g, dtype=float)
        out = np.zeros(g.shape[:-1])
        for e, c in self.terms.items():
            term = np.full(g.shape[:-1], c)
            for p, k in enumerate(e):
                if k:
                    term = term * g[..., p] ** k
            out = out + term
        return out


def _wick_levels(indices: tuple, cmat: np.ndarray, dcmat: np.ndarray | None):
    """U-recursion over polynomials: returns [(P_0, dP_0), (P_1, dP_1), ...].

    P_{r+1} = P_r X_p - sum_j C[j,p] dP_r/dX_j, the theta-derivative carries
    the dC terms along.
    """
    m = cmat.shape[0]
    q = 0 if dcmat is None else dcmat.shape[0]
    poly = _Poly.one(m)
    dots = [_Poly.zero(m) for _ in range(q)]
    levels = [(poly, list(dots))]
    for p in indices:
        if not 0 <= p < m:
            raise ConfigError(f"weight index {p + 1} outside 1..{m}")
        new = poly.times_var(p)
        for j in range(m):
            new = new.axpy(-cmat[j, p], poly.deriv(j))
        newdots = []
        for l in range(q):
            nd = dots[l].times_var(p)
            for j in range(m):
                nd = nd.axpy(-cmat[j, p], dots[l].deriv(j))
                nd = nd.axpy(-dcmat[l, j, p], poly.deriv(j))
            newdots.append(nd)
        poly, dots = new, newdots
        levels.append((poly, list(dots)))
    return levels


class AdditiveKernels:
    """Deterministic weight ingredients for a linear-additive model at target nodes.

    All kernels are Euler-consistent: D over cell k at target node n is
    P^(n-1-k) sigma with P = I + A dt, whose weighted Gram matrix equals the
    exact covariance of the Euler terminal state. gamma, eta, the fields
    q^p = eta D and their theta-gradients are computed once per (theta, node)
    and shared across Monte-Carlo paths.
    """

    def __init__(
        self,
        model: ModelSpec,
        theta: np.ndarray,
        grid: TimeGrid,
        h: HurstParam | float,
        nodes,
        with_grad: bool = False,
    ):
        if not model.linear_additive:
            raise CapabilityError(
                f"model {model.name} is not in the linear-drift additive-noise class"
            )
        self.model = model
        self.theta = model.check_theta(theta)
        self.grid = grid
        self.h = HurstParam.coerce(h)
        self.nodes = sorted(int(t) for t in np.atleast_1d(nodes))
        self.with_grad = with_grad
        m, d, q = model.m, model.d, model.q
        y0 = np.zeros(m)
        a = np.broadcast_to(np.asarray(model.dmu(y0, self.theta), float), (m, m))
        sig = _sigma_at(model, y0, self.theta)
        dt = grid.dt
        p = np.eye(m) + a * dt
        nmax = max(self.nodes)
        ppow = np.empty((nmax + 1, m, m))
        ppow[0] = np.eye(m)
        for u in range(nmax):
            ppow[u + 1] = ppow[u] @ p
        if not np.all(np.isfinite(ppow)) or np.abs(ppow[-1]).max() > 1e100:
            raise DivergenceError(
                nmax, f"Euler factor I + A dt unstable for theta={self.theta} at dt={dt:g}"
            )
        self._dcell_full = ppow @ sig  # (nmax+1, m, d); cell k of node n uses index n-1-k
        if with_grad:
            da = np.broadcast_to(np.asarray(model.grad_dmu(y0, self.theta), float), (q, m, m))
            dsig = np.broadcast_to(np.asarray(model.grad_sigma(y0, self.theta), float), (q, m, d))
            dppow = np.zeros((q, nmax + 1, m, m))
            dp = da * dt
            for u in range(nmax):
                dppow[:, u + 1] = dppow[:, u] @ p + ppow[u] @ dp
            self._ddcell_full = dppow @ sig + ppow[None, ...] @ dsig[:, None, :, :]
        self._per_node: dict[int, dict] = {}
        self._rotated: dict[int, dict] = {}
        self._w = singular_cell_weights(grid, self.h)
        for t in self.nodes:
            dc = self._dcell_full[t - 1 :: -1][:t]  # (t, m, d), cell k -> P^(t-1-k) sigma
            ddc = self._ddcell_full[:, t - 1 :: -1][:, :t] if with_grad else None
            self._per_node[t] = self._build_entry(t, dc, ddc)
        self._poly_cache: dict = {}

    def _build_entry(self, t: int, dc: np.ndarray, ddc: np.ndarray | None) -> dict:
        # one O(t^2) kernel product shared by gamma and its gradient
        wb = (self._w[:t, :t] @ dc.reshape(t, -1)).reshape(dc.shape)
        gamma = np.einsum("aij,akj->ik", dc, wb)
        gamma = 0.5 * (gamma + gamma.T)
        cond = np.linalg.cond(gamma)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise NearSingularityError(node=t, condition=float(cond))
        eta = np.linalg.inv(gamma)
        qf = np.einsum("pj,aji->pai", eta, dc)  # (m, cells, d)
        entry = {"gamma": gamma, "eta": eta, "qf": qf, "C": eta, "dc": dc}
        if ddc is not None:
            dgamma = np.einsum("laij,akj->lik", ddc, wb)
            dgamma = dgamma + np.swapaxes(dgamma, -1, -2)
            deta = -np.einsum("pi,lik,kq->lpq", eta, dgamma, eta)
            dqf = np.einsum("lpj,aji->lpai", deta, dc) + np.einsum("pj,laji->lpai", eta, ddc)
            entry.update({"dgamma": dgamma, "deta": deta, "dqf": dqf, "dC": deta, "ddc": ddc})
        return entry

    def rotation(self, t: int) -> np.ndarray:
        """Orthonormal eigenvectors of gamma_t (deterministic column signs)."""
        gamma = self.at(t)["gamma"]
        _, vec = np.linalg.eigh(gamma)
        for j in range(vec.shape[1]):
            k = int(np.argmax(np.abs(vec[:, j])))
            if vec[k, j] < 0:
                vec[:, j] = -vec[:, j]
        return vec

    def rotated_at(self, t: int) -> tuple[np.ndarray, dict]:
        """Kernel entry of the decorrelated state Z = R^T Y (R fixed at theta).

        Z is again a linear-additive functional of the same driving noise, so
        the whole weight machinery applies verbatim with kernels R^T D; its
        matrix gamma^Z = R^T gamma R is diagonal at the evaluation parameter,
        which makes the orthant masses of the density representation factor
        into marginal tails. Every ingredient is a rotation of the base entry.
        """
        if t not in self._rotated:
            base = self.at(t)
            r = self.rotation(t)
            entry = {
                "gamma": r.T @ base["gamma"] @ r,
                "eta": r.T @ base["eta"] @ r,
                "qf": np.einsum("mp,mai->pai", r, base["qf"]),
            }
            entry["C"] = entry["eta"]
            if self.with_grad:
                entry["dgamma"] = np.einsum("mp,lmk,kq->lpq", r, base["dgamma"], r)
                entry["deta"] = np.einsum("mp,lmk,kq->lpq", r, base["deta"], r)
                entry["dqf"] = np.einsum("mp,lmai->lpai", r, base["dqf"])
                entry["dC"] = entry["deta"]
            self._rotated[t] = (r, entry)
        return self._rotated[t]

    def at(self, t: int) -> dict:
        if t not in self._per_node:
            raise ConfigError(f"node {t} was not requested at kernel construction")
        return self._per_node[t]

    def _entry(self, t: int, rotated: bool) -> dict:
        return self.rotated_at(t)[1] if rotated else self.at(t)

    def levels(self, indices: tuple, t: int, rotated: bool = False):
        """Polynomial levels for a 1-based weight index tuple."""
        key = (tuple(int(j) for j in indices), t, rotated)
        if key not in self._poly_cache:
            if not all(1 <= j <= self.model.m for j in key[0]):
                raise ConfigError(f"weight indices must lie in 1..{self.model.m}: {indices}")
            e = self._entry(t, rotated)
            dc = e["dC"] if self.with_grad else None
            zero_based = tuple(j - 1 for j in key[0])
            self._poly_cache[key] = _wick_levels(zero_based, e["C"], dc)
        return self._poly_cache[key]

    def gaussians(self, increments: np.ndarray, t: int, rotated: bool = False) -> np.ndarray:
        """G_p = int q^p dB per path; increments (N, d, M>=t) -> (N, m)."""
        qf = self._entry(t, rotated)["qf"]
        return np.einsum("pai,nia->np", qf, increments[:, :, :t])

    def grad_gaussians(
        self, increments: np.ndarray, t: int, rotated: bool = False
    ) -> np.ndarray:
        dqf = self._entry(t, rotated)["dqf"]
        return np.einsum("lpai,nia->nlp", dqf, increments[:, :, :t])

    def weight_values(
        self, indices: tuple, increments: np.ndarray, t: int, rotated: bool = False
    ) -> np.ndarray:
        """H_(indices) per path, shape (N,)."""
        g = self.gaussians(increments, t, rotated)
        poly, _ = self.levels(indices, t, rotated)[-1]
        return poly(g)

    def grad_weight_values(
        self, indices: tuple, increments: np.ndarray, t: int, rotated: bool = False
    ) -> np.ndarray:
        """Theta-gradient of H_(indices) per path, shape (N, q)."""
        if not self.with_grad:
            raise ConfigError("kernels built without gradients")
        g = self.gaussians(increments, t, rotated)
        dg = self.grad_gaussians(increments, t, rotated)
        poly, dots = self.levels(indices, t, rotated)[-1]
        out = np.stack([dot(g) for dot in dots], axis=-1)  # (N, q)
        for p in range(self.model.m):
            out = out + poly.deriv(p)(g)[..., None] * dg[:, :, p]
        return out

    def kernel_dfield(self, indices: tuple, g_one: np.ndarray, t: int) -> np.ndarray:
        """Realized D^i_s of the final kernel for one path, shape (cells, d)."""
        e = self.at(t)
        poly, _ = self.levels(indices, t)[-1]
        coeffs = np.array([poly.deriv(p)(g_one) for p in range(self.model.m)])
        return np.einsum("p,pai->ai", coeffs, e["qf"])


# --------------------------------------------------------------------------
# Per-path bundle and the weight operators
# --------------------------------------------------------------------------


class PathBundle:
    """Per-path lazy container tying together the arrays one weight needs."""

    def __init__(
        self,
        model: ModelSpec,
        theta: np.ndarray,
        fbm: FbmPath,
        y: SolutionPath,
        h: HurstParam | float | None = None,
    ):
        self.model = model
        self.theta = model.check_theta(theta)
        self.fbm = fbm
        self.y = y
        self.h = HurstParam.coerce(h if h is not None else fbm.hurst)
        self._d1 = None
        self._grad_y = None
        self._kernels: dict = {}
        self._d2: dict = {}
        self._matrix: dict = {}

    @property
    def grid(self) -> TimeGrid:
        return self.fbm.grid

    @property
    def d1(self) -> TriangularArray:
        if self._d1 is None:
            self._d1 = derivative_first(self.model, self.theta, self.fbm, self.y)
        return self._d1

    @property
    def grad_y(self) -> np.ndarray:
        if self._grad_y is None:
            self._grad_y = theta_gradient(self.model, self.theta, self.fbm, self.y)
        return self._grad_y

    def d2_at(self, t: int) -> TriangularArray:
        if t not in self._d2:
            self._d2[t] = derivative_second(self.model, self.theta, self.fbm, self.y, self.d1, t)
        return self._d2[t]

    def matrix_at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(gamma_t, eta_t) at one node, from the generic quadrature."""
        if t not in self._matrix:
            gamma = malliavin_matrix(self.d1, self.h, [t])[0]
            eta = invert_gamma(gamma[None, ...], np.array([t]))[0]
            self._matrix[t] = (gamma, eta)
        return self._matrix[t]

    def additive_kernels(self, nodes, with_grad: bool = False) -> AdditiveKernels:
        key = (tuple(sorted(int(n) for n in np.atleast_1d(nodes))), with_grad)
        if key not in self._kernels:
            self._kernels[key] = AdditiveKernels(
                self.model, self.theta, self.grid, self.h, key[0], with_grad=with_grad
            )
        return self._kernels[key]


def q_process(bundle: PathBundle, t: int) -> np.ndarray:
    """Realized Q^{pji}_s at target node t, shape (m, m, d, M+1); zero for s >= t."""
    _, eta = bundle.matrix_at(t)
    d1 = bundle.d1.values  # (i1, r, j, t)
    m1 = bundle.grid.steps + 1
    out = np.zeros((bundle.model.m, bundle.model.m, bundle.model.d, m1))
    out[:, :, :, :t] = np.einsum("pj,irj->pjir", eta, d1[:, :t, :, t])
    return out


def _young_sum(field_cells: np.ndarray, increments: np.ndarray, t: int) -> float:
    """sum_i sum_k field[k, i] dB^i_k over cells below t."""
    return float(np.einsum("ai,ia->", field_cells[:t], increments[:, :t]))


def _scalar_dq_field(bundle: PathBundle, t: int) -> np.ndarray:
    """D^1_s Q_{r,t} for scalar models: (-eta^2 D_s gamma_t) D_r Y_t + eta D2_{s,r}.

    Returns (cells, cells) indexed [s, r].
    """
    w = singular_cell_weights(bundle.grid, bundle.h)[:t, :t]
    ker = bundle.d1.values[0, :t, 0, t]
    _, eta = bundle.matrix_at(t)
    e = float(eta[0, 0])
    d2 = bundle.d2_at(t).values[:t, :t]
    dgamma_s = 2.0 * d2 @ (w @ ker)  # D_s gamma_t over s cells
    return (-e * e * dgamma_s)[:, None] * ker[None, :] + e * d2


def skorohod_U(
    p: int,
    kernel: KernelLevel,
    bundle: PathBundle,
    t: int,
) -> WeightValue:
    """One application of the corrected operator U_p to a supplied kernel.

    kernel.dfield must hold the realized first derivative of the kernel on the
    cells (zero array for deterministic kernels); a missing field when the
    model class would need it raises CapabilityError. Kernels here are the
    node-indexed derivative arrays (left-point values of the continuous
    objects); the polynomial engine differentiates with respect to the grid
    increments instead, so the two agree to one Euler factor, O(dt).
    """
    model = bundle.model
    if not 1 <= p <= model.m:
        raise ConfigError(f"coordinate p must lie in 1..{model.m}")
    qproc = q_process(bundle, t)
    qsum = np.einsum("pjis->psi", qproc)[p - 1]  # (M+1, d) summed over j
    young = kernel.value * _young_sum(qsum, bundle.fbm.increments, t)
    w = singular_cell_weights(bundle.grid, bundle.h)[:t, :t]
    if kernel.dfield is None:
        raise CapabilityError("kernel derivative field missing for the correction term")
    corr = float(np.einsum("si,sr,ri->", kernel.dfield[:t], w, qsum[:t]))
    if not model.linear_additive:
        if model.m != 1 or model.d != 1:
            raise CapabilityError("corrections with random Q are scalar-only")
        dq = _scalar_dq_field(bundle, t)
        corr += kernel.value * float(np.einsum("sr,sr->", dq, w))
    value = young - corr
    return WeightValue(indices=(p,), value=value, levels=[kernel, KernelLevel(value, None)])


def h_weight(indices: tuple, bundle: PathBundle, t: int | None = None) -> WeightValue:
    """Iterated weight H_(j1..jn)(Y_t) for one path.

    Linear-additive models run the closed polynomial recursion at any depth
    up to 2m; scalar nonlinear models support depth 1.
    """
    model = bundle.model
    t = bundle.grid.steps if t is None else int(t)
    indices = tuple(int(j) for j in indices)
    if not all(1 <= j <= model.m for j in indices):
        raise ConfigError(f"weight indices must lie in 1..{model.m}: {indices}")
    if len(indices) > 2 * model.m:
        raise CapabilityError(f"depth {len(indices)} exceeds 2m = {2 * model.m}")
    if model.linear_additive:
        kernels = bundle.additive_kernels([t])
        incr = bundle.fbm.increments[None, ...]
        g = kernels.gaussians(incr, t)[0]
        levels = kernels.levels(indices, t)
        out = WeightValue(indices=indices, value=float(levels[-1][0](g)))
        for r, (poly, _) in enumerate(levels):
            dfield = kernels.kernel_dfield(indices[:r], g, t)
            out.levels.append(KernelLevel(value=float(poly(g)), dfield=dfield))
        return out
    if len(indices) > 1:
        raise CapabilityError(
            "weights deeper than 1 for nonlinear models need third Malliavin "
            "derivatives, outside the supported class"
        )
    start = KernelLevel(value=1.0, dfield=np.zeros((bundle.grid.steps, model.d)))
    out = skorohod_U(indices[0], start, bundle, t)
    out.indices = indices
    return out


def grad_h_weight(
    indices: tuple, l: int, bundle: PathBundle, t: int | None = None
) -> WeightValue:
    """Theta-derivative of the iterated weight, parameter coordinate l (0-based)."""
    model = bundle.model
    t = bundle.grid.steps if t is None else int(t)
    indices = tuple(int(j) for j in indices)
    if not model.linear_additive:
        raise CapabilityError("weight gradients are supported for linear-additive models")
    if not 0 <= l < model.q:
        raise ConfigError(f"parameter index {l} outside 0..{model.q - 1}")
    kernels = bundle.additive_kernels([t], with_grad=True)
    incr = bundle.fbm.increments[None, ...]
    grads = kernels.grad_weight_values(indices, incr, t)[0]
    return WeightValue(indices=indices, value=float(grads[l]))
