"""Built-in model specifications and the closed-form oracle for fractional OU.

A ModelSpec bundles the drift/diffusion coefficients with every spatial and
parameter derivative the Malliavin machinery consumes. Shape conventions
(batch axes broadcast in front):

    mu(y, theta)        -> (..., m)
    sigma(y, theta)     -> (..., m, d)
    dmu(y, theta)       -> (..., m, m)        [i, k] = d mu^i / d y^k
    dsigma(y, theta)    -> (..., m, d, m)     [i, j, k] = d sigma^ij / d y^k
    d2mu(y, theta)      -> (..., m, m, m)     [i, k, l]
    d2sigma(y, theta)   -> (..., m, d, m, m)
    grad_mu(y, theta)   -> (..., q, m)        [l, i] = d mu^i / d theta_l
    grad_sigma(y, theta)-> (..., q, m, d)
    grad_dmu(y, theta)  -> (..., q, m, m)     [l, i, k]
    grad_dsigma(y,theta)-> (..., q, m, d, m)

Class flags are not trusted declarations: get_model probes second derivatives
at random points and rejects a spec whose flags disagree with its callables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import CapabilityError, ConfigError
from .fbm import FbmPath, HurstParam, TimeGrid, singular_cell_weights

__all__ = ["ModelSpec", "get_model", "register_model", "load_model_file", "OuOracle", "ou_oracle"]

Coeff = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    m: int
    d: int
    q: int
    mu: Coeff
    sigma: Coeff
    dmu: Coeff
    dsigma: Coeff
    d2mu: Coeff
    d2sigma: Coeff
    grad_mu: Coeff
    grad_sigma: Coeff
    grad_dmu: Coeff
    grad_dsigma: Coeff
    linear_drift: bool
    additive_noise: bool
    theta_default: tuple = ()
    theta_names: tuple = ()
    initial_state: tuple = (0.0,)
    box_default: tuple = ()

    @property
    def linear_additive(self) -> bool:
        """Constant drift Jacobian and constant diffusion: the class where all
        Malliavin derivatives of order >= 2 vanish identically."""
        return self.linear_drift and self.additive_noise

    def check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.q,):
            raise ConfigError(f"model {self.name} expects {self.q} parameters, got {theta.shape}")
        return theta


def _probe_points(m: int, count: int, seed: int = 71) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(scale=2.0, size=(count, m))


def _verify_spec(spec: ModelSpec, theta: np.ndarray) -> None:
    """Dimension consistency and flag probes at random states."""
    ys = _probe_points(spec.m, 10)
    checks = {
        "mu": (spec.mu, (spec.m,)),
        "sigma": (spec.sigma, (spec.m, spec.d)),
        "dmu": (spec.dmu, (spec.m, spec.m)),
        "dsigma": (spec.dsigma, (spec.m, spec.d, spec.m)),
        "d2mu": (spec.d2mu, (spec.m, spec.m, spec.m)),
        "d2sigma": (spec.d2sigma, (spec.m, spec.d, spec.m, spec.m)),
        "grad_mu": (spec.grad_mu, (spec.q, spec.m)),
        "grad_sigma": (spec.grad_sigma, (spec.q, spec.m, spec.d)),
        "grad_dmu": (spec.grad_dmu, (spec.q, spec.m, spec.m)),
        "grad_dsigma": (spec.grad_dsigma, (spec.q, spec.m, spec.d, spec.m)),
    }
    for name, (fn, shape) in checks.items():
        for y in ys[:2]:
            out = np.asarray(fn(y, theta), dtype=float)
            if np.broadcast_shapes(out.shape, shape) != shape:
                raise ConfigError(
                    f"{spec.name}.{name} returned shape {out.shape}, expected broadcastable to {shape}"
                )
    for y in ys:
        if spec.linear_drift and np.max(np.abs(spec.d2mu(y, theta))) != 0.0:
            raise ConfigError(f"{spec.name}: linear_drift flag but d2mu != 0 at {y}")
        if spec.additive_noise and np.max(np.abs(spec.dsigma(y, theta))) != 0.0:
            raise ConfigError(f"{spec.name}: additive_noise flag but dsigma != 0 at {y}")
        alpha = np.asarray(spec.sigma(y, theta), dtype=float)
        alpha = np.broadcast_to(alpha, (spec.m, spec.d))
        w = np.linalg.eigvalsh(alpha @ alpha.T)
        if w.min() <= 0.0:
            raise ConfigError(f"{spec.name}: sigma sigma^T not uniformly elliptic at {y}")


def _const(arr) -> Coeff:
    a = np.asarray(arr, dtype=float)
    a.setflags(write=False)
    return lambda y, theta: a


def _fou_spec() -> ModelSpec:
    zero11 = _const(np.zeros((1, 1)))
    return ModelSpec(
        name="fou",
        m=1,
        d=1,
        q=1,
        mu=lambda y, th: -th[0] * y,
        sigma=_const(np.ones((1, 1))),
        dmu=lambda y, th: np.broadcast_to(-th[0], (1, 1)),
        dsigma=_const(np.zeros((1, 1, 1))),
        d2mu=_const(np.zeros((1, 1, 1))),
        d2sigma=_const(np.zeros((1, 1, 1, 1))),
        grad_mu=lambda y, th: -y[..., None, :],
        grad_sigma=_const(np.zeros((1, 1, 1))),
        grad_dmu=_const(-np.ones((1, 1, 1))),
        grad_dsigma=_const(np.zeros((1, 1, 1, 1))),
        linear_drift=True,
        additive_noise=True,
        theta_default=(0.5,),
        theta_names=("lambda",),
        initial_state=(0.0,),
        box_default=((0.01, 10.0),),
    )


def _linear2d_spec() -> ModelSpec:
    def mu(y, th):
        a, b = th
        out = np.empty_like(np.asarray(y, dtype=float))
        out[..., 0] = -a * y[..., 1]
        out[..., 1] = -b * y[..., 0]
        return out

    def dmu(y, th):
        a, b = th
        return np.array([[0.0, -a], [-b, 0.0]])

    def sigma(y, th):
        return th[1] * np.eye(2)

    def grad_mu(y, th):
        out = np.zeros(np.shape(y)[:-1] + (2, 2))
        out[..., 0, 0] = -y[..., 1]
        out[..., 1, 1] = -y[..., 0]
        return out

    def grad_sigma(y, th):
        out = np.zeros((2, 2, 2))
        out[1] = np.eye(2)
        return out

    def grad_dmu(y, th):
        out = np.zeros((2, 2, 2))
        out[0, 0, 1] = -1.0
        out[1, 1, 0] = -1.0
        return out

    return ModelSpec(
        name="linear2d",
        m=2,
        d=2,
        q=2,
        mu=mu,
        sigma=sigma,
        dmu=dmu,
        dsigma=_const(np.zeros((2, 2, 2))),
        d2mu=_const(np.zeros((2, 2, 2))),
        d2sigma=_const(np.zeros((2, 2, 2, 2))),
        grad_mu=grad_mu,
        grad_sigma=grad_sigma,
        grad_dmu=grad_dmu,
        grad_dsigma=_const(np.zeros((2, 2, 2, 2))),
        linear_drift=True,
        additive_noise=True,
        theta_default=(2.0, 4.0),
        theta_names=("alpha", "beta"),
        initial_state=(0.0, 0.0),
        box_default=((0.1, 10.0), (0.1, 10.0)),
    )


def _findrift_spec() -> ModelSpec:
    return ModelSpec(
        name="findrift",
        m=1,
        d=1,
        q=2,
        mu=lambda y, th: th[0] * y,
        sigma=lambda y, th: th[1] * np.ones((1, 1)),
        dmu=lambda y, th: np.broadcast_to(th[0], (1, 1)),
        dsigma=_const(np.zeros((1, 1, 1))),
        d2mu=_const(np.zeros((1, 1, 1))),
        d2sigma=_const(np.zeros((1, 1, 1, 1))),
        grad_mu=lambda y, th: np.stack([y, np.zeros_like(y)], axis=-2),
        grad_sigma=lambda y, th: np.array([[[0.0]], [[1.0]]]),
        grad_dmu=_const(np.array([[[1.0]], [[0.0]]])),
        grad_dsigma=_const(np.zeros((2, 1, 1, 1))),
        linear_drift=True,
        additive_noise=True,
        theta_default=(0.015, 0.352),
        theta_names=("mu", "sigma"),
        initial_state=(100.0,),
        box_default=((-1.0, 1.0), (0.01, 5.0)),
    )


_BUILTINS: dict[str, Callable[[], ModelSpec]] = {
    "fou": _fou_spec,
    "linear2d": _linear2d_spec,
    "findrift": _findrift_spec,
}
_REGISTRY: dict[str, Callable[[], ModelSpec]] = {}


def register_model(name: str, factory: Callable[[], ModelSpec]) -> None:
    """Register a user-defined spec factory under `name`."""
    _REGISTRY[name] = factory


def get_model(name: str, theta=None) -> ModelSpec:
    """Look up a built-in or registered model; probes flags before returning."""
    factory = _BUILTINS.get(name) or _REGISTRY.get(name)
    if factory is None:
        known = sorted(set(_BUILTINS) | set(_REGISTRY))
        raise ConfigError(f"unknown model {name!r}; known models: {known}")
    spec = factory()
    th = spec.check_theta(theta if theta is not None else spec.theta_default)
    _verify_spec(spec, th)
    return spec


def load_model_file(path: str) -> tuple[ModelSpec, np.ndarray]:
    """Load a model reference from a JSON document.

    Schema: {"model": <registered name>, "theta": [..], "initial_state": [..]}.
    Coefficient functions themselves are never read from the file; the file
    can only reference names registered through register_model or built-ins.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if "model" not in doc:
        raise ConfigError(f"model file {path} lacks a 'model' key")
    theta = doc.get("theta")
    spec = get_model(doc["model"], theta)
    if "initial_state" in doc:
        spec = ModelSpec(**{**spec.__dict__, "initial_state": tuple(doc["initial_state"])})
    return spec, spec.check_theta(theta if theta is not None else spec.theta_default)


# --------------------------------------------------------------------------
# Closed-form oracle for the scalar fractional OU process dY = -lambda Y dt + dB
# --------------------------------------------------------------------------


@dataclass
class OuOracle:
    """Quadrature evaluations of the explicit OU solution and its weights.

    Everything is a left-point evaluation of the closed forms on the driving
    grid: Y_t = a e^(-lam t) + int_0^t e^(-lam (t-s)) dB_s, D_s Y_t =
    e^(-lam (t-s)), d/dlam Y_t = -a t e^(-lam t) - int (t-s) e^(-lam (t-s)) dB_s.
    The depth-1 weight is eta_t (Y_t - a e^(-lam t)) and the depth-2 weight is
    (depth-1)^2 - eta_t with eta_t = 1/gamma_t; d/dlam versions follow by the
    chain rule. Signs fixed against central finite differences.
    """

    lam: float
    hurst: HurstParam
    grid: TimeGrid
    a: float
    y: np.ndarray  # (M+1,)
    dy_dlam: np.ndarray  # (M+1,)

    def d_kernel(self, t_index: int) -> np.ndarray:
        """Cell values of s -> D_s Y_t = e^(-lam (t - s)) for cells below t."""
        tau = self.grid.nodes
        return np.exp(-self.lam * (tau[t_index] - tau[:t_index]))

    def dlam_d_kernel(self, t_index: int) -> np.ndarray:
        tau = self.grid.nodes
        gap = tau[t_index] - tau[:t_index]
        return -gap * np.exp(-self.lam * gap)

    def gamma(self, t_index: int) -> float:
        w = singular_cell_weights(self.grid, self.hurst)[:t_index, :t_index]
        ker = self.d_kernel(t_index)
        return float(ker @ w @ ker)

    def dlam_gamma(self, t_index: int) -> float:
        w = singular_cell_weights(self.grid, self.hurst)[:t_index, :t_index]
        ker, dker = self.d_kernel(t_index), self.dlam_d_kernel(t_index)
        return float(2.0 * (dker @ w @ ker))

    def noise_part(self, t_index: int) -> float:
        return float(self.y[t_index] - self.a * np.exp(-self.lam * self.grid.nodes[t_index]))

    def h1(self, t_index: int) -> float:
        return self.noise_part(t_index) / self.gamma(t_index)

    def h11(self, t_index: int) -> float:
        g = self.gamma(t_index)
        return self.h1(t_index) ** 2 - 1.0 / g

    def dlam_h1(self, t_index: int) -> float:
        g = self.gamma(t_index)
        dg = self.dlam_gamma(t_index)
        t = self.grid.nodes[t_index]
        dnoise = self.dy_dlam[t_index] + self.a * t * np.exp(-self.lam * t)
        return float(dnoise / g - self.noise_part(t_index) * dg / g**2)

    def dlam_h11(self, t_index: int) -> float:
        g = self.gamma(t_index)
        dg = self.dlam_gamma(t_index)
        return float(2.0 * self.h1(t_index) * self.dlam_h1(t_index) + dg / g**2)


def ou_oracle(lam: float, h: HurstParam | float, fbm: FbmPath, a: float = 0.0) -> OuOracle:
    """Evaluate the explicit OU solution on the grid of the supplied driving path."""
    if fbm.dim != 1:
        raise CapabilityError("the OU oracle is scalar; pass a one-dimensional driving path")
    hp = HurstParam.coerce(h)
    grid = fbm.grid
    db = fbm.increments[0]
    decay = np.exp(-lam * grid.dt)
    m = grid.steps
    noise = np.zeros(m + 1)  # int_0^t e^(-lam(t-s)) dB_s, left-point
    ramp = np.zeros(m + 1)  # int_0^t (t-s) e^(-lam(t-s)) dB_s
    for k in range(m):
        noise[k + 1] = decay * (noise[k] + db[k])
        ramp[k + 1] = decay * (ramp[k] + grid.dt * (noise[k] + db[k]))
    tau = grid.nodes
    y = a * np.exp(-lam * tau) + noise
    dy = -a * tau * np.exp(-lam * tau) - ramp
    return OuOracle(lam=lam, hurst=hp, grid=grid, a=a, y=y, dy_dlam=dy)
