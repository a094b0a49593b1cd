"""Monte-Carlo estimation of the density, the per-observation kernels and the score.

The density of Y_t is estimated as E[1_(Y_t > x) H_(1..m)] over N independent
driving paths (exact indicator, no smoothing); the positive-part
representation E[(Y_t - x)_+ H_(1..m,1..m)] is available as a cross-check.
The score for one parameter coordinate is sum_i V_i / W_i with

    W_i = E[1_(Y_ti > y_i) H_(1..m)],
    V_i = E[ sum_c grad Y^c 1_(Y^c > y^c) prod_{c' != c}(Y^c' - y^c')_+ H_(1..m,1..m)
             + prod(Y - y)_+ grad H_(1..m,1..m) ],

i.e. V_i is the exact pathwise theta-derivative of the positive-part
representation, evaluated on the same paths as W_i (common random numbers).

Determinism: paths are generated in fixed-size blocks from seed substreams
keyed by (observation, block) for the standalone estimators and by (block,)
for the score; all reductions are fixed-order numpy pairwise sums, so results
are reproducible bit-for-bit for a given seed regardless of how many workers
a caller would dispatch blocks to.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigError, UnreliableScoreError
from .fbm import HurstParam, TimeGrid, fgn_from_normals, FbmPath
from .malliavin import AdditiveKernels, PathBundle, h_weight, theta_gradient_batch
from .models import ModelSpec
from .pathwise import euler_solve_batch, SolutionPath

__all__ = [
    "Observations",
    "Budget",
    "ScoreValue",
    "allocate_budget",
    "estimate_density",
    "estimate_W",
    "estimate_V",
    "score",
]

_BLOCK = 8192  # fixed block size; part of the reproducibility contract


@dataclass
class Observations:
    """Discrete observations with times snapped to grid nodes."""

    grid: TimeGrid
    times: np.ndarray  # (n,)
    values: np.ndarray  # (n, m)
    node_indices: np.ndarray = field(init=False)

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[0] != self.times.size:
            raise ConfigError("observation times and values disagree in length")
        if self.times.size < 1:
            raise ConfigError("need at least one observation")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("observation times must be strictly increasing")
        self.node_indices = np.array([self.grid.node_index(t) for t in self.times])
        if self.node_indices[0] < 1:
            raise ConfigError("observations must occur after time zero")

    @property
    def n(self) -> int:
        return self.times.size


@dataclass
class Budget:
    """Euler/Monte-Carlo budget for one estimation run."""

    euler_steps: int
    mc_paths: int
    gamma: float = 0.55
    hurst: float | None = None

    def __post_init__(self):
        if self.euler_steps < 2:
            raise ConfigError(f"euler_steps must be >= 2, got {self.euler_steps}")
        if self.mc_paths < 1:
            raise ConfigError(f"mc_paths must be >= 1, got {self.mc_paths}")
        if not 0.5 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (1/2, 1), got {self.gamma}")
        if self.hurst is not None and self.gamma >= self.hurst:
            raise ConfigError(f"gamma={self.gamma} must be below the Hurst index {self.hurst}")


def gamma_tilde(horizon: float, m: int, d: int) -> float:
    """Cost exponent T * m * (d + 1) of one discretized kernel evaluation."""
    return horizon * m * (d + 1)


def allocate_budget(
    euler_steps: int,
    gamma: float,
    horizon: float,
    m: int,
    d: int,
    scale: float = 1.0,
    n_max: int = 10**6,
) -> int:
    """Monte-Carlo path count N = ceil(scale * M^(gt/(2 gamma - 1) - 3)).

    gt = T m (d+1). The asymptotic rule can demand infeasible N, so the result
    is capped at n_max with a warning.
    """
    if gamma <= 0.5:
        raise ConfigError(f"gamma must exceed 1/2, got {gamma}")
    exponent = gamma_tilde(horizon, m, d) / (2.0 * gamma - 1.0) - 3.0
    n = int(np.ceil(scale * float(euler_steps) ** exponent))
    n = max(n, 1)
    if n > n_max:
        warnings.warn(
            f"budget rule requests N={n:.3e} paths; capping at {n_max}", stacklevel=2
        )
        n = int(n_max)
    return n


@dataclass
class ScoreValue:
    """Per-observation kernels and the assembled score with standard errors."""

    w: np.ndarray  # (n,)
    w_se: np.ndarray  # (n,)
    v: np.ndarray  # (n, q)
    v_se: np.ndarray  # (n, q)
    score: np.ndarray  # (q,)
    score_se: np.ndarray  # (q,)
    n_paths: int
    used: np.ndarray | None = None  # boolean mask of observations in the sum
    flagged: tuple = ()  # observation indices whose W failed the threshold


def _block_seeds(seed: int, key: tuple, n_paths: int):
    """Yield (block_index, n_block, generator) with a fixed block structure."""
    done = 0
    b = 0
    while done < n_paths:
        nb = min(_BLOCK, n_paths - done)
        ss = np.random.SeedSequence(entropy=seed, spawn_key=key + (b,))
        yield b, nb, np.random.default_rng(ss)
        done += nb
        b += 1


def _draw_increments(rng, n_block: int, d: int, grid: TimeGrid, h: HurstParam) -> np.ndarray:
    z = rng.standard_normal((n_block, d, 2 * grid.steps))
    return fgn_from_normals(h.h, grid.steps, grid.dt, z)


def _phi_bar(z: np.ndarray) -> np.ndarray:
    """Standard normal upper tail probability, floored away from zero."""
    import math

    out = np.array([0.5 * math.erfc(float(v) / math.sqrt(2.0)) for v in np.atleast_1d(z)])
    return np.maximum(out, 1e-300)


def _indicator(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.prod(y > x, axis=-1).astype(float)


def _positive_part(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.prod(np.maximum(y - x, 0.0), axis=-1)


def _positive_part_grad_factor(y: np.ndarray, x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Pathwise theta-derivative of prod(Y - x)_+: (..., q)."""
    m = y.shape[-1]
    out = np.zeros(grad_y.shape[:-1])
    for c in range(m):
        rest = np.ones(y.shape[:-1])
        for c2 in range(m):
            if c2 != c:
                rest = rest * np.maximum(y[..., c2] - x[c2], 0.0)
        out = out + grad_y[..., c] * ((y[..., c] > x[c]) * rest)[..., None]
    return out


def _mean_se(total: float, total_sq: float, n: int) -> tuple[float, float]:
    mean = total / n
    if n < 2:
        return mean, float("nan")
    var = max(total_sq / n - mean**2, 0.0) * n / (n - 1)
    return mean, float(np.sqrt(var / n))


def _deterministic_mean(model: ModelSpec, theta: np.ndarray, grid: TimeGrid, a: np.ndarray) -> np.ndarray:
    """Noise-free Euler path (the mean trajectory for linear-additive models)."""
    out = np.empty((grid.steps + 1, model.m))
    state = np.array(a, dtype=float)
    out[0] = state
    for k in range(grid.steps):
        state = state + np.asarray(model.mu(state, theta), float) * grid.dt
        out[k + 1] = state
    return out


def _density_terms_additive(
    model: ModelSpec,
    theta: np.ndarray,
    kernels: AdditiveKernels,
    incr: np.ndarray,
    paths: np.ndarray,
    t_node: int,
    x: np.ndarray,
    representation: str,
    a: np.ndarray,
) -> np.ndarray:
    y_t = paths[:, t_node, :]
    idx_m = tuple(range(1, model.m + 1))
    if representation == "auto":
        # exact rearrangement: E[H] = 0 with parity (-1)^m under the
        # reflection of the driving Gaussians, so the indicator may sit on
        # either side; pick the tail side of x, where the variance is small
        mean = _deterministic_mean(model, theta, kernels.grid, a)[t_node]
        sd = np.sqrt(np.diag(kernels.at(t_node)["gamma"]))
        z = (x - mean) / sd
        lower = np.sum(np.log(_phi_bar(-z))) < np.sum(np.log(_phi_bar(z)))
        h_val = kernels.weight_values(idx_m, incr, t_node)
        if lower:
            return (-1.0) ** model.m * _indicator(x, y_t) * h_val
        return _indicator(y_t, x) * h_val
    if representation == "indicator":
        h_val = kernels.weight_values(idx_m, incr, t_node)
        return _indicator(y_t, x) * h_val
    if representation == "positive-part":
        idx = idx_m * 2
        h_val = kernels.weight_values(idx, incr, t_node)
        return _positive_part(y_t, x) * h_val
    raise ConfigError(f"unknown representation {representation!r}")


def estimate_density(
    model: ModelSpec,
    theta,
    t: float,
    x,
    budget: Budget,
    seed: int,
    h,
    a=None,
    representation: str = "indicator",
    stream_key: tuple = (0,),
) -> tuple[float, float]:
    """Monte-Carlo density estimate of Y_t at x, with its standard error.

    representation: "indicator" (the defining form E[1_(Y>x) H_(1..m)]),
    "positive-part" (E[(Y-x)_+ H_(1..m,1..m)]), or "auto" (the indicator on
    the tail side of x, an exact rearrangement through E[H] = 0 that keeps
    the estimator variance small at both tails).
    """
    theta = model.check_theta(theta)
    hp = HurstParam.coerce(h)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = np.asarray(model.initial_state if a is None else a, dtype=float)
    grid = TimeGrid(horizon=float(t), steps=budget.euler_steps)
    t_node = grid.steps
    total = total_sq = 0.0
    if model.linear_additive:
        kernels = AdditiveKernels(model, theta, grid, hp, [t_node], with_grad=False)
        for _, nb, rng in _block_seeds(seed, stream_key, budget.mc_paths):
            incr = _draw_increments(rng, nb, model.d, grid, hp)
            paths = euler_solve_batch(model, theta, incr, a, grid.dt)
            vals = _density_terms_additive(
                model, theta, kernels, incr, paths, t_node, x, representation, a
            )
            total += float(vals.sum())
            total_sq += float((vals**2).sum())
    else:
        if model.m != 1 or representation != "indicator":
            raise CapabilityError(
                "nonlinear models support the scalar indicator representation only"
            )
        for _, nb, rng in _block_seeds(seed, stream_key, budget.mc_paths):
            incr = _draw_increments(rng, nb, model.d, grid, hp)
            paths = euler_solve_batch(model, theta, incr, a, grid.dt)
            for k in range(nb):
                fbm = FbmPath(grid=grid, hurst=hp, seed=-1, values=np.concatenate(
                    [np.zeros((model.d, 1)), np.cumsum(incr[k], axis=1)], axis=1))
                sol = SolutionPath(grid=grid, values=paths[k].T)
                bundle = PathBundle(model, theta, fbm, sol, hp)
                wv = h_weight((1,), bundle, t_node)
                val = float(paths[k, t_node, 0] > x[0]) * wv.value
                total += val
                total_sq += val**2
    return _mean_se(total, total_sq, budget.mc_paths)


def estimate_W(
    model: ModelSpec,
    theta,
    obs: Observations,
    i: int,
    budget: Budget,
    seed: int,
    h,
    a=None,
) -> tuple[float, float]:
    """W_i: the density estimate at (t_i, y_i) on the observation grid."""
    if not 0 <= i < obs.n:
        raise ConfigError(f"observation index {i} outside 0..{obs.n - 1}")
    sub = TimeGrid(horizon=float(obs.times[i]), steps=int(obs.node_indices[i]))
    sub_budget = Budget(sub.steps, budget.mc_paths, budget.gamma, budget.hurst)
    return estimate_density(
        model, theta, obs.times[i], obs.values[i], sub_budget, seed, h, a,
        stream_key=(i,),
    )


def estimate_V(
    model: ModelSpec,
    theta,
    l: int,
    obs: Observations,
    i: int,
    budget: Budget,
    seed: int,
    h,
    a=None,
) -> tuple[float, float]:
    """V_i for parameter coordinate l, on the same path stream as W_i."""
    theta = model.check_theta(theta)
    if not model.linear_additive:
        raise CapabilityError("V estimation needs depth-2m weight gradients (linear-additive class)")
    if not 0 <= l < model.q:
        raise ConfigError(f"parameter index {l} outside 0..{model.q - 1}")
    hp = HurstParam.coerce(h)
    a = np.asarray(model.initial_state if a is None else a, dtype=float)
    sub = TimeGrid(horizon=float(obs.times[i]), steps=int(obs.node_indices[i]))
    t_node = sub.steps
    x = obs.values[i]
    idx2m = tuple(range(1, model.m + 1)) * 2
    kernels = AdditiveKernels(model, theta, sub, hp, [t_node], with_grad=True)
    total = total_sq = 0.0
    for _, nb, rng in _block_seeds(seed, (i,), budget.mc_paths):
        incr = _draw_increments(rng, nb, model.d, sub, hp)
        paths = euler_solve_batch(model, theta, incr, a, sub.dt)
        grads = theta_gradient_batch(model, theta, incr, paths, sub.dt)
        y_t = paths[:, t_node, :]
        g_t = grads[:, t_node, :, :]  # (nb, q, m)
        h2 = kernels.weight_values(idx2m, incr, t_node)
        dh2 = kernels.grad_weight_values(idx2m, incr, t_node)  # (nb, q)
        term1 = _positive_part_grad_factor(y_t, x, g_t) * h2[:, None]
        term2 = _positive_part(y_t, x)[:, None] * dh2
        vals = (term1 + term2)[:, l]
        total += float(vals.sum())
        total_sq += float((vals**2).sum())
    return _mean_se(total, total_sq, budget.mc_paths)


def score(
    model: ModelSpec,
    theta,
    obs: Observations,
    budget: Budget,
    seed: int,
    h,
    a=None,
    w_floor: float = 1e-8,
    on_unreliable: str = "raise",
) -> ScoreValue:
    """Assembled score sum_i V_i / W_i over all parameter coordinates.

    One batch of N full-horizon paths serves every observation (the state and
    its theta-gradient at each t_i are read off the same trajectory), so the
    whole score is a deterministic function of (theta, seed).

    An observation whose W_i falls below max(3 SE, w_floor) has a density
    denominator statistically indistinguishable from zero. With
    on_unreliable="raise" (default) the first such observation raises
    UnreliableScoreError naming it. With "clamp" the denominator of a flagged
    term is replaced by its threshold: the term keeps the sign of V_i (it
    still votes for parameters that make its observation likelier) but its
    magnitude is capped, so one tail observation cannot blow up the sum.
    Clamping is what iterative estimation uses; dropping flagged terms
    instead would remove exactly the observations that disagree with the
    current parameter and make every parameter self-consistent. The error is
    still raised in clamp mode when fewer than half the observations survive
    unclamped.
    """
    theta = model.check_theta(theta)
    if not model.linear_additive:
        raise CapabilityError("score needs depth-2m weight gradients (linear-additive class)")
    hp = HurstParam.coerce(h)
    a = np.asarray(model.initial_state if a is None else a, dtype=float)
    grid = obs.grid
    if budget.euler_steps != grid.steps:
        raise ConfigError(
            f"budget euler_steps {budget.euler_steps} != observation grid steps {grid.steps}"
        )
    n, q, n_paths = obs.n, model.q, budget.mc_paths
    nodes = [int(k) for k in obs.node_indices]
    idx_m = tuple(range(1, model.m + 1))
    idx_2m = idx_m * 2
    kernels = AdditiveKernels(model, theta, grid, hp, nodes, with_grad=True)
    # Two exact variance reductions, both inside the exact-indicator class:
    #
    # * decorrelation: each observation is scored through Z = R^T Y with R
    #   the eigenvectors of gamma_t at the current theta (held fixed inside
    #   the evaluation, so no eigenvector derivatives enter). Z is again a
    #   linear-additive functional of the driving noise with f_Y(y) =
    #   f_Z(R^T y), and its orthant masses factor into marginal tails, which
    #   matters when the state coordinates are strongly correlated.
    #
    # * tail-side selection: the driving Gaussians are exactly centered and
    #   the weights have parity (-1)^depth under G -> -G, so reflecting about
    #   the deterministic mean gives a second exact representation:
    #   (-1)^m E[prod 1_(Z<=z) H_m] = E[prod 1_(Z>z) H_m] and
    #   E[prod (z-Z)_+ H_2m] = E[prod (Z-z)_+ H_2m]. Each observation uses
    #   the orthant with the smaller mass, where the indicator variance is
    #   far smaller for tail observations.
    mean_path = _deterministic_mean(model, theta, grid, a)
    w_fac = np.empty((n_paths, n, model.m))  # per-coordinate depth-1 factors
    v_all = np.empty((n_paths, n, q))
    rot, x_z, coord_lower, use_lower = [], [], [], []
    for i, t_node in enumerate(nodes):
        r, entry = kernels.rotated_at(t_node)
        rot.append(r)
        x_z.append(obs.values[i] @ r)
        z = (x_z[i] - mean_path[t_node] @ r) / np.sqrt(np.diag(entry["gamma"]))
        # indicator on the side with the smaller mass: fewer paths, less noise
        coord_lower.append(z < 0.0)
        use_lower.append(np.sum(np.log(_phi_bar(-z))) < np.sum(np.log(_phi_bar(z))))
    done = 0
    for _, nb, rng in _block_seeds(seed, (), n_paths):
        incr = _draw_increments(rng, nb, model.d, grid, hp)
        paths = euler_solve_batch(model, theta, incr, a, grid.dt)
        grads = theta_gradient_batch(model, theta, incr, paths, grid.dt)
        for i, t_node in enumerate(nodes):
            x = x_z[i]
            y_t = paths[:, t_node, :] @ rot[i]
            g_t = grads[:, t_node, :, :] @ rot[i]
            g_gauss = kernels.gaussians(incr, t_node, rotated=True)  # = (Z - mean)/var
            # W factors: in the decorrelated frame the coordinates are
            # independent at the evaluation theta and the depth-m weight is
            # the product of the per-coordinate depth-1 weights, so
            # E[prod 1_(Z_c>x_c) G_c] = prod_c E[1_(Z_c>x_c) G_c]; averaging
            # each factor separately removes the product-noise inflation.
            for c in range(model.m):
                if coord_lower[i][c]:
                    w_fac[done : done + nb, i, c] = (
                        -(y_t[:, c] < x[c]).astype(float) * g_gauss[:, c]
                    )
                else:
                    w_fac[done : done + nb, i, c] = (
                        (y_t[:, c] > x[c]).astype(float) * g_gauss[:, c]
                    )
            h_2m = kernels.weight_values(idx_2m, incr, t_node, rotated=True)
            dh_2m = kernels.grad_weight_values(idx_2m, incr, t_node, rotated=True)
            if use_lower[i]:
                v_all[done : done + nb, i] = (
                    -_positive_part_grad_factor(-y_t, -x, g_t) * h_2m[:, None]
                    + _positive_part(-y_t, -x)[:, None] * dh_2m
                )
            else:
                v_all[done : done + nb, i] = (
                    _positive_part_grad_factor(y_t, x, g_t) * h_2m[:, None]
                    + _positive_part(y_t, x)[:, None] * dh_2m
                )
        done += nb
    fac_mean = w_fac.mean(axis=0)  # (n, m)
    w_mean = fac_mean.prod(axis=1)
    v_mean = v_all.mean(axis=0)
    if n_paths > 1:
        fac_se = w_fac.std(axis=0, ddof=1) / np.sqrt(n_paths)
        # exact product-of-independent-estimates variance:
        # Var(prod) = prod(se^2 + mean^2) - prod(mean^2)
        w_var = (fac_se**2 + fac_mean**2).prod(axis=1) - (fac_mean**2).prod(axis=1)
        w_se = np.sqrt(np.maximum(w_var, 0.0))
        v_se = v_all.std(axis=0, ddof=1) / np.sqrt(n_paths)
    else:
        w_se = np.full(n, np.nan)
        v_se = np.full((n, q), np.nan)
    if on_unreliable not in ("raise", "clamp"):
        raise ConfigError(f"on_unreliable must be 'raise' or 'clamp', got {on_unreliable!r}")
    used = np.ones(n, dtype=bool)
    flagged = []
    wm = w_mean.copy()
    for i in range(n):
        se_i = w_se[i] if np.isfinite(w_se[i]) else 0.0
        threshold = max(3.0 * se_i, w_floor)
        if not np.isfinite(w_mean[i]) or w_mean[i] <= threshold:
            if on_unreliable == "raise":
                raise UnreliableScoreError(observation=i, value=w_mean[i], threshold=threshold)
            used[i] = False
            flagged.append(i)
            # denominator floored at one standard error: a flagged term keeps
            # as much of its magnitude as the sample can actually resolve
            wm[i] = max(w_mean[i], se_i, w_floor)
    if used.sum() < max(1, n // 10):
        i = flagged[0]
        raise UnreliableScoreError(observation=i, value=w_mean[i], threshold=w_floor)
    total = (v_mean / wm[:, None]).sum(axis=0)
    # delta-method: per-path influence of the ratio sum captures cross-observation
    # correlation from the shared paths; a clamped denominator is a constant
    safe_fac = np.where(np.abs(fac_mean) > 1e-300, fac_mean, 1.0)
    w_dev = ((w_fac - fac_mean[None, :, :]) / safe_fac[None, :, :]).sum(axis=2)
    infl = v_all / wm[None, :, None] - (
        (v_mean / wm[:, None])[None, :, :] * w_dev[:, :, None]
    ) * used[None, :, None]
    infl = infl.sum(axis=1)  # (n_paths, q)
    if n_paths > 1:
        score_se = infl.std(axis=0, ddof=1) / np.sqrt(n_paths)
    else:
        score_se = np.full(q, np.nan)
    return ScoreValue(
        w=w_mean, w_se=w_se, v=v_mean, v_se=v_se, score=total,
        score_se=score_se, n_paths=n_paths, used=used, flagged=tuple(flagged),
    )
