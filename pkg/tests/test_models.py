"""Built-in model specs, flag probes and the OU closed-form oracle."""

import json

import numpy as np
import pytest

from fracmle.errors import ConfigError
from fracmle.fbm import TimeGrid, simulate_fbm, weighted_inner
from fracmle.models import ModelSpec, get_model, load_model_file, ou_oracle, register_model


def _zero(shape):
    return lambda y, th: np.zeros(shape)


class TestBuiltins:
    def test_fou_values(self):
        fou = get_model("fou", [0.5])
        y = np.array([1.0])
        th = np.array([0.5])
        assert fou.mu(y, th)[0] == pytest.approx(-0.5)
        assert np.asarray(fou.sigma(y, th)).reshape(()) == 1.0
        assert np.asarray(fou.dmu(y, th)).reshape(()) == pytest.approx(-0.5)
        assert np.all(np.asarray(fou.d2mu(y, th)) == 0.0)
        assert fou.linear_additive

    def test_linear2d_values(self):
        m2 = get_model("linear2d", [2.0, 4.0])
        y = np.array([1.0, 2.0])
        th = np.array([2.0, 4.0])
        assert np.allclose(m2.mu(y, th), [-4.0, -4.0])
        assert np.allclose(m2.sigma(y, th), 4.0 * np.eye(2))
        assert np.allclose(m2.dmu(y, th), [[0.0, -2.0], [-4.0, 0.0]])

    def test_findrift_values(self):
        fd = get_model("findrift", [0.015, 0.352])
        y = np.array([100.0])
        th = np.array([0.015, 0.352])
        assert fd.mu(y, th)[0] == pytest.approx(1.5)
        assert np.asarray(fd.sigma(y, th)).reshape(()) == pytest.approx(0.352)
        assert fd.linear_additive

    def test_unknown_model_lists_names(self):
        with pytest.raises(ConfigError, match="fou"):
            get_model("nope")

    def test_wrong_theta_length(self):
        with pytest.raises(ConfigError):
            get_model("fou", [1.0, 2.0])


class TestFlagProbes:
    def test_false_linearity_flag_rejected(self):
        bad = ModelSpec(
            name="bad",
            m=1,
            d=1,
            q=1,
            mu=lambda y, th: y**2,
            sigma=lambda y, th: np.ones((1, 1)),
            dmu=lambda y, th: 2 * y[..., None],
            dsigma=_zero((1, 1, 1)),
            d2mu=lambda y, th: 2 * np.ones((1, 1, 1)),
            d2sigma=_zero((1, 1, 1, 1)),
            grad_mu=_zero((1, 1)),
            grad_sigma=_zero((1, 1, 1)),
            grad_dmu=_zero((1, 1, 1)),
            grad_dsigma=_zero((1, 1, 1, 1)),
            linear_drift=True,
            additive_noise=True,
        )
        register_model("bad-linear", lambda: bad)
        with pytest.raises(ConfigError, match="linear_drift"):
            get_model("bad-linear", [1.0])

    def test_degenerate_diffusion_rejected(self):
        flat = ModelSpec(
            name="flat",
            m=1,
            d=1,
            q=1,
            mu=lambda y, th: -y,
            sigma=_zero((1, 1)),
            dmu=lambda y, th: -np.ones((1, 1)),
            dsigma=_zero((1, 1, 1)),
            d2mu=_zero((1, 1, 1)),
            d2sigma=_zero((1, 1, 1, 1)),
            grad_mu=_zero((1, 1)),
            grad_sigma=_zero((1, 1, 1)),
            grad_dmu=_zero((1, 1, 1)),
            grad_dsigma=_zero((1, 1, 1, 1)),
            linear_drift=True,
            additive_noise=True,
        )
        register_model("flat-noise", lambda: flat)
        with pytest.raises(ConfigError, match="elliptic"):
            get_model("flat-noise", [1.0])

    def test_builtin_diffusions_uniformly_elliptic(self):
        # probes run inside get_model; constructing the builtins is the check
        for name in ("fou", "linear2d", "findrift"):
            get_model(name)


class TestModelFile:
    def test_round_trip(self, tmp_path):
        doc = {"model": "fou", "theta": [0.7], "initial_state": [1.0]}
        path = tmp_path / "model.json"
        path.write_text(json.dumps(doc))
        spec, theta = load_model_file(str(path))
        assert spec.name == "fou"
        assert theta[0] == 0.7
        assert spec.initial_state == (1.0,)

    def test_unknown_reference_rejected(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"model": "mystery"}))
        with pytest.raises(ConfigError):
            load_model_file(str(path))


class TestOuOracle:
    def setup_method(self):
        self.lam, self.h = 0.5, 0.6
        self.grid = TimeGrid(1.0, 256)
        self.fbm = simulate_fbm(self.grid, 1, self.h, seed=77)
        self.ora = ou_oracle(self.lam, self.h, self.fbm)

    def test_kernel_at_zero_lag(self):
        assert self.ora.d_kernel(200)[-1] == pytest.approx(
            np.exp(-self.lam * self.grid.dt)
        )
        # value right at s = t is 1 by construction of the kernel
        assert np.exp(-self.lam * 0.0) == 1.0

    def test_gamma_additive_limit(self):
        flat = ou_oracle(0.0, self.h, self.fbm)
        t = 256
        assert flat.gamma(t) == pytest.approx(1.0 ** (2 * self.h), rel=1e-10)

    def test_gamma_self_consistent_with_weighted_inner(self):
        t = 256
        ker = self.ora.d_kernel(t)
        direct = weighted_inner(ker, ker, self.grid, self.h)
        assert self.ora.gamma(t) == pytest.approx(direct, rel=1e-12)

    def test_lambda_derivatives_match_finite_differences(self):
        eps = 1e-5
        up = ou_oracle(self.lam + eps, self.h, self.fbm)
        dn = ou_oracle(self.lam - eps, self.h, self.fbm)
        t = 256
        fd_y = (up.y[t] - dn.y[t]) / (2 * eps)
        assert self.ora.dy_dlam[t] == pytest.approx(fd_y, rel=1e-6, abs=1e-8)
        fd_gamma = (up.gamma(t) - dn.gamma(t)) / (2 * eps)
        assert self.ora.dlam_gamma(t) == pytest.approx(fd_gamma, rel=1e-6)
        fd_h11 = (up.h11(t) - dn.h11(t)) / (2 * eps)
        assert self.ora.dlam_h11(t) == pytest.approx(fd_h11, rel=1e-5)

    def test_gradient_sign(self):
        # increasing the reversion rate shrinks the variance
        assert self.ora.dlam_gamma(256) < 0.0

    def test_weight_identities(self):
        t = 256
        g = self.ora.gamma(t)
        h1 = self.ora.h1(t)
        assert h1 == pytest.approx(self.ora.y[t] / g)
        assert self.ora.h11(t) == pytest.approx(h1 * h1 - 1.0 / g)

    def test_density_identity_monte_carlo(self):
        # E[1_(Y>x) H1] is the centered Gaussian density with variance gamma
        lam, h, t = 0.5, 0.6, 64
        grid = TimeGrid(0.25, 64)
        vals, gammas = [], None
        for s in range(4000):
            fbm = simulate_fbm(grid, 1, h, seed=9000 + s)
            ora = ou_oracle(lam, h, fbm)
            if gammas is None:
                gammas = ora.gamma(t)
            vals.append((ora.y[t] > 0.0) * ora.h1(t))
        vals = np.array(vals)
        want = 1.0 / np.sqrt(2 * np.pi * gammas)
        assert abs(vals.mean() - want) < 3 * vals.std() / np.sqrt(vals.size)
