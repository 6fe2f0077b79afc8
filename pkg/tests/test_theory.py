import math

import numpy as np
import pytest
from scipy import integrate

from selfheal.dynamics import matrix_exponential
from selfheal.errors import (
    ConfigError,
    InstabilityError,
    NonConvergentModeError,
    NumericError,
    UnsupportedModelError,
)
from selfheal.lattice import HoppingModel, build_hamiltonian, eigensystem, select_eigenstate
from selfheal.metrics import FtleSeries
from selfheal.noise import OUParams, coherence_function, kernel_Q, q_infinity
from selfheal.theory import (
    asymptotic_zeta,
    correlation_length,
    dissipation_rate,
    drift_diffusion_density,
    effective_time,
    lambda_infty_obc,
    lambda_infty_pbc,
    master_equation_step,
    master_rate_matrix,
    one_over_t_fit,
    short_time_xi_slope,
    sine_coefficients,
    solve_master_equation,
    transport_coefficients,
    weak_noise_K,
    weak_noise_variance_infty,
    weak_noise_variance_init,
)

from .conftest import weak_coefficients_run

STRONG = OUParams(5.0, 10.0)
WEAK = OUParams(1.0, 0.1)


def kernel_moments(model, L=41):
    """Source, drift and diffusion read off one column of the periodic rate matrix."""
    G = master_rate_matrix(model, L, "pbc")
    c = L // 2
    col = G[:, c]
    d = np.arange(L) - c
    return col.sum(), -np.sum(d * col), 0.5 * np.sum(d**2 * col)


class TestTransport:
    def test_main_model_by_hand(self, main_model):
        tc = transport_coefficients(main_model)
        assert tc.S_bar == pytest.approx(0.3**2 + 0.2**2)
        assert tc.v_bar == pytest.approx(1 * (1 - 0.49) + 2 * (1 - 0.64))
        assert tc.D_bar == pytest.approx(0.5 * (1.49 + 4 * 1.64))

    @pytest.mark.parametrize("amps", [(0.7, 1, 0.8, 1), (0.5, 1, 0.4, 0.8),
                                      (0.2, 0.5, 0.6, 1, 0.1, 0.3), (1.3, 0.2)])
    def test_against_rate_kernel_moments(self, amps):
        model = HoppingModel.from_pairs(*amps)
        tc = transport_coefficients(model)
        S, v, D = kernel_moments(model)
        assert (tc.S_bar, tc.v_bar, tc.D_bar) == pytest.approx((S, v, D), abs=1e-12)

    def test_lattice_constant(self):
        tc1 = transport_coefficients(HoppingModel({1: 0.7, -1: 1.0}))
        tc2 = transport_coefficients(HoppingModel({1: 0.7, -1: 1.0}, lattice_constant=2.0))
        assert tc2.S_bar == tc1.S_bar
        assert tc2.v_bar == pytest.approx(2 * tc1.v_bar)
        assert tc2.D_bar == pytest.approx(4 * tc1.D_bar)

    def test_complex_rejected(self):
        with pytest.raises(UnsupportedModelError):
            transport_coefficients(HoppingModel({1: 0.5j, -1: 1.0}))

    def test_lambda_infty_reference_value(self, main_model):
        # reference asymptote 0.01444 for (theta, sigma) = (5, 10)
        tc = transport_coefficients(main_model)
        q = q_infinity(coherence_function(STRONG))
        assert lambda_infty_obc(tc, q) == pytest.approx(0.01444, abs=5e-6)

    def test_lambda_infty_finite_chain(self, main_model):
        tc = transport_coefficients(main_model)
        q = 0.4
        gap = lambda_infty_obc(tc, q) - lambda_infty_obc(tc, q, L=100)
        assert gap == pytest.approx(2 * q * tc.D_bar * math.pi**2 / (2 * 100**2))
        assert asymptotic_zeta(tc, q, 100) == pytest.approx(2 * lambda_infty_obc(tc, q, 100))
        assert lambda_infty_obc(tc, 0.0) == 0.0 and asymptotic_zeta(tc, 0.0, 100) == 0.0
        with pytest.raises(ValueError):
            lambda_infty_obc(tc, -1.0)

    def test_pbc_bound_exceeds_obc(self, main_model):
        tc = transport_coefficients(main_model)
        assert lambda_infty_pbc(tc, 0.4) == pytest.approx(0.4 * 0.13)
        assert lambda_infty_pbc(tc, 0.4) > lambda_infty_obc(tc, 0.4)


class TestCorrelationLength:
    @pytest.mark.parametrize("amps, ref", [
        ((0.7, 1, 0.8, 1), 3.27),
        ((0.6, 1, 0.7, 0.8), 3.13),
        ((0.2, 0.5, 0.6, 1, 0.1, 0.3), 1.92),
        ((0.5, 1, 0.4, 0.8), 1.30),
    ])
    def test_reference_table(self, amps, ref):
        model = HoppingModel.from_pairs(*amps)
        xi = correlation_length(model)
        assert xi == pytest.approx(ref, abs=0.005)
        _, v, D = kernel_moments(model)
        assert xi == pytest.approx(D / v)

    def test_reciprocal(self):
        assert correlation_length(HoppingModel({1: 1.0, -1: 1.0})) == math.inf


class TestDriftDiffusion:
    def setup_method(self):
        self.tc = transport_coefficients(HoppingModel.from_pairs(0.7, 1, 0.8, 1))
        self.q = 0.4
        self.L = 41.0
        self.x = np.linspace(0, self.L, 821)

    def test_single_mode_projection(self):
        _, v, D = self.tc.at(self.q)
        k = v / (2 * D)
        f = np.exp(-k * self.x) * np.sin(2 * math.pi * self.x / self.L)
        sol = sine_coefficients(self.x, f, self.tc, self.q, n_modes=8)
        expect = np.zeros(8)
        expect[1] = 1
        assert np.allclose(sol.c, expect, atol=1e-8)

    def test_reproduces_initial_density(self):
        f = np.exp(-((self.x - 20) ** 2) / 18)
        sol = sine_coefficients(self.x, f, self.tc, self.q, n_modes=128)
        assert np.max(np.abs(drift_diffusion_density(sol, self.x, 0.0) - f)) < 1e-6

    def test_pde_residual_and_boundaries(self):
        f = np.exp(-((self.x - 20) ** 2) / 18)
        sol = sine_coefficients(self.x, f, self.tc, self.q)
        S, v, D = sol.S, sol.v, sol.D
        x = np.linspace(5, 36, 32)
        t, h, dx = 3.0, 1e-4, 1e-3
        rho = lambda xx, tt: drift_diffusion_density(sol, xx, tt)  # noqa: E731
        dt_ = (rho(x, t + h) - rho(x, t - h)) / (2 * h)
        dx1 = (rho(x + dx, t) - rho(x - dx, t)) / (2 * dx)
        dx2 = (rho(x + dx, t) - 2 * rho(x, t) + rho(x - dx, t)) / dx**2
        resid = dt_ - (S * rho(x, t) + v * dx1 + D * dx2)
        assert np.max(np.abs(resid)) < 1e-5 * np.max(np.abs(rho(x, t)))
        assert abs(rho(0.0, t)) < 1e-12 and abs(rho(self.L, t)) < 1e-12

    def test_long_time_rate(self):
        _, v, D = self.tc.at(self.q)
        f = np.exp(-v / (2 * D) * self.x) * np.sin(math.pi * self.x / self.L)
        sol = sine_coefficients(self.x, f, self.tc, self.q, n_modes=4)
        r = math.log(drift_diffusion_density(sol, 12.0, 11.0) / drift_diffusion_density(sol, 12.0, 10.0))
        assert r == pytest.approx(asymptotic_zeta(self.tc, self.q, self.L), rel=1e-8)

    def test_guards(self):
        with pytest.raises(ValueError):
            sine_coefficients(np.array([0, 1, 3.0]), np.ones(3), self.tc, self.q)
        x = np.linspace(0, 5000, 5001)
        with pytest.raises(NumericError):
            sine_coefficients(x, np.ones_like(x), self.tc, self.q)

    def test_effective_time(self):
        coh = coherence_function(STRONG)
        q = q_infinity(coh)
        direct, _ = integrate.quad(lambda s: kernel_Q(coh, s), 0, 5, limit=200)
        assert effective_time(coh, 5.0, q) == pytest.approx(direct / q, rel=1e-6)
        # Q(t) rises to Q_inf, so effective time lags real time
        assert effective_time(coh, 5.0, q) < 5.0


def brute_rate_matrix(model, L, pbc, variant):
    G = np.zeros((L, L))
    for j in range(L):
        for n, t in model.hops.items():
            s = j - n
            if pbc:
                s %= L
            if 0 <= s < L:
                G[j, s] += abs(t) ** 2
            if variant == "reconciled":
                G[j, j] -= (t * model.hop(-n)).real
            else:
                G[j, j] -= abs(model.hop(-n)) ** 2
    return G


class TestMasterEquation:
    @pytest.mark.parametrize("bc", ["obc", "pbc"])
    @pytest.mark.parametrize("variant", ["reconciled", "printed"])
    def test_rate_matrix_brute_force(self, main_model, bc, variant):
        G = master_rate_matrix(main_model, 9, bc, variant)
        assert np.allclose(G, brute_rate_matrix(main_model, 9, bc == "pbc", variant))

    def test_printed_conserves_under_pbc(self, main_model, rng):
        P0 = rng.random(30)
        out = solve_master_equation(P0, main_model, 0.4, [1.0, 5.0], bc="pbc", variant="printed")
        assert np.allclose(out.sum(axis=1), P0.sum(), rtol=1e-12)

    def test_uniform_growth_under_pbc(self, main_model):
        tc = transport_coefficients(main_model)
        out = solve_master_equation(np.ones(30), main_model, 0.4, [5.0], bc="pbc")
        assert np.allclose(out[0], math.exp(2 * 0.4 * tc.S_bar * 5.0), rtol=1e-10)

    def test_edge_correction_only_touches_edges(self, main_model):
        full = master_rate_matrix(main_model, 20, "obc", edge="full")
        corr = master_rate_matrix(main_model, 20, "obc", edge="corrected")
        diff = np.nonzero(np.any(full != corr, axis=1))[0]
        assert set(diff) <= {0, 1, 18, 19}
        assert np.array_equal(full[2:18], corr[2:18])

    def test_step_matches_matrix_exponential(self, main_model, rng):
        P0 = rng.random(15)
        G = master_rate_matrix(main_model, 15)
        exact = matrix_exponential(2 * 0.4 * 0.01 * G).real @ P0
        step = master_equation_step(P0, main_model, 0.4, 0.01)
        assert np.allclose(step, exact, rtol=1e-11)

    def test_callable_constant_kernel(self, main_model):
        P0 = np.exp(-((np.arange(20) - 10.0) ** 2))
        a = solve_master_equation(P0, main_model, 0.4, [2.0])
        b = solve_master_equation(P0, main_model, lambda t: 0.4, [2.0])
        assert np.array_equal(a, b)

    def test_bulk_agrees_with_drift_diffusion(self, main_model):
        L = 201
        tc = transport_coefficients(main_model)
        q = 0.4
        P0 = np.exp(-((np.arange(L) - 100.0) ** 2) / 18)
        P = solve_master_equation(P0, main_model, q, [5.0])[0]
        x = np.arange(L) + 1.0
        grid = np.concatenate([[0.0], x, [L + 1.0]])
        sol = sine_coefficients(grid, np.concatenate([[0], P0, [0]]), tc, q,
                                length=L + 1.0, n_modes=256)
        rho = drift_diffusion_density(sol, x, 5.0)
        dist = np.abs(P / P.sum() - rho / rho.sum()).sum()
        assert dist < 0.03

    def test_errors(self, main_model):
        with pytest.raises(UnsupportedModelError):
            master_rate_matrix(HoppingModel({1: 1j, -1: 1.0}), 5)
        with pytest.raises(ConfigError):
            master_rate_matrix(main_model, 5, variant="other")
        with pytest.raises(ConfigError):
            master_rate_matrix(main_model, 5, edge="other")
        P0 = np.zeros(10)
        P0[5] = 1.0
        with pytest.raises(InstabilityError):
            master_equation_step(P0, main_model, 10.0, 1.0)
        with pytest.raises(ValueError):
            solve_master_equation(P0, main_model, 0.4, [2.0, 1.0])


class TestWeakNoise:
    def setup_method(self):
        self.spec = eigensystem(build_hamiltonian(HoppingModel.from_pairs(0.7, 1, 0.8, 1), 20))
        self.init, _ = select_eigenstate(self.spec, -0.35 + 0.1j)

    def test_K_brute_force(self):
        m = 4
        phi0 = self.spec.right[:, self.init]
        total = sum(abs(self.spec.left[j, m].conjugate() * phi0[j]) ** 2 for j in range(20))
        expect = WEAK.sigma**2 / (2 * WEAK.theta) * total
        assert weak_noise_K(self.spec, m, self.init, WEAK) == pytest.approx(expect)
        assert weak_noise_K(self.spec, m, phi0, WEAK) == pytest.approx(expect)

    def test_saturated_variance_quadrature(self):
        E = self.spec.energies
        checked = 0
        for m in range(20):
            dE = E[m] - E[self.init]
            if m == self.init or dE.imag <= 1e-6:
                continue
            # <|C|^2> = K int int e^{i dE u} e^{-i dE* u'} e^{-theta |u - u'|} du du'
            th = WEAK.theta
            lead = 1.0 / (2 * dE.imag)
            re, _ = integrate.quad(lambda w: (np.exp(1j * dE * w - th * w)).real, 0, np.inf)
            J = 2 * lead * re
            K = weak_noise_K(self.spec, m, self.init, WEAK)
            assert weak_noise_variance_infty(self.spec, m, self.init, WEAK) == pytest.approx(
                K * J, rel=1e-8)
            checked += 1
        assert checked >= 3

    def test_non_saturating_modes(self):
        E = self.spec.energies
        with pytest.raises(NonConvergentModeError):
            weak_noise_variance_infty(self.spec, self.init, self.init, WEAK)
        below = [m for m in range(20) if (E[m] - E[self.init]).imag < -1e-6]
        with pytest.raises(NonConvergentModeError):
            weak_noise_variance_infty(self.spec, below[0], self.init, WEAK)
        # real-spectrum pairs differ only by rounding in Im
        marginal = [m for m in range(20)
                    if m != self.init and abs((E[m] - E[self.init]).imag) < 1e-12]
        for m in marginal:
            with pytest.raises(NonConvergentModeError):
                weak_noise_variance_infty(self.spec, m, self.init, WEAK)

    @pytest.mark.parametrize("t", [0.3, 2.0, 15.0])
    def test_init_variance_quadrature(self, t):
        K = 0.7
        # symmetric kernel: twice the s < u triangle
        half, _ = integrate.dblquad(lambda s, u: math.exp(-WEAK.theta * (u - s)), 0, t, 0,
                                    lambda u: u)
        val = 2 * half
        assert weak_noise_variance_init(K, WEAK, t) == pytest.approx(K * val, rel=1e-7)

    def test_init_variance_regimes(self):
        K, th = 0.5, WEAK.theta
        t = np.array([1e-4, 1e3])
        v = weak_noise_variance_init(K, WEAK, t)
        assert v[0] == pytest.approx(K * t[0] ** 2, rel=1e-3)
        assert v[1] == pytest.approx(2 * K / th * (t[1] - 1 / th), rel=1e-12)


@pytest.mark.slow
def test_weak_noise_limit_monte_carlo():
    """First-order coefficient theory becomes exact as sigma -> 0."""
    ou = OUParams(1.0, 0.0125)
    model = HoppingModel.from_pairs(0.7, 1, 0.8, 1)
    spec = eigensystem(build_hamiltonian(model, 20))
    E = spec.energies
    ts = np.arange(2.0, 61.0, 2.0)

    top = int(np.argmax(E.imag))
    C = weak_coefficients_run(model, spec, top, ou, 2000, ts)
    var = np.mean(np.abs(C[:, top, :] * np.exp(1j * E[top] * ts)[:, None] - 1) ** 2, axis=1)
    K = weak_noise_K(spec, top, top, ou)
    assert np.allclose(var, weak_noise_variance_init(K, ou, ts), rtol=0.06)
    tail = ts >= 10
    assert np.polyfit(ts[tail], var[tail], 1)[0] == pytest.approx(2 * K / ou.theta, rel=0.05)

    init, _ = select_eigenstate(spec, -0.35 + 0.1j)
    C = weak_coefficients_run(model, spec, init, ou, 2000, ts)
    valid = [m for m in range(20) if m != init and (E[m] - E[init]).imag > 1e-6]
    valid.sort(key=lambda m: -weak_noise_K(spec, m, init, ou))
    for m in valid[:3]:
        k = int(np.argmin(np.abs(ts - min(3.0 / (E[m] - E[init]).imag, ts[-1]))))
        mc = np.mean(np.abs(C[k, m, :]) ** 2) * math.exp(-2 * E[m].imag * ts[k])
        assert mc == pytest.approx(weak_noise_variance_infty(spec, m, init, ou), rel=0.1)


class TestShortTime:
    def test_dissipation_rate_is_norm_derivative(self, main_model, rng):
        H = build_hamiltonian(main_model, 20)
        xi = rng.standard_normal(20) + 1j * rng.standard_normal(20)
        h = 1e-6
        n = lambda s: np.linalg.norm(matrix_exponential(-1j * H * s) @ xi) ** 2  # noqa: E731
        fd = (n(h) - n(-h)) / (2 * h)
        assert dissipation_rate(H, xi) == pytest.approx(fd, rel=1e-6)

    def test_slope_matches_finite_difference(self, main_model, rng):
        H = build_hamiltonian(main_model, 20)
        xi = 1e-3 * (rng.standard_normal(20) + 1j * rng.standard_normal(20))
        t1 = 4.0
        norm1 = np.linalg.norm(xi) ** 2
        a, b = short_time_xi_slope(norm1, dissipation_rate(H, xi), t1)
        lam = lambda s: math.log(np.linalg.norm(matrix_exponential(-1j * H * s) @ xi) ** 2) / (2 * (t1 + s))  # noqa: E731,E501
        assert a == pytest.approx(lam(0.0))
        h = 1e-5
        assert b == pytest.approx((lam(h) - lam(-h)) / (2 * h), rel=1e-5)
        with pytest.raises(ValueError):
            short_time_xi_slope(norm1, 0.0, 0.0)


class TestOneOverT:
    def test_exact_recovery(self):
        t = np.linspace(1, 100, 200)
        fit = one_over_t_fit(FtleSeries(t, 0.0144 + 3.5 / t), (10, 100))
        assert fit.lambda_inf == pytest.approx(0.0144, abs=1e-12)
        assert fit.coeff == pytest.approx(3.5, rel=1e-10)
        assert fit.r2 == pytest.approx(1.0)

    def test_noisy_recovery_within_stderr(self):
        rng = np.random.default_rng(5)
        t = np.linspace(200, 1000, 400)
        hits = 0
        for _ in range(200):
            y = 0.0144 + 3.5 / t + 1e-4 * rng.standard_normal(len(t))
            fit = one_over_t_fit(FtleSeries(t, y), (200, 1000))
            hits += abs(fit.lambda_inf - 0.0144) < 2 * fit.stderr_lambda
        # two-sigma coverage of a Gaussian estimator is about 95%
        assert 0.9 <= hits / 200 <= 0.99

    def test_window_errors(self):
        t = np.linspace(1, 10, 50)
        with pytest.raises(ValueError):
            one_over_t_fit(FtleSeries(t, 1 / t), (0, 10))
        with pytest.raises(ValueError):
            one_over_t_fit(FtleSeries(t, 1 / t), (9.5, 10))
        with pytest.raises(ValueError):
            one_over_t_fit(FtleSeries(t, np.ones_like(t)), (1, 10))
