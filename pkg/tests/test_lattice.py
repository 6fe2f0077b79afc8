import math

import numpy as np
import pytest

from selfheal.errors import (
    DegenerateSpectrumError,
    InvalidModelError,
    InvalidWindowError,
    OnContourError,
)
from selfheal.lattice import (
    BoundaryCondition,
    HoppingModel,
    ScatteringWindow,
    bloch_symbol,
    build_hamiltonian,
    corner_weight,
    eigensystem,
    max_imag_energy,
    select_eigenstate,
    spectral_winding,
    write_spectrum_csv,
)

from .conftest import random_state


class TestHoppingModel:
    def test_from_pairs(self):
        m = HoppingModel.from_pairs(0.7, 1, 0.8, 1)
        assert m.hops == {-2: 1, -1: 1, 1: 0.7, 2: 0.8}
        assert m.bandwidth == 2
        assert m.is_real

    def test_rejects_zero_displacement(self):
        with pytest.raises(InvalidModelError):
            HoppingModel({0: 1.0})

    def test_rejects_all_zero(self):
        with pytest.raises(InvalidModelError):
            HoppingModel({1: 0.0})

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidModelError):
            HoppingModel({1: math.inf})

    def test_odd_pair_count(self):
        with pytest.raises(InvalidModelError):
            HoppingModel.from_pairs(1.0, 2.0, 3.0)


class TestBuildHamiltonian:
    def test_main_model_bands(self, main_model):
        H = build_hamiltonian(main_model, 100)
        # H[j + d, j] = t_d: t_1 below the diagonal, t_-1 above it
        assert np.all(np.diag(H, -1) == 0.7)
        assert np.all(np.diag(H, 1) == 1.0)
        assert np.all(np.diag(H, -2) == 0.8)
        assert np.all(np.diag(H, 2) == 1.0)
        assert np.count_nonzero(H) == 99 * 2 + 98 * 2

    def test_inactive_scattering_leaves_diagonal_zero(self, main_model):
        w = ScatteringWindow(10, 10, 2, 4)
        H = build_hamiltonian(main_model, 30, scat=w, active=False)
        assert np.all(np.diag(H) == 0)

    def test_active_scattering(self, main_model):
        w = ScatteringWindow(10, 10, 2, 4)
        H = build_hamiltonian(main_model, 30, scat=w, active=True)
        d = np.diag(H)
        assert np.all(d[:10] == -10j)
        assert np.all(d[10:] == 0)

    def test_pbc_wrap(self):
        H = build_hamiltonian(HoppingModel({1: 1.0}), 4, BoundaryCondition.PBC)
        # 1-based H[1][4]: hop from site 4 to site 1
        assert H[0, 3] == 1.0
        assert np.count_nonzero(H) == 4

    def test_bandwidth_too_large(self, main_model):
        with pytest.raises(InvalidModelError):
            build_hamiltonian(main_model, 2)

    def test_window_too_long(self, main_model):
        with pytest.raises(InvalidWindowError):
            build_hamiltonian(main_model, 5, scat=ScatteringWindow(1, 10, 0, 1), active=True)

    def test_window_validation(self):
        with pytest.raises(InvalidWindowError):
            ScatteringWindow(1.0, 3, 4, 2)
        with pytest.raises(InvalidWindowError):
            ScatteringWindow(1.0, 0, 0, 2)
        with pytest.raises(InvalidWindowError):
            ScatteringWindow(1j, 2, 0, 2)

    def test_window_midpoint_rule(self):
        w = ScatteringWindow(1.0, 1, 2.0, 4.0)
        assert not w.active_at(2.0)
        assert w.active_at(2.05)
        assert w.active_at(4.0)
        assert not w.active_at(4.05)

    def test_loss_shifts_diagonal(self, main_model):
        H = build_hamiltonian(main_model, 10, loss=0.35)
        assert np.allclose(np.diag(H), -0.35j)

    def test_bc_parse(self):
        assert BoundaryCondition.parse("PBC") is BoundaryCondition.PBC
        with pytest.raises(InvalidModelError):
            BoundaryCondition.parse("twisted")


class TestBloch:
    def test_values(self):
        m = HoppingModel({1: 0.7, -1: 1.0})
        assert bloch_symbol(m, 0.0) == pytest.approx(1.7)
        assert bloch_symbol(m, math.pi / 2) == pytest.approx(0.3j)

    def test_single_harmonic_circle(self):
        k = np.linspace(0, 2 * np.pi, 17)
        h = bloch_symbol(HoppingModel({1: 0.4 + 0.3j}), k)
        assert np.allclose(np.abs(h), 0.5)

    def test_winding_examples(self, main_model):
        assert spectral_winding(HoppingModel({1: 1.0, -1: 1.0}), 3.0) == 0
        assert spectral_winding(HoppingModel({1: 1.0}), 0.0) == -1
        assert spectral_winding(HoppingModel({-1: 1.0}), 0.0) == 1

    def test_main_model_winding(self, main_model):
        # oracle: count sign changes of h(k) along a dense grid via the argument principle
        k = np.linspace(0, 2 * np.pi, 200001)
        z = bloch_symbol(main_model, k)
        oracle = round(np.sum(np.diff(np.unwrap(np.angle(z)))) / (2 * np.pi))
        assert spectral_winding(main_model, 0.0) == oracle == 2
        # the representative initial energy is encircled once
        assert spectral_winding(main_model, -0.35 + 0.1j) == 1

    def test_winding_invariant_under_refinement(self, main_model):
        for E in (0.0, 0.5, -0.35 + 0.1j, 1j):
            assert spectral_winding(main_model, E, 512) == spectral_winding(main_model, E, 1024)

    def test_on_contour(self):
        with pytest.raises(OnContourError):
            spectral_winding(HoppingModel({1: 1.0}), 1.0)

    def test_too_few_samples(self, main_model):
        with pytest.raises(ValueError):
            spectral_winding(main_model, 0.0, 32)


class TestEigensystem:
    def test_nn_analytic(self, nn_model):
        L = 20
        spec = eigensystem(build_hamiltonian(nn_model, L))
        m = np.arange(1, L + 1)
        exact = np.sort(2 * math.sqrt(0.7) * np.cos(m * np.pi / (L + 1)))
        assert np.max(np.abs(spec.energies.imag)) < 1e-8
        assert np.allclose(np.sort(spec.energies.real), exact, atol=1e-8)
        assert max_imag_energy(spec) == pytest.approx(0.0, abs=1e-8)

    def test_biorthonormal_and_residual(self, main_model):
        H = build_hamiltonian(main_model, 40)
        spec = eigensystem(H)
        assert np.max(np.abs(spec.left.conj().T @ spec.right - np.eye(40))) < 1e-8
        assert spec.residual <= 1e-9
        assert np.allclose(np.linalg.norm(spec.right, axis=0), 1.0)

    def test_sorted(self, main_model):
        E = eigensystem(build_hamiltonian(main_model, 30)).energies
        keys = list(zip(E.real, E.imag))
        assert keys == sorted(keys)

    def test_hermitian_left_equals_right(self, rng):
        A = random_state(rng, 64).reshape(8, 8)
        H = A + A.conj().T
        spec = eigensystem(H)
        assert np.allclose(spec.left, spec.right, atol=1e-10)

    def test_defective(self):
        J = np.array([[0.0, 1.0], [0.0, 0.0]])
        with pytest.raises(DegenerateSpectrumError) as info:
            eigensystem(J)
        assert info.value.cond_estimate > 1e10

    def test_imag_shift(self, main_model):
        H = build_hamiltonian(main_model, 30)
        a = max_imag_energy(eigensystem(H))
        b = max_imag_energy(eigensystem(H + 0.1j * np.eye(30)))
        assert b == pytest.approx(a + 0.1, abs=1e-10)


class TestSelection:
    def test_main_model_initial_mode(self, main_model):
        spec = eigensystem(build_hamiltonian(main_model, 100), tol=1e-6)
        idx, v = select_eigenstate(spec, -0.35 + 0.1j)
        assert abs(spec.energies[idx] - (-0.35 + 0.1j)) < 0.01
        # left-skin mode: most of the weight on the leftmost sites
        assert np.sum(np.abs(v[:10]) ** 2) > 0.5

    def test_exact_hit_and_tie(self, nn_model):
        spec = eigensystem(build_hamiltonian(nn_model, 10))
        idx, _ = select_eigenstate(spec, spec.energies[3])
        assert idx == 3
        mid = 0.5 * (spec.energies[3] + spec.energies[4])
        idx, _ = select_eigenstate(spec, mid)
        assert idx in (3, 4)
        assert idx == 3 or abs(spec.energies[3] - mid) > abs(spec.energies[4] - mid)


class TestCornerWeight:
    def test_unit_vectors(self):
        e1 = np.zeros(100)
        e1[0] = 1
        assert corner_weight(e1, 10) == pytest.approx(-1 + math.exp(-9.9), rel=1e-12)
        assert corner_weight(e1[::-1], 10) == pytest.approx(1 - math.exp(-9.9), rel=1e-12)

    def test_uniform(self):
        assert corner_weight(np.full(50, 1 / math.sqrt(50)), 10) == pytest.approx(0, abs=1e-15)

    def test_sign_matches_boundary(self, main_model):
        L = 100
        spec = eigensystem(build_hamiltonian(main_model, L), tol=1e-6)
        for n in range(L):
            v = spec.right[:, n]
            w = corner_weight(v, 10)
            p = np.abs(v) ** 2
            peak_left = p[: L // 2].max() > p[L // 2:].max()
            assert (w < 0) == peak_left

    def test_csv(self, tmp_path, main_model):
        spec = eigensystem(build_hamiltonian(main_model, 100), tol=1e-6)
        path = tmp_path / "s.csv"
        write_spectrum_csv(path, spec)
        rows = path.read_text().splitlines()
        assert rows[0] == "index,re_E,im_E,corner_weight"
        assert len(rows) == 101
        weights = np.array([float(r.split(",")[3]) for r in rows[1:]])
        assert np.mean(weights < 0) > 0.9
