import numpy as np
import pytest

from nfsar.imaging import ComplexImage, GridAxis, ImageGrid
from nfsar.suppression import (
    SolverConfig,
    decompose,
    decompose_volume,
    default_params,
    dematricize_3d,
    matricize_3d,
    objective,
    singular_value_threshold,
    soft_threshold_entries,
    update_interference,
    update_target,
)


def random_complex(rng, shape, scale=1.0):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def rank_k(rng, n, sigmas):
    a = random_complex(rng, (n, len(sigmas)))
    b = random_complex(rng, (n, len(sigmas)))
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    return (qa * np.asarray(sigmas)) @ qb.conj().T


class TestObjective:
    def test_exact_split_zero_weights(self):
        rng = np.random.default_rng(0)
        c = random_complex(rng, (4, 4))
        x = random_complex(rng, (4, 4))
        assert objective(c + x, x, c, mu=0.0, rho=0.0) == pytest.approx(0.0, abs=1e-20)

    def test_diagonal_example(self):
        i = np.zeros((2, 2))
        c = np.diag([2.0, 3.0])
        assert objective(i, np.zeros((2, 2)), c, mu=0.0, rho=1.0) == pytest.approx(11.5)

    def test_homogeneity_degrees(self):
        rng = np.random.default_rng(1)
        i = random_complex(rng, (5, 5))
        x = random_complex(rng, (5, 5))
        c = random_complex(rng, (5, 5))
        mu, rho = 0.3, 0.7
        resid1 = objective(i, x, c, 0.0, 0.0)
        pen1 = objective(i, x, c, mu, rho) - resid1
        resid2 = objective(2 * i, 2 * x, 2 * c, 0.0, 0.0)
        pen2 = objective(2 * i, 2 * x, 2 * c, mu, rho) - resid2
        assert resid2 == pytest.approx(4 * resid1)
        assert pen2 == pytest.approx(2 * pen1)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            objective(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), 1.0, 1.0)


class TestSoftThreshold:
    def test_shrinks_magnitude_preserves_phase(self):
        out = soft_threshold_entries(np.array([[3 + 4j]]), 2.0)
        assert out[0, 0] == pytest.approx(1.8 + 2.4j)

    def test_zero_threshold_is_identity(self):
        rng = np.random.default_rng(2)
        m = random_complex(rng, (3, 3))
        assert np.allclose(soft_threshold_entries(m, 0.0), m)

    def test_below_threshold_maps_to_zero(self):
        out = soft_threshold_entries(np.array([[0.5 - 0.5j, 0.0]]), 1.0)
        assert np.all(out == 0)

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            soft_threshold_entries(np.zeros((2, 2)), -0.1)


class TestUpdateTarget:
    def test_zero_residual_gives_zero(self):
        rng = np.random.default_rng(3)
        i = random_complex(rng, (4, 4))
        out = update_target(np.zeros((4, 4)), i, i, alpha=1.0, mu=0.5)
        assert np.allclose(out, 0.0)

    def test_reduces_to_plain_shrinkage(self):
        rng = np.random.default_rng(4)
        i = random_complex(rng, (4, 4))
        x_prev = random_complex(rng, (4, 4))
        out = update_target(x_prev, np.zeros((4, 4)), i, alpha=1.0, mu=0.3)
        assert np.allclose(out, soft_threshold_entries(i, 0.3))

    def test_prox_optimality_against_grid_search(self):
        # per entry, the closed form must beat a brute-force complex grid
        rng = np.random.default_rng(5)
        i = random_complex(rng, (2, 2))
        c = random_complex(rng, (2, 2), scale=0.3)
        mu = 0.4
        x = update_target(np.zeros((2, 2)), c, i, alpha=1.0, mu=mu)

        def sub_objective(xm):
            return 0.5 * np.linalg.norm(xm - (i - c)) ** 2 + mu * np.abs(xm).sum()

        best = sub_objective(x)
        grid = np.linspace(-2, 2, 41)
        for r in range(2):
            for s in range(2):
                for re in grid:
                    for im in grid:
                        trial = x.copy()
                        trial[r, s] = re + 1j * im
                        assert sub_objective(trial) >= best - 1e-12

    def test_single_entry_perturbations_never_improve(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            i = random_complex(rng, (3, 3))
            c = random_complex(rng, (3, 3), scale=0.5)
            x_prev = random_complex(rng, (3, 3), scale=0.5)
            mu = 0.3
            x = update_target(x_prev, c, i, alpha=1.0, mu=mu)

            def sub_objective(xm):
                return 0.5 * np.linalg.norm(xm - (i - c)) ** 2 + mu * np.abs(xm).sum()

            base = sub_objective(x)
            for r in range(3):
                for s in range(3):
                    for delta in (1e-3, -1e-3, 1e-3j, -1e-3j):
                        trial = x.copy()
                        trial[r, s] += delta
                        assert sub_objective(trial) >= base - 1e-12


class TestSingularValueThreshold:
    def test_diagonal_example(self):
        out = singular_value_threshold(np.diag([5.0, 1.0]), 2.0)
        assert np.allclose(out, np.diag([3.0, 0.0]), atol=1e-12)

    def test_zero_threshold_reconstructs(self):
        rng = np.random.default_rng(7)
        m = random_complex(rng, (6, 4))
        out = singular_value_threshold(m, 0.0)
        assert np.linalg.norm(out - m) <= 1e-10 * np.linalg.norm(m)

    def test_singular_values_shrunk_exactly(self):
        rng = np.random.default_rng(8)
        m = random_complex(rng, (8, 5))
        t = 0.7
        sv_in = np.linalg.svd(m, compute_uv=False)
        sv_out = np.linalg.svd(singular_value_threshold(m, t), compute_uv=False)
        assert np.all(np.abs(sv_out - np.maximum(sv_in - t, 0.0)) < 1e-8)

    def test_prox_optimality_per_singular_value(self):
        # the nuclear prox separates over singular values once U, V are
        # fixed; 1D brute force per value cannot beat the closed form
        rng = np.random.default_rng(9)
        z = random_complex(rng, (4, 4))
        t = 0.5
        out = singular_value_threshold(z, t)
        u, s, vh = np.linalg.svd(z, full_matrices=False)

        def sub_objective(y):
            return 0.5 * np.linalg.norm(y - z) ** 2 + t * np.linalg.svd(y, compute_uv=False).sum()

        best = sub_objective(out)
        for l in range(4):
            for g in np.linspace(0.0, s[l] * 1.5, 61):
                gammas = np.maximum(s - t, 0.0)
                gammas[l] = g
                trial = (u * gammas) @ vh
                assert sub_objective(trial) >= best - 1e-10

    def test_random_perturbations_never_improve(self):
        rng = np.random.default_rng(10)
        z = random_complex(rng, (5, 5))
        t = 0.6
        out = singular_value_threshold(z, t)

        def sub_objective(y):
            return 0.5 * np.linalg.norm(y - z) ** 2 + t * np.linalg.svd(y, compute_uv=False).sum()

        base = sub_objective(out)
        for _ in range(100):
            e = random_complex(rng, (5, 5))
            e /= np.linalg.norm(e)
            assert sub_objective(out + 1e-3 * e) >= base - 1e-12


class TestUpdateInterference:
    def test_zero_argument_gives_zero(self):
        rng = np.random.default_rng(11)
        i = random_complex(rng, (4, 4))
        out = update_interference(np.zeros((4, 4)), i, i, beta=1.0, rho=0.5)
        assert np.allclose(out, 0.0)

    def test_rank_one_shrinks_top_value(self):
        rng = np.random.default_rng(12)
        i = rank_k(rng, 5, [4.0])
        out = update_interference(np.zeros((5, 5)), np.zeros((5, 5)), i, beta=1.0, rho=1.0)
        sv = np.linalg.svd(out, compute_uv=False)
        assert sv[0] == pytest.approx(3.0, abs=1e-9)
        assert sv[1] < 1e-9

    def test_large_rho_annihilates(self):
        rng = np.random.default_rng(13)
        i = random_complex(rng, (4, 4))
        rho = np.linalg.svd(i, compute_uv=False)[0] + 0.1
        out = update_interference(np.zeros((4, 4)), np.zeros((4, 4)), i, beta=1.0, rho=rho)
        assert np.allclose(out, 0.0, atol=1e-12)


class TestDefaultParams:
    def test_diagonal_example(self):
        mu, rho = default_params(np.diag([8.0, 0.0]))
        assert rho == pytest.approx(2.0)
        assert mu == pytest.approx(2.0 / np.sqrt(2.0))

    def test_identity_example(self):
        mu, rho = default_params(np.eye(4))
        assert rho == pytest.approx(0.25)
        assert mu == pytest.approx(0.125)

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(14)
        i = random_complex(rng, (6, 3))
        mu1, rho1 = default_params(i)
        mu2, rho2 = default_params(3.0 * i)
        assert mu2 == pytest.approx(3 * mu1)
        assert rho2 == pytest.approx(3 * rho1)

    def test_zero_input_rejected(self):
        with pytest.raises(ValueError):
            default_params(np.zeros((3, 3)))


class TestDecompose:
    def test_zero_input_converges_immediately(self):
        res = decompose(np.zeros((4, 4), dtype=complex))
        assert res.iterations_run == 1
        assert res.converged
        assert np.all(res.target == 0) and np.all(res.interference == 0)

    def test_rank_one_plus_spike_recovery(self):
        rng = np.random.default_rng(15)
        n = 32
        low = rank_k(rng, n, [10.0])
        spike_pos = (7, 21)
        spikes = np.zeros((n, n), dtype=complex)
        spikes[spike_pos] = 5.0 * np.exp(0.3j)
        res = decompose(low + spikes, SolverConfig(auto_weights=True))
        assert np.unravel_index(np.argmax(np.abs(res.target)), (n, n)) == spike_pos
        sv = np.linalg.svd(res.interference, compute_uv=False)
        assert sv[1] / sv[0] < 0.05

    def test_pure_low_rank_with_generous_mu_empties_sparse_part(self):
        rng = np.random.default_rng(16)
        low = rank_k(rng, 16, [5.0, 2.0])
        mu_hat = 1.0
        res = decompose(low, SolverConfig(mu=mu_hat, rho=0.5, auto_weights=False))
        assert np.max(np.abs(res.target)) <= mu_hat

    def test_objective_trace_non_increasing(self):
        rng = np.random.default_rng(17)
        for _ in range(5):
            i = random_complex(rng, (16, 16))
            res = decompose(i, SolverConfig(max_iter=60))
            trace = np.array(res.objective_trace)
            assert np.all(trace[1:] <= trace[:-1] * (1 + 1e-10) + 1e-10)

    def test_consistency_and_residual_reported(self):
        rng = np.random.default_rng(18)
        i = random_complex(rng, (8, 8))
        res = decompose(i, SolverConfig(max_iter=40))
        resid = i - res.target - res.interference
        assert np.isfinite(res.residual_norm)
        assert res.residual_norm == pytest.approx(np.linalg.norm(resid))

    def test_fixed_point_terminates_in_one_iteration(self):
        i = np.zeros((4, 4), dtype=complex)
        i[0, 0] = 3.0
        i[2, 3] = -2.0j
        mu, rho = 0.5, 10.0
        x_star = soft_threshold_entries(i, mu)
        cfg = SolverConfig(mu=mu, rho=rho, auto_weights=False)
        res = decompose(i, cfg, x0=x_star, c0=np.zeros_like(i))
        assert res.iterations_run == 1
        assert res.converged
        assert np.allclose(res.target, x_star)
        assert np.allclose(res.interference, 0.0)

    def test_step_sizes_reach_same_split(self):
        rng = np.random.default_rng(19)
        i = rank_k(rng, 12, [6.0]) + soft_threshold_entries(random_complex(rng, (12, 12)), 1.2)
        full = decompose(i, SolverConfig(mu=0.2, rho=1.0, auto_weights=False, max_iter=400))
        damped = decompose(i, SolverConfig(mu=0.2, rho=1.0, alpha=0.5, beta=0.5,
                                           auto_weights=False, max_iter=400, tol=1e-9))
        assert np.allclose(full.target, damped.target, atol=2e-3)

    def test_invalid_inputs_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            decompose(np.array([[np.nan, 0.0], [0.0, 0.0]]))
        with pytest.raises(ValueError, match="auto_weights"):
            decompose(np.eye(2), SolverConfig(auto_weights=False))
        with pytest.raises(ValueError):
            decompose(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            SolverConfig(alpha=0.0)
        with pytest.raises(ValueError):
            SolverConfig(tol=0.0)


def volume_grid(p, q, o):
    return ImageGrid((GridAxis(0.0, 1.0, p), GridAxis(0.0, 1.0, q), GridAxis(0.0, 1.0, o)))


class TestMatricize:
    def test_known_layout(self):
        vol = ComplexImage(np.arange(1, 9, dtype=complex).reshape(2, 2, 2), volume_grid(2, 2, 2))
        m = matricize_3d(vol)
        assert np.array_equal(m, np.array([[1, 3, 2, 4], [5, 7, 6, 8]], dtype=complex))
        back = dematricize_3d(m, vol.grid)
        assert np.array_equal(back.values, vol.values)

    def test_round_trip_random(self):
        rng = np.random.default_rng(20)
        vol = ComplexImage(random_complex(rng, (3, 4, 5)), volume_grid(3, 4, 5))
        assert np.array_equal(dematricize_3d(matricize_3d(vol), vol.grid).values, vol.values)

    def test_constant_plates_unfold_rank_one(self):
        rng = np.random.default_rng(21)
        profile = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        vol = np.broadcast_to(profile[:, None, None], (6, 5, 4)).copy()
        image = ComplexImage(vol, volume_grid(6, 5, 4))
        sv = np.linalg.svd(matricize_3d(image), compute_uv=False)
        assert sv[1] / sv[0] < 1e-12

    def test_requires_3d(self):
        img = ComplexImage(np.zeros((2, 2), dtype=complex),
                           ImageGrid((GridAxis(0, 1, 2), GridAxis(0, 1, 2))))
        with pytest.raises(ValueError):
            matricize_3d(img)


class TestDecomposeVolume:
    def test_whole_and_per_slice_modes(self):
        rng = np.random.default_rng(22)
        profile = np.zeros(8, dtype=complex)
        profile[3] = 4.0
        plates = np.broadcast_to(profile[:, None, None], (8, 6, 5)).copy()
        spikes = np.zeros_like(plates)
        spikes[5, 2, 2] = 2.0
        vol = ComplexImage(plates + spikes, volume_grid(8, 6, 5))
        cfg = SolverConfig(mu=0.5, rho=1.0, auto_weights=False)
        x_whole, c_whole, info = decompose_volume(vol, cfg)
        assert len(info) == 1
        assert np.abs(x_whole.values[5, 2, 2]) > 1.0
        assert np.abs(c_whole.values[3]).mean() > 1.0
        cfg_slice = SolverConfig(mu=0.5, rho=1.0, auto_weights=False, per_slice_3d=True)
        x_slice, _, info_slice = decompose_volume(vol, cfg_slice)
        assert len(info_slice) == 5
        assert np.abs(x_slice.values[5, 2, 2]) > 1.0
