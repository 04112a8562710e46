import numpy as np
import pytest

from spikeslab.datagen import (
    bars_basis,
    bars_dataset,
    load_dataset_bin,
    load_dataset_csv,
    load_sources_csv,
    mix_sources,
    perturbed_orthogonal_basis,
    sample_sparse_coding,
    sample_spike_slab,
    save_dataset_bin,
    save_dataset_csv,
)
from spikeslab.errors import ConfigError
from conftest import random_params


class TestSampleSpikeSlab:
    def test_activation_rate_moment(self, rng):
        p = random_params(rng, 3, 4)
        p = p.replace(pi=np.array([0.2, 0.5, 0.8]))
        _, lat = sample_spike_slab(p, 10000, seed=0)
        rate = lat["s"].mean(axis=0)
        ci = 3.0 * np.sqrt(p.pi * (1 - p.pi) / 10000)
        assert np.all(np.abs(rate - p.pi) < ci)

    def test_spike_only_limit_noise_covariance(self, rng):
        p = random_params(rng, 2, 3)
        p = p.replace(pi=np.full(2, 1e-6), Sigma=0.5 * np.eye(3),
                      noise_mode="full")
        data, _ = sample_spike_slab(p, 10000, seed=1)
        emp = np.cov(data.Y.T)
        np.testing.assert_allclose(emp, 0.5 * np.eye(3), atol=0.05)

    def test_covariance_matches_closed_form(self, rng):
        # Analytic second moment: Cov(y) = Sigma
        # + sum_h pi_h (Psi_hh + mu_h^2) w_h w_h^T
        # - sum_h (pi_h mu_h)^2 w_h w_h^T   (independent latents).
        p = random_params(rng, 2, 3)
        p = p.replace(Psi=np.diag(np.diag(p.Psi)))
        data, _ = sample_spike_slab(p, 100000, seed=2)
        expect = p.Sigma.copy()
        for h in range(2):
            w = p.W[:, h]
            second = p.pi[h] * (p.Psi[h, h] + p.mu[h] ** 2)
            first_sq = (p.pi[h] * p.mu[h]) ** 2
            expect += (second - first_sq) * np.outer(w, w)
        emp = np.cov(data.Y.T)
        np.testing.assert_allclose(emp, expect,
                                   atol=0.05 * np.abs(expect).max())

    def test_reproducible(self, rng):
        p = random_params(rng, 2, 3)
        a, _ = sample_spike_slab(p, 50, seed=7)
        b, _ = sample_spike_slab(p, 50, seed=7)
        np.testing.assert_array_equal(a.Y, b.Y)


class TestBars:
    def test_grid_structure(self):
        W = bars_basis(10)
        assert W.shape == (25, 10)
        for h in range(10):
            col = W[:, h].reshape(5, 5)
            nz = np.abs(col) > 0
            assert nz.sum() == 5
            assert np.all(np.abs(col[nz]) == 10.0)
            # Full row or full column.
            assert np.any(nz.all(axis=0)) or np.any(nz.all(axis=1))
        horiz = sum(np.any((np.abs(W[:, h].reshape(5, 5)) > 0).all(axis=1))
                    for h in range(10))
        assert horiz == 5

    def test_dataset_ground_truth(self):
        data, gt = bars_dataset(10, 20, seed=0)
        assert data.D == 25 and data.N == 20
        np.testing.assert_allclose(gt.pi, np.full(10, 0.2))
        np.testing.assert_allclose(gt.Sigma, 2.0 * np.eye(25))
        assert gt.noise_mode == "homoscedastic"
        np.testing.assert_allclose(gt.Psi, np.eye(10))

    def test_odd_h_rejected(self):
        with pytest.raises(ConfigError):
            bars_dataset(7, 10, seed=0)


class TestSparseCoding:
    def test_heavy_tails(self):
        ds = sample_sparse_coding("laplace", np.eye(2), 0.0, 100000, seed=0)
        kurt = (((ds.Y - ds.Y.mean(0)) / ds.Y.std(0)) ** 4).mean()
        assert kurt > 3.5

    def test_laplace_median_abs(self):
        ds = sample_sparse_coding("laplace", np.eye(1), 0.0, 10 ** 6,
                                  seed=1)
        med = np.median(np.abs(ds.Y))
        np.testing.assert_allclose(med, np.log(2), rtol=0.02)

    def test_cauchy_iqr(self):
        ds = sample_sparse_coding("cauchy", np.eye(1), 0.0, 10 ** 6, seed=2)
        q1, q3 = np.percentile(ds.Y, [25, 75])
        np.testing.assert_allclose(q3 - q1, 2.0, rtol=0.02)

    def test_unknown_prior_rejected(self):
        with pytest.raises(ConfigError):
            sample_sparse_coding("gauss", np.eye(2), 0.1, 10, seed=0)


class TestPerturbedOrthogonalBasis:
    def test_orthogonal_at_zero_perturbation(self):
        W = perturbed_orthogonal_basis(4, 6, 0.0, seed=0)
        np.testing.assert_allclose(W.T @ W, np.eye(4), atol=1e-10)

    def test_similarity_grows_with_perturbation(self):
        def max_cos(W):
            Wn = W / np.linalg.norm(W, axis=0)
            G = np.abs(Wn.T @ Wn)
            np.fill_diagonal(G, 0.0)
            return G.max()

        vals = []
        for sig in (4.0, 10.0, 20.0):
            cs = [max_cos(perturbed_orthogonal_basis(4, 4, sig, seed=s))
                  for s in range(40)]
            vals.append(np.mean(cs))
        assert vals[0] < vals[2]

    def test_deterministic(self):
        a = perturbed_orthogonal_basis(3, 5, 2.0, seed=9)
        b = perturbed_orthogonal_basis(3, 5, 2.0, seed=9)
        np.testing.assert_array_equal(a, b)

    def test_h_larger_than_d_rejected(self):
        with pytest.raises(ConfigError):
            perturbed_orthogonal_basis(5, 3, 0.0, seed=0)


class TestDatasetIO:
    def test_csv_roundtrip(self, rng, tmp_path):
        from spikeslab.model import Dataset
        data = Dataset(rng.standard_normal((7, 3)))
        path = tmp_path / "d.csv"
        save_dataset_csv(data, path)
        back = load_dataset_csv(path)
        np.testing.assert_allclose(back.Y, data.Y, atol=1e-12)

    def test_bin_roundtrip(self, rng, tmp_path):
        from spikeslab.model import Dataset
        data = Dataset(rng.standard_normal((7, 3)))
        path = tmp_path / "d.bin"
        save_dataset_bin(data, path)
        back = load_dataset_bin(path)
        np.testing.assert_array_equal(back.Y, data.Y)

    def test_sources_csv_and_mixing(self, rng, tmp_path):
        S = rng.standard_normal((3, 100))
        path = tmp_path / "s.csv"
        np.savetxt(path, S, delimiter=",")
        back = load_sources_csv(path)
        np.testing.assert_allclose(back, S, atol=1e-12)
        ds, W_mix = mix_sources(back, 40, seed=0, offset=10)
        assert ds.N == 40 and ds.D == 3
        np.testing.assert_allclose(ds.Y, S[:, 10:50].T @ W_mix.T,
                                   atol=1e-10)

    def test_mix_sources_range_check(self, rng):
        S = rng.standard_normal((2, 30))
        with pytest.raises(ConfigError):
            mix_sources(S, 40, seed=0)
