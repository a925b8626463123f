import numpy as np
import pytest

from robust_ustat import Dataset, DataError, ModelError, effective_rank, op_norm
from robust_ustat.covariance import sample_covariance
from robust_ustat.synth import (
    CovModel,
    DistributionSpec,
    build_covariance,
    build_mask,
    load_dataset_csv,
    sample,
    save_dataset_csv,
)


class TestBuildCovariance:
    def test_identity(self):
        out = build_covariance(CovModel(kind="identity", d=4))
        assert np.array_equal(out, np.eye(4))
        assert effective_rank(out) == pytest.approx(4.0)

    def test_spiked_effective_rank(self):
        out = build_covariance(CovModel(kind="spiked", d=10, rank=1, spike=9.0))
        assert effective_rank(out) == pytest.approx(1.9)
        assert op_norm(out) == pytest.approx(10.0)

    def test_toeplitz(self):
        out = build_covariance(CovModel(kind="toeplitz", d=3, rho=0.5))
        expected = np.array([[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]])
        assert np.allclose(out, expected)
        assert np.linalg.eigvalsh(out)[0] > 0

    def test_banded(self):
        out = build_covariance(CovModel(kind="banded", d=6, alpha=2.0))
        assert out[0, 1] == pytest.approx(2.0**-2.0)
        assert np.linalg.eigvalsh(out)[0] > -1e-12

    def test_all_models_pass_effective_rank(self):
        models = [
            CovModel(kind="identity", d=5),
            CovModel(kind="spiked", d=5, rank=2, spike=3.0),
            CovModel(kind="toeplitz", d=5, rho=-0.4),
            CovModel(kind="banded", d=5, alpha=2.5),
        ]
        for model in models:
            effective_rank(build_covariance(model))  # must not raise

    def test_model_errors(self):
        with pytest.raises(ModelError):
            build_covariance(CovModel(kind="toeplitz", d=3, rho=1.0))
        with pytest.raises(ModelError):
            build_covariance(CovModel(kind="spiked", d=3, rank=5, spike=1.0))
        with pytest.raises(ModelError):
            CovModel(kind="wishart", d=3)


class TestSample:
    def test_gaussian_lln(self):
        spec = DistributionSpec(family="gaussian", mean=np.zeros(2), covariance=np.eye(2), seed=1)
        data = sample(spec, 100_000)
        assert op_norm(sample_covariance(data) - np.eye(2)) <= 0.05

    def test_deterministic(self):
        spec = DistributionSpec(family="gaussian", mean=np.zeros(3), covariance=np.eye(3), seed=99)
        a = sample(spec, 50)
        b = sample(spec, 50)
        assert np.array_equal(a.samples, b.samples)
        assert a.seed == 99

    def test_contaminated_eps_zero_is_gaussian(self):
        base = dict(mean=np.zeros(2), covariance=np.eye(2), seed=123)
        clean = sample(DistributionSpec(family="gaussian", **base), 200)
        cont = sample(DistributionSpec(family="contaminated_gaussian", eps=0.0, **base), 200)
        assert np.array_equal(clean.samples, cont.samples)

    def test_contamination_flip_count_deterministic(self):
        spec = DistributionSpec(
            family="contaminated_gaussian",
            mean=np.zeros(2),
            covariance=np.eye(2),
            seed=5,
            eps=0.2,
            outlier_scale=50.0,
        )
        a = sample(spec, 500)
        b = sample(spec, 500)
        assert np.array_equal(a.samples, b.samples)
        norms = np.linalg.norm(a.samples, axis=1)
        n_out = int(np.sum(np.isclose(norms, 50.0)))
        assert 60 <= n_out <= 140  # Binomial(500, 0.2), ~6 sigma band

    def test_student_t_variance_scaling(self):
        spec = DistributionSpec(
            family="student_t", mean=np.zeros(2), covariance=np.eye(2), seed=17, dof=6.0
        )
        data = sample(spec, 100_000)
        var = data.samples.var(axis=0)
        assert np.all(np.abs(var - 1.0) <= 0.05)

    def test_lognormal_covariance_matches(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        spec = DistributionSpec(
            family="lognormal", mean=np.ones(2), covariance=cov, seed=23, lognormal_scale=0.5
        )
        data = sample(spec, 200_000)
        assert op_norm(sample_covariance(data) - cov) <= 0.05 * op_norm(cov)
        assert np.abs(data.samples.mean(axis=0) - 1.0).max() <= 0.05

    def test_student_t_requires_dof(self):
        with pytest.raises(ModelError):
            DistributionSpec(family="student_t", mean=np.zeros(1), covariance=np.eye(1), seed=0, dof=4.0)

    def test_near_critical_flag(self):
        spec = DistributionSpec(
            family="student_t", mean=np.zeros(1), covariance=np.eye(1), seed=0, dof=4.2
        )
        assert spec.near_critical_tail
        spec2 = DistributionSpec(
            family="student_t", mean=np.zeros(1), covariance=np.eye(1), seed=0, dof=8.0
        )
        assert not spec2.near_critical_tail

    def test_covariance_must_be_psd(self):
        with pytest.raises(ModelError):
            DistributionSpec(
                family="gaussian", mean=np.zeros(2), covariance=np.array([[1.0, 2.0], [2.0, 1.0]]), seed=0
            )

    def test_singular_covariance_ok(self):
        cov = np.diag([1.0, 0.0])
        spec = DistributionSpec(family="gaussian", mean=np.zeros(2), covariance=cov, seed=3)
        data = sample(spec, 1000)
        assert np.abs(data.samples[:, 1]).max() == 0.0


class TestBuildMask:
    def test_diagonal(self):
        assert np.array_equal(build_mask("diagonal", 3), np.eye(3))

    def test_banded_zero(self):
        assert np.array_equal(build_mask("banded", 4, 0), np.eye(4))

    def test_banded_full(self):
        assert np.array_equal(build_mask("banded", 4, 3), np.ones((4, 4)))

    def test_banded_width(self):
        m = build_mask("banded", 5, 1)
        assert m[0, 1] == 1.0 and m[0, 2] == 0.0
        assert np.array_equal(m, m.T)

    def test_errors(self):
        with pytest.raises(ModelError):
            build_mask("banded", 4, 4)
        with pytest.raises(ModelError):
            build_mask("banded", 4, None)
        with pytest.raises(ModelError):
            build_mask("checker", 4)


class TestCsvRoundTrip:
    def test_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(31)
        data = Dataset(samples=rng.standard_normal((20, 3)) * 10.0 ** rng.integers(-8, 8))
        path = tmp_path / "data.csv"
        save_dataset_csv(data, path)
        loaded = load_dataset_csv(path)
        assert np.array_equal(loaded.samples, data.samples)
        assert loaded.seed is None

    def test_header(self, tmp_path):
        data = Dataset(samples=np.zeros((2, 2)))
        path = tmp_path / "data.csv"
        save_dataset_csv(data, path)
        assert path.read_text().splitlines()[0] == "y0,y1"

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y0,y1\n1.0,2.0\n3.0\n")
        with pytest.raises(DataError, match="line 3"):
            load_dataset_csv(path)

    def test_non_numeric_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y0\n1.0\npotato\n")
        with pytest.raises(DataError, match="line 3"):
            load_dataset_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1.0,2.0\n")
        with pytest.raises(DataError, match="line 1"):
            load_dataset_csv(path)
