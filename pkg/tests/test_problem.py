import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_problem, problem_config
from mfckit.problem import (ConfigError, emit_problem, mbar_s, parse_problem,
                            parse_problem_dict, validate)


class TestParsing:
    def test_minimal_scalar_config_broadcasts(self):
        p = make_problem(n=1, d=1, T=1.0, K=100)
        assert p.F.values.shape == (101, 1, 1)
        assert p.N.values.shape == (101, 1, 1)
        assert p.f.values.shape == (101, 1)
        assert p.alpha_T.shape == (1,)

    def test_transposed_matrix_rejected_naming_shapes(self):
        cfg = problem_config(n=2, d=1)
        cfg["coefficients"]["G"] = [[1.0, 2.0]]  # 1x2 given, 2x1 required
        with pytest.raises(ConfigError, match=r"\(2, 1\).*\(1, 2\)"):
            parse_problem_dict(cfg)

    def test_wrong_node_count_rejected(self):
        cfg = problem_config(n=1, d=1, K=100)
        cfg["coefficients"]["M"] = [[[float(k)]] for k in range(5)]
        with pytest.raises(ConfigError, match="101"):
            parse_problem_dict(cfg)

    def test_full_node_count_accepted(self):
        cfg = problem_config(n=1, d=1, K=10)
        cfg["coefficients"]["M"] = [[[1.0 + 0.1 * k]] for k in range(11)]
        p = parse_problem_dict(cfg)
        assert_allclose(p.M.values[:, 0, 0], 1.0 + 0.1 * np.arange(11))

    def test_missing_section_reported(self):
        cfg = problem_config()
        del cfg["terminal"]
        with pytest.raises(ConfigError, match="terminal"):
            parse_problem_dict(cfg)

    def test_missing_coefficient_reported_with_path(self):
        cfg = problem_config()
        del cfg["coefficients"]["N"]
        with pytest.raises(ConfigError, match="coefficients.N"):
            parse_problem_dict(cfg)

    def test_scalar_rejected_for_matrix_dimensions(self):
        cfg = problem_config(n=2, d=2)
        cfg["coefficients"]["F"] = 0.5
        with pytest.raises(ConfigError, match="scalar"):
            parse_problem_dict(cfg)

    def test_vector_coefficient_shapes(self):
        cfg = problem_config(n=2, d=1)
        cfg["coefficients"]["f"] = [1.0, 2.0]
        p = parse_problem_dict(cfg)
        assert_allclose(p.f(0.5), [1.0, 2.0])
        cfg["coefficients"]["f"] = [1.0, 2.0, 3.0]
        with pytest.raises(ConfigError, match="coefficients.f"):
            parse_problem_dict(cfg)

    def test_terminal_defaults(self):
        cfg = problem_config(n=2, d=1, S=np.array([[0.0, 0.3], [0.1, 0.0]]))
        p = parse_problem_dict(cfg)
        assert_allclose(p.S_T, [[0.0, 0.3], [0.1, 0.0]])
        assert_allclose(p.J0, np.eye(2))
        assert_allclose(p.Jbar0, np.zeros((2, 2)))

    def test_time_varying_terminal_default_uses_last_node(self):
        cfg = problem_config(n=1, d=1, K=4)
        cfg["coefficients"]["S"] = [[[0.1 * k]] for k in range(5)]
        p = parse_problem_dict(cfg)
        assert_allclose(p.S_T, [[0.4]])

    def test_grid_override_on_constant_problem(self):
        cfg = problem_config(n=1, d=1, K=100)
        p = parse_problem_dict(cfg, override_K=32)
        assert p.K == 32
        cfg["coefficients"]["M"] = [[[1.0]] for _ in range(101)]
        with pytest.raises(ConfigError, match="constant"):
            parse_problem_dict(cfg, override_K=32)

    def test_parse_from_text(self):
        text = json.dumps(problem_config())
        p = parse_problem(text)
        assert p.n == 1 and p.d == 1
        with pytest.raises(ConfigError, match="JSON"):
            parse_problem(text[:-20])

    def test_noise_section(self):
        p = make_problem(noise={"eta": 0.5, "n_paths": 64, "seed": 9})
        assert_allclose(p.noise["eta"], [[0.5]])
        assert p.noise["n_paths"] == 64
        with pytest.raises(ConfigError, match="n_paths"):
            make_problem(noise={"eta": 0.5, "n_paths": 0})

    def test_ensemble_and_initial_field(self):
        p = make_problem(ensemble={"points": [[-1.0], [1.0]], "weights": [0.5, 0.5]})
        assert p.ensemble.size == 2
        assert_allclose(p.initial_field.values, [[-1.0], [1.0]])

    def test_initial_field_without_ensemble_rejected(self):
        cfg = problem_config(initial_field={"kind": "coordinates"})
        with pytest.raises(ConfigError, match="ensemble"):
            parse_problem_dict(cfg)


class TestMbarS:
    def test_zero_coupling_gives_zero(self):
        p = make_problem(n=2, d=1, S=0.0, Mbar=np.eye(2).tolist())
        assert np.max(np.abs(mbar_s(p, 0.5))) == 0.0

    def test_identity_coupling_negates_mbar(self):
        Mb = np.array([[2.0, 0.5], [0.5, 1.0]])
        p = make_problem(n=2, d=1, S=1.0, Mbar=Mb.tolist())
        assert_allclose(mbar_s(p, 0.3), -Mb)

    def test_matches_direct_arithmetic(self):
        gen = np.random.Generator(np.random.Philox(key=[40, 0]))
        S = gen.normal(size=(2, 2))
        Mb = gen.normal(size=(2, 2))
        Mb = Mb + Mb.T
        p = make_problem(n=2, d=1, S=S.tolist(), Mbar=Mb.tolist())
        eye = np.eye(2)
        expected = (eye - S.T) @ Mb @ (eye - S) - Mb
        assert_allclose(mbar_s(p, 0.5), expected, rtol=1e-13)
        assert_allclose(p.mbar_s_terminal(),
                        (eye - S.T) @ p.Mbar_T @ (eye - S) - p.Mbar_T, atol=1e-13)

    def test_symmetric_when_mbar_symmetric(self):
        gen = np.random.Generator(np.random.Philox(key=[41, 0]))
        S = gen.normal(size=(3, 3))
        Mb = gen.normal(size=(3, 3))
        Mb = Mb @ Mb.T
        p = make_problem(n=3, d=1, S=S.tolist(), Mbar=Mb.tolist())
        out = mbar_s(p, 0.2)
        assert np.max(np.abs(out - out.T)) < 1e-12

    def test_node_array_agrees_with_pointwise(self):
        gen = np.random.Generator(np.random.Philox(key=[42, 0]))
        S = gen.normal(size=(2, 2))
        Mb = gen.normal(size=(2, 2))
        Mb = Mb + Mb.T
        p = make_problem(n=2, d=1, K=8, S=S.tolist(), Mbar=Mb.tolist())
        nodes = p.mbar_s_nodes()
        # node K carries the running-coefficient value; mbar_s at t=T
        # switches to the terminal data instead
        for k in range(8):
            assert_allclose(nodes[k], mbar_s(p, p.grid.nodes[k]), atol=1e-13)

    def test_terminal_uses_terminal_data(self):
        p = make_problem(n=1, d=1, S=0.5, Mbar=1.0, Mbar_T=2.0, S_T=[[1.0]])
        # at T: (1-1)*2*(1-1) - 2 = -2, from terminal matrices
        assert_allclose(mbar_s(p, p.T), [[-2.0]])
        # in the interior: (1-0.5)*1*(1-0.5) - 1 = -0.75
        assert_allclose(mbar_s(p, 0.5), [[-0.75]])


class TestValidate:
    def test_simple_positive_problem_passes(self):
        report = validate(make_problem(M=1.0, Mbar=1.0, N=1.0, S=0.0))
        assert report.ok and report.violations == []

    def test_zero_n_flagged_at_node(self):
        cfg = problem_config(n=1, d=1, K=4)
        Ns = [[[1.0]] for _ in range(5)]
        Ns[2] = [[0.0]]
        cfg["coefficients"]["N"] = Ns
        report = validate(parse_problem_dict(cfg))
        assert not report.ok
        names_nodes = [(v[0], v[1]) for v in report.violations]
        assert ("N_pd", 2) in names_nodes

    def test_indefinite_running_weight_flagged(self):
        report = validate(make_problem(M=-1.0, Mbar=0.5))
        names = {v[0] for v in report.violations}
        assert "M_plus_Mbar_psd" in names
        assert report.violations[0][2] < 0.0

    def test_psd_mean_block_covers_any_s(self):
        # M, Mbar PSD makes the mean block PSD regardless of S
        gen = np.random.Generator(np.random.Philox(key=[43, 0]))
        for trial in range(5):
            S = gen.normal(size=(2, 2))
            A = gen.normal(size=(2, 2))
            B = gen.normal(size=(2, 2))
            p = make_problem(n=2, d=1, M=(A @ A.T).tolist(),
                             Mbar=(B @ B.T).tolist(), S=S.tolist())
            assert validate(p).ok

    def test_asymmetric_n_flagged(self):
        p = make_problem(n=1, d=2, N=np.array([[1.0, 0.3], [0.0, 1.0]]).tolist(),
                         G=np.array([[1.0, 0.0]]).tolist())
        names = {v[0] for v in validate(p).violations}
        assert "N_pd_symmetric" in names

    def test_j0_must_be_positive_definite(self):
        report = validate(make_problem(J0=0.0))
        assert ("J0_pd", 0) in [(v[0], v[1]) for v in report.violations]


class TestOperatorForms:
    def test_mean_block_forms_agree_at_every_node(self):
        # the direct form M + Mbar + MbarS and the factored form
        # M + (I - S*) Mbar (I - S) must agree entrywise
        gen = np.random.Generator(np.random.Philox(key=[44, 0]))
        S = gen.normal(size=(3, 3))
        Mb = gen.normal(size=(3, 3))
        Mb = Mb @ Mb.T
        M = gen.normal(size=(3, 3))
        M = M @ M.T
        p = make_problem(n=3, d=1, K=6, M=M.tolist(), Mbar=Mb.tolist(), S=S.tolist())
        eye = np.eye(3)
        factored = M + (eye - S.T) @ Mb @ (eye - S)
        for k in range(7):
            direct = p.M.values[k] + p.Mbar.values[k] + p.mbar_s_nodes()[k]
            assert np.max(np.abs(direct - factored)) < 1e-12


class TestRoundTrip:
    def test_emit_parse_is_bit_exact(self):
        gen = np.random.Generator(np.random.Philox(key=[45, 0]))
        cfg = problem_config(
            n=2, d=1, K=7,
            F=gen.normal(size=(2, 2)).tolist(),
            M=(lambda A: A @ A.T)(gen.normal(size=(2, 2))).tolist(),
            G=gen.normal(size=(2, 1)).tolist(),
            f=gen.normal(size=2).tolist(),
            alpha_T=gen.normal(size=2).tolist(),
            ensemble={"points": gen.normal(size=(5, 2)).tolist()},
            noise={"eta": np.eye(2).tolist(), "n_paths": 3, "seed": 1},
        )
        cfg["coefficients"]["S"] = [gen.normal(size=(2, 2)).tolist() for _ in range(8)]
        p1 = parse_problem_dict(cfg)
        p2 = parse_problem(emit_problem(p1))
        for name in ("F", "Fbar", "G", "f", "M", "Mbar", "S", "N", "alpha", "beta"):
            assert np.array_equal(getattr(p1, name).values, getattr(p2, name).values)
        for name in ("M_T", "Mbar_T", "S_T", "alpha_T", "J0", "Jbar0"):
            assert np.array_equal(getattr(p1, name), getattr(p2, name))
        assert np.array_equal(p1.ensemble.points, p2.ensemble.points)
        assert np.array_equal(p1.ensemble.weights, p2.ensemble.weights)
        assert np.array_equal(p1.initial_field.values, p2.initial_field.values)
        assert np.array_equal(p1.noise["eta"], p2.noise["eta"])
        assert emit_problem(p1) == emit_problem(p2)

    def test_spec_arrays_immutable(self):
        p = make_problem()
        with pytest.raises(ValueError):
            p.F.values[0, 0, 0] = 5.0
