import json

import numpy as np
import pytest

from nullforge.activations import ActivationCapture
from nullforge.adapters import (
    init_bundle,
    init_corda_kp,
    init_lora_null,
    init_milora,
    init_pissa,
    init_vanilla,
    null_basis_from_capture,
)
from nullforge.linalg import svd
from nullforge.oracle import (
    check_colspace,
    check_reconstruction,
    check_theorem1,
    check_theorem2,
    check_theorem3,
    closed_form_weighted_solution,
    colspace_ratio,
    objectives,
    rank_k_candidates,
    stationarity_residual,
    verify_bundle,
)

D = np.diag([3.0, 2.0, 1.0])
ISO3 = ActivationCapture(0, np.eye(3), 3, np.eye(3))


def _cap(x):
    return ActivationCapture(0, x @ x.T, x.shape[1], x)


def _lowrank_cap(rng, d, k, n, noise=1e-3):
    x = rng.standard_normal((d, k)) @ rng.standard_normal((k, n)) + noise * rng.standard_normal((d, n))
    return _cap(x)


def test_objectives_examples():
    assert objectives(init_milora(D, 1), ISO3).plain_objective == pytest.approx(1.0, abs=1e-14)
    assert objectives(init_vanilla(D, 1), ISO3).plain_objective == 0.0
    rep = objectives(init_lora_null(D, np.eye(3)[:, [0]]), ISO3)
    assert rep.plain_objective == pytest.approx(3.0, abs=1e-14)
    assert rep.rank_of_residual == 2
    with pytest.raises(ValueError):
        objectives(init_milora(D, 1), ActivationCapture(0, np.eye(2), 2))


def test_weighted_objective_from_gram_only():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 9))
    b = init_pissa(rng.standard_normal((4, 3)), 1)
    full, gram_only = objectives(b, _cap(x)), objectives(b, ActivationCapture(0, x @ x.T, 9))
    assert gram_only.weighted_objective == pytest.approx(full.weighted_objective, rel=1e-10)


def test_candidates_have_requested_rank():
    w0 = np.random.default_rng(1).standard_normal((7, 5))
    for cand in rank_k_candidates(w0, 3, 8, seed=0):
        assert cand.shape == w0.shape
        s = svd(cand).sigma
        assert s[3] <= 1e-10 * s[0]
    assert all(not c.any() for c in rank_k_candidates(w0, 0, 3, seed=0))


def test_theorem1_diagonal():
    res = check_theorem1(D, 1, n_candidates=100, seed=0)
    assert res.passed
    assert res.details["milora_objective"] == pytest.approx(1.0, abs=1e-14)


def test_theorem1_full_rank_r():
    res = check_theorem1(D, 3, n_candidates=5, seed=0)
    assert res.passed and res.margin == pytest.approx(0.0, abs=1e-12)
    assert res.details["milora_objective"] == pytest.approx(np.sqrt(14.0), rel=1e-14)
    assert res.details["residual_rank"] == 0


def test_theorem1_random():
    w0 = np.random.default_rng(2).standard_normal((8, 6))
    res = check_theorem1(w0, 2, n_candidates=1000, seed=3)
    assert res.passed and res.margin >= -1e-9
    with pytest.raises(ValueError):
        check_theorem1(w0, 2, n_candidates=0)


def test_closed_form_examples():
    w0 = np.random.default_rng(3).standard_normal((3, 3))
    np.testing.assert_allclose(closed_form_weighted_solution(w0, ISO3), w0, atol=1e-15)
    cap = ActivationCapture(0, np.diag([4.0, 0.0]), 1)
    np.testing.assert_allclose(closed_form_weighted_solution(np.array([[1.0, 1.0]]), cap), [[1.0, 0.0]], atol=1e-15)


def test_closed_form_is_projector_onto_x_span():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 20))
    w0 = rng.standard_normal((4, 6))
    u = svd(x).u[:, :2]
    sol = closed_form_weighted_solution(w0, _cap(x))
    np.testing.assert_allclose(sol, w0 @ u @ u.T, atol=1e-8)
    assert stationarity_residual(sol, w0, _cap(x)) <= 1e-8 * np.linalg.norm(w0) * svd(x).sigma[0] ** 2


def test_closed_form_full_rank_collapses_to_w0():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 30))
    w0 = rng.standard_normal((3, 4))
    np.testing.assert_allclose(closed_form_weighted_solution(w0, _cap(x)), w0, atol=1e-8)


def test_theorem2_isotropic():
    w0 = np.random.default_rng(6).standard_normal((4, 3))
    res = check_theorem2(w0, ISO3, 1, n_candidates=20, seed=0)
    obj = res.details["weighted_objectives"]
    assert obj["corda_kp"] == pytest.approx(obj["milora"], abs=1e-9)
    assert res.passed


def test_theorem2_anisotropic():
    w0 = np.random.default_rng(7).standard_normal((4, 3))
    x = np.diag(np.sqrt([100.0, 1.0, 0.01]))
    res = check_theorem2(w0, _cap(x), 1, n_candidates=200, seed=1)
    assert res.passed
    obj = res.details["weighted_objectives"]
    assert obj["corda_kp"] <= obj["milora"]
    assert "candidates_beating_corda" in res.details


def test_theorem2_full_rank_r():
    w0 = np.random.default_rng(8).standard_normal((4, 3))
    x = np.random.default_rng(9).standard_normal((3, 10))
    res = check_theorem2(w0, _cap(x), 3, n_candidates=5, seed=0)
    target = np.linalg.norm(w0 @ x)
    obj = res.details["weighted_objectives"]
    assert obj["corda_kp"] == pytest.approx(target, rel=1e-9)
    assert obj["milora"] == pytest.approx(target, rel=1e-9)
    assert res.details["best_candidate_objective"] == pytest.approx(target, rel=1e-12)


def test_theorem3_diagonal_e1():
    res = check_theorem3(D, ISO3, 1, u_null=np.eye(3)[:, [0]])
    assert res.passed and res.details["plain_strict"]
    assert res.details["plain_margin"] == pytest.approx(2.0, abs=1e-12)


def test_theorem3_boundary_coincides_with_milora():
    w0 = np.random.default_rng(10).standard_normal((5, 4))
    v_tail = svd(w0).v[:, -1:]
    res = check_theorem3(w0, _cap(np.eye(4)), 1, u_null=v_tail)
    assert res.passed
    assert abs(res.details["plain_margin"]) <= 1e-9
    assert not res.details["plain_strict"]


def test_theorem3_generic_strict():
    rng = np.random.default_rng(11)
    w0 = rng.standard_normal((10, 8))
    res = check_theorem3(w0, _lowrank_cap(rng, 8, 4, 40), 2, seed=11)
    assert res.passed and res.details["feasible"]
    assert res.details["plain_strict"] and res.details["weighted_strict"]


def test_theorem3_wide_weight_is_infeasible():
    rng = np.random.default_rng(12)
    w0 = rng.standard_normal((3, 8))
    res = check_theorem3(w0, _lowrank_cap(rng, 8, 3, 40), 2)
    assert not res.details["feasible"]
    assert res.details["lora_null_residual_rank"] > res.details["allowed_rank"]
    assert res.passed


def test_colspace_examples():
    q = np.linalg.qr(np.random.default_rng(13).standard_normal((5, 5)))[0]
    u_null = q[:, :2]
    assert colspace_ratio(u_null.T, u_null) <= 1e-12
    assert colspace_ratio(q[:, 2:].T, u_null) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        colspace_ratio(np.ones((1, 4)), u_null)


def test_colspace_lora_null_vs_others():
    rng = np.random.default_rng(14)
    w0 = rng.standard_normal((7, 6))
    cap = _lowrank_cap(rng, 6, 3, 30)
    u_null = null_basis_from_capture(cap, 2)
    assert check_colspace(init_lora_null(w0, u_null).a, u_null).passed
    assert colspace_ratio(init_milora(w0, 2).a, u_null) > 0.01
    assert colspace_ratio(init_corda_kp(w0, cap, 2).a, u_null) > 0.01


def test_reconstruction_check_vanilla_and_tampered():
    assert check_reconstruction(init_vanilla(D, 1)).passed
    b = init_pissa(D, 1)
    assert check_reconstruction(b).passed
    assert not check_reconstruction(b.with_factors(-b.a, b.b)).passed


def test_verify_bundle_json_shape():
    rng = np.random.default_rng(15)
    w0 = rng.standard_normal((6, 5))
    cap = _lowrank_cap(rng, 5, 2, 20)
    for scheme in ("vanilla_lora", "pissa", "milora", "corda_kp", "lora_null"):
        results = verify_bundle(init_bundle(scheme, w0, 2, cap), cap, n_candidates=30, seed=0)
        assert all(r.passed for r in results), (scheme, [r.to_json() for r in results])
        for r in results:
            payload = json.loads(json.dumps(r.to_json()))
            assert list(payload) == ["check", "instance_seed", "pass", "margin", "details"]
