import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codingschemes import sigmoidal_theory as sg
from codingschemes import tasks
from codingschemes.tasks import make_toy_task

FOUR = ["110", "011", "101", "111"]
RATIOS = [0.5, 0.25, 0.25]


@pytest.fixture(scope="module")
def toy():
    return make_toy_task(100, 120, 3, RATIOS, y_plus=1.0, y_minus=0.5, seed=0)


@pytest.fixture(scope="module")
def four(toy):
    return sg.solve_orthogonal(toy, FOUR)


def test_code_patterns():
    c = sg.CodePattern.parse("110")
    assert str(c) == "110" and c.active == frozenset({0, 1}) and not c.empty
    assert sg.CodePattern.from_active([2], 3) == sg.CodePattern.parse("001")
    assert sg.CodePattern.parse("000").empty
    assert str(c.permuted([1, 0, 2])) == "110"
    assert str(sg.CodePattern.parse("100").permuted([1, 0, 2])) == "010"
    assert len(sg.enumerate_codes(3)) == 7
    with pytest.raises(ValueError):
        sg.CodePattern.parse("12")


def test_four_code_toy_solution(toy, four):
    assert four.converged and four.residual < 1e-8
    assert four.code_set == frozenset(FOUR) and four.codes_match
    atoms = {str(b.code): b.a for b in four.branches}
    # four distinct atoms; the two codes related by swapping classes 1 and 2 mirror each other
    assert len({tuple(np.round(a, 6)) for a in atoms.values()}) == 4
    assert np.allclose(atoms["110"][[0, 2, 1]], atoms["101"], atol=1e-8)
    assert np.isclose(atoms["111"][1], atoms["111"][2], atol=1e-8)
    assert np.isclose(atoms["011"][1], atoms["011"][2], atol=1e-8)


def test_weights_on_simplex(four):
    w = four.weights
    assert np.all((w >= 0) & (w <= 1)) and w.sum() == pytest.approx(1.0, abs=1e-10)


def test_full_residual_families(four):
    fam = sg.saddle_residuals(four)
    assert set(fam) >= {"readout", "target", "weights"}
    assert max(fam.values()) < 1e-8


def test_six_code_hypothesis_converges(toy):
    d = toy.with_targets(1.0, 0.1)
    sol = sg.solve_orthogonal(d, ["100", "010", "001", "110", "101", "011"])
    assert sol.converged
    assert sol.weights.sum() == pytest.approx(1.0)


def test_single_class_scalar_solution():
    d = make_toy_task(20, 20, 1, [1.0], y_plus=1.0, y_minus=0.0, seed=0)
    sol = sg.solve_orthogonal(d, ["1"])
    assert sol.converged and sol.residual < 1e-8
    assert sol.weights.tolist() == [1.0]


def test_unsolvable_hypothesis_reports_nonconvergence(toy):
    for solver in (sg.solve_orthogonal, sg.solve_general):
        sol = solver(toy, ["100"])
        assert not sol.converged and sol.residual > 1e-3 and sol.message


def test_general_solver_agrees_with_orthogonal(toy):
    ref = sg.solve_orthogonal(toy, FOUR, expectation="delta")
    gen = sg.solve_general(toy, FOUR)
    assert ref.converged and gen.converged
    assert np.max(np.abs(gen.atoms - ref.atoms)) < 1e-4
    assert np.max(np.abs(gen.weights - ref.weights)) < 1e-4


def test_high_temperature_is_degenerate(toy):
    sol = sg.solve_orthogonal(toy, FOUR, T=0.1)
    assert sol.converged
    assert np.ptp(sol.atoms, axis=0).max() < 1e-6
    assert np.allclose(sol.weights, 0.25, atol=1e-6)


def test_energies(toy, four):
    E = sg.branch_energy(four)
    assert np.all(np.isfinite(E)) and len(E) == 4
    dup = sg.solve_orthogonal(toy, ["110", "110", "011", "101", "111"])
    Ed = sg.branch_energy(dup)
    assert Ed[0] == pytest.approx(Ed[1], abs=1e-12)
    three = sg.solve_orthogonal(toy, ["110", "101", "011"])
    assert three.converged
    assert four.energy_t < three.energy_t


def test_finite_P_correction(toy, four):
    covs = sg.finite_P_correction(four)
    for c in covs:
        assert c is not None and np.all(np.linalg.eigvalsh(c) > 0)
    big = sg.finite_P_correction(four, P=10 ** 6)
    assert max(np.linalg.norm(c) for c in big) < 1e-3
    # point-mass branches have frozen activations
    delta = sg.solve_orthogonal(toy, FOUR, expectation="delta")
    for c in sg.finite_P_correction(delta):
        assert np.allclose(c, np.eye(3) / toy.P)


def test_mixture_density_normalized(four):
    grid = np.linspace(-3, 4, 20001)
    for r in range(3):
        dens = sg.mixture_density(four, r, grid)
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


def test_predictor_at_training_and_orthogonal_inputs(toy, four, rng):
    f = sg.predictor(four, toy.X)
    bound = four.residual + four.T * np.abs(four.t).max()
    assert np.max(np.abs(f - toy.Y)) <= bound + 1e-8
    x = rng.standard_normal(toy.N0)
    x -= toy.X @ np.linalg.lstsq(toy.X, x, rcond=None)[0]
    assert np.allclose(sg.predictor(four, x), 0.5 * four.weights @ four.atoms, atol=1e-10)


def test_predictor_at_finite_temperature(toy):
    sol = sg.solve_orthogonal(toy, FOUR, T=1e-3)
    f = sg.predictor(sol, toy.X)
    assert np.allclose(f + sol.T * sol.t, toy.Y, atol=1e-7)


def test_general_predictor_convex_hull(toy):
    gen = sg.solve_general(toy, FOUR)
    X = np.random.default_rng(5).standard_normal((toy.N0, 20)) * 2
    f = sg.predictor(gen, X)
    lo = np.minimum(0, gen.atoms).T @ gen.weights
    hi = np.maximum(0, gen.atoms).T @ gen.weights
    assert np.all(f >= lo - 1e-12) and np.all(f <= hi + 1e-12)


def test_training_kernel_block_structure(toy, four):
    K = sg.kernels(four)
    assert np.min(np.linalg.eigvalsh(K)) > -1e-8
    same = toy.labels[:, None] == toy.labels[None, :]
    off = ~np.eye(toy.P, dtype=bool)
    for r in range(3):
        rows = toy.labels == r
        within = K[np.ix_(rows, rows)][off[np.ix_(rows, rows)]].mean()
        cross = K[rows][:, ~rows].mean()
        assert within > cross
    assert K[same & off].min() > K[~same].max() - 1e-12


def test_duplicate_branches_leave_kernel_unchanged(toy, four):
    b = four.branches[0]
    half = dataclasses.replace(b, weight=b.weight / 2)
    dup = dataclasses.replace(four, branches=[half, half] + four.branches[1:],
                              energies=[four.energies[0]] * 2 + four.energies[1:])
    assert np.allclose(sg.kernels(dup), sg.kernels(four), atol=1e-14)
    X = toy.X[:, :5]
    assert np.allclose(sg.kernels(dup, X), sg.kernels(four, X), atol=1e-14)


def test_test_kernel_psd(toy, four, rng):
    X = np.concatenate([toy.X[:, :4], rng.standard_normal((toy.N0, 4))], axis=1)
    K = sg.kernels(four, X)
    assert np.allclose(K, K.T) and np.min(np.linalg.eigvalsh(K)) > -1e-8
    assert np.allclose(K[:4, :4], sg.kernels(four)[:4, :4], atol=1e-6)


def test_class_permutation_equivariance(toy, four):
    perm = np.array([0, 2, 1])
    inv = np.argsort(perm)
    d = tasks.Dataset(X=toy.X, Y=toy.Y[:, perm], labels=inv[toy.labels],
                      y_plus=toy.y_plus, y_minus=toy.y_minus)
    codes = [str(sg.CodePattern.parse(c).permuted(perm)) for c in FOUR]
    sol = sg.solve_orthogonal(d, codes)
    assert sol.converged
    for b, bp in zip(four.branches, sol.branches):
        assert np.allclose(b.a[perm], bp.a, atol=1e-8)
        assert bp.weight == pytest.approx(b.weight, abs=1e-8)


@settings(max_examples=8)
@given(st.floats(0.35, 0.6), st.integers(0, 1000))
def test_solutions_satisfy_invariants(y_minus, seed):
    d = make_toy_task(60, 60, 3, RATIOS, y_plus=1.0, y_minus=y_minus, seed=seed)
    sol = sg.solve_orthogonal(d, FOUR)
    if not sol.converged:
        return
    w = sol.weights
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-10
    assert max(sg.saddle_residuals(sol).values()) < 1e-8
    a = {str(b.code): b.a for b in sol.branches}
    assert np.allclose(a["110"][[0, 2, 1]], a["101"], atol=1e-7)


def test_scan_hypotheses_ranks_by_energy(toy):
    res = sg.scan_hypotheses(toy, [("110", "101", "011"), tuple(FOUR)])
    accepted = [r for r in res if r.accepted]
    assert accepted and set(map(str, accepted[0].codes)) == set(FOUR)
    assert [r.solution.energy_t for r in accepted] == sorted(r.solution.energy_t for r in accepted)
    hyps = sg.symmetric_hypotheses(3, (1, 2))
    assert all(set(str(c.permuted([0, 2, 1])) for c in h) == set(map(str, h)) for h in hyps)


def test_init_from_samples(toy, four):
    # a synthetic "sampled" population built from the solution itself
    counts = np.round(four.weights * 200).astype(int)
    reads = np.concatenate([np.repeat(b.a[None], c, 0) for b, c in zip(four.branches, counts)])
    codes = sum([[str(b.code)] * c for b, c in zip(four.branches, counts)], [])
    delta = sg.solve_orthogonal(toy, FOUR, expectation="delta")
    pre = np.concatenate([np.repeat(b.z[None], c, 0) for b, c in zip(delta.branches, counts)])
    out = sg.predictor(delta, toy.X)
    init, distinct = sg.init_from_samples(toy, reads, pre, out - 1e-4 * delta.t, codes, T=1e-4)
    assert distinct == sorted(FOUR)
    assert init["weights"].sum() == pytest.approx(1.0)
    assert np.allclose(init["t"], delta.t, atol=1e-6)
    with pytest.raises(ValueError):
        sg.init_from_samples(toy, reads, pre, out, codes, T=0.0)


def test_json_round_trip(four):
    out = json.loads(json.dumps(four.to_dict()))
    assert out["converged"] and len(out["branches"]) == 4
    assert np.allclose(np.array(out["t"]), four.t)
