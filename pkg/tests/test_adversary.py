import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsa import adversary as adv
from qsa import compile as comp
from qsa import qsim
from qsa.compile import CompilerConfig, SPSAConfig
from qsa.errors import CapacityError, ValidationError
from qsa.qsim import Circuit, Gate
from qsa.rng import stream

MASTER = bytes(range(7, 39))


@pytest.fixture(scope="module")
def chain():
    cfg = CompilerConfig(delta=0.05, layers=4, spsa=SPSAConfig(steps=1500, a=4.0, restarts=2))
    out = []
    for i in range(4):
        plant = comp.plant_for_index(MASTER, i, 4, 2)
        out.append(comp.compile_symmetric(plant, 4, CompilerConfig(**{**cfg.__dict__, "seed": i})))
    return out


def test_report_rate():
    r = adv.AttackReport("x", 8, 2, 0.5)
    assert r.rate == 0.25 and r.to_dict()["rate"] == 0.25
    assert adv.AttackReport("x", 0, 0).rate == 0.0


def test_chained_single_from_signal(chain, rng):
    ch = chain[0]
    signal = qsim.apply_circuit(qsim.basis_state(4, qsim.bits_to_index(ch.b)), ch.v_circuit())
    r = adv.chained_qpe_attack(chain[:1], 3, 200, rng, start=signal)
    assert r.successes == 200 and r.diagnostics["lock_on_successes"] == 200
    assert r.bound == pytest.approx(1.0)


def test_chained_consistency_with_bound(chain, rng):
    r = adv.chained_qpe_attack(chain, 4, 2000, rng)
    assert r.successes <= r.trials
    assert r.diagnostics["overlaps"] == pytest.approx(adv.signal_overlaps(chain))
    sigma = math.sqrt(max(r.bound, 1 / r.trials) / r.trials)
    assert r.diagnostics["lock_on_successes"] / r.trials <= r.bound + 5 * sigma
    assert r.diagnostics["first_lock_on"] == pytest.approx(1 / 16, rel=0.2)


def test_chained_capacity(chain, rng):
    big = comp.SymmetricChallenge.__new__(comp.SymmetricChallenge)
    object.__setattr__(big, "public", Circuit(qsim.DENSE_LIMIT + 1, ()))
    with pytest.raises(CapacityError):
        adv.chained_qpe_attack([big], 2, 1, rng)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 5), bins=st.integers(1, 64))
def test_bin_mass_sums_to_one(seed, n, bins):
    rng = stream(seed)
    h = adv.bin_mass_histogram(qsim.haar_from_rng(2**n, rng), qsim.haar_state(2**n, rng), bins)
    assert len(h) == bins and abs(h.sum() - 1) < 1e-9 and np.all(h >= 0)


def test_bin_mass_eigenvector(rng):
    u = qsim.haar_from_rng(16, rng)
    phases, vecs = qsim.eig_unitary(u)
    h = adv.bin_mass_histogram(u, vecs[:, 5], 64)
    assert h.max() == pytest.approx(1.0)
    assert np.argmax(h) == int(phases[5] * 64 / (2 * np.pi))


def test_bin_mass_compiled_localised(chain):
    for ch in chain:
        if ch.delta_hat <= 0.25:
            psi = comp.plant_state(comp.plant_for_index(MASTER, chain.index(ch), 4, 2))
            assert adv.bin_mass_histogram(qsim.circuit_to_matrix(ch.public), psi, 64).max() >= 0.75


def test_bin_mass_haar_spread():
    rng = stream(21)
    spread = sum(
        adv.bin_mass_histogram(qsim.haar_from_rng(256, rng), qsim.haar_state(256, rng), 64).max() <= 0.15
        for _ in range(50)
    )
    assert spread >= 48


def test_guess_state_fidelity(rng):
    psi = qsim.haar_state(32, rng)
    perp = adv.orthogonal_direction(psi, rng)
    assert abs(np.vdot(psi, perp)) < 1e-12
    for f in (0.0, 0.3, 0.99, 1.0):
        g = adv.guess_state(psi, perp, f)
        assert np.linalg.norm(g) == pytest.approx(1)
        assert qsim.fidelity(psi, g) == pytest.approx(f, abs=1e-12)


def test_p_u_endpoints():
    trials = 2000
    curve = adv.p_u_curve(6, 2, [0.0, 1.0], trials, stream(22))
    assert curve[1] == 1.0
    sigma = math.sqrt(0.25 * 0.75 / trials)
    assert abs(curve[0] - 0.25) <= 3 * sigma


def test_p_u_independence_across_instances():
    # joint success over k independent instances at a fixed fidelity matches p_U^k
    n, m, k, f, trials = 3, 2, 3, 0.5, 3000
    p = adv.p_u_curve(n, m, [f], 4000, stream(23))[0]
    rng = stream(24)
    hits = 0
    for _ in range(trials):
        hits += all(adv.p_u_curve(n, m, [f], 1, rng)[0] == 1.0 for _ in range(k))
    want = p**k
    assert abs(hits / trials - want) <= 3 * math.sqrt(want * (1 - want) / trials) + 3 * k * p ** (k - 1) * math.sqrt(p * (1 - p) / 4000)


def test_p_u_capacity():
    with pytest.raises(CapacityError):
        adv.p_u_curve(9, 2, [0.5], 1, stream(0))


def test_guess_success_closed_forms():
    # constant p_U integrates the Beta(1, d-1) density to p^k
    assert adv.guess_success([0, 1], [0.5, 0.5], 4, 3) == pytest.approx(0.125, rel=1e-6)
    # p_U(F) = F gives E[F] = 1/d
    assert adv.guess_success([0, 1], [0, 1], 4, 1) == pytest.approx(1 / 16, rel=1e-4)


def test_guess_success_monotone_in_k():
    f = adv.default_fidelity_grid()
    curve = adv.p_u_curve(3, 2, f, 300, stream(25))
    values = [adv.guess_success(f, curve, 3, k) for k in (1, 2, 4, 8, 16)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    res = adv.state_guess_success(3, 2, 4, 0, stream(0), f, curve)
    assert res.min_entropy == pytest.approx(-math.log2(res.p_success))


def test_min_key_count_for_constant_curve():
    # p_U = 1/2 everywhere gives exactly one bit per challenge
    assert adv.min_key_count([0, 1], [0.5, 0.5], 6, bits=39.5) == 40
    with pytest.raises(ValidationError):
        adv.min_key_count([0, 1], [1.0, 1.0], 4, bits=1, k_max=8)


def test_cost_values():
    assert adv.classical_eve_cost(27) / adv.YEAR_SECONDS == pytest.approx(9.81e3, rel=0.01)
    assert adv.honest_classical_cost(27) == pytest.approx(7.5e4, rel=0.01)
    q27 = adv.quantum_eve_cost(27) / adv.YEAR_SECONDS
    q50 = adv.quantum_eve_cost(50) / adv.YEAR_SECONDS
    assert 3350 / 10 <= q27 <= 3350 * 10
    assert 4.94e10 / 10 <= q50 <= 4.94e10 * 10


def test_cost_scaling():
    p = adv.CostModelParams()
    doubled = adv.CostModelParams(n_s=100)
    assert adv.quantum_eve_cost(20, doubled) == pytest.approx(2 * adv.quantum_eve_cost(20, p))
    assert adv.classical_eve_cost(21) == pytest.approx(8 * adv.classical_eve_cost(20))
    with pytest.raises(ValidationError):
        adv.CostModelParams(t_layer=0)


def test_cost_table_csv():
    lines = adv.cost_table([10, 11]).splitlines()
    assert lines[0] == "n,quantum_eve_s,classical_eve_s,honest_classical_s" and len(lines) == 3


def test_memory_cutoffs():
    assert adv.memory_cutoffs(4.85 * adv.PIB, 2) == (24, 46)
    assert adv.memory_cutoffs(9.2e15, 2) == (24, 47)
    assert adv.memory_cutoffs(16, 0) == (0, 0)
    assert adv.memory_cutoffs(8, 0) == (-1, -1)


def test_bell_and_survival():
    assert adv.bell_budget(110, 8, 8, 36) == 506_880
    assert adv.bell_budget(110, 8, 8, 1) == 2 * 110 * 64
    assert adv.bell_budget(220, 8, 8, 36) == 2 * 506_880
    assert adv.survival_budget(555) == pytest.approx(9.2e-5, rel=0.02)
    assert adv.survival_budget(1180) == pytest.approx(4.3e-5, rel=0.02)
    assert adv.survival_budget(1) == pytest.approx(0.05)
    with pytest.raises(ValidationError):
        adv.bell_budget(0, 1, 1, 1)


def test_teleport_plus_state(rng):
    plant = Circuit(1, (Gate("H", (0,)),))
    patterns = set()
    for _ in range(100):
        t = adv.teleport_simulate(plant, rng)
        assert abs(t.fidelity - 1) < 1e-9
        patterns.add((t.z_bits, t.x_bits))
    assert len(patterns) == 4


def test_teleport_preserves_entanglement(rng):
    plant = comp.seed_to_plant_circuit(b"\x05" * 32, 2, 3)
    for _ in range(50):
        assert abs(adv.teleport_simulate(plant, rng).fidelity - 1) < 1e-9


def test_teleport_missing_correction_detected(rng):
    plant = comp.seed_to_plant_circuit(b"\x06" * 32, 2, 3)
    results = [adv.teleport_simulate(plant, rng, omit={(0, "X")}) for _ in range(60)]
    assert any(r.fidelity < 1 - 1e-6 for r in results)
    assert all(abs(r.fidelity - 1) < 1e-9 for r in results if r.x_bits[0] == 0)


def test_teleport_capacity(rng):
    with pytest.raises(CapacityError):
        adv.teleport_simulate(Circuit(7, ()), rng)
