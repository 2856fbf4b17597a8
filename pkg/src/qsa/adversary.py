"""Attack simulations and the cost and budget models used to size parameters."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import qsim
from .compile import SymmetricChallenge
from .errors import CapacityError, ValidationError
from .extract import TWO_PI, quantize_phase
from .qsim import Circuit, Gate

YEAR_SECONDS = 3.156e7
PIB = 2**50


@dataclass
class AttackReport:
    attack: str
    trials: int
    successes: int
    bound: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate"] = self.rate
        return d


# ---------------------------------------------------------------------------
# chained phase estimation across instances


@dataclass
class _Spectrum:
    phases: np.ndarray
    vecs: np.ndarray
    signal: np.ndarray
    bucket: int
    signal_index: int


def _spectrum(ch: SymmetricChallenge, m: int) -> _Spectrum:
    if ch.n > qsim.DENSE_LIMIT:
        raise CapacityError(f"{ch.n} qubits exceeds the dense limit")
    phases, vecs = qsim.eig_unitary(qsim.circuit_to_matrix(ch.public))
    start = qsim.basis_state(ch.n, qsim.bits_to_index(ch.b))[None, :]
    signal = ch.ansatz.evolve(ch.v_params, start)[0]
    index = int(np.argmax(np.abs(vecs.conj().T @ signal)))
    return _Spectrum(phases, vecs, signal, quantize_phase(ch.phase(), m), index)


def signal_overlaps(challenges: Sequence[SymmetricChallenge]) -> list[float]:
    """|<u_{i+1}|u_i>|^2 between the signal eigenvectors ``V_i|b_i>`` of successive instances."""
    vecs = []
    for ch in challenges:
        start = qsim.basis_state(ch.n, qsim.bits_to_index(ch.b))[None, :]
        vecs.append(ch.ansatz.evolve(ch.v_params, start)[0])
    return [float(abs(np.vdot(b, a)) ** 2) for a, b in zip(vecs, vecs[1:])]


def chained_qpe_attack(
    challenges: Sequence[SymmetricChallenge],
    m: int,
    trials: int,
    rng: np.random.Generator,
    start: np.ndarray | None = None,
) -> AttackReport:
    """Reuse each post-measurement eigenvector as the input to the next instance.

    A trial succeeds when every Born-sampled eigenphase lands in the honest
    bucket. The bound multiplies the average first-step lock-on probability
    by the product of successive signal-eigenvector overlaps; it bounds the
    rate of trials that select the signal eigenvector at every step, which is
    reported separately as ``lock_on_successes``.
    """
    specs = [_spectrum(ch, m) for ch in challenges]
    overlaps = [float(abs(np.vdot(b.signal, a.signal)) ** 2) for a, b in zip(specs, specs[1:])]
    dim = specs[0].vecs.shape[0]
    successes = locked = 0
    lock_on = 0.0
    for _ in range(trials):
        phi = qsim.haar_state(dim, rng) if start is None else np.asarray(start, dtype=complex)
        lock_on += abs(np.vdot(specs[0].signal, phi)) ** 2
        ok = on_signal = True
        for s in specs:
            p = np.abs(s.vecs.conj().T @ phi) ** 2
            j = int(rng.choice(dim, p=p / p.sum()))
            ok = ok and quantize_phase(s.phases[j], m) == s.bucket
            on_signal = on_signal and j == s.signal_index
            phi = s.vecs[:, j]
        successes += ok
        locked += on_signal
    bound = lock_on / trials * float(np.prod(overlaps)) if overlaps else lock_on / trials
    return AttackReport(
        "chained-qpe",
        trials,
        successes,
        bound,
        {
            "overlaps": overlaps,
            "overlap_product": float(np.prod(overlaps)) if overlaps else 1.0,
            "first_lock_on": lock_on / trials,
            "lock_on_successes": locked,
        },
    )


def bin_mass_histogram(u: np.ndarray, state: np.ndarray, bins: int) -> np.ndarray:
    """Overlap mass of ``state`` per uniform eigenphase bin ``[2 pi k / M, 2 pi (k+1) / M)``."""
    phases, vecs = qsim.eig_unitary(u)
    weight = np.abs(vecs.conj().T @ state) ** 2
    idx = np.minimum((phases * bins / TWO_PI).astype(int), bins - 1)
    return np.bincount(idx, weights=weight, minlength=bins) / weight.sum()


# ---------------------------------------------------------------------------
# state guessing


def orthogonal_direction(psi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    v = qsim.haar_state(len(psi), rng)
    v = v - np.vdot(psi, v) * psi
    return v / np.linalg.norm(v)


def guess_state(psi: np.ndarray, perp: np.ndarray, f: float) -> np.ndarray:
    """A state with fidelity exactly ``f`` to ``psi``, given a unit vector orthogonal to it."""
    return math.sqrt(f) * psi + math.sqrt(1 - f) * perp


def default_fidelity_grid() -> np.ndarray:
    return np.unique(np.concatenate([np.linspace(0, 1, 51), 1 - np.geomspace(1e-3, 0.02, 6)]))


def p_u_curve(
    n: int,
    m: int,
    fidelities: Sequence[float],
    trials: int,
    rng: np.random.Generator,
    plant_depth: int = 3,
    limit: int = 8,
) -> np.ndarray:
    """Per-instance probability that a guess at fidelity F reproduces the honest bucket.

    Each trial draws a Haar-random public unitary, a seeded brickwork plant
    and an independent orthogonal direction; the honest and guessed features
    are both read off with the dense argmax-overlap rule.
    """
    from .compile import seed_to_plant_circuit, plant_state

    if n > limit:
        raise CapacityError(f"{n} qubits exceeds the guessing-curve limit of {limit}")
    f = np.asarray(fidelities, dtype=float)
    dim = 2**n
    hits = np.zeros(len(f))
    for _ in range(trials):
        u = qsim.haar_from_rng(dim, rng)
        psi = plant_state(seed_to_plant_circuit(rng.bytes(32), n, plant_depth))
        perp = orthogonal_direction(psi, rng)
        phases, vecs = qsim.eig_unitary(u)
        c = vecs.conj().T @ psi
        d = vecs.conj().T @ perp
        honest = quantize_phase(phases[np.argmax(np.abs(c))], m)
        amps = np.sqrt(f)[:, None] * c[None, :] + np.sqrt(1 - f)[:, None] * d[None, :]
        picks = np.argmax(np.abs(amps), axis=1)
        guessed = np.array([quantize_phase(phases[j], m) for j in picks])
        hits += guessed == honest
    return hits / trials


def guess_success(curve_f: Sequence[float], curve_p: Sequence[float], n: int, k: int, points: int = 20001) -> float:
    """Integrate ``(d-1)(1-F)^(d-2) p_U(F)^k`` over [0, 1] with ``p_U`` interpolated linearly."""
    d = 2**n
    f = np.linspace(0.0, 1.0, points)
    p = np.clip(np.interp(f, curve_f, curve_p), 1e-300, 1.0)
    with np.errstate(divide="ignore"):
        log_w = math.log(d - 1) + (d - 2) * np.log1p(-f) + k * np.log(p)
    top = np.max(log_w[np.isfinite(log_w)])
    integrand = np.exp(log_w - top)
    return float(np.trapezoid(integrand, f)) * math.exp(top)


@dataclass(frozen=True)
class GuessResult:
    p_success: float
    min_entropy: float


def state_guess_success(
    n: int,
    m: int,
    k: int,
    trials: int,
    rng: np.random.Generator,
    fidelities: Sequence[float] | None = None,
    curve: np.ndarray | None = None,
) -> GuessResult:
    f = default_fidelity_grid() if fidelities is None else np.asarray(fidelities)
    if curve is None:
        curve = p_u_curve(n, m, f, trials, rng)
    p = guess_success(f, curve, n, k)
    return GuessResult(p, -math.log2(p))


def min_key_count(curve_f: Sequence[float], curve_p: Sequence[float], n: int, bits: float = 256, k_max: int = 10000) -> int:
    """Smallest number of challenges whose guessing min-entropy reaches ``bits``."""
    lo, hi = 1, 1
    while -math.log2(guess_success(curve_f, curve_p, n, hi)) < bits:
        lo, hi = hi, hi * 2
        if hi > k_max:
            raise ValidationError(f"min-entropy stays below {bits} bits up to k={k_max}")
    while lo < hi:
        mid = (lo + hi) // 2
        if -math.log2(guess_success(curve_f, curve_p, n, mid)) >= bits:
            hi = mid
        else:
            lo = mid + 1
    return lo


# ---------------------------------------------------------------------------
# cost models


@dataclass(frozen=True)
class CostModelParams:
    m: int = 2
    n_ep: int = 128
    n_s: int = 50
    d0: float = 100
    d1: float = 30
    t_layer: float = 5e-6
    c_qpu: float = 1.5
    c_cu: float = 3
    f_oh: float = 10
    t_meas: float = 5e-6
    r_class: float = 1e12
    r_sc: float = 1e15
    c_class: float = 3
    n_s_class: int = 200

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValidationError(f"{k} must be positive")

    def depth(self, n: int) -> float:
        return self.d0 + self.d1 * n


def quantum_eve_cost(n: int, params: CostModelParams = CostModelParams()) -> float:
    """Seconds for coupon-collecting phase estimation over all 2^n eigenvectors."""
    t_apply = params.depth(n) * params.c_qpu * params.t_layer
    t_qpe = (2**params.m - 1) * params.c_cu * t_apply + params.t_meas
    return params.n_ep * 2.0**n * params.n_s * params.f_oh * t_qpe


def classical_eve_cost(n: int, params: CostModelParams = CostModelParams()) -> float:
    """Seconds for dense eigendecomposition of every challenge."""
    return params.n_ep * 2.0 ** (3 * n) / params.r_sc


def honest_classical_cost(n: int, params: CostModelParams = CostModelParams()) -> float:
    t_apply = params.depth(n) * params.c_class * 2.0 ** (n + params.m) / params.r_class
    return params.n_ep * params.m * params.n_s_class * t_apply


def memory_cutoffs(ram_bytes: float, m: int) -> tuple[int, int]:
    """Largest n for a dense complex128 matrix and for an (n+m)-qubit state vector; -1 if none fits."""
    if ram_bytes <= 0:
        raise ValidationError("memory must be positive")

    def largest(size) -> int:
        n = -1
        while size(n + 1) <= ram_bytes:
            n += 1
        return n

    return largest(lambda n: 16 * 2 ** (2 * n)), largest(lambda n: 16 * 2 ** (n + m))


def bell_budget(shots: int, n: int, m: int, k: int) -> int:
    if min(shots, n, m, k) < 1:
        raise ValidationError("all budget inputs must be at least 1")
    return 2 * shots * n * m * k


def survival_budget(two_qubit_gates: int, target: float = 0.95) -> float:
    """Largest per-gate error rate keeping the error-free probability at ``target``."""
    if two_qubit_gates < 1:
        raise ValidationError("need at least one gate")
    return 1 - target ** (1 / two_qubit_gates)


def cost_table(ns: Sequence[int], params: CostModelParams = CostModelParams()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "quantum_eve_s", "classical_eve_s", "honest_classical_s"])
    for n in ns:
        w.writerow([n, f"{quantum_eve_cost(n, params):.6g}", f"{classical_eve_cost(n, params):.6g}", f"{honest_classical_cost(n, params):.6g}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# teleportation


@dataclass
class Teleported:
    state: np.ndarray
    z_bits: tuple[int, ...]  # a_i, from the data qubit
    x_bits: tuple[int, ...]  # b_i, from Alice's half of the pair
    fidelity: float


def teleport_simulate(
    plant: Circuit,
    rng: np.random.Generator,
    omit: set[tuple[int, str]] = frozenset(),
    limit: int = 6,
) -> Teleported:
    """Teleport the planted state qubit by qubit and apply ``X^b Z^a`` on the receiver.

    Register layout: data ``0..n-1``, Alice's pair halves ``n..2n-1``, Bob's
    halves ``2n..3n-1``. ``omit`` drops corrections, e.g. ``{(0, "X")}``.
    """
    n = plant.n
    if n > limit:
        raise CapacityError(f"teleporting {n} qubits needs {3 * n}; limit is {limit} data qubits")
    total = 3 * n
    gates = [Gate(g.kind, g.targets, g.params) for g in plant.gates]
    for i in range(n):
        gates += [Gate("H", (n + i,)), Gate("CX", (n + i, 2 * n + i))]
    for i in range(n):
        gates += [Gate("CX", (i, n + i)), Gate("H", (i,))]
    state = qsim.apply_circuit(qsim.zero_state(total), Circuit(total, tuple(gates)))

    block = state.reshape(2**n, 2**n, 2**n)  # (bob, alice halves, data)
    weights = (np.abs(block) ** 2).sum(axis=0).ravel()
    outcome = int(rng.choice(weights.size, p=weights / weights.sum()))
    alice, data = divmod(outcome, 2**n)
    bob = block[:, alice, data]
    bob = bob / np.linalg.norm(bob)

    a = qsim.index_to_bits(data, n)
    b = qsim.index_to_bits(alice, n)
    fix = []
    for i in range(n):
        if b[i] and (i, "X") not in omit:
            fix.append(Gate("X", (i,)))
        if a[i] and (i, "Z") not in omit:
            fix.append(Gate("Z", (i,)))
    bob = qsim.apply_circuit(bob, Circuit(n, tuple(fix)))
    target = qsim.apply_circuit(qsim.zero_state(n), plant)
    return Teleported(bob, a, b, qsim.fidelity(target, bob))
