"""Honest evaluation regimes turning (challenge, planted state) into an m-bit phase bucket.

* ``M``: dense eigendecomposition and the eigenvector of largest overlap.
* ``C``: autocorrelation ``<psi|U^t|psi>`` followed by a zero-padded periodogram.
* ``Q``: low-depth phase estimation from Hadamard-test moments of ``U^(2^j)``,
  simulated either exactly or with shots, readout error and gate noise.
"""

from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import qsim
from .compile import AsymmetricChallenge, SymmetricChallenge, fast_power, public_power
from .errors import CapacityError, DimensionError, ValidationError
from .qsim import Circuit, Gate, NoiseModel
from .rng import child, stream

TWO_PI = 2 * math.pi
LOW_SIGNAL = 0.05
QPE_LIMIT = 14


@dataclass(frozen=True)
class PhaseFeature:
    theta_hat: float
    bucket: int
    m: int
    low_signal: bool = False


@dataclass(frozen=True)
class MomentEstimate:
    j: int
    re: float
    im: float
    shots: int  # 0 in exact-probability mode

    @property
    def value(self) -> complex:
        return complex(self.re, self.im)


def quantize_phase(theta: float, m: int) -> int:
    if m < 1:
        raise ValidationError("need at least one bit")
    # nearest bucket, halves round up
    return int(math.floor(theta * 2**m / TWO_PI + 0.5)) % 2**m


def _feature(theta: float, m: int, low_signal: bool = False) -> PhaseFeature:
    theta = float(np.mod(theta, TWO_PI))
    return PhaseFeature(theta, quantize_phase(theta, m), m, low_signal)


def _challenge_circuit(ch) -> Circuit:
    return ch if isinstance(ch, Circuit) else ch.public


# ---------------------------------------------------------------------------
# dense regime


def extract_m(u: np.ndarray, psi: np.ndarray, m: int) -> PhaseFeature:
    if u.shape[0] != len(psi):
        raise DimensionError(f"unitary of size {u.shape[0]} and state of length {len(psi)}")
    phases, vecs = qsim.eig_unitary(u)
    overlaps = np.abs(vecs.conj().T @ psi) ** 2
    ties = np.flatnonzero(overlaps >= overlaps.max() - 1e-12)
    pick = ties[np.argmin(phases[ties])]
    return _feature(phases[pick], m)


# ---------------------------------------------------------------------------
# classical spectroscopy


def autocorr_sequence(u: Circuit, psi: np.ndarray, length: int) -> np.ndarray:
    if length < 2:
        raise ValidationError("need at least two samples")
    z = np.empty(length, dtype=complex)
    phi = np.asarray(psi, dtype=complex)
    z[0] = np.vdot(psi, phi)
    for t in range(1, length):
        phi = qsim.apply_circuit(phi, u)
        z[t] = np.vdot(psi, phi)
    return z


def periodogram_peak(z: Sequence[complex], pad: int = 4) -> float:
    """Frequency maximizing ``|sum_t z_t exp(-i w t)|``, refined by a parabola through the peak bin."""
    z = np.asarray(z, dtype=complex)
    if z.size < 2:
        raise ValidationError("need at least two samples")
    size = pad * z.size
    s = np.abs(np.fft.fft(z, n=size))
    k = int(np.argmax(s))  # first maximum, i.e. the smallest frequency on ties
    left, mid, right = s[(k - 1) % size], s[k], s[(k + 1) % size]
    curv = left - 2 * mid + right
    shift = 0.5 * (left - right) / curv if curv < 0 else 0.0
    return float(np.mod(TWO_PI * (k + shift) / size, TWO_PI))


def extract_c(u: Circuit, psi: np.ndarray, m: int, length: int | None = None, pad: int = 4) -> PhaseFeature:
    z = autocorr_sequence(u, psi, length or 2**m)
    return _feature(periodogram_peak(z, pad), m)


# ---------------------------------------------------------------------------
# Hadamard test and LDQPE


def hadamard_circuit(upow: Circuit, imaginary: bool) -> Circuit:
    head = _interference_head(upow)
    return head + _interference_tail(head.n, imaginary)


@functools.lru_cache(maxsize=512)
def _interference_head(upow: Circuit) -> Circuit:
    # cached so repeated evaluations of one public circuit reuse its compiled kernels
    ctrl = qsim.controlled(upow)
    return Circuit(ctrl.n, (Gate("H", (0,)),) + ctrl.gates)


def _interference_tail(n: int, imaginary: bool) -> Circuit:
    return Circuit(n, ((Gate("Sdg", (0,)),) if imaginary else ()) + (Gate("H", (0,)),))


def _with_ancilla(psi: np.ndarray) -> np.ndarray:
    out = np.zeros(2 * len(psi), dtype=complex)
    out[0::2] = psi
    return out


def _p0(states: np.ndarray) -> np.ndarray:
    """Probability that the ancilla (qubit 0) reads 0, per row."""
    w = np.abs(states) ** 2
    return w[..., 0::2].sum(axis=-1) / w.sum(axis=-1)


def _ancilla_expectation(
    circuit: Circuit,
    start: np.ndarray,
    shots: int,
    noise: NoiseModel,
    rng: np.random.Generator,
    trajectories: int | None,
) -> float:
    count = min(shots, trajectories or shots)
    finals = qsim.noisy_trajectories(start, circuit, noise, rng, count, dtype=np.complex64)
    p0 = np.clip(_p0(finals.astype(complex)), 0.0, 1.0)
    per = np.full(count, shots // count)
    per[: shots % count] += 1
    return _sample_expectation(p0, per, noise.readout, rng)


def _sample_expectation(p0: np.ndarray, per: np.ndarray, readout: float, rng: np.random.Generator) -> float:
    """Ancilla ``<Z>`` from binomial shots per trajectory followed by readout flips."""
    shots = int(per.sum())
    zeros = int(rng.binomial(per, p0).sum())
    ones = shots - zeros
    if readout > 0:
        zeros = int(rng.binomial(zeros, 1 - readout) + rng.binomial(ones, readout))
        ones = shots - zeros
    return (zeros - ones) / shots


def hadamard_test_moment(
    upow: Circuit,
    psi: np.ndarray,
    shots: int | None = None,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
    j: int = 0,
    trajectories: int | None = None,
) -> MomentEstimate:
    """Estimate ``<psi|upow|psi>`` from two one-ancilla interference circuits.

    With ``shots=None`` the ancilla probabilities are read off the amplitudes
    exactly (noise must then be absent). Otherwise each circuit is sampled
    ``shots`` times; with gate noise the shots are spread over
    ``trajectories`` Monte Carlo trajectories (default: one per shot).
    """
    if len(psi) != 2**upow.n:
        raise DimensionError("state does not match circuit width")
    start = _with_ancilla(np.asarray(psi, dtype=complex))
    noise = noise or qsim.NOISELESS
    if shots is None and (not noise.silent or noise.readout):
        raise ValidationError("exact-probability mode is noiseless")
    shared = None
    if noise.silent:
        # without gate noise both circuits share every gate but the last two
        head = _interference_head(upow)
        shared = qsim.apply_circuit(start, head)
    parts = []
    for imaginary in (False, True):
        if shared is not None:
            final = qsim.apply_circuit(shared, _interference_tail(upow.n + 1, imaginary))
            p0 = float(_p0(final))
            if shots is None:
                parts.append(2 * p0 - 1)
                continue
        if shots < 1:
            raise ValidationError("shots must be positive")
        if rng is None:
            raise ValidationError("shot mode needs a random stream")
        if shared is not None:
            parts.append(_sample_expectation(np.array([p0]), np.array([shots]), noise.readout, rng))
        else:
            circ = hadamard_circuit(upow, imaginary)
            parts.append(_ancilla_expectation(circ, start, shots, noise, rng, trajectories))
    return MomentEstimate(j, parts[0], parts[1], shots or 0)


def power_circuit(ch, j: int) -> Circuit:
    """``U^(2^j)``: the fast-power form for symmetric challenges, repetition otherwise."""
    if isinstance(ch, SymmetricChallenge):
        return fast_power(ch, j)
    if isinstance(ch, AsymmetricChallenge):
        return ch.public.repeat(2**j)
    return public_power(_challenge_circuit(ch), j)


def _circular_distance(a: float, b: float) -> float:
    d = abs(a - b) % TWO_PI
    return min(d, TWO_PI - d)


@dataclass
class LDQPEResult:
    feature: PhaseFeature
    moments: list[MomentEstimate]
    thetas: list[float]
    weak_moments: list[int] = field(default_factory=list)
    ambiguous_steps: list[int] = field(default_factory=list)

    @property
    def low_signal(self) -> bool:
        return bool(self.weak_moments or self.ambiguous_steps)


def unwrap(moments: Sequence[complex]) -> tuple[list[float], list[int]]:
    """Bitwise phase refinement from ``Z_j ~ exp(i 2^j theta)``.

    Returns the per-step estimates and the steps whose chosen branch sat
    more than halfway towards the next candidate, a sign that the moments
    are not consistent with a single dominant eigenphase.
    """
    thetas = [float(np.mod(np.angle(moments[0]), TWO_PI))]
    ambiguous = []
    for j in range(1, len(moments)):
        spacing = TWO_PI / 2**j
        base = float(np.mod(np.angle(moments[j]), TWO_PI)) / 2**j
        cands = base + spacing * np.arange(2**j)
        dists = [_circular_distance(c, thetas[-1]) for c in cands]
        k = int(np.argmin(dists))
        if dists[k] > spacing / 4:
            ambiguous.append(j)
        thetas.append(float(cands[k]))
    return thetas, ambiguous


def ldqpe(
    ch,
    psi: np.ndarray,
    m: int,
    shots: int | None = None,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
    trajectories: int | None = None,
) -> LDQPEResult:
    moments = []
    for j in range(m):
        sub = child(rng, f"moment-{j}") if rng is not None else None
        moments.append(hadamard_test_moment(power_circuit(ch, j), psi, shots, noise, sub, j, trajectories))
    z = [mo.value for mo in moments]
    thetas, ambiguous = unwrap(z)
    weak = [mo.j for mo in moments if abs(mo.value) < LOW_SIGNAL]
    feature = _feature(thetas[-1], m, bool(weak or ambiguous))
    return LDQPEResult(feature, moments, thetas, weak, ambiguous)


def textbook_qpe(ch, psi: np.ndarray, m: int, shots: int, rng: np.random.Generator, limit: int = QPE_LIMIT) -> np.ndarray:
    """Bucket counts from m-ancilla phase estimation.

    Ancillas occupy qubits ``0..m-1`` (ancilla ``j`` controls ``U^(2^j)``), the
    system sits above them. The inverse QFT on the ancilla register is applied
    as a discrete Fourier transform of the register amplitudes.
    """
    n = _challenge_circuit(ch).n
    if n + m > limit:
        raise CapacityError(f"{n + m} qubits exceeds the phase-estimation limit of {limit}")
    total = n + m
    state = np.zeros(2**total, dtype=complex)
    state[0 :: 2**m] = psi
    prep = Circuit(total, tuple(Gate("H", (j,)) for j in range(m)))
    state = qsim.apply_circuit(state, prep)
    for j in range(m):
        state = qsim.apply_circuit(state, qsim.controlled_on(power_circuit(ch, j), j, m, total))
    reg = state.reshape(2**n, 2**m)
    reg = np.fft.fft(reg, axis=1) / np.sqrt(2**m)
    probs = (np.abs(reg) ** 2).sum(axis=0)
    return rng.multinomial(shots, probs / probs.sum())


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class EvalConfig:
    """Settings for the ``Q`` regime; ``M`` and ``C`` ignore everything but ``pad``."""

    shots: int | None = None
    noise: NoiseModel | None = None
    seed: bytes | int | str = 0
    trajectories: int | None = None
    pad: int = 4


@dataclass
class FeatureVector:
    features: list[PhaseFeature]
    m: int

    @property
    def k(self) -> int:
        return len(self.features)

    @property
    def buckets(self) -> list[int]:
        return [f.bucket for f in self.features]

    @property
    def low_signal(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.low_signal]

    def pack(self) -> bytes:
        return pack_buckets(self.buckets, self.m)


def pack_buckets(buckets: Sequence[int], m: int) -> bytes:
    """Concatenate m-bit buckets most significant bit first; zero-fill the last byte."""
    value, bits = 0, 0
    for b in buckets:
        if not 0 <= b < 2**m:
            raise ValidationError(f"bucket {b} does not fit in {m} bits")
        value = (value << m) | b
        bits += m
    pad = (-bits) % 8
    return (value << pad).to_bytes((bits + pad) // 8, "big")


def unpack_buckets(data: bytes, m: int, k: int) -> list[int]:
    bits = m * k
    value = int.from_bytes(data, "big") >> (len(data) * 8 - bits)
    return [(value >> (m * (k - 1 - i))) & (2**m - 1) for i in range(k)]


def evaluate_one(ch, psi: np.ndarray, regime: str, m: int, config: EvalConfig, index: int = 0) -> PhaseFeature:
    circuit = _challenge_circuit(ch)
    if regime == "M":
        return extract_m(qsim.circuit_to_matrix(circuit), psi, m)
    if regime == "C":
        return extract_c(circuit, psi, m, pad=config.pad)
    if regime == "Q":
        rng = stream(config.seed, f"ldqpe-{index}") if config.shots is not None else None
        return ldqpe(ch, psi, m, config.shots, config.noise, rng, config.trajectories).feature
    raise ValidationError(f"unknown regime {regime!r}")


def evaluate_schedule(
    challenges: Sequence, plants: Sequence, regime: str, m: int, config: EvalConfig | None = None
) -> FeatureVector:
    """Extract one feature per challenge; ``plants`` holds circuits or state vectors."""
    if len(challenges) != len(plants):
        raise ValidationError("one plant per challenge")
    config = config or EvalConfig()
    feats = []
    for i, (ch, plant) in enumerate(zip(challenges, plants)):
        psi = plant if isinstance(plant, np.ndarray) else qsim.apply_circuit(qsim.zero_state(plant.n), plant)
        feats.append(evaluate_one(ch, psi, regime, m, config, i))
    return FeatureVector(feats, m)


# ---------------------------------------------------------------------------
# noise sweeps


@dataclass(frozen=True)
class SweepRow:
    p2: float
    accuracy: float
    reps: int
    low_signal_rate: float


def noise_sweep(
    instances: Sequence[tuple[object, np.ndarray, int]],
    p2_grid: Iterable[float],
    m: int,
    shots: int,
    seed: bytes | int | str = 0,
    trajectories: int | None = None,
    readout: float = 0.01,
) -> list[SweepRow]:
    """Bucket accuracy of shot-based LDQPE per two-qubit error rate.

    ``instances`` are ``(challenge, planted state, reference bucket)`` triples;
    each one is a repetition with its own noise stream.
    """
    rows = []
    for p2 in p2_grid:
        noise = NoiseModel(p2=p2, readout=readout)
        hits = flagged = 0
        for r, (ch, psi, ref) in enumerate(instances):
            rng = stream(seed, f"sweep-{p2!r}-{r}")
            res = ldqpe(ch, psi, m, shots, noise, rng, trajectories)
            hits += res.feature.bucket == ref
            flagged += res.low_signal
        rows.append(SweepRow(float(p2), hits / len(instances), len(instances), flagged / len(instances)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p2", "accuracy", "reps", "low_signal_rate"])
    for r in rows:
        w.writerow([f"{r.p2:g}", f"{r.accuracy:.4f}", r.reps, f"{r.low_signal_rate:.4f}"])
    return buf.getvalue()
