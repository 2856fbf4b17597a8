"""Planted states and public challenge compilation.

A plant is a seeded brickwork circuit ``W`` preparing the secret state
``psi = W|0>``. A symmetric challenge publishes ``U = V D V^dagger`` where
``D`` is a layer of Rz rotations and ``V`` is trained so that ``V|b>`` is close
to ``psi`` for a hidden basis label ``b``. The eigenphase of ``V|b>`` is then
known in closed form from ``b`` and the Rz angles.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import qsim
from .errors import ValidationError
from .kdf import hkdf
from .qsim import Circuit, Gate
from .rng import child, stream

LDQPE_MIN_OVERLAP = 4 - 2 * math.sqrt(3)
FOUR_PI = 4 * np.pi


# ---------------------------------------------------------------------------
# seeds and plants


def derive_plant_seed(master: bytes, index: int) -> bytes:
    if len(master) < 32:
        raise ValidationError(f"master seed must be at least 32 bytes, got {len(master)}")
    if not 0 <= index < 2**32:
        raise ValidationError("challenge index must fit in 32 bits")
    return hkdf(master, b"", b"QSA-states" + index.to_bytes(4, "big"), 32)


@dataclass(frozen=True)
class Brickwork:
    """Alternating rotation and CZ layers.

    ``layers`` counts rotation layers; a CZ layer sits between consecutive
    rotation layers, pairing ``(q, q+1)`` for even ``q`` first, odd ``q`` next.
    Each rotation layer applies Rz, Rx, Rz to every qubit, so there are
    ``3 * n`` parameters per layer, stored as an array of shape ``(layers, n, 3)``.
    """

    n: int
    layers: int

    @property
    def n_params(self) -> int:
        return 3 * self.n * self.layers

    def _cz_pairs(self, e: int) -> list[tuple[int, int]]:
        return [(q, q + 1) for q in range(e % 2, self.n - 1, 2)]

    def circuit(self, params: np.ndarray) -> Circuit:
        a = np.asarray(params, dtype=float).reshape(self.layers, self.n, 3)
        gates = []
        for r in range(self.layers):
            for q in range(self.n):
                gates += [
                    Gate("Rz", (q,), (a[r, q, 0],)),
                    Gate("Rx", (q,), (a[r, q, 1],)),
                    Gate("Rz", (q,), (a[r, q, 2],)),
                ]
            if r < self.layers - 1:
                gates += [Gate("CZ", p) for p in self._cz_pairs(r)]
        return Circuit(self.n, tuple(gates))

    def _cz_diag(self, e: int) -> np.ndarray:
        idx = np.arange(2**self.n)
        sign = np.ones(2**self.n)
        for q, r in self._cz_pairs(e):
            sign[((idx >> q) & (idx >> r) & 1) == 1] *= -1
        return sign

    def evolve(self, params: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Fast path equal to applying ``circuit(params)`` to each row of ``states``."""
        a = np.asarray(params, dtype=float).reshape(self.layers, self.n, 3)
        psi = np.array(states, dtype=complex, copy=True)
        rows = psi.shape[0]
        mats = _zxz(a)
        diags = [self._cz_diag(0), self._cz_diag(1)] if self.layers > 1 else []
        for r in range(self.layers):
            for q in range(self.n):
                v = psi.reshape(rows, 2 ** (self.n - q - 1), 2, 2**q)
                psi = np.matmul(mats[r, q], v).reshape(rows, -1)
            if r < self.layers - 1:
                psi *= diags[r % 2]
        return psi


def _zxz(a: np.ndarray) -> np.ndarray:
    """Matrices Rz(a2) Rx(a1) Rz(a0) for an array of angle triples (..., 3)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    c, s = np.cos(a1 / 2), np.sin(a1 / 2)
    m = np.empty(a.shape[:-1] + (2, 2), dtype=complex)
    m[..., 0, 0] = np.exp(-0.5j * (a2 + a0)) * c
    m[..., 0, 1] = -1j * np.exp(-0.5j * (a2 - a0)) * s
    m[..., 1, 0] = -1j * np.exp(0.5j * (a2 - a0)) * s
    m[..., 1, 1] = np.exp(0.5j * (a2 + a0)) * c
    return m


def plant_params(sub_seed: bytes, n: int, depth: int) -> np.ndarray:
    rng = stream(sub_seed, "plant-angles")
    return rng.uniform(-np.pi, np.pi, (depth + 1, n, 3))


def seed_to_plant_circuit(sub_seed: bytes, n: int, depth: int) -> Circuit:
    """Brickwork plant with ``depth`` entangling layers; depth 0 is a product state."""
    if n < 1:
        raise ValidationError("plant needs at least one qubit")
    return Brickwork(n, depth + 1).circuit(plant_params(sub_seed, n, depth))


def plant_state(plant: Circuit) -> np.ndarray:
    return qsim.apply_circuit(qsim.zero_state(plant.n), plant)


def plant_for_index(master: bytes, index: int, n: int, depth: int) -> Circuit:
    return seed_to_plant_circuit(derive_plant_seed(master, index), n, depth)


# ---------------------------------------------------------------------------
# objective and optimizer


def fidelity_objective(plant: Circuit | np.ndarray, b: Sequence[int], params: np.ndarray, ansatz: Brickwork) -> float:
    """|<psi|V(params)|b>|^2 with ``psi`` the plant state (or the plant circuit's output)."""
    psi = plant if isinstance(plant, np.ndarray) else plant_state(plant)
    start = qsim.basis_state(ansatz.n, qsim.bits_to_index(b))[None, :]
    out = ansatz.evolve(params, start)[0]
    return float(abs(np.vdot(psi, out)) ** 2)


@dataclass(frozen=True)
class SPSAConfig:
    steps: int = 2000
    a: float = 0.2
    c: float = 0.1
    A: float | None = None  # defaults to steps / 10
    alpha: float = 0.602
    gamma: float = 0.101
    restarts: int = 1
    init_scale: float = np.pi
    target: float | None = None  # stop once the best value reaches this


@dataclass
class SPSAResult:
    params: np.ndarray
    value: float
    trace: list[float]
    evaluations: int


def spsa_maximize(
    objective: Callable[[np.ndarray], float],
    p: int,
    config: SPSAConfig,
    rng: np.random.Generator,
    x0: np.ndarray | None = None,
) -> SPSAResult:
    """Maximize ``objective`` over ``p`` parameters with simultaneous perturbations.

    Each restart starts from ``x0`` (first restart only, if given) or from
    uniform angles in ``[-init_scale, init_scale)``. ``trace`` holds the best
    value seen after every step across all restarts.
    """
    if p < 1:
        raise ValidationError("need at least one parameter")
    big_a = config.steps / 10 if config.A is None else config.A
    best_x, best_f = None, -np.inf
    trace: list[float] = []
    evals = 0

    def consider(x, f):
        nonlocal best_x, best_f
        if f > best_f:
            best_x, best_f = x.copy(), f

    for restart in range(config.restarts):
        if restart == 0 and x0 is not None:
            theta = np.array(x0, dtype=float).reshape(p)
        else:
            theta = rng.uniform(-config.init_scale, config.init_scale, p)
        consider(theta, objective(theta))
        evals += 1
        for t in range(config.steps):
            a_t = config.a / (t + 1 + big_a) ** config.alpha
            c_t = config.c / (t + 1) ** config.gamma
            delta = rng.choice((-1.0, 1.0), p)
            xp, xm = theta + c_t * delta, theta - c_t * delta
            fp, fm = objective(xp), objective(xm)
            evals += 2
            consider(xp, fp)
            consider(xm, fm)
            theta = theta + a_t * (fp - fm) / (2 * c_t) * delta
            trace.append(best_f)
            if config.target is not None and best_f >= config.target:
                break
        f = objective(theta)
        evals += 1
        consider(theta, f)
        if config.target is not None and best_f >= config.target:
            break
    return SPSAResult(best_x, float(best_f), trace, evals)


# ---------------------------------------------------------------------------
# challenges


@dataclass(frozen=True)
class CompilerConfig:
    delta: float = 0.1
    layers: int = 4
    # the generic SPSA gain of 0.2 barely moves angle parameters; 4.0 converges
    spsa: SPSAConfig = field(default_factory=lambda: SPSAConfig(steps=3000, a=4.0))
    seed: bytes | int | str = 0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValidationError(f"delta must lie in (0, 1), got {self.delta}")
        if self.layers < 1:
            raise ValidationError("ansatz needs at least one layer")

    @property
    def ldqpe_ready(self) -> bool:
        return 1 - self.delta >= LDQPE_MIN_OVERLAP

    def with_target(self) -> SPSAConfig:
        return replace(self.spsa, target=1 - self.delta)


def closed_form_phase(b: Sequence[int], betas: Sequence[float]) -> float:
    """Eigenphase of the Rz layer on basis state ``b``."""
    if len(b) != len(betas):
        raise ValidationError("label and angle lengths differ")
    theta = 0.5 * sum((2 * int(bq) - 1) * float(beta) for bq, beta in zip(b, betas))
    theta = math.fmod(theta, 2 * math.pi)
    if theta < 0:
        theta += 2 * math.pi
    return 0.0 if theta >= 2 * math.pi else theta


def rz_layer(n: int, angles: Sequence[float]) -> Circuit:
    return Circuit(n, tuple(Gate("Rz", (q,), (float(a),)) for q, a in enumerate(angles)))


def reduce_4pi(angles: np.ndarray) -> np.ndarray:
    return np.mod(np.asarray(angles, dtype=float), FOUR_PI)


@dataclass
class SymmetricChallenge:
    public: Circuit
    v_params: np.ndarray
    betas: np.ndarray
    labels: list[tuple[int, ...]]  # one per party; a single entry for ordinary challenges
    overlaps: list[float]
    layers: int
    delta_target: float
    seconds: float = 0.0

    @property
    def n(self) -> int:
        return self.public.n

    @property
    def b(self) -> tuple[int, ...]:
        return self.labels[0]

    @property
    def delta_hat(self) -> float:
        return 1 - min(self.overlaps)

    @property
    def status(self) -> str:
        return "ok" if self.delta_hat <= self.delta_target else "below-target"

    @property
    def ansatz(self) -> Brickwork:
        return Brickwork(self.n, self.layers)

    def v_circuit(self) -> Circuit:
        return self.ansatz.circuit(self.v_params)

    def phase(self, party: int = 0) -> float:
        return closed_form_phase(self.labels[party], self.betas)

    def witness(self) -> dict:
        w = {
            "V_params": np.asarray(self.v_params).ravel().tolist(),
            "layers": self.layers,
            "betas": np.asarray(self.betas).tolist(),
            "b": list(self.labels[0]),
            "delta_hat": self.delta_hat,
        }
        if len(self.labels) > 1:
            w["labels"] = [list(b) for b in self.labels]
            w["overlaps"] = list(self.overlaps)
        return w

    @classmethod
    def from_parts(cls, public: Circuit, witness: dict) -> "SymmetricChallenge":
        labels = [tuple(b) for b in witness.get("labels", [witness["b"]])]
        overlaps = witness.get("overlaps", [1 - witness["delta_hat"]])
        return cls(
            public=public,
            v_params=np.array(witness["V_params"], dtype=float),
            betas=np.array(witness["betas"], dtype=float),
            labels=labels,
            overlaps=list(overlaps),
            layers=int(witness["layers"]),
            delta_target=float(witness.get("delta_target", 1.0)),
        )


def symmetric_circuit(v: Circuit, betas: Sequence[float]) -> Circuit:
    """Gate list for the matrix ``V D V^dagger`` (gates run left to right, so V^dagger comes first)."""
    return v.inverse() + rz_layer(v.n, betas) + v


def edge_margin(theta: float, m: int) -> float:
    """Distance from ``theta`` to the nearest bucket edge, in bucket widths (0 to 0.5).

    Buckets are centred on multiples of 2 pi / 2^m, matching ``quantize_phase``.
    """
    x = (theta * 2**m / (2 * np.pi) + 0.5) % 1.0
    return float(0.5 - abs(x - 0.5))


def guard_phase(ch: SymmetricChallenge, m: int, margin: float, rng: np.random.Generator, tries: int = 1000) -> SymmetricChallenge:
    """Redraw the diagonal angles until the signal phase sits ``margin`` widths inside its bucket.

    V is kept, so the overlap is unchanged; only the public Rz layer moves.
    """
    if not 0 <= margin < 0.5:
        raise ValidationError("margin must lie in [0, 0.5)")
    betas = np.asarray(ch.betas)
    for _ in range(tries):
        if all(edge_margin(closed_form_phase(b, betas), m) >= margin for b in ch.labels):
            return replace(ch, betas=betas, public=symmetric_circuit(ch.v_circuit(), betas))
        betas = rng.uniform(-np.pi, np.pi, ch.n)
    raise ValidationError(f"no angles met the edge margin after {tries} draws")


def fast_power(ch: SymmetricChallenge, j: int) -> Circuit:
    """Circuit for ``U**(2**j)``: only the diagonal angles change."""
    if j < 0:
        raise ValidationError("exponent index must be non-negative")
    angles = reduce_4pi(np.asarray(ch.betas) * float(2**j))
    return symmetric_circuit(ch.v_circuit(), angles)


def split_symmetric(public: Circuit) -> tuple[Circuit, np.ndarray] | None:
    """Recover ``(V, angles)`` from a published ``V^dagger, Rz layer, V`` gate list, or None.

    Uses only the public circuit: the middle block must be one Rz per qubit
    in qubit order and the leading block must invert the trailing one.
    """
    n, gates = public.n, public.gates
    half, rem = divmod(len(gates) - n, 2)
    if rem or half < 0:
        return None
    middle = gates[half : half + n]
    if any(g.kind != "Rz" or g.targets != (q,) for q, g in enumerate(middle)):
        return None
    v = Circuit(n, gates[half + n :])
    if Circuit(n, gates[:half]) != v.inverse():
        return None
    return v, np.array([g.params[0] for g in middle])


@functools.lru_cache(maxsize=512)
def public_power(public: Circuit, j: int) -> Circuit:
    """``U**(2**j)`` from the public circuit alone; falls back to repetition."""
    parts = split_symmetric(public)
    if parts is None:
        return public.repeat(2**j)
    v, angles = parts
    return symmetric_circuit(v, reduce_4pi(angles * float(2**j)))


def _sample_label(rng: np.random.Generator, n: int) -> tuple[int, ...]:
    return tuple(int(x) for x in rng.integers(0, 2, n))


def _align(
    psi: np.ndarray, labels: list[tuple[int, ...]], ansatz: Brickwork, config: CompilerConfig, rng
) -> tuple[np.ndarray, list[float], SPSAResult]:
    """Train one V so every ``V|b_P>`` overlaps ``psi_P``; ``psi`` has one row per label."""
    starts = np.stack([qsim.basis_state(ansatz.n, qsim.bits_to_index(b)) for b in labels])
    targets = np.atleast_2d(psi)

    def overlaps(x):
        out = ansatz.evolve(x, starts)
        return np.abs(np.einsum("ij,ij->i", targets.conj(), out)) ** 2

    # the summed loss sum(1 - F_P) is maximized as its negative
    k = len(labels)
    spsa = config.with_target()
    spsa = replace(spsa, target=None if spsa.target is None else -k * (1 - spsa.target))
    res = spsa_maximize(lambda x: -float(np.sum(1 - overlaps(x))), ansatz.n_params, spsa, rng)
    return res.params, [float(f) for f in overlaps(res.params)], res


def compile_symmetric(plant: Circuit, n: int, config: CompilerConfig) -> SymmetricChallenge:
    if plant.n != n:
        raise ValidationError(f"plant has {plant.n} qubits, expected {n}")
    rng = stream(config.seed, "compile-symmetric")
    b = _sample_label(rng, n)
    betas = rng.uniform(-np.pi, np.pi, n)
    ansatz = Brickwork(n, config.layers)
    t0 = time.perf_counter()
    params, fids, _ = _align(plant_state(plant), [b], ansatz, config, child(rng, "spsa"))
    public = symmetric_circuit(ansatz.circuit(params), betas)
    return SymmetricChallenge(
        public, params, betas, [b], fids, config.layers, config.delta, time.perf_counter() - t0
    )


def compile_multiparty(
    plants: Sequence[Circuit], n: int, config: CompilerConfig, labels: Sequence[Sequence[int]] | None = None
) -> SymmetricChallenge:
    """One V aligned to several plants, each to its own hidden label.

    Labels are drawn at random (distinct) unless given.
    """
    rng = stream(config.seed, "compile-multiparty")
    if labels is None:
        picks = rng.choice(2**n, size=len(plants), replace=False)
        labels = [qsim.index_to_bits(int(x), n) for x in picks]
    labels = [tuple(int(v) for v in b) for b in labels]
    if len(set(labels)) != len(labels):
        raise ValidationError("party labels must be pairwise distinct")
    if len(labels) != len(plants):
        raise ValidationError("one label per plant")
    betas = rng.uniform(-np.pi, np.pi, n)
    ansatz = Brickwork(n, config.layers)
    t0 = time.perf_counter()
    psi = np.stack([plant_state(p) for p in plants])
    params, fids, _ = _align(psi, labels, ansatz, config, child(rng, "spsa"))
    public = symmetric_circuit(ansatz.circuit(params), betas)
    return SymmetricChallenge(
        public, params, betas, labels, fids, config.layers, config.delta, time.perf_counter() - t0
    )


@dataclass
class AsymmetricChallenge:
    public: Circuit
    left_params: np.ndarray
    right_params: np.ndarray
    b_left: tuple[int, ...]
    b_right: tuple[int, ...]
    overlaps: tuple[float, float]
    layers: int
    delta_target: float
    seconds: float = 0.0

    @property
    def n(self) -> int:
        return self.public.n

    @property
    def delta_hat(self) -> float:
        return 1 - min(self.overlaps)

    @property
    def status(self) -> str:
        return "ok" if self.delta_hat <= self.delta_target else "below-target"

    def witness(self) -> dict:
        return {
            "V_L_params": np.asarray(self.left_params).ravel().tolist(),
            "V_R_params": np.asarray(self.right_params).ravel().tolist(),
            "layers": self.layers,
            "b_L": list(self.b_left),
            "b_R": list(self.b_right),
            "delta_hat_L": 1 - self.overlaps[0],
            "delta_hat_R": 1 - self.overlaps[1],
        }


def compile_asymmetric(plant: Circuit, n: int, config: CompilerConfig) -> AsymmetricChallenge:
    if plant.n != n:
        raise ValidationError(f"plant has {plant.n} qubits, expected {n}")
    rng = stream(config.seed, "compile-asymmetric")
    b_left, b_right = _sample_label(rng, n), _sample_label(rng, n)
    ansatz = Brickwork(n, config.layers)
    psi = plant_state(plant)
    t0 = time.perf_counter()
    left, (f_left,), _ = _align(psi, [b_left], ansatz, config, child(rng, "spsa-left"))
    right, (f_right,), _ = _align(psi, [b_right], ansatz, config, child(rng, "spsa-right"))
    # matrix V_L V_R^dagger: V_R^dagger acts first
    public = ansatz.circuit(right).inverse() + ansatz.circuit(left)
    return AsymmetricChallenge(
        public, left, right, b_left, b_right, (f_left, f_right), config.layers, config.delta,
        time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# block-wise compilation


def product_plant(master: bytes, index: int, blocksize: int, blocks: int, depth: int) -> Circuit:
    """Tensor product of independent block plants, all derived from one plant seed."""
    seed = derive_plant_seed(master, index)
    gates = []
    for blk in range(blocks):
        sub = hkdf(seed, b"", b"QSA-block" + blk.to_bytes(4, "big"), 32)
        part = seed_to_plant_circuit(sub, blocksize, depth)
        gates += qsim.embed(part, blk * blocksize, blocksize * blocks).gates
    return Circuit(blocksize * blocks, tuple(gates))


def split_blocks(plant: Circuit, blocksize: int) -> list[Circuit]:
    """Per-block circuits of a product-structured plant; rejects gates that straddle blocks."""
    if plant.n % blocksize:
        raise ValidationError(f"{plant.n} qubits do not split into blocks of {blocksize}")
    parts: list[list[Gate]] = [[] for _ in range(plant.n // blocksize)]
    for g in plant.gates:
        owners = {t // blocksize for t in g.targets}
        if len(owners) != 1:
            raise ValidationError(f"{g.kind} on {g.targets} crosses a block boundary")
        blk = owners.pop()
        parts[blk].append(Gate(g.kind, tuple(t - blk * blocksize for t in g.targets), g.params))
    return [Circuit(blocksize, tuple(p)) for p in parts]


def bridge_circuit(n: int, blocksize: int, params: np.ndarray) -> Circuit:
    """Shallow cross-block layer: Rz and Rx on both sides of each boundary, then Rxx across it."""
    params = np.asarray(params, dtype=float).reshape(-1, 5)
    gates = []
    for edge, (za, xa, zb, xb, xx) in enumerate(params):
        a = (edge + 1) * blocksize - 1
        gates += [
            Gate("Rz", (a,), (float(za),)),
            Gate("Rx", (a,), (float(xa),)),
            Gate("Rz", (a + 1,), (float(zb),)),
            Gate("Rx", (a + 1,), (float(xb),)),
            Gate("Rxx", (a, a + 1), (float(xx),)),
        ]
    return Circuit(n, tuple(gates))


DEFAULT_MOMENT_TIMES = (1, 2, 4, 8)


def moment_loss(
    weights_by_label: np.ndarray, phases: np.ndarray, times: Sequence[int], weights: Sequence[float]
) -> float:
    """``sum_t w_t (1 - |Z_t|^2)`` where ``Z_t = sum_x p_x exp(i t phi_x)``."""
    loss = 0.0
    for t, w in zip(times, weights):
        z = np.dot(weights_by_label, np.exp(1j * t * phases))
        loss += w * (1 - abs(z) ** 2)
    return float(loss)


@dataclass
class BlockwiseChallenge:
    public: Circuit
    block_challenges: list[SymmetricChallenge]
    bridge_params: np.ndarray
    blocksize: int
    betas: np.ndarray
    b: tuple[int, ...]
    overlap: float
    moment_loss: float
    delta_target: float
    seconds: float = 0.0

    @property
    def n(self) -> int:
        return self.public.n

    @property
    def delta_hat(self) -> float:
        return 1 - self.overlap

    @property
    def status(self) -> str:
        return "ok" if self.delta_hat <= self.delta_target else "below-target"

    @property
    def block_overlaps(self) -> list[float]:
        return [c.overlaps[0] for c in self.block_challenges]

    def v_circuit(self) -> Circuit:
        return blockwise_v(self.block_challenges, self.blocksize, self.bridge_params)

    def phase(self) -> float:
        return closed_form_phase(self.b, self.betas)

    def witness(self) -> dict:
        return {
            "blocks": [c.witness() for c in self.block_challenges],
            "bridge_params": np.asarray(self.bridge_params).tolist(),
            "blocksize": self.blocksize,
            "betas": np.asarray(self.betas).tolist(),
            "b": list(self.b),
            "delta_hat": self.delta_hat,
            "moment_loss": self.moment_loss,
        }


def blockwise_v(blocks: Sequence[SymmetricChallenge], blocksize: int, bridge: np.ndarray) -> Circuit:
    n = blocksize * len(blocks)
    gates = []
    for i, ch in enumerate(blocks):
        gates += qsim.embed(ch.v_circuit(), i * blocksize, n).gates
    return Circuit(n, tuple(gates)) + bridge_circuit(n, blocksize, bridge)


def _label_phases(n: int, betas: np.ndarray) -> np.ndarray:
    """Closed-form eigenphase for every basis label, indexed like state amplitudes."""
    bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
    signs = 2 * bits - 1
    return np.mod(signs @ np.asarray(betas) / 2, 2 * np.pi)


def compile_blockwise(
    plant: Circuit,
    n: int,
    blocksize: int,
    config: CompilerConfig,
    times: Sequence[int] = DEFAULT_MOMENT_TIMES,
    weights: Sequence[float] | None = None,
    bridge_steps: int = 300,
) -> BlockwiseChallenge:
    """Align each block on its own, then train a boundary entangler on the moment loss.

    The bridge starts at the identity, so before stage two the global overlap
    is the product of the block overlaps. Default weights are ``1/t``.
    """
    if plant.n != n:
        raise ValidationError(f"plant has {plant.n} qubits, expected {n}")
    weights = [1 / t for t in times] if weights is None else list(weights)
    if any(b > a for a, b in zip(weights, weights[1:])):
        raise ValidationError("moment weights must be nonincreasing")
    t0 = time.perf_counter()
    parts = split_blocks(plant, blocksize)
    blocks = [
        compile_symmetric(part, blocksize, replace(config, seed=f"{config.seed}/block-{i}"))
        for i, part in enumerate(parts)
    ]
    b = tuple(bit for ch in blocks for bit in ch.b)
    betas = np.concatenate([ch.betas for ch in blocks])
    psi = plant_state(plant)
    phases = _label_phases(n, betas)
    label = qsim.bits_to_index(b)

    def weights_for(bridge):
        coeffs = qsim.apply_circuit(psi, blockwise_v(blocks, blocksize, bridge).inverse())
        return np.abs(coeffs) ** 2

    def objective(bridge):
        return -moment_loss(weights_for(bridge), phases, times, weights)

    edges = n // blocksize - 1
    bridge = np.zeros(5 * edges)
    if edges and bridge_steps:
        spsa = SPSAConfig(steps=bridge_steps, a=config.spsa.a, c=config.spsa.c, init_scale=0.0)
        res = spsa_maximize(objective, bridge.size, spsa, stream(config.seed, "compile-bridge"), x0=bridge)
        if res.value > objective(bridge):
            bridge = res.params
    w = weights_for(bridge)
    public = symmetric_circuit(blockwise_v(blocks, blocksize, bridge), betas)
    return BlockwiseChallenge(
        public, blocks, bridge, blocksize, betas, b, float(w[label]),
        moment_loss(w, phases, times, weights), config.delta, time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# serialization


def circuit_digest(c: Circuit) -> bytes:
    return hashlib.sha256(c.to_json().encode()).digest()


def bundle(public: Circuit, m: int, index: int) -> dict:
    return {
        "public": public.to_dict(),
        "meta": {"n": public.n, "m": m, "index": index, "digest": circuit_digest(public).hex()},
    }


def bundle_json(public: Circuit, m: int, index: int) -> str:
    return json.dumps(bundle(public, m, index), sort_keys=True, separators=(",", ":"))


def read_bundle(text: str | bytes) -> tuple[Circuit, dict]:
    d = json.loads(text)
    public = Circuit.from_dict(d["public"])
    meta = d["meta"]
    if circuit_digest(public).hex() != meta["digest"]:
        raise ValidationError("bundle digest does not match its public circuit")
    return public, meta
