"""State-vector simulation over a small fixed gate alphabet.

Qubit ``q`` is bit ``q`` of the amplitude index (little-endian): the state
``|1>`` on qubit 0 of a two-qubit register is ``amps[1]``.

States are plain complex numpy arrays of length ``2**n``. Internally gates
act on 2-D batches of shape ``(rows, 2**n)`` so that many trajectories (or
every column of a unitary) can be pushed through one circuit at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import CapacityError, DimensionError, ValidationError
from .rng import Seed, stream

DENSE_LIMIT = 12

_SQ2 = 1 / np.sqrt(2)

# base kind -> (number of targets, number of params)
_ARITY = {
    "H": (1, 0),
    "X": (1, 0),
    "Y": (1, 0),
    "Z": (1, 0),
    "S": (1, 0),
    "Sdg": (1, 0),
    "Rx": (1, 1),
    "Ry": (1, 1),
    "Rz": (1, 1),
    "Rxx": (2, 1),
}
_SELF_INVERSE = {"H", "X", "Y", "Z"}
_ROTATIONS = {"Rx", "Ry", "Rz", "Rxx"}
_DIAGONAL = {"Z", "S", "Sdg", "Rz"}


def _split_kind(kind: str) -> tuple[str, int]:
    """Return (base kind, number of controls) for a gate kind string."""
    controls = 0
    while kind.startswith("C-"):
        controls += 1
        kind = kind[2:]
    if kind == "CX":
        return "X", controls + 1
    if kind == "CZ":
        return "Z", controls + 1
    if kind not in _ARITY:
        raise ValidationError(f"unknown gate kind {kind!r}")
    return kind, controls


def _join_kind(base: str, controls: int) -> str:
    if controls and base in ("X", "Z"):
        return "C-" * (controls - 1) + "C" + base
    return "C-" * controls + base


@dataclass(frozen=True)
class Gate:
    """One gate. For controlled kinds the control qubits come first in ``targets``."""

    kind: str
    targets: tuple[int, ...]
    params: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        base, controls = _split_kind(self.kind)
        nt, npar = _ARITY[base]
        if len(self.targets) != nt + controls:
            raise ValidationError(f"{self.kind} needs {nt + controls} qubits, got {self.targets}")
        if len(self.params) != npar:
            raise ValidationError(f"{self.kind} needs {npar} params, got {self.params}")
        if len(set(self.targets)) != len(self.targets):
            raise ValidationError(f"repeated qubit in {self.kind} {self.targets}")
        if any(t < 0 for t in self.targets):
            raise ValidationError("negative qubit index")

    @property
    def base(self) -> str:
        return _split_kind(self.kind)[0]

    @property
    def n_controls(self) -> int:
        return _split_kind(self.kind)[1]

    def inverse(self) -> "Gate":
        base, controls = _split_kind(self.kind)
        if base in _ROTATIONS:
            return Gate(self.kind, self.targets, tuple(-p for p in self.params))
        if base == "S":
            return Gate(_join_kind("Sdg", controls), self.targets)
        if base == "Sdg":
            return Gate(_join_kind("S", controls), self.targets)
        return self

    def to_dict(self) -> dict:
        return {"kind": self.kind, "targets": list(self.targets), "params": list(self.params)}


def base_matrix(base: str, params: Sequence[float] = ()) -> np.ndarray:
    """Matrix of an uncontrolled gate; for Rxx the first target is the low bit."""
    if base == "H":
        return np.array([[_SQ2, _SQ2], [_SQ2, -_SQ2]], dtype=complex)
    if base == "X":
        return np.array([[0, 1], [1, 0]], dtype=complex)
    if base == "Y":
        return np.array([[0, -1j], [1j, 0]], dtype=complex)
    if base == "Z":
        return np.diag([1, -1]).astype(complex)
    if base == "S":
        return np.diag([1, 1j])
    if base == "Sdg":
        return np.diag([1, -1j])
    (t,) = params
    c, s = np.cos(t / 2), np.sin(t / 2)
    if base == "Rx":
        return np.array([[c, -1j * s], [-1j * s, c]])
    if base == "Ry":
        return np.array([[c, -s], [s, c]], dtype=complex)
    if base == "Rz":
        return np.diag([np.exp(-0.5j * t), np.exp(0.5j * t)])
    if base == "Rxx":
        m = np.eye(4, dtype=complex) * c
        m[np.arange(4), 3 - np.arange(4)] = -1j * s
        return m
    raise ValidationError(f"unknown base gate {base!r}")


def gate_matrix(g: Gate) -> np.ndarray:
    """Full matrix of ``g`` on its own qubits, ordered little-endian by ``g.targets``."""
    base, controls = _split_kind(g.kind)
    core = base_matrix(base, g.params)
    dim = 2 ** len(g.targets)
    full = np.eye(dim, dtype=complex)
    ctrl_mask = (1 << controls) - 1
    rows = [i for i in range(dim) if i & ctrl_mask == ctrl_mask]
    full[np.ix_(rows, rows)] = core
    return full


@dataclass(frozen=True)
class Circuit:
    n: int
    gates: tuple[Gate, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        if self.n < 0:
            raise ValidationError("negative qubit count")
        for g in self.gates:
            if max(g.targets) >= self.n:
                raise ValidationError(f"{g.kind} on {g.targets} exceeds n={self.n}")

    def __len__(self) -> int:
        return len(self.gates)

    def __add__(self, other: "Circuit") -> "Circuit":
        if other.n != self.n:
            raise DimensionError(f"cannot concatenate {self.n}- and {other.n}-qubit circuits")
        return Circuit(self.n, self.gates + other.gates)

    def inverse(self) -> "Circuit":
        return Circuit(self.n, tuple(g.inverse() for g in reversed(self.gates)))

    def repeat(self, times: int) -> "Circuit":
        return Circuit(self.n, self.gates * times)

    def to_dict(self) -> dict:
        return {"n": self.n, "gates": [g.to_dict() for g in self.gates]}

    def to_json(self) -> str:
        """Canonical JSON: sorted keys, no whitespace, float repr round-trips exactly."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Circuit":
        gates = tuple(Gate(g["kind"], tuple(g["targets"]), tuple(g.get("params", ()))) for g in d["gates"])
        return cls(int(d["n"]), gates)

    @classmethod
    def from_json(cls, s: str | bytes) -> "Circuit":
        return cls.from_dict(json.loads(s))

    @cached_property
    def _program(self) -> list["_Op"]:
        return [_compile_gate(g, self.n) for g in self.gates]


# ---------------------------------------------------------------------------
# kernel


class _Op:
    """A compiled gate acting in place on a ``(rows, 2**n)`` batch.

    The batch is viewed as ``(rows, 2, ..., 2)``; fixing control axes to 1
    and target axes to a bit pattern yields strided views, so no gather or
    scatter is needed.
    """

    __slots__ = ("n", "support", "views", "diag", "mat", "swap")

    def __init__(self, n, support, views, diag=None, mat=None, swap=False):
        self.n = n
        self.support = support
        self.views = views
        self.diag = diag
        self.mat = mat
        self.swap = swap

    def apply(self, psi: np.ndarray) -> None:
        t = psi.reshape((psi.shape[0],) + (2,) * self.n)
        v = [t[s] for s in self.views]
        if self.diag is not None:
            for x, d in zip(v, self.diag):
                if d != 1:
                    x *= d
        elif self.swap:
            tmp = v[0].copy()
            v[0][...] = v[1]
            v[1][...] = tmp
        elif len(v) == 2:
            (a, b), (c, d) = self.mat
            x0 = v[0].copy()
            v[0] *= a
            v[0] += b * v[1]
            v[1] *= d
            v[1] += c * x0
        else:
            old = [x.copy() for x in v]
            for i, x in enumerate(v):
                x[...] = sum(self.mat[i][j] * old[j] for j in range(len(old)) if self.mat[i][j] != 0)


def _views(n: int, targets: tuple[int, ...], controls: tuple[int, ...]) -> list[tuple]:
    """Index tuples selecting each target bit pattern (little-endian over targets) with controls set."""
    base: list = [slice(None)] * (n + 1)
    for c in controls:
        base[1 + n - 1 - c] = 1
    out = []
    for j in range(2 ** len(targets)):
        sel = list(base)
        for i, t in enumerate(targets):
            sel[1 + n - 1 - t] = (j >> i) & 1
        out.append(tuple(sel))
    return out


def _compile_gate(g: Gate, n: int) -> _Op:
    base, nc = _split_kind(g.kind)
    controls, targets = g.targets[:nc], g.targets[nc:]
    views = _views(n, targets, controls)
    # python scalars keep the batch dtype (complex64 batches stay complex64)
    m = base_matrix(base, g.params).tolist()
    if base in _DIAGONAL:
        return _Op(n, g.targets, views, diag=[m[i][i] for i in range(len(m))])
    if base == "X":
        return _Op(n, g.targets, views, swap=True)
    return _Op(n, g.targets, views, mat=m)


def _as_batch(state: np.ndarray, n: int) -> np.ndarray:
    state = np.asarray(state)
    if state.ndim != 1 or state.shape[0] != 2**n:
        raise DimensionError(f"state of length {state.shape} does not match {n} qubits")
    return state.astype(complex, copy=True)[None, :]


def zero_state(n: int) -> np.ndarray:
    return basis_state(n, 0)


def basis_state(n: int, index: int) -> np.ndarray:
    v = np.zeros(2**n, dtype=complex)
    v[index] = 1
    return v


def bits_to_index(bits: Sequence[int]) -> int:
    """Basis index of a label whose entry ``q`` is the value of qubit ``q``."""
    return sum(int(b) << q for q, b in enumerate(bits))


def index_to_bits(index: int, n: int) -> tuple[int, ...]:
    return tuple((index >> q) & 1 for q in range(n))


def apply_circuit(state: np.ndarray, c: Circuit) -> np.ndarray:
    psi = _as_batch(state, c.n)
    for op in c._program:
        op.apply(psi)
    return psi[0]


def apply_circuit_batch(states: np.ndarray, c: Circuit) -> np.ndarray:
    """Apply ``c`` to each row of ``states`` (shape ``(rows, 2**n)``)."""
    psi = np.array(states, dtype=complex, copy=True)
    if psi.ndim != 2 or psi.shape[1] != 2**c.n:
        raise DimensionError(f"batch shape {psi.shape} does not match {c.n} qubits")
    for op in c._program:
        op.apply(psi)
    return psi


def circuit_to_matrix(c: Circuit, limit: int = DENSE_LIMIT) -> np.ndarray:
    if c.n > limit:
        raise CapacityError(f"{c.n} qubits exceeds the dense limit of {limit}")
    # row x of the batch is the image of |x>, i.e. column x of U
    return apply_circuit_batch(np.eye(2**c.n, dtype=complex), c).T


def check_unitary(u: np.ndarray, tol: float) -> None:
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {u.shape}")
    err = np.max(np.abs(u @ u.conj().T - np.eye(u.shape[0])))
    if err > tol:
        raise ValidationError(f"matrix is not unitary (max deviation {err:.2e})")


def eig_unitary(u: np.ndarray, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Eigenphases in [0, 2pi) and orthonormal eigenvectors (columns).

    Uses the complex Schur form; for a normal matrix the triangular factor
    is diagonal and the Schur vectors are eigenvectors, degenerate or not.
    """
    check_unitary(u, tol)
    t, z = scipy.linalg.schur(np.asarray(u, dtype=complex), output="complex")
    phases = np.mod(np.angle(np.diag(t)), 2 * np.pi)
    phases[phases >= 2 * np.pi] = 0.0
    return phases, z


def haar_unitary(n: int, seed: Seed, limit: int = DENSE_LIMIT) -> np.ndarray:
    if n > limit:
        raise CapacityError(f"{n} qubits exceeds the dense limit of {limit}")
    return haar_from_rng(2**n, stream(seed, "haar-unitary"))


def haar_from_rng(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = scipy.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def haar_state(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def controlled_gate(g: Gate, control: int) -> Gate:
    base, nc = _split_kind(g.kind)
    return Gate(_join_kind(base, nc + 1), (control,) + g.targets, g.params)


def controlled(c: Circuit) -> Circuit:
    """Control every gate of ``c`` on a new qubit 0; the original qubits move up by one."""
    return controlled_on(c, control=0, offset=1, n=c.n + 1)


def controlled_on(c: Circuit, control: int, offset: int, n: int) -> Circuit:
    """Embed ``c`` at qubits ``offset..offset+c.n-1`` of an ``n``-qubit register, controlled on ``control``."""
    gates = []
    for g in c.gates:
        moved = Gate(g.kind, tuple(t + offset for t in g.targets), g.params)
        gates.append(controlled_gate(moved, control))
    return Circuit(n, tuple(gates))


def embed(c: Circuit, offset: int, n: int) -> Circuit:
    return Circuit(n, tuple(Gate(g.kind, tuple(t + offset for t in g.targets), g.params) for g in c.gates))


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseModel:
    """Depolarizing gate errors plus symmetric readout flips.

    ``p1`` defaults to a tenth of ``p2``. Gates acting on two or more qubits
    (including controlled gates) use ``p2``.
    """

    p2: float = 0.0
    p1: float | None = None
    readout: float = 0.01

    def __post_init__(self):
        if self.p1 is None:
            object.__setattr__(self, "p1", 0.1 * self.p2)
        for name in ("p1", "p2", "readout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} is not a probability")

    @property
    def silent(self) -> bool:
        return self.p1 == 0 and self.p2 == 0


NOISELESS = NoiseModel(0.0, 0.0, 0.0)


@lru_cache(maxsize=64)
def _popcount_parity(n: int) -> np.ndarray:
    return np.bitwise_count(np.arange(2**n, dtype=np.uint64)) & 1


def _apply_pauli(row: np.ndarray, support: tuple[int, ...], code: int, n: int) -> None:
    """Apply the Pauli string ``code`` (base-4 digits I,X,Y,Z per support qubit) in place."""
    xm = zm = 0
    for q in support:
        d = code & 3
        code >>= 2
        if d in (1, 2):
            xm |= 1 << q
        if d in (2, 3):
            zm |= 1 << q
    idx = np.arange(2**n)
    src = idx ^ xm
    out = row[src]
    if zm:
        out = out * (1 - 2 * _popcount_parity(n)[src & zm].astype(float))
    row[:] = out


def noisy_trajectories(
    state: np.ndarray,
    c: Circuit,
    noise: NoiseModel,
    rng: np.random.Generator,
    count: int,
    dtype=np.complex128,
) -> np.ndarray:
    """Final states of ``count`` independent Pauli-error trajectories, shape ``(count, 2**n)``.

    Trajectories share the noiseless prefix up to their first error, so the
    batch only carries rows that have already diverged.
    """
    clean = _as_batch(state, c.n).astype(dtype)
    ops = c._program
    rates = np.array([noise.p1 if len(op.support) == 1 else noise.p2 for op in ops])
    hits = rng.random((len(ops), count)) < rates[:, None] if ops else np.zeros((0, count), bool)
    codes = {}
    for g, t in zip(*np.nonzero(hits)):
        codes.setdefault(g, []).append(t)
    pauli = {g: rng.integers(1, 4 ** len(ops[g].support), size=len(ts)) for g, ts in codes.items()}

    any_hit = hits.any(axis=0)
    first = np.where(any_hit, hits.argmax(axis=0), len(ops))
    order = np.argsort(first, kind="stable")[: int(any_hit.sum())]
    starts = np.searchsorted(first[order], np.arange(len(ops) + 1))
    row_of = np.full(count, -1)
    row_of[order] = np.arange(len(order))
    buf = np.empty((len(order), 2**c.n), dtype=dtype)

    active = 0
    for g, op in enumerate(ops):
        op.apply(clean)
        if active:
            op.apply(buf[:active])
        new = starts[g + 1] - starts[g]
        if new:
            buf[active : active + new] = clean[0]
            active += new
        for t, code in zip(codes.get(g, ()), pauli.get(g, ())):
            _apply_pauli(buf[row_of[t]], op.support, int(code), c.n)

    out = np.repeat(clean, count, axis=0)
    if len(order):
        out[order] = buf
    return out


def apply_noisy_circuit(
    state: np.ndarray, c: Circuit, noise: NoiseModel, rng: np.random.Generator
) -> np.ndarray:
    """One Monte Carlo trajectory of ``c`` under ``noise``."""
    return noisy_trajectories(state, c, noise, rng, 1)[0]


def probabilities(state: np.ndarray) -> np.ndarray:
    p = np.abs(np.asarray(state)) ** 2
    return p / p.sum()


def sample_bits(state: np.ndarray, shots: int, readout: float, rng: np.random.Generator) -> np.ndarray:
    """Outcome counts indexed by basis label, after independent readout flips per bit."""
    if shots < 1:
        raise ValidationError("shots must be positive")
    p = probabilities(state)
    n = int(np.log2(p.size))
    outcomes = np.repeat(np.arange(p.size), rng.multinomial(shots, p))
    if readout > 0:
        for q in range(n):
            outcomes ^= (rng.random(shots) < readout).astype(np.int64) << q
    return np.bincount(outcomes, minlength=p.size)


def inner(a: np.ndarray, b: np.ndarray) -> complex:
    return complex(np.vdot(a, b))


def fidelity(a: np.ndarray, b: np.ndarray) -> float:
    return float(abs(np.vdot(a, b)) ** 2)


def random_circuit(n: int, depth: int, rng: np.random.Generator, kinds: Iterable[str] | None = None) -> Circuit:
    """Random circuit over the full alphabet, used by tests and benchmarks."""
    kinds = list(kinds or ["H", "X", "Y", "Z", "S", "Sdg", "Rx", "Ry", "Rz", "Rxx", "CX", "CZ"])
    gates = []
    for _ in range(depth):
        kind = kinds[rng.integers(len(kinds))]
        base, nc = _split_kind(kind)
        nt, npar = _ARITY[base]
        if nt + nc > n:
            continue
        qs = tuple(int(q) for q in rng.choice(n, nt + nc, replace=False))
        gates.append(Gate(kind, qs, tuple(rng.uniform(-np.pi, np.pi, npar))))
    return Circuit(n, tuple(gates))
