"""Batched statevector simulation of the encoder's quantum layer.

Basis ordering is little-endian: qubit ``i`` is bit ``i`` of the basis index,
so amplitude ``j`` belongs to ``|b_{N-1} ... b_1 b_0>`` with ``j = sum b_i 2^i``.

Every kernel works on a ``(batch, 2**N)`` complex array. The public helpers
accept either a single vector or a batch and return the matching shape.

Circuit layout per ansatz layer::

    for each qubit i:  Rot(phi, theta, omega) = RZ(phi) @ RY(theta) @ RZ(omega)
    entangler:         CZ on every pair from ``QuantumLayerSpec.entangling_pairs``

Gradients use adjoint-mode differentiation: the readout is a diagonal
observable, so one backward sweep over the gate list yields every parameter
and input derivative.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

EMBEDDINGS = ("amplitude", "angle")
MEASUREMENTS = ("expval", "probs")
ENTANGLEMENTS = ("all_pairs", "ring")

_PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
_PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


@dataclass(frozen=True)
class QuantumLayerSpec:
    n_qubits: int = 4
    n_layers: int = 2
    embedding: str = "amplitude"
    measurement: str = "expval"
    entanglement: str = "all_pairs"

    def __post_init__(self) -> None:
        if self.n_qubits < 1:
            raise ValueError(f"n_qubits must be >= 1, got {self.n_qubits}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"embedding must be one of {EMBEDDINGS}, got {self.embedding!r}")
        if self.measurement not in MEASUREMENTS:
            raise ValueError(f"measurement must be one of {MEASUREMENTS}, got {self.measurement!r}")
        if self.entanglement not in ENTANGLEMENTS:
            raise ValueError(
                f"entanglement must be one of {ENTANGLEMENTS}, got {self.entanglement!r}"
            )

    @property
    def param_shape(self) -> tuple[int, int, int]:
        return (self.n_layers, self.n_qubits, 3)

    @property
    def n_params(self) -> int:
        return self.n_layers * self.n_qubits * 3

    @property
    def input_dim(self) -> int:
        return 2**self.n_qubits if self.embedding == "amplitude" else self.n_qubits

    @property
    def output_dim(self) -> int:
        return self.n_qubits if self.measurement == "expval" else 2**self.n_qubits

    @property
    def entangling_pairs(self) -> tuple[tuple[int, int], ...]:
        n = self.n_qubits
        if self.entanglement == "all_pairs":
            return tuple((i, j) for i in range(n) for j in range(i + 1, n))
        if n == 1:
            return ()
        if n == 2:
            return ((0, 1),)
        return tuple((i, (i + 1) % n) for i in range(n))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> QuantumLayerSpec:
        return cls(**d)


@dataclass(frozen=True)
class NoiseConfig:
    """Coherent over-rotation noise: RX(eps), eps ~ N(0, sigma^2), after every ansatz gate."""

    sigma: float
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self) -> None:
        if self.amplitudes.shape[-1] != 2**self.n_qubits:
            raise ValueError(
                f"expected {2**self.n_qubits} amplitudes for {self.n_qubits} qubits, "
                f"got {self.amplitudes.shape[-1]}"
            )

    @property
    def batched(self) -> bool:
        return self.amplitudes.ndim == 2

    def norm(self) -> np.ndarray | float:
        return np.linalg.norm(self.amplitudes, axis=-1)


# ---------------------------------------------------------------------------
# gate primitives


def rx_matrix(t: float) -> np.ndarray:
    c, s = math.cos(t / 2), math.sin(t / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def ry_matrix(t: float) -> np.ndarray:
    c, s = math.cos(t / 2), math.sin(t / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rz_matrix(t: float) -> np.ndarray:
    return np.array([[np.exp(-0.5j * t), 0], [0, np.exp(0.5j * t)]], dtype=complex)


def rot_matrix(phi: float, theta: float, omega: float) -> np.ndarray:
    return rz_matrix(phi) @ ry_matrix(theta) @ rz_matrix(omega)


def _split(psi: np.ndarray, qubit: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    v = psi.reshape(psi.shape[0], 2 ** (n - 1 - qubit), 2, 2**qubit)
    return v[:, :, 0, :], v[:, :, 1, :]


def _apply_1q(psi: np.ndarray, m: np.ndarray, qubit: int, n: int) -> np.ndarray:
    """Apply a 2x2 gate (shared ``(2, 2)`` or per-sample ``(B, 2, 2)``) to one qubit."""
    v0, v1 = _split(psi, qubit, n)
    if m.ndim == 3:
        m = m[:, :, :, None, None]
        a, b, c, d = m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1]
    else:
        a, b, c, d = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
    return np.stack((a * v0 + b * v1, c * v0 + d * v1), axis=2).reshape(psi.shape)


def _rx_batch(t: np.ndarray) -> np.ndarray:
    c, s = np.cos(t / 2), np.sin(t / 2)
    m = np.empty(t.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = c
    m[..., 0, 1] = -1j * s
    m[..., 1, 0] = -1j * s
    m[..., 1, 1] = c
    return m


def _ry_batch(t: np.ndarray) -> np.ndarray:
    c, s = np.cos(t / 2), np.sin(t / 2)
    m = np.empty(t.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = c
    m[..., 0, 1] = -s
    m[..., 1, 0] = s
    m[..., 1, 1] = c
    return m


def _apply_rz(psi: np.ndarray, t: float, qubit: int, n: int) -> np.ndarray:
    out = psi.reshape(psi.shape[0], 2 ** (n - 1 - qubit), 2, 2**qubit).copy()
    out[:, :, 0, :] *= np.exp(-0.5j * t)
    out[:, :, 1, :] *= np.exp(0.5j * t)
    return out.reshape(psi.shape)


def _apply_pauli(psi: np.ndarray, axis: str, qubit: int, n: int) -> np.ndarray:
    p = {"x": _PAULI_X, "y": _PAULI_Y, "z": _PAULI_Z}[axis]
    return _apply_1q(psi, p, qubit, n)


@lru_cache(maxsize=None)
def _bits(n: int) -> np.ndarray:
    """``(2**n, n)`` table of basis-index bits, little-endian."""
    idx = np.arange(2**n)
    return ((idx[:, None] >> np.arange(n)[None, :]) & 1).astype(np.int8)


@lru_cache(maxsize=None)
def _z_signs(n: int) -> np.ndarray:
    return 1.0 - 2.0 * _bits(n)


@lru_cache(maxsize=None)
def _cz_phase(n: int, pairs: tuple[tuple[int, int], ...]) -> np.ndarray:
    b = _bits(n)
    phase = np.ones(2**n)
    for i, j in pairs:
        phase[(b[:, i] & b[:, j]) == 1] *= -1
    return phase


# ---------------------------------------------------------------------------
# embeddings and measurements


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a vector or a (batch, dim) matrix, got shape {x.shape}")
    return x, False


def _n_from_length(length: int) -> int:
    n = int(round(math.log2(length))) if length > 0 else -1
    if n < 1 or 2**n != length:
        raise ValueError(f"amplitude embedding needs a power-of-two length >= 2, got {length}")
    return n


def _amplitude_batch(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[1] != 2**n:
        raise ValueError(f"amplitude embedding expects {2**n} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("amplitude embedding input contains non-finite values")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("amplitude embedding of a zero-norm vector is undefined")
    return (x / norms[:, None]).astype(complex)


def _angle_batch(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[1] != n:
        raise ValueError(f"angle embedding expects {n} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("angle embedding input contains non-finite values")
    psi = np.zeros((x.shape[0], 2**n), dtype=complex)
    psi[:, 0] = 1.0
    for q in range(n):
        psi = _apply_1q(psi, _ry_batch(x[:, q]), q, n)
    return psi


def amplitude_embed(x: np.ndarray) -> StateVector:
    """Encode a length-``2**N`` vector (or a batch of them) as normalized amplitudes."""
    xb, single = _as_batch(x)
    n = _n_from_length(xb.shape[1])
    psi = _amplitude_batch(xb, n)
    return StateVector(n, psi[0] if single else psi)


def angle_embed(x: np.ndarray) -> StateVector:
    """RY(x_i) on qubit ``i`` starting from ``|0...0>``."""
    xb, single = _as_batch(x)
    n = xb.shape[1]
    if n < 1:
        raise ValueError("angle embedding needs at least one feature")
    psi = _angle_batch(xb, n)
    return StateVector(n, psi[0] if single else psi)


def embed(x: np.ndarray, spec: QuantumLayerSpec) -> StateVector:
    xb, single = _as_batch(x)
    n = spec.n_qubits
    psi = _amplitude_batch(xb, n) if spec.embedding == "amplitude" else _angle_batch(xb, n)
    return StateVector(n, psi[0] if single else psi)


def measure_probs(state: StateVector) -> np.ndarray:
    return np.abs(state.amplitudes) ** 2


def measure_expval_z(state: StateVector) -> np.ndarray:
    return measure_probs(state) @ _z_signs(state.n_qubits)


def measure(state: StateVector, spec: QuantumLayerSpec) -> np.ndarray:
    if spec.measurement == "expval":
        return measure_expval_z(state)
    return measure_probs(state)


# ---------------------------------------------------------------------------
# variational ansatz


def _check_params(params: np.ndarray, spec: QuantumLayerSpec) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    if params.shape != spec.param_shape:
        raise ValueError(f"params shape {params.shape} does not match {spec.param_shape}")
    return params


def _ansatz_batch(
    psi: np.ndarray, params: np.ndarray, spec: QuantumLayerSpec, noise: NoiseConfig | None
) -> np.ndarray:
    n = spec.n_qubits
    pairs = spec.entangling_pairs
    noisy = noise is not None and noise.sigma > 0
    rng = np.random.default_rng(noise.rng_seed) if noisy else None
    batch = psi.shape[0]

    def kick(state: np.ndarray, q: int) -> np.ndarray:
        eps = rng.normal(0.0, noise.sigma, size=batch)
        return _apply_1q(state, _rx_batch(eps), q, n)

    for layer in params:
        for q in range(n):
            phi, theta, omega = layer[q]
            psi = _apply_1q(psi, rot_matrix(phi, theta, omega), q, n)
            if noisy:
                psi = kick(psi, q)
        if not noisy:
            psi = psi * _cz_phase(n, pairs)
            continue
        for i, j in pairs:
            psi = psi * _cz_phase(n, ((i, j),))
            psi = kick(psi, i)
            psi = kick(psi, j)
    return psi


def apply_ansatz(
    state: StateVector,
    params: np.ndarray,
    spec: QuantumLayerSpec,
    noise: NoiseConfig | None = None,
) -> StateVector:
    if state.n_qubits != spec.n_qubits:
        raise ValueError(f"state has {state.n_qubits} qubits, spec has {spec.n_qubits}")
    params = _check_params(params, spec)
    psi = state.amplitudes
    single = psi.ndim == 1
    out = _ansatz_batch(psi[None, :] if single else psi, params, spec, noise)
    return StateVector(spec.n_qubits, out[0] if single else out)


def qlayer_state(
    x: np.ndarray, params: np.ndarray, spec: QuantumLayerSpec, noise: NoiseConfig | None = None
) -> StateVector:
    """Embed then evolve; the final state before readout."""
    return apply_ansatz(embed(x, spec), params, spec, noise)


def qlayer_forward(
    x: np.ndarray, params: np.ndarray, spec: QuantumLayerSpec, noise: NoiseConfig | None = None
) -> np.ndarray:
    return measure(qlayer_state(x, params, spec, noise), spec)


# ---------------------------------------------------------------------------
# adjoint gradients


def _rot_ops(spec: QuantumLayerSpec) -> list[tuple[str, int, tuple[int, int, int] | None]]:
    """Forward-ordered elementary rotations of the ansatz, entanglers marked by ``None``."""
    ops: list = []
    for layer in range(spec.n_layers):
        for q in range(spec.n_qubits):
            ops.append(("z", q, (layer, q, 2)))
            ops.append(("y", q, (layer, q, 1)))
            ops.append(("z", q, (layer, q, 0)))
        ops.append(("cz", -1, None))
    return ops


def qlayer_gradients(
    x: np.ndarray,
    params: np.ndarray,
    spec: QuantumLayerSpec,
    upstream: np.ndarray,
    noise: NoiseConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * qlayer_forward(x, params))``.

    Returns ``(grad_params, grad_x)``; for a batch, ``grad_params`` is summed over
    samples and ``grad_x`` keeps the batch axis.
    """
    if noise is not None:
        raise ValueError("gradients are defined for the noiseless circuit only")
    params = _check_params(params, spec)
    xb, single = _as_batch(x)
    ub = np.asarray(upstream, dtype=float)
    ub = ub[None, :] if ub.ndim == 1 else ub
    if ub.shape != (xb.shape[0], spec.output_dim):
        raise ValueError(
            f"upstream shape {ub.shape} does not match output {(xb.shape[0], spec.output_dim)}"
        )
    n = spec.n_qubits

    psi0 = _amplitude_batch(xb, n) if spec.embedding == "amplitude" else _angle_batch(xb, n)
    psi = _ansatz_batch(psi0, params, spec, None)

    diag = ub @ _z_signs(n).T if spec.measurement == "expval" else ub
    lam = diag * psi

    grad_params = np.zeros(spec.param_shape)
    phase = _cz_phase(n, spec.entangling_pairs)
    for axis, q, idx in reversed(_rot_ops(spec)):
        if idx is None:
            psi = psi * phase
            lam = lam * phase
            continue
        # d/dt of exp(-i t P / 2) evaluated after the gate: Im <lam| P |psi>
        grad_params[idx] = np.sum(np.imag(np.conj(lam) * _apply_pauli(psi, axis, q, n)))
        t = params[idx]
        psi = _apply_rz(psi, -t, q, n) if axis == "z" else _apply_1q(psi, ry_matrix(-t), q, n)
        lam = _apply_rz(lam, -t, q, n) if axis == "z" else _apply_1q(lam, ry_matrix(-t), q, n)

    if spec.embedding == "angle":
        grad_x = np.empty_like(xb)
        for q in reversed(range(n)):
            grad_x[:, q] = np.sum(np.imag(np.conj(lam) * _apply_pauli(psi, "y", q, n)), axis=1)
            inv = _ry_batch(-xb[:, q])
            psi = _apply_1q(psi, inv, q, n)
            lam = _apply_1q(lam, inv, q, n)
    else:
        norms = np.linalg.norm(xb, axis=1, keepdims=True)
        unit = xb / norms
        g = 2.0 * np.real(lam)
        grad_x = (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / norms

    return grad_params, (grad_x[0] if single else grad_x)


# ---------------------------------------------------------------------------
# noise bookkeeping


def avg_gate_fidelity(sigma: float) -> tuple[float, float]:
    """Average single-qubit gate fidelity and infidelity under RX(eps), eps ~ N(0, sigma^2)."""
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    decay = math.exp(-(sigma**2) / 2)
    return (2 + decay) / 3, (1 - decay) / 3
