"""Synthetic systems with known dynamics, used as oracles for the fitting code."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .gridstore import GridSeries, StateMatrix, month_range

KINDS = ("linear_diag", "rotation", "nonlinear_cubic")


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "rotation"
    k: int = 2
    eigenvalues: tuple = (0.9, 0.5)  # linear_diag
    theta: float = math.pi / 6  # rotation, nonlinear_cubic
    radius: float = 1.0  # rotation
    r0: float = 0.98  # nonlinear_cubic
    gamma: float = -0.05  # nonlinear_cubic
    D: int = 16
    noise_std: float = 0.0
    T: int = 100
    seed: int = 0
    amplitude: float = 1.0  # norm of the latent initial state
    initial_state: tuple | None = None  # overrides the seeded draw
    init_seed: int | None = None  # seed for the initial state only; defaults to seed

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "linear_diag" and len(self.eigenvalues) != self.k:
            raise ValueError("linear_diag needs exactly k eigenvalues")
        if self.kind in ("rotation", "nonlinear_cubic") and self.k != 2:
            raise ValueError(f"{self.kind} requires k = 2")
        if self.D < self.k:
            raise ValueError("embedding dimension D must be >= k")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.initial_state is not None and len(self.initial_state) != self.k:
            raise ValueError("initial_state must have length k")


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def embedding(spec):
    """Seeded D x k matrix with orthonormal columns."""
    rng = np.random.default_rng([spec.seed, 1])
    q, r = np.linalg.qr(rng.standard_normal((spec.D, spec.k)))
    return q * np.sign(np.diag(r))


def latent_map(spec):
    """Exact discrete k x k one-step matrix for the linear kinds."""
    if spec.kind == "linear_diag":
        return np.diag(np.asarray(spec.eigenvalues, dtype=np.float64))
    if spec.kind == "rotation":
        return spec.radius * rotation(spec.theta)
    raise ValueError(f"{spec.kind} has no linear one-step matrix")


def true_eigenvalues(spec):
    if spec.kind == "linear_diag":
        return np.asarray(spec.eigenvalues, dtype=np.complex128)
    if spec.kind == "rotation":
        return spec.radius * np.exp(np.array([1j, -1j]) * spec.theta)
    return spec.r0 * np.exp(np.array([1j, -1j]) * spec.theta)


def _initial(spec):
    if spec.initial_state is not None:
        return np.asarray(spec.initial_state, dtype=np.float64)
    seed = spec.seed if spec.init_seed is None else spec.init_seed
    rng = np.random.default_rng([seed, 2])
    b = rng.standard_normal(spec.k)
    return spec.amplitude * b / np.linalg.norm(b)


def _embed(spec, latent):
    q = embedding(spec)
    x = q @ latent
    if spec.noise_std > 0:
        rng = np.random.default_rng([spec.seed, 3])
        x = x + spec.noise_std * rng.standard_normal(x.shape)
    return x


def gen_linear(spec):
    """Return ``(StateMatrix, true discrete eigenvalues)``."""
    spec.validate()
    a = latent_map(spec)
    lat = np.empty((spec.k, spec.T))
    lat[:, 0] = _initial(spec)
    for t in range(1, spec.T):
        lat[:, t] = a @ lat[:, t - 1]
    return StateMatrix.from_array(_embed(spec, lat)), true_eigenvalues(spec)


def cubic_step(spec):
    """Exact latent one-step map ``b -> R(theta) (r0 + gamma |b|^2) b``."""
    rot = rotation(spec.theta)

    def step(b):
        b = np.asarray(b, dtype=np.float64)
        s2 = np.sum(b * b, axis=0)
        return rot @ (b * (spec.r0 + spec.gamma * s2))

    return step


def gen_nonlinear_cubic(spec):
    """Return ``(StateMatrix, oracle)`` where ``oracle`` advances an embedded state one step.

    The oracle works on D-vectors (or D x B blocks) in the embedded space.
    """
    spec.validate()
    if spec.kind != "nonlinear_cubic":
        raise ValueError("gen_nonlinear_cubic needs kind='nonlinear_cubic'")
    step = cubic_step(spec)
    lat = np.empty((spec.k, spec.T))
    lat[:, 0] = _initial(spec)
    for t in range(1, spec.T):
        lat[:, t] = step(lat[:, t - 1])
    q = embedding(spec)

    def oracle(x):
        return q @ step(q.T @ x)

    return StateMatrix.from_array(_embed(spec, lat)), oracle


def generate(spec):
    if spec.kind == "nonlinear_cubic":
        return gen_nonlinear_cubic(spec)[0]
    return gen_linear(spec)[0]


def to_grid_series(states, nlat, nlon, start=(1980, 1), variable="synthetic", units="1", seasonal=0.0):
    """Lay a D x T block onto a fully valid ``nlat x nlon`` grid (D = nlat * nlon).

    ``seasonal`` adds a fixed-phase annual cycle so the preprocessing step has
    something to remove.
    """
    data = states.data if isinstance(states, StateMatrix) else np.asarray(states, dtype=np.float64)
    d, t = data.shape
    if d != nlat * nlon:
        raise ValueError(f"D={d} does not fill a {nlat}x{nlon} grid")
    times = month_range(start, t)
    values = data.T.reshape(t, nlat, nlon).copy()
    if seasonal:
        months = np.array([m for _, m in times])
        values += seasonal * np.cos(2 * np.pi * (months - 1) / 12)[:, None, None]
    return GridSeries(values=values, mask=np.ones((nlat, nlon), dtype=bool), times=times,
                      variable=variable, units=units)


# -- matrix exponential oracle -------------------------------------------------------

def expm_pade(a, t=1.0):
    return scipy.linalg.expm(np.asarray(a, dtype=np.float64) * t)


def expm_eig(a, t=1.0):
    """``e^{At}`` from an eigendecomposition; assumes ``A`` is diagonalizable."""
    a = np.asarray(a, dtype=np.float64)
    lam, v = np.linalg.eig(a)
    out = (v * np.exp(lam * t)) @ np.linalg.inv(v)
    return out.real


def matrix_exponential_oracle(a, t=1.0, check_tol=1e-10):
    """``e^{At}`` computed two ways; raises if the routes disagree beyond ``check_tol``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] > 10:
        raise ValueError("oracle supports square matrices up to 10 x 10")
    pade = expm_pade(a, t)
    try:
        eig = expm_eig(a, t)
    except np.linalg.LinAlgError:
        return pade
    if np.linalg.cond(np.linalg.eig(a)[1]) > 1e6:
        return pade  # defective or nearly so; the eigen route is unreliable
    scale = max(1.0, np.abs(pade).max())
    if np.abs(pade - eig).max() > check_tol * scale:
        raise ArithmeticError("matrix exponential routes disagree")
    return pade


def continuous_generator(spec):
    """Continuous-time ``A`` with ``e^{A * 1 month}`` equal to the discrete latent map."""
    return scipy.linalg.logm(latent_map(spec)).real
