"""Exact dynamic mode decomposition with a truncated SVD.

Given snapshots ``x_0 .. x_{T-1}`` the fit builds the best-fit linear one-step
operator on the leading ``r`` POD directions and stores its eigenpairs::

    x(t0 + n dt) ~= Phi @ diag(lam)**n @ pinv(Phi) @ x(t0)

Modes are ordered by descending modulus, then positive imaginary part first,
so a conjugate pair always appears as ``(a+bi, a-bi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .container import expect_consumed, mask_to_rle, read_container, rle_to_mask, take, write_container
from .errors import (
    DimensionMismatchError,
    MalformedHeaderError,
    RankDeficientError,
    RankError,
    UnpairedEigenvalueError,
)
from .gridstore import StateMatrix

PINV_RCOND = 1e-12
PAIR_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class DmdModel:
    phi: np.ndarray  # D x r complex modes
    eigenvalues: np.ndarray  # r complex discrete-time eigenvalues
    encoder: np.ndarray  # r x D complex, pinv(phi)
    dt_months: int = 1
    singular_values: np.ndarray | None = None  # full spectrum of X1, for reporting
    mask: np.ndarray | None = None  # grid the model was fit on, if any

    @property
    def rank(self):
        return self.eigenvalues.size

    @property
    def n_state(self):
        return self.phi.shape[0]


@dataclass(frozen=True)
class ModeInfo:
    eigenvalue: complex
    modulus: float
    decay_months: float  # inf when not damped
    period_months: float  # inf when the eigenvalue is real and positive
    energy: float

    @property
    def damped(self):
        return self.modulus < 1.0


def mode_order(lam):
    """Indices sorting eigenvalues by descending modulus, then by descending imaginary part."""
    lam = np.asarray(lam)
    return np.lexsort((-lam.imag, -np.abs(lam)))


def _as_data(X):
    if isinstance(X, StateMatrix):
        return X.data, X.mask
    return np.asarray(X, dtype=np.float64), None


def fit_dmd(X, r, dt_months=1):
    """Fit an exact DMD model of rank ``r`` to a snapshot matrix (D x T)."""
    data, mask = _as_data(X)
    if data.ndim != 2:
        raise DimensionMismatchError("snapshot matrix must be 2-D")
    d, t = data.shape
    if t < 2:
        raise DimensionMismatchError("need at least two snapshots")
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= min(d, t - 1):
        raise RankError(f"rank must satisfy 1 <= r <= min(D, T-1) = {min(d, t - 1)}, got {r}")
    x1, x2 = data[:, :-1], data[:, 1:]
    u, s, vh = np.linalg.svd(x1, full_matrices=False)
    tol = max(x1.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    if s[0] == 0.0 or s[r - 1] <= tol:
        kept = int(np.sum(s > tol))
        raise RankDeficientError(
            f"singular value {r} of the snapshot matrix is numerically zero; "
            f"the data supports at most r={kept}, lower the rank"
        )
    ur, sr, vr = u[:, :r], s[:r], vh[:r].T
    b = (x2 @ vr) / sr
    a_tilde = ur.T @ b
    lam, w = np.linalg.eig(a_tilde)
    lam = lam.astype(np.complex128)
    w = w.astype(np.complex128)
    order = mode_order(lam)
    lam, w = lam[order], w[:, order]
    phi = b @ w
    encoder = np.linalg.pinv(phi, rcond=PINV_RCOND)
    return DmdModel(phi=phi, eigenvalues=lam, encoder=encoder, dt_months=dt_months,
                    singular_values=s, mask=mask)


def singular_value_report(model):
    """Rows of (index, sigma, energy fraction, cumulative energy fraction)."""
    s = model.singular_values
    if s is None:
        return []
    e = s**2
    frac = e / e.sum()
    cum = np.cumsum(frac)
    return [(i + 1, float(s[i]), float(frac[i]), float(cum[i])) for i in range(s.size)]


def _check_state(model, x):
    x = np.asarray(x)
    if x.shape[0] != model.n_state:
        raise DimensionMismatchError(f"state has length {x.shape[0]}, model expects {model.n_state}")
    return x


def project(model, x):
    """Latent amplitudes ``b = pinv(Phi) x``; ``x`` may be a vector or a D x B block."""
    x = _check_state(model, x)
    return model.encoder @ x


def reconstruct(model, b, return_residual=False):
    """Real part of ``Phi b``; optionally also the norm of the discarded imaginary part."""
    b = np.asarray(b)
    if b.shape[0] != model.rank:
        raise DimensionMismatchError(f"amplitudes have length {b.shape[0]}, model rank is {model.rank}")
    z = model.phi @ b
    if return_residual:
        return z.real, float(np.linalg.norm(z.imag))
    return z.real


def forecast(model, x0, n):
    """``Re(Phi Lambda^n pinv(Phi) x0)``; ``x0`` may be a D x B block of initial states."""
    if n < 0:
        raise ValueError("lead must be non-negative")
    x0 = _check_state(model, x0)
    b = model.encoder @ x0
    growth = model.eigenvalues ** n
    b = growth * b if b.ndim == 1 else growth[:, None] * b
    return (model.phi @ b).real


def spectrum(model):
    dt = model.dt_months
    energy = np.linalg.norm(model.phi, axis=0)
    out = []
    for lam, en in zip(model.eigenvalues, energy):
        mod = abs(lam)
        if mod >= 1.0:
            decay = math.inf
        elif mod == 0.0:
            decay = 0.0
        else:
            decay = -dt / math.log(mod)
        arg = abs(math.atan2(lam.imag, lam.real))
        period = math.inf if arg == 0.0 else 2 * math.pi * dt / arg
        out.append(ModeInfo(complex(lam), mod, decay, period, float(en)))
    out.sort(key=lambda m: -m.modulus)
    return out


def cap_modulus(model, cap=1.0):
    """Copy of ``model`` with every eigenvalue modulus clipped to ``cap``."""
    lam = model.eigenvalues.copy()
    mod = np.abs(lam)
    big = mod > cap
    lam[big] = lam[big] / mod[big] * cap
    return DmdModel(phi=model.phi, eigenvalues=lam, encoder=model.encoder,
                    dt_months=model.dt_months, singular_values=model.singular_values, mask=model.mask)


# -- real block form ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RealSystem:
    encoder: np.ndarray  # m x D
    linear: np.ndarray  # m x m block diagonal
    decoder: np.ndarray  # D x m
    block_sizes: tuple  # 1 per real eigenvalue, 2 per conjugate pair

    def forecast(self, x0, n):
        z = self.encoder @ x0
        for _ in range(n):
            z = self.linear @ z
        return self.decoder @ z


def pair_eigenvalues(lam, tol=PAIR_TOL):
    """Group eigenvalue indices into ``(i,)`` for real ones and ``(i, j)`` for conjugate pairs.

    ``i`` is the member with positive imaginary part.  Raises
    :class:`UnpairedEigenvalueError` if a complex eigenvalue has no partner.
    """
    lam = np.asarray(lam)
    used = np.zeros(lam.size, dtype=bool)
    groups = []
    for i in mode_order(lam):
        if used[i]:
            continue
        if abs(lam[i].imag) <= tol:
            used[i] = True
            groups.append((int(i),))
            continue
        cands = [j for j in range(lam.size) if not used[j] and j != i]
        dist = [abs(lam[j] - np.conj(lam[i])) for j in cands]
        if not cands or min(dist) > tol * max(1.0, abs(lam[i])):
            raise UnpairedEigenvalueError(f"eigenvalue {lam[i]} has no conjugate partner")
        j = cands[int(np.argmin(dist))]
        used[i] = used[j] = True
        if lam[i].imag < 0:
            i, j = j, i
        groups.append((int(i), int(j)))
    return groups


def realify(model):
    """Rewrite the complex eigensystem as an equivalent real block-diagonal system.

    A pair ``a +- bi`` with mode ``phi`` and encoder row ``psi`` (taken from the
    ``+b`` member) uses coordinates ``p = Re(psi x)``, ``q = -Im(psi x)``, which
    evolve by ``[[a, b], [-b, a]]`` and decode through ``2 Re(phi) p + 2 Im(phi) q``.
    """
    groups = pair_eigenvalues(model.eigenvalues)
    m = sum(len(g) for g in groups)
    d = model.n_state
    enc = np.zeros((m, d))
    dec = np.zeros((d, m))
    lin = np.zeros((m, m))
    pos = 0
    for g in groups:
        i = g[0]
        lam = model.eigenvalues[i]
        phi, psi = model.phi[:, i], model.encoder[i]
        if len(g) == 1:
            enc[pos] = psi.real
            dec[:, pos] = phi.real
            lin[pos, pos] = lam.real
        else:
            a, b = lam.real, lam.imag
            enc[pos] = psi.real
            enc[pos + 1] = -psi.imag
            dec[:, pos] = 2 * phi.real
            dec[:, pos + 1] = 2 * phi.imag
            lin[pos:pos + 2, pos:pos + 2] = [[a, b], [-b, a]]
        pos += len(g)
    return RealSystem(encoder=enc, linear=lin, decoder=dec, block_sizes=tuple(len(g) for g in groups))


# -- serialization -----------------------------------------------------------------

def save_dmd(model, path):
    header = {
        "kind": "dmd_model",
        "rank": model.rank,
        "n_state": model.n_state,
        "dt_months": model.dt_months,
        "eigenvalues": [[float(z.real), float(z.imag)] for z in model.eigenvalues],
        "singular_values": None if model.singular_values is None else [float(v) for v in model.singular_values],
        "grid": None if model.mask is None else {
            "nlat": int(model.mask.shape[0]), "nlon": int(model.mask.shape[1]),
            "mask_rle": mask_to_rle(model.mask)},
    }
    write_container(path, header, [model.phi, model.encoder], dtype="<c16")


def load_dmd(path):
    header, payload = read_container(path, kind="dmd_model")
    try:
        r, d = int(header["rank"]), int(header["n_state"])
        lam = np.array([complex(re, im) for re, im in header["eigenvalues"]], dtype=np.complex128)
        dt = int(header["dt_months"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad model header: {exc}") from exc
    if lam.size != r:
        raise DimensionMismatchError(f"header lists {lam.size} eigenvalues for rank {r}")
    phi, off = take(payload, 0, (d, r))
    enc, off = take(payload, off, (r, d))
    expect_consumed(payload, off)
    sv = header.get("singular_values")
    grid = header.get("grid")
    mask = None if grid is None else rle_to_mask(grid["mask_rle"], (grid["nlat"], grid["nlon"]))
    return DmdModel(phi=phi.copy(), eigenvalues=lam, encoder=enc.copy(), dt_months=dt,
                    singular_values=None if sv is None else np.asarray(sv), mask=mask)
