"""Zero-mean periodic Poisson solver, spectral derivatives and particle-mesh transfer.

Sign convention: ``solve_poisson(rho)`` returns phi with
``laplacian(phi) = rho - mean(rho)`` and ``mean(phi) = 0``.
"""
from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

from .torus_geometry import wrap_array


@lru_cache(maxsize=16)
def _wavenumbers(n: int):
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    ksq = k1 ** 2 + k2 ** 2
    inv = np.zeros_like(ksq)
    inv[ksq > 0] = -1.0 / ksq[ksq > 0]
    # first derivatives drop the Nyquist row/column so real fields stay real
    kd = k.copy()
    if n % 2 == 0:
        kd[n // 2] = 0.0
    d1, d2 = np.meshgrid(kd, kd, indexing="ij")
    for a in (k1, k2, ksq, inv, d1, d2):
        a.setflags(write=False)
    return k1, k2, ksq, inv, d1, d2


def _check_grid(a: np.ndarray) -> int:
    n = a.shape[0]
    if a.ndim < 2 or a.shape[1] != n:
        raise ValueError("grids must be square N x N")
    if n & (n - 1):
        raise ValueError(f"grid size must be a power of two, got {n}")
    return n


def solve_poisson(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    n = _check_grid(rho)
    inv = _wavenumbers(n)[3]
    phi = np.fft.ifft2(np.fft.fft2(rho) * inv).real
    return phi - phi.mean()


def laplacian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    n = _check_grid(phi)
    ksq = _wavenumbers(n)[2]
    return np.fft.ifft2(-ksq * np.fft.fft2(phi)).real


def gradient(phi: np.ndarray) -> np.ndarray:
    """Spectral gradient, returned as an (N, N, 2) array."""
    phi = np.asarray(phi, dtype=float)
    n = _check_grid(phi)
    _, _, _, _, d1, d2 = _wavenumbers(n)
    ph = np.fft.fft2(phi)
    g1 = np.fft.ifft2(1j * d1 * ph).real
    g2 = np.fft.ifft2(1j * d2 * ph).real
    return np.stack([g1, g2], axis=-1)


def divergence(field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    n = _check_grid(field)
    _, _, _, _, d1, d2 = _wavenumbers(n)
    out = 1j * d1 * np.fft.fft2(field[..., 0]) + 1j * d2 * np.fft.fft2(field[..., 1])
    return np.fft.ifft2(out).real


def gradient_of_solution(rho: np.ndarray) -> np.ndarray:
    """grad of solve_poisson(rho) in a single spectral pass."""
    rho = np.asarray(rho, dtype=float)
    n = _check_grid(rho)
    _, _, _, inv, d1, d2 = _wavenumbers(n)
    ph = np.fft.fft2(rho) * inv
    return np.stack([np.fft.ifft2(1j * d1 * ph).real, np.fft.ifft2(1j * d2 * ph).real], axis=-1)


def nodal_values(fn, n: int) -> np.ndarray:
    s = np.arange(n) / n
    g1, g2 = np.meshgrid(s, s, indexing="ij")
    return fn(g1, g2)


# ------------------------------------------------------------ interpolation


def _cic_weights(x: np.ndarray, n: int):
    u = wrap_array(x) * n
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    i0 %= n
    i1 = (i0 + 1) % n
    return i0, i1, f


def sample_field(grid: np.ndarray, x) -> np.ndarray:
    """Periodic bilinear interpolation of a scalar (N,N) or vector (N,N,k) grid.

    ``x`` has shape (..., 2); the result has shape (...) or (..., k).
    """
    grid = np.asarray(grid)
    x = np.asarray(x, dtype=float)
    n = grid.shape[0]
    i0, i1, f = _cic_weights(x, n)
    a, b = i0[..., 0], i0[..., 1]
    c, d = i1[..., 0], i1[..., 1]
    f1, f2 = f[..., 0], f[..., 1]
    if grid.ndim == 3:
        f1 = f1[..., None]
        f2 = f2[..., None]
    return ((1 - f1) * (1 - f2) * grid[a, b] + f1 * (1 - f2) * grid[c, b]
            + (1 - f1) * f2 * grid[a, d] + f1 * f2 * grid[c, d])


def deposit_cic(x, weights, n: int) -> np.ndarray:
    """Cloud-in-cell deposition; returns a density (mass per unit area)."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    w = np.asarray(weights, dtype=float).ravel()
    i0, i1, f = _cic_weights(x, n)
    f1, f2 = f[:, 0], f[:, 1]
    flat = np.zeros(n * n)
    for ia, ib, wt in (
        (i0[:, 0], i0[:, 1], (1 - f1) * (1 - f2)),
        (i1[:, 0], i0[:, 1], f1 * (1 - f2)),
        (i0[:, 0], i1[:, 1], (1 - f1) * f2),
        (i1[:, 0], i1[:, 1], f1 * f2),
    ):
        flat += np.bincount(ia * n + ib, weights=w * wt, minlength=n * n)
    return flat.reshape(n, n) * (n * n)


# ----------------------------------------------------------- serialization


def save_grid_binary(path, values: np.ndarray) -> None:
    """Header (int64 N, int64 components) followed by row-major little-endian doubles."""
    values = np.ascontiguousarray(values, dtype="<f8")
    n = values.shape[0]
    comps = 1 if values.ndim == 2 else values.shape[2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qq", n, comps))
        fh.write(values.tobytes(order="C"))


def load_grid_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n, comps = struct.unpack("<qq", raw[:16])
    arr = np.frombuffer(raw[16:], dtype="<f8").copy()
    return arr.reshape((n, n) if comps == 1 else (n, n, comps))


def save_grid_csv(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    n = values.shape[0]
    s = np.arange(n) / n
    g1, g2 = np.meshgrid(s, s, indexing="ij")
    cols = [g1.ravel(), g2.ravel()]
    if values.ndim == 2:
        cols.append(values.ravel())
        header = "x1,x2,value"
    else:
        cols += [values[..., k].ravel() for k in range(values.shape[2])]
        header = "x1,x2," + ",".join(f"c{k + 1}" for k in range(values.shape[2]))
    np.savetxt(path, np.stack(cols, 1), delimiter=",", header=header, comments="", fmt="%.17g")
