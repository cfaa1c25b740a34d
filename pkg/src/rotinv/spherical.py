"""Bandlimited harmonic analysis on S^2 and SO(3).

Conventions
-----------
* S^2 samples live on the equiangular grid theta_j = pi (2j+1) / (4b),
  phi_k = pi k / b, stored as arrays ``(..., 2b, 2b)`` indexed ``[theta, phi]``.
* SO(3) samples use ZYZ Euler angles, R = Rz(alpha) Ry(beta) Rz(gamma), on the
  grid alpha_j = pi j / b, beta_k = theta_k, gamma_l = pi l / b, stored as
  ``(..., 2b, 2b, 2b)`` indexed ``[alpha, beta, gamma]``.
* Spherical harmonics are orthonormal with the Condon-Shortley phase,
  Y_lm(theta, phi) = sqrt((2l+1)/4pi) d^l_m0(theta) e^{i m phi}.
* D^l_mn(alpha, beta, gamma) = e^{-i m alpha} d^l_mn(beta) e^{-i n gamma}; this is a
  representation, D(gh) = D(g) D(h), and Y_lm(R^-1 x) = sum_n Y_ln(x) D^l_nm(R).
* The Haar measure on SO(3) is normalized to total mass 1, so
  int D^l_mn conj(D^l'_m'n') = delta / (2l+1).

Spectra are zero-padded complex arrays: S^2 spectra are ``(..., b, 2b-1)``
indexed ``[l, m + b - 1]``, SO(3) spectra are ``(..., b, 2b-1, 2b-1)`` indexed
``[l, m + b - 1, n + b - 1]``. Entries with |m| > l or |n| > l are zero.

Functions on the sphere (rotate, translate, convolve) act by
(g . f)(x) = f(g^-1 x) and (g . F)(h) = F(g^-1 h).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import rotation_y, rotation_z


# -- grids --------------------------------------------------------------------


def _check_bandwidth(b):
    if int(b) != b or b < 1:
        raise ValueError(f"bandwidth must be a positive integer, got {b}")
    return int(b)


def grid_betas(b: int) -> np.ndarray:
    return np.pi * (2 * np.arange(2 * b) + 1) / (4 * b)


def dh_weights(b: int) -> np.ndarray:
    """Driscoll-Healy weights on ``grid_betas(b)``.

    sum_k w_k p(cos beta_k) = int_0^pi p(cos beta) sin beta dbeta for every
    polynomial p of degree < 2b; the weights sum to 2.
    """
    beta = grid_betas(b)
    k = np.arange(b)
    s = np.sin(np.outer(beta, 2 * k + 1)) / (2 * k + 1)
    return (2.0 / b) * np.sin(beta) * s.sum(axis=1)


@dataclass(frozen=True)
class S2Grid:
    bandwidth: int
    theta: np.ndarray
    phi: np.ndarray
    theta_weights: np.ndarray  # sum to 2

    @property
    def shape(self):
        return (2 * self.bandwidth, 2 * self.bandwidth)

    @property
    def size(self):
        return 4 * self.bandwidth**2

    @property
    def node_weights(self) -> np.ndarray:
        """Area element per node; sums to 4 pi."""
        return np.repeat(self.theta_weights[:, None] * (np.pi / self.bandwidth), 2 * self.bandwidth, axis=1)

    def directions(self) -> np.ndarray:
        """Unit vectors of the nodes, shape (2b, 2b, 3)."""
        t, p = np.meshgrid(self.theta, self.phi, indexing="ij")
        return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)


@dataclass(frozen=True)
class SO3Grid:
    bandwidth: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    beta_weights: np.ndarray  # Driscoll-Healy weights, sum to 2

    @property
    def shape(self):
        n = 2 * self.bandwidth
        return (n, n, n)

    @property
    def size(self):
        return 8 * self.bandwidth**3

    @property
    def node_weights(self) -> np.ndarray:
        """Normalized Haar weight per node; sums to 1."""
        b = self.bandwidth
        w = self.beta_weights / (8.0 * b * b)
        return np.broadcast_to(w[None, :, None], self.shape).copy()

    def matrices(self) -> np.ndarray:
        """Rotation matrices of the nodes, shape (2b, 2b, 2b, 3, 3)."""
        a, bt, g = np.meshgrid(self.alpha, self.beta, self.gamma, indexing="ij")
        return euler_to_matrix(a, bt, g)


@lru_cache(maxsize=None)
def build_s2_grid(b: int) -> S2Grid:
    b = _check_bandwidth(b)
    theta = grid_betas(b)
    phi = np.pi * np.arange(2 * b) / b
    return S2Grid(b, theta, phi, dh_weights(b))


@lru_cache(maxsize=None)
def build_so3_grid(b: int) -> SO3Grid:
    b = _check_bandwidth(b)
    ang = np.pi * np.arange(2 * b) / b
    return SO3Grid(b, ang, grid_betas(b), ang.copy(), dh_weights(b))


# -- rotations and Euler angles -----------------------------------------------


def euler_to_matrix(alpha, beta, gamma) -> np.ndarray:
    """ZYZ: Rz(alpha) Ry(beta) Rz(gamma); broadcasts over angle arrays."""
    alpha, beta, gamma = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (alpha, beta, gamma)))
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    R = np.empty(alpha.shape + (3, 3))
    R[..., 0, 0] = ca * cb * cg - sa * sg
    R[..., 0, 1] = -ca * cb * sg - sa * cg
    R[..., 0, 2] = ca * sb
    R[..., 1, 0] = sa * cb * cg + ca * sg
    R[..., 1, 1] = -sa * cb * sg + ca * cg
    R[..., 1, 2] = sa * sb
    R[..., 2, 0] = -sb * cg
    R[..., 2, 1] = sb * sg
    R[..., 2, 2] = cb
    return R


def matrix_to_euler(R) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of ``euler_to_matrix`` (gamma = 0 at the poles beta in {0, pi})."""
    R = np.asarray(R, dtype=np.float64)
    sb = np.hypot(R[..., 2, 0], R[..., 2, 1])
    beta = np.arctan2(sb, R[..., 2, 2])
    regular = sb > 1e-12
    alpha = np.where(regular, np.arctan2(R[..., 1, 2], R[..., 0, 2]), 0.0)
    gamma = np.where(regular, np.arctan2(R[..., 2, 1], -R[..., 2, 0]), 0.0)
    north = ~regular & (R[..., 2, 2] > 0)
    south = ~regular & (R[..., 2, 2] <= 0)
    alpha = np.where(north, np.arctan2(R[..., 1, 0], R[..., 0, 0]), alpha)
    alpha = np.where(south, np.arctan2(-R[..., 0, 1], R[..., 1, 1]), alpha)
    return alpha, beta, gamma


def grid_rotations(b: int) -> list[np.ndarray]:
    """Rotations that permute both the bandwidth-b S^2 and SO(3) grids.

    z-rotations by multiples of pi/b, and the same composed with a half turn
    about y. Node weights are preserved, so quadrature commutes with them.
    """
    b = _check_bandwidth(b)
    out = [rotation_z(np.pi * k / b) for k in range(2 * b)]
    out += [rotation_z(np.pi * k / b) @ rotation_y(np.pi) for k in range(2 * b)]
    return out


# -- Wigner d -----------------------------------------------------------------


def _wigner_d_explicit(l, m, n, beta):
    # Wigner's sum formula; used only for the seeds l = max(|m|, |n|), where
    # a single term survives.
    beta = np.asarray(beta, dtype=np.float64)
    c, s = np.cos(beta / 2), np.sin(beta / 2)
    pref = math.sqrt(math.factorial(l + m) * math.factorial(l - m) * math.factorial(l + n) * math.factorial(l - n))
    total = np.zeros_like(beta)
    for k in range(max(0, n - m), min(l + n, l - m) + 1):
        den = math.factorial(l + n - k) * math.factorial(k) * math.factorial(m - n + k) * math.factorial(l - m - k)
        total = total + (-1) ** (m - n + k) / den * c ** (2 * l + n - m - 2 * k) * s ** (m - n + 2 * k)
    return pref * total


def wigner_d_table(b: int, betas) -> np.ndarray:
    """d^l_mn(beta) for l < b, |m|, |n| <= l, via the three-term recursion in l.

    Returns shape (b, 2b-1, 2b-1, len(betas)) indexed [l, m+b-1, n+b-1, k].
    """
    b = _check_bandwidth(b)
    betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
    L = 2 * b - 1
    ms = np.arange(-(b - 1), b)
    M, N = np.meshgrid(ms, ms, indexing="ij")
    l0 = np.maximum(np.abs(M), np.abs(N))
    cosb = np.cos(betas)
    table = np.zeros((b, L, L, betas.size))
    for l in range(b):
        cur = table[l]
        for i, j in zip(*np.nonzero(l0 == l)):
            cur[i, j] = _wigner_d_explicit(l, int(ms[i]), int(ms[j]), betas)
        if l == 0:
            continue
        J = l - 1
        mask = l0 < l
        mm, nn = M[mask].astype(float)[:, None], N[mask].astype(float)[:, None]
        prev = table[J][mask]
        prev2 = table[J - 1][mask] if J >= 1 else np.zeros_like(prev)
        lead = (J + 1) * (2 * J + 1) / np.sqrt(((J + 1) ** 2 - mm**2) * ((J + 1) ** 2 - nn**2))
        shift = mm * nn / (J * (J + 1)) if J > 0 else 0.0
        back = np.sqrt((J**2 - mm**2) * (J**2 - nn**2)) / (J * (2 * J + 1)) if J > 0 else 0.0
        cur[mask] = lead * ((cosb - shift) * prev - back * prev2)
    return table


def wigner_D(b: int, alpha: float, beta: float, gamma: float) -> np.ndarray:
    """D^l_mn(alpha, beta, gamma) for l < b, shape (b, 2b-1, 2b-1)."""
    d = wigner_d_table(b, [beta])[..., 0]
    ms = np.arange(-(b - 1), b)
    return np.exp(-1j * ms * alpha)[None, :, None] * d * np.exp(-1j * ms * gamma)[None, None, :]


def wigner_D_of(b: int, R) -> np.ndarray:
    a, bt, g = matrix_to_euler(R)
    return wigner_D(b, float(a), float(bt), float(g))


@lru_cache(maxsize=None)
def _s2_tables(b: int):
    grid = build_s2_grid(b)
    ms = np.arange(-(b - 1), b)
    d = wigner_d_table(b, grid.theta)[:, :, b - 1, :]  # d^l_m0(theta_j): (b, 2b-1, 2b)
    norm = np.sqrt((2 * np.arange(b) + 1) / (4 * np.pi))
    leg = norm[:, None, None] * d
    fourier = np.exp(1j * np.outer(ms, grid.phi))  # (2b-1, 2b)
    return grid, leg, fourier


@lru_cache(maxsize=None)
def _so3_tables(b: int):
    grid = build_so3_grid(b)
    ms = np.arange(-(b - 1), b)
    d = wigner_d_table(b, grid.beta)  # (b, 2b-1, 2b-1, 2b)
    ea = np.exp(1j * np.outer(ms, grid.alpha))  # e^{i m alpha_j}
    eg = np.exp(1j * np.outer(ms, grid.gamma))
    return grid, d, ea, eg


# -- transforms -----------------------------------------------------------------


def _grid_bandwidth(f, ndim):
    f = np.asarray(f)
    if f.ndim < ndim or len(set(f.shape[-ndim:])) != 1 or f.shape[-1] % 2:
        raise ValueError(f"expected trailing {ndim} axes of equal even length, got {f.shape}")
    return f.shape[-1] // 2


def _spectrum_bandwidth(s, ndim):
    s = np.asarray(s)
    b = s.shape[-ndim]
    if any(n != 2 * b - 1 for n in s.shape[-ndim + 1 :]):
        raise ValueError(f"malformed spectrum shape {s.shape}")
    return b


def resize_spectrum(spec, b_new: int, kind: str = "s2"):
    """Truncate (or zero-pad) a spectrum to bandwidth ``b_new``."""
    ndim = 2 if kind == "s2" else 3
    b = _spectrum_bandwidth(spec, ndim)
    if b_new == b:
        return spec
    lead = spec.shape[:-ndim]
    out = np.zeros(lead + (b_new,) + (2 * b_new - 1,) * (ndim - 1), dtype=complex)
    lb = min(b, b_new)
    src = tuple(slice(b - lb, b + lb - 1) for _ in range(ndim - 1))
    dst = tuple(slice(b_new - lb, b_new + lb - 1) for _ in range(ndim - 1))
    out[(..., slice(0, lb)) + dst] = spec[(..., slice(0, lb)) + src]
    return out


def sht_forward(f, b: int | None = None) -> np.ndarray:
    """Spectrum f_lm = int f conj(Y_lm) by exact quadrature; f is (..., 2b, 2b)."""
    gb = _grid_bandwidth(f, 2)
    if b is not None and b != gb:
        raise ValueError(f"bandwidth mismatch: grid {gb} vs requested {b}")
    grid, leg, fourier = _s2_tables(gb)
    S = np.einsum("...jk,mk->...mj", np.asarray(f), fourier.conj())
    wt = grid.theta_weights * (np.pi / gb)
    return np.einsum("lmj,j,...mj->...lm", leg, wt, S)


def sht_inverse(spec, b: int | None = None, real: bool = True) -> np.ndarray:
    """Samples on the bandwidth-b grid (default: the spectrum's bandwidth)."""
    sb = _spectrum_bandwidth(spec, 2)
    b = sb if b is None else _check_bandwidth(b)
    spec = resize_spectrum(np.asarray(spec), b, "s2")
    grid, leg, fourier = _s2_tables(b)
    G = np.einsum("...lm,lmj->...mj", spec, leg)
    f = np.einsum("...mj,mk->...jk", G, fourier)
    return f.real if real else f


def sht(f, direction: str = "forward", b: int | None = None):
    if direction == "forward":
        return sht_forward(f, b)
    if direction == "inverse":
        return sht_inverse(f, b)
    raise ValueError(f"unknown direction {direction!r}")


def so3_forward(f, b: int | None = None) -> np.ndarray:
    """Spectrum f_lmn = (2l+1) int f conj(D^l_mn) dg; f is (..., 2b, 2b, 2b)."""
    gb = _grid_bandwidth(f, 3)
    if b is not None and b != gb:
        raise ValueError(f"bandwidth mismatch: grid {gb} vs requested {b}")
    grid, d, ea, eg = _so3_tables(gb)
    S = np.einsum("...jkl,mj,nl->...mkn", np.asarray(f), ea, eg)
    w = grid.beta_weights / (8.0 * gb * gb)
    deg = 2 * np.arange(gb) + 1
    return np.einsum("l,lmnk,k,...mkn->...lmn", deg, d, w, S)


def so3_inverse(spec, b: int | None = None, real: bool = True) -> np.ndarray:
    sb = _spectrum_bandwidth(spec, 3)
    b = sb if b is None else _check_bandwidth(b)
    spec = resize_spectrum(np.asarray(spec), b, "so3")
    grid, d, ea, eg = _so3_tables(b)
    T = np.einsum("...lmn,lmnk->...mkn", spec, d)
    f = np.einsum("...mkn,mj,nl->...jkl", T, ea.conj(), eg.conj())
    return f.real if real else f


def so3_ft(f, direction: str = "forward", b: int | None = None):
    if direction == "forward":
        return so3_forward(f, b)
    if direction == "inverse":
        return so3_inverse(f, b)
    raise ValueError(f"unknown direction {direction!r}")


def so3_integrate(f) -> np.ndarray:
    """Normalized Haar integral over the trailing three (grid) axes."""
    b = _grid_bandwidth(f, 3)
    return np.tensordot(np.asarray(f), build_so3_grid(b).node_weights, axes=3)


def s2_integrate(f) -> np.ndarray:
    b = _grid_bandwidth(f, 2)
    return np.tensordot(np.asarray(f), build_s2_grid(b).node_weights, axes=2)


# -- group actions --------------------------------------------------------------


def rotate_s2_spectrum(spec, R) -> np.ndarray:
    """Spectrum of x -> f(R^-1 x)."""
    b = _spectrum_bandwidth(spec, 2)
    return np.einsum("lnm,...lm->...ln", wigner_D_of(b, R), spec)


def rotate_s2(f, R) -> np.ndarray:
    return sht_inverse(rotate_s2_spectrum(sht_forward(f), R))


def left_translate_so3_spectrum(spec, R) -> np.ndarray:
    """Spectrum of h -> F(R^-1 h)."""
    b = _spectrum_bandwidth(spec, 3)
    return np.einsum("lkn,...lnm->...lkm", wigner_D_of(b, R).conj(), spec)


def left_translate_so3(f, R) -> np.ndarray:
    return so3_inverse(left_translate_so3_spectrum(so3_forward(f), R))


# -- convolutions ---------------------------------------------------------------


def _check_bank(f, w, ndim):
    f, w = np.asarray(f), np.asarray(w)
    if w.ndim != f.ndim + 1 or w.shape[0] != f.shape[0] or f.ndim != ndim + 1:
        raise ValueError(f"signal {f.shape} and kernel bank {w.shape} do not match (C_in, C_out, grid)")
    if f.shape[1:] != w.shape[2:]:
        raise ValueError(f"signal and kernel bandwidths differ: {f.shape[1:]} vs {w.shape[2:]}")
    return f, w


def s2_conv_spectrum(f_hat, w_hat) -> np.ndarray:
    """SO(3) spectrum of sum_c int f_c(x) w_co(g^-1 x) dx.

    f_hat: (C_in, b, 2b-1); w_hat: (C_in, C_out, b, 2b-1).
    """
    return np.einsum("cln,colm->olnm", f_hat.conj(), w_hat)


def so3_conv_spectrum(f_hat, w_hat) -> np.ndarray:
    """SO(3) spectrum of sum_c int f_c(h) w_co(g^-1 h) dh."""
    b = f_hat.shape[1]
    deg = 2 * np.arange(b) + 1
    return np.einsum("ilak,iolck->olac", f_hat, w_hat.conj()) / deg[None, :, None, None]


def s2_convolve(f, w, b_out: int | None = None) -> np.ndarray:
    """(f * w)(g) = sum_c int_S2 f_c(x) w_co(g^-1 x) dx on the SO(3) grid.

    f: (C_in, 2b, 2b); w: (C_in, C_out, 2b, 2b); returns (C_out, 2b', 2b', 2b')
    with b' = b_out <= b. Degrees l >= b_out are dropped before synthesis.
    """
    f, w = _check_bank(f, w, 2)
    b = f.shape[-1] // 2
    b_out = b if b_out is None else _check_bandwidth(b_out)
    if b_out > b:
        raise ValueError(f"output bandwidth {b_out} exceeds input bandwidth {b}")
    spec = s2_conv_spectrum(sht_forward(f), sht_forward(w))
    return so3_inverse(resize_spectrum(spec, b_out, "so3"))


def so3_convolve(f, w, b_out: int | None = None) -> np.ndarray:
    """(f * w)(g) = sum_c int_SO3 f_c(h) w_co(g^-1 h) dh, normalized Haar."""
    f, w = _check_bank(f, w, 3)
    b = f.shape[-1] // 2
    b_out = b if b_out is None else _check_bandwidth(b_out)
    if b_out > b:
        raise ValueError(f"output bandwidth {b_out} exceeds input bandwidth {b}")
    spec = so3_conv_spectrum(so3_forward(f), so3_forward(w))
    return so3_inverse(resize_spectrum(spec, b_out, "so3"))


# -- dense bilinear forms (used by the network layers) -----------------------------


@lru_cache(maxsize=None)
def s2_conv_tensor(b_in: int, b_out: int) -> np.ndarray:
    """K with s2_convolve(f, w)[g] = sum_xy K[g, x, y] f[x] w[y] (flattened grids)."""
    n = 4 * b_in * b_in
    A = sht_forward(np.eye(n).reshape(n, 2 * b_in, 2 * b_in))  # (x, l, m)
    A = resize_spectrum(A, b_out, "s2")
    D = so3_inverse(np.eye(_so3_len(b_out)).reshape((-1, b_out) + (2 * b_out - 1,) * 2), real=False)
    D = D.reshape(b_out, 2 * b_out - 1, 2 * b_out - 1, -1)  # (l, n, m, g)
    K = np.einsum("xln,ylm,lnmg->gxy", A.conj(), A, D)
    return np.ascontiguousarray(K.real)


@lru_cache(maxsize=None)
def so3_conv_tensor(b_in: int, b_out: int) -> np.ndarray:
    """K with so3_convolve(f, w)[g] = sum_hy K[g, h, y] f[h] w[y] (flattened grids)."""
    n = 8 * b_in**3
    B = so3_forward(np.eye(n).reshape((n,) + (2 * b_in,) * 3))  # (h, l, a, b)
    B = resize_spectrum(B, b_out, "so3")
    D = so3_inverse(np.eye(_so3_len(b_out)).reshape((-1, b_out) + (2 * b_out - 1,) * 2), real=False)
    D = D.reshape(b_out, 2 * b_out - 1, 2 * b_out - 1, -1)  # (l, a, c, g)
    deg = 2 * np.arange(b_out) + 1.0
    K = np.einsum("hlak,ylck,lacg,l->ghy", B, B.conj(), D, 1.0 / deg)
    return np.ascontiguousarray(K.real)


def _so3_len(b):
    return b * (2 * b - 1) ** 2


# -- debug dump -------------------------------------------------------------------


def spectrum_to_json(spec) -> str:
    """Nonzero-pattern entries as [l, m, (n,) re, im] lists."""
    spec = np.asarray(spec)
    rows = []
    if spec.ndim == 2:
        b = spec.shape[0]
        for l in range(b):
            for m in range(-l, l + 1):
                z = spec[l, m + b - 1]
                rows.append([l, m, float(z.real), float(z.imag)])
    elif spec.ndim == 3:
        b = spec.shape[0]
        for l in range(b):
            for m in range(-l, l + 1):
                for n in range(-l, l + 1):
                    z = spec[l, m + b - 1, n + b - 1]
                    rows.append([l, m, n, float(z.real), float(z.imag)])
    else:
        raise ValueError("expected a single-channel spectrum")
    return json.dumps(rows)
