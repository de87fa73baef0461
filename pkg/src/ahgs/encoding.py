"""Directional and positional encodings.

Sinusoidal positional features, real spherical harmonics (orthonormal,
no Condon-Shortley phase), the von Mises-Fisher density on the unit
sphere, and the concentration-attenuated harmonic encoding that feeds
the color head. All tensor-valued functions are differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


@dataclass(frozen=True)
class SHIndexSet:
    """Ordered (degree, order) pairs for a harmonic basis.

    ``degree_mode`` selects consecutive degrees 1..2L or the
    powers-of-two set {1, 2, ..., 2^L}; a constant (0, 0) term is
    prepended so the encoding carries a DC component. ``full_m``
    extends orders from 0..l to -l..l.
    """

    L: int
    degrees: tuple
    pairs: tuple
    full_m: bool

    @classmethod
    def build(cls, L: int, degree_mode: str = "consecutive",
              full_m: bool = False, include_dc: bool = True) -> "SHIndexSet":
        if not isinstance(L, int) or L < 1:
            raise ContractError("L must be a positive integer")
        if degree_mode == "consecutive":
            degrees = tuple(range(1, 2 * L + 1))
        elif degree_mode == "pow2":
            degrees = tuple(2 ** i for i in range(L + 1))
        else:
            raise ContractError(f"unknown degree_mode {degree_mode!r}")
        pairs = [(0, 0)] if include_dc else []
        for ell in degrees:
            ms = range(-ell, ell + 1) if full_m else range(0, ell + 1)
            pairs.extend((ell, m) for m in ms)
        return cls(L, degrees, tuple(pairs), full_m)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def max_degree(self) -> int:
        return max(ell for ell, _ in self.pairs)


@dataclass(frozen=True)
class VmfParams:
    """Mean direction and concentration of a sphere distribution."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.shape != (3,):
            raise ContractError("mu must be a 3-vector")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise ContractError("mu must be unit length")
        if not (math.isfinite(self.kappa) and self.kappa >= 0.0):
            raise ContractError("kappa must be finite and non-negative")
        object.__setattr__(self, "mu", mu)


def positional_encoding(p, num_freqs: int) -> Tensor:
    """Componentwise (sin, cos) at frequencies 2^j * pi, j = 0..num_freqs-1.

    Output is the concatenation over j of (sin(2^j pi p), cos(2^j pi p))
    along the last axis, so a (..., D) input yields (..., 2*D*num_freqs).
    """
    if num_freqs < 1:
        raise ContractError("num_freqs must be >= 1")
    p = ad._as_tensor(p)
    parts = []
    for j in range(num_freqs):
        scaled = ad.mul(p, (2.0 ** j) * math.pi)
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    return ad.concat(parts, axis=-1)


def _double_factorial(n: int) -> float:
    out = 1.0
    while n > 1:
        out *= n
        n -= 2
    return out


def _sh_norm(ell: int, m: int) -> float:
    return math.sqrt((2 * ell + 1) / (4.0 * math.pi)
                     * math.factorial(ell - m) / math.factorial(ell + m))


def _mul_sc(value, scalar: float):
    """Multiply a float-or-Tensor by a python scalar."""
    if isinstance(value, Tensor):
        return ad.mul(value, scalar)
    return value * scalar


def sh_eval(d, index_set: SHIndexSet) -> Tensor:
    """Real spherical harmonics of unit directions.

    ``d`` is (..., 3) with rows unit to 1e-6; returns one column per
    (degree, order) pair of ``index_set`` in pair order. Evaluation uses
    the Cartesian recurrences: A_m + i B_m = (x + i y)^m for the
    azimuthal part and the associated Legendre three-term recurrence in
    z with the sin^m(theta) prefactor folded into A_m/B_m.
    """
    d = ad._as_tensor(d)
    if d.shape[-1] != 3:
        raise ContractError("directions must have a trailing extent of 3")
    norms = np.linalg.norm(d.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractError("directions must be unit vectors (tol 1e-6)")
    squeeze = d.ndim == 1
    flat = ad.reshape(d, (-1, 3))
    n = flat.shape[0]
    x = flat[:, 0]
    y = flat[:, 1]
    z = flat[:, 2]

    lmax = index_set.max_degree
    need_m = {abs(m) for _, m in index_set.pairs}
    mmax = max(need_m) if need_m else 0

    # azimuthal polynomials: A_0 = 1, B_0 = 0 are plain floats
    A = {0: 1.0}
    B = {0: 0.0}
    for m in range(1, mmax + 1):
        if m == 1:
            A[1], B[1] = x, y
        else:
            A[m] = ad.sub(ad.mul(x, A[m - 1]), ad.mul(y, B[m - 1]))
            B[m] = ad.add(ad.mul(x, B[m - 1]), ad.mul(y, A[m - 1]))

    # z-recurrence for P_l^m with sin^m(theta) factored out; floats until
    # the first multiplication by z promotes them to tensors
    q = {}
    for m in range(0, lmax + 1):
        q[(m, m)] = _double_factorial(2 * m - 1)
        if m + 1 <= lmax:
            q[(m + 1, m)] = ad.mul(z, (2 * m + 1) * q[(m, m)])
        for ell in range(m + 2, lmax + 1):
            a = ad.mul(z, _mul_sc(q[(ell - 1, m)], (2 * ell - 1) / (ell - m)))
            q[(ell, m)] = ad.sub(a, _mul_sc(q[(ell - 2, m)], (ell + m - 1) / (ell - m)))

    cols = []
    for ell, m in index_set.pairs:
        am = abs(m)
        k = _sh_norm(ell, am)
        base = q[(ell, am)]
        if m == 0:
            col = ad.mul(base, k) if isinstance(base, Tensor) else Tensor(np.full(n, k * base))
        else:
            azim = A[am] if m > 0 else B[am]  # Tensor whenever am >= 1
            if isinstance(base, Tensor):
                col = ad.mul(ad.mul(azim, math.sqrt(2.0) * k), base)
            else:
                col = ad.mul(azim, math.sqrt(2.0) * k * base)
        cols.append(ad.reshape(col, (n, 1)))
    out = ad.concat(cols, axis=1)
    if squeeze:
        out = ad.reshape(out, (len(index_set),))
    return out


def vmf_pdf(x, params: VmfParams):
    """Sphere density kappa e^{kappa mu.x} / (4 pi sinh kappa).

    Evaluated in the overflow-safe form
    kappa e^{kappa (mu.x - 1)} / (2 pi (1 - e^{-2 kappa})); the
    kappa -> 0 limit returns the uniform density 1 / (4 pi).
    """
    x = np.asarray(x, dtype=np.float64)
    dot = x @ params.mu
    if params.kappa <= 1e-6:
        out = np.full_like(np.asarray(dot, dtype=np.float64), 1.0 / (4.0 * math.pi))
        return float(out) if np.isscalar(dot) or out.ndim == 0 else out
    k = params.kappa
    val = k * np.exp(k * (dot - 1.0)) / (2.0 * math.pi * (1.0 - math.exp(-2.0 * k)))
    return float(val) if np.ndim(val) == 0 else val


def sh_attenuation(ell: int, kappa):
    """Degree attenuation exp(-l(l+1) / (2 kappa)) of a harmonic under
    a concentration-kappa sphere distribution."""
    if ell < 0:
        raise ContractError("degree must be non-negative")
    if isinstance(kappa, Tensor):
        if np.any(kappa.data <= 0.0):
            raise ContractError("kappa must be positive")
        if ell == 0:
            return Tensor(np.ones_like(kappa.data))
        return ad.exp(ad.mul(ad.div(Tensor(np.full(kappa.shape, ell * (ell + 1) / 2.0)),
                                    kappa), -1.0))
    kappa = float(kappa)
    if kappa <= 0.0:
        raise ContractError("kappa must be positive")
    return math.exp(-ell * (ell + 1) / (2.0 * kappa))


def ddfe(d, kappa, index_set: SHIndexSet) -> Tensor:
    """Expected harmonics under a concentration-kappa sphere
    distribution centered on each direction: per pair, A_l(kappa) *
    Y_l^m(d). Differentiable in both the directions and kappa."""
    y = sh_eval(d, index_set)
    single = y.ndim == 1
    if single:
        y = ad.reshape(y, (1, -1))
    n = y.shape[0]
    if not isinstance(kappa, Tensor):
        kappa = Tensor(np.full((n, 1), float(kappa)))
    if kappa.ndim == 1:
        kappa = ad.reshape(kappa, (n, 1))

    blocks = []
    col = 0
    pairs = index_set.pairs
    while col < len(pairs):
        ell = pairs[col][0]
        width = 1
        while col + width < len(pairs) and pairs[col + width][0] == ell:
            width += 1
        block = y[:, col:col + width]
        if ell > 0:
            block = ad.mul(block, sh_attenuation(ell, kappa))
        blocks.append(block)
        col += width
    out = ad.concat(blocks, axis=1)
    if single:
        out = ad.reshape(out, (len(index_set),))
    return out
