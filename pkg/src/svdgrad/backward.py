"""SVD backward pass with selectable handling of degenerate singular values.

The loss gradient with respect to the decomposed matrix is assembled from the
cotangents (Ubar, sbar, Vbar) of the factors and two auxiliary k×k matrices:

  F_ij = 1/(sigma_j^2 - sigma_i^2)   on well-separated pairs,
  T_ij = pseudoinverse correction    on pairs classified as equal.

Five modes differ only in how they regularize F (and whether T is used):

  exact   no safeguard; F entries may be +-inf/NaN (the unstable comparator)
  tf      classified-equal pairs zeroed
  clip    classified-equal pairs set to sign(sigma_j - sigma_i) * clip_value
  taylor  F replaced everywhere by a truncated geometric series of degree K
  inv     classified-equal pairs zeroed in F and compensated through T

A pair (i, j) is classified equal when |sigma_j^2 - sigma_i^2| < 1/t with the
threshold t chosen near the top of the working precision's range, so only
gaps that would overflow 1/gap are redirected. Classification happens before
any division, so no transient non-finite value is ever formed in the
safeguarded modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import ensure_matrix, real_dtype_of

__all__ = [
    "EQUAL_NONZERO",
    "EQUAL_ZERO",
    "UNEQUAL",
    "AuxMatrices",
    "GradMode",
    "StabilityParams",
    "build_aux",
    "classify_pairs",
    "svd_vjp",
]

UNEQUAL = 0
EQUAL_NONZERO = 1
EQUAL_ZERO = 2

_VARIANTS = ("exact", "tf", "clip", "taylor", "inv")


@dataclass(frozen=True)
class StabilityParams:
    """Equal-pair threshold t and overflow clamp; None means precision default.

    Defaults resolve to t = 1e30, clamp = float32 max in single precision and
    t = 1e300, clamp = float64 max in double.
    """

    t: float | None = None
    clamp: float | None = None

    def __post_init__(self):
        if self.t is not None and not self.t > 0:
            raise ValueError("t must be positive")
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError("clamp must be positive")

    def resolve(self, real_dtype) -> tuple[float, float]:
        single = np.dtype(real_dtype) == np.dtype(np.float32)
        t = self.t if self.t is not None else (1e30 if single else 1e300)
        clamp = self.clamp
        if clamp is None:
            clamp = float(np.finfo(np.float32 if single else np.float64).max)
        return float(t), float(clamp)


@dataclass(frozen=True)
class GradMode:
    """Backward-mode selector plus its parameters."""

    variant: str
    clip_value: float = 1e16
    taylor_k: int = 9
    stability: StabilityParams = field(default_factory=StabilityParams)

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {_VARIANTS}")
        if not self.clip_value > 0:
            raise ValueError("clip_value must be positive")
        if self.taylor_k < 1:
            raise ValueError("taylor_k must be >= 1")

    @classmethod
    def exact(cls, stability: StabilityParams | None = None) -> "GradMode":
        return cls("exact", stability=stability or StabilityParams())

    @classmethod
    def tf(cls, stability: StabilityParams | None = None) -> "GradMode":
        return cls("tf", stability=stability or StabilityParams())

    @classmethod
    def clip(cls, clip_value: float = 1e16, stability: StabilityParams | None = None) -> "GradMode":
        return cls("clip", clip_value=clip_value, stability=stability or StabilityParams())

    @classmethod
    def taylor(cls, k: int = 9, stability: StabilityParams | None = None) -> "GradMode":
        return cls("taylor", taylor_k=k, stability=stability or StabilityParams())

    @classmethod
    def inv(cls, stability: StabilityParams | None = None) -> "GradMode":
        return cls("inv", stability=stability or StabilityParams())


@dataclass(frozen=True)
class AuxMatrices:
    """F, T (real k×k) and the singular-value pseudoinverse vector."""

    F: np.ndarray
    T: np.ndarray
    s_pinv: np.ndarray


def _validate_s(s) -> np.ndarray:
    s = np.asarray(s)
    if s.ndim != 1:
        raise ValueError(f"singular values must be a vector, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise ValueError("singular values contain non-finite entries")
    if (s < 0).any():
        raise ValueError("singular values must be nonnegative")
    return s


def classify_pairs(s, t: float) -> np.ndarray:
    """Symmetric k×k grid of pair labels {UNEQUAL, EQUAL_NONZERO, EQUAL_ZERO}.

    A pair is equal when |sigma_j^2 - sigma_i^2| < 1/t (strictly); an equal
    pair is EQUAL_ZERO only when both values are exactly zero. Diagonal
    entries are labelled like any other equal pair.
    """
    s = _validate_s(s)
    rdt = s.dtype if s.dtype in (np.dtype(np.float32), np.dtype(np.float64)) else np.dtype(np.float64)
    s = s.astype(rdt, copy=False)
    with np.errstate(under="ignore"):
        s2 = s * s
        gap = np.abs(s2[None, :] - s2[:, None])
    # comparison in float64 so that 1/t cannot underflow in a float32 run
    equal = gap.astype(np.float64) < 1.0 / float(t)
    both_zero = (s[:, None] == 0) & (s[None, :] == 0)
    labels = np.full(gap.shape, UNEQUAL, dtype=np.int8)
    labels[equal] = EQUAL_NONZERO
    labels[equal & both_zero] = EQUAL_ZERO
    return labels


def build_aux(s, mode: GradMode, dtype=None) -> AuxMatrices:
    """Construct F, T, s_pinv for one backward mode.

    Arithmetic runs in `dtype` (default: the dtype of `s`), so a float32
    benchmark faithfully reproduces float32 gap rounding. F is assembled from
    its upper triangle and mirrored, making antisymmetry exact in every mode.
    """
    s = _validate_s(s)
    rdt = np.dtype(dtype) if dtype is not None else s.dtype
    if rdt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"dtype must be a real float type, got {rdt}")
    s = s.astype(rdt, copy=False)
    k = s.shape[0]
    t, clamp = mode.stability.resolve(rdt)
    clamp = np.asarray(min(clamp, float(np.finfo(rdt).max)), dtype=rdt)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        s2 = s * s
        gap = s2[None, :] - s2[:, None]          # gap[i, j] = sigma_j^2 - sigma_i^2
        # comparison in float64 so that 1/t cannot underflow in a float32 run
        equal = np.abs(gap).astype(np.float64) < 1.0 / t
        upper = np.triu(np.ones((k, k), dtype=bool), 1)

        both_zero = (s[:, None] == 0) & (s[None, :] == 0)
        if mode.variant == "taylor":
            F_up = _taylor_upper(s, mode.taylor_k, rdt)
            F_up = np.where(np.isfinite(F_up), F_up, np.copysign(clamp, F_up))
        else:
            F_up = np.zeros((k, k), dtype=rdt)
            div = upper & ~equal
            F_up[div] = np.asarray(1.0, dtype=rdt) / gap[div]
            if mode.variant == "exact":
                # a pair of exact zeros takes the definition's zero branch;
                # every other degenerate pair divides unprotected
                div_eq = upper & equal & ~both_zero
                F_up[div_eq] = np.asarray(1.0, dtype=rdt) / gap[div_eq]
            elif mode.variant == "clip":
                sgn = np.sign(s[None, :] - s[:, None])
                F_up[upper & equal] = (sgn * np.asarray(mode.clip_value, dtype=rdt))[upper & equal]
            # tf and inv leave classified pairs at zero
        F_up[~upper] = 0
        F = F_up - F_up.T

        T = np.zeros((k, k), dtype=rdt)
        if mode.variant == "inv":
            offdiag = ~np.eye(k, dtype=bool)
            fill = equal & offdiag & ~both_zero
            if fill.any():
                recip = np.minimum(np.asarray(1.0, dtype=rdt) / s[None, :], clamp)
                T[fill] = np.broadcast_to(recip, (k, k))[fill]

        s_pinv = np.zeros(k, dtype=rdt)
        nz = s != 0
        s_pinv[nz] = np.asarray(1.0, dtype=rdt) / s[nz]
        if mode.variant != "exact":
            s_pinv = np.minimum(s_pinv, clamp)

    return AuxMatrices(F=F, T=T, s_pinv=s_pinv)


def _taylor_upper(s: np.ndarray, K: int, rdt) -> np.ndarray:
    """Upper-triangle truncated-series approximation of F.

    For sigma_hi > sigma_lo the exact 1/(sigma_lo^2 - sigma_hi^2) equals
    -(1/sigma_hi^2) * sum_{p>=0} (sigma_lo/sigma_hi)^(2p); the degree-K
    truncation of that series is used, with value 0 when the pair is exactly
    equal (or both zero). Only upper-triangle entries are filled; the caller
    mirrors them.
    """
    k = s.shape[0]
    hi = np.maximum(s[:, None], s[None, :])
    lo = np.minimum(s[:, None], s[None, :])
    usable = np.triu(np.ones((k, k), dtype=bool), 1) & (hi > lo)
    r = np.zeros((k, k), dtype=rdt)
    ratio = np.zeros((k, k), dtype=rdt)
    ratio[usable] = (lo[usable] / hi[usable]) ** 2
    series = np.zeros((k, k), dtype=rdt)
    term = np.ones((k, k), dtype=rdt)
    for _ in range(K + 1):
        series += term
        term = term * ratio
    inv_hi2 = np.zeros((k, k), dtype=rdt)
    inv_hi2[usable] = np.asarray(1.0, dtype=rdt) / (hi[usable] * hi[usable])
    r[usable] = (series * inv_hi2)[usable]
    # exact F has sign(sigma_j^2 - sigma_i^2); on the upper triangle of a
    # descending spectrum sigma_j <= sigma_i, so entries where column wins
    # keep the positive sign.
    sgn = np.sign(s[None, :] - s[:, None])
    return r * sgn


def svd_vjp(A, factors, Ubar, sbar, Vbar, mode: GradMode) -> np.ndarray:
    """Pull factor cotangents (Ubar, sbar, Vbar) back to the input matrix.

    Computed as

      Abar = U [ (F o [U^H Ubar - Ubar^H U]) S + T o (U^H Ubar)
                 + diag(Re sbar) + S (F o [V^H Vbar - Vbar^H V]) ] V^H
             + (I - U U^H) Ubar diag(s_pinv) V^H
             + U diag(s_pinv) Vbar^H (I - V V^H)

    under the convention dL = Re tr(Abar^H dA). For complex input the
    per-column phase freedom (u_j, v_j) -> (e^{i t} u_j, e^{i t} v_j) adds

      + U diag( i (Im diag(U^H Ubar) - Im diag(V^H Vbar)) / 2 * s_pinv ) V^H,

    exact whenever the loss is invariant to that phase choice (any loss that
    reads the factors only through a reconstruction). Mode `exact` may return
    non-finite entries (propagated, never masked); every other mode returns
    finite output for finite input.
    """
    A = ensure_matrix(A, "A")
    m, n = A.shape
    U, s, V = factors.U, factors.s, factors.V
    k = s.shape[0]
    rdt = real_dtype_of(A.dtype)

    Ubar = ensure_matrix(Ubar, "Ubar") if Ubar is not None else np.zeros((m, k), dtype=A.dtype)
    Vbar = ensure_matrix(Vbar, "Vbar") if Vbar is not None else np.zeros((n, k), dtype=A.dtype)
    sbar = np.zeros(k, dtype=rdt) if sbar is None else np.asarray(sbar)
    if Ubar.shape != (m, k) or Vbar.shape != (n, k) or sbar.shape != (k,):
        raise ValueError(
            f"cotangent shapes {Ubar.shape}/{sbar.shape}/{Vbar.shape} do not "
            f"conform to factors of a {m}x{n} matrix"
        )

    aux = build_aux(s, mode, dtype=rdt)
    F = aux.F.astype(A.dtype, copy=False)
    T = aux.T.astype(A.dtype, copy=False)
    s_d = s.astype(A.dtype, copy=False)
    s_pinv = aux.s_pinv.astype(A.dtype, copy=False)

    with np.errstate(invalid="ignore", over="ignore", under="ignore"):
        P = U.conj().T @ Ubar                     # U^H Ubar
        Q = V.conj().T @ Vbar                     # V^H Vbar
        br_u = P - P.conj().T
        br_v = Q - Q.conj().T
        core = (F * br_u) * s_d[None, :]
        core = core + T * P
        core = core + np.diag(np.real(sbar).astype(rdt, copy=False)).astype(A.dtype)
        core = core + s_d[:, None] * (F * br_v)
        if np.iscomplexobj(A):
            gauge = 0.5 * (np.imag(np.diag(P)) - np.imag(np.diag(Q)))
            core = core + 1j * np.diag(gauge * aux.s_pinv).astype(A.dtype)
        Abar = U @ core @ V.conj().T
        Abar = Abar + ((Ubar - U @ P) * s_pinv[None, :]) @ V.conj().T
        Abar = Abar + (U * s_pinv[None, :]) @ (Vbar - V @ Q).conj().T
    return Abar
