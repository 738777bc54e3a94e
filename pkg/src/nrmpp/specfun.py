"""Special functions and half-line quadrature.

Generalized factorial coefficients are carried as (sign, log|value|) pairs
because they alternate in sign and overflow doubles for moderate n.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import gammaln

__all__ = [
    "SignedLogReal",
    "gfc",
    "gfc_row",
    "bell",
    "log_pochhammer",
    "integrate_halfline",
    "IntegrationError",
    "logsumexp_signed",
]

GFC_MAX_N = 10_000
BELL_MAX_K = 25
_TAIL_POINT = 1e12


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SignedLogReal:
    """A real number stored as sign * exp(log_magnitude)."""

    log_magnitude: float
    sign: int

    def __post_init__(self):
        if self.sign not in (-1, 0, 1):
            raise ValueError("sign must be -1, 0 or +1")
        if self.sign != 0 and not math.isfinite(self.log_magnitude):
            raise ValueError("log_magnitude must be finite for a nonzero value")

    @classmethod
    def zero(cls) -> "SignedLogReal":
        return cls(-math.inf, 0)

    @classmethod
    def from_float(cls, x: float) -> "SignedLogReal":
        if x == 0:
            return cls.zero()
        return cls(math.log(abs(x)), 1 if x > 0 else -1)

    def __float__(self) -> float:
        if self.sign == 0:
            return 0.0
        return self.sign * math.exp(self.log_magnitude)

    def __neg__(self) -> "SignedLogReal":
        return SignedLogReal(self.log_magnitude, -self.sign)


def _signed_add(la, sa, lb, sb):
    # elementwise sa*exp(la) + sb*exp(lb), arrays in, arrays out
    hi = np.maximum(la, lb)
    safe = np.where(np.isfinite(hi), hi, 0.0)
    tot = sa * np.exp(la - safe) + sb * np.exp(lb - safe)
    sign = np.sign(tot).astype(int)
    with np.errstate(divide="ignore"):
        logm = np.where(sign != 0, np.log(np.abs(tot)) + safe, -np.inf)
    return logm, sign


def logsumexp_signed(logs, signs) -> SignedLogReal:
    """Sum of sign_i * exp(log_i) returned in signed-log form."""
    logs = np.asarray(logs, dtype=float)
    signs = np.asarray(signs, dtype=float)
    keep = signs != 0
    if not keep.any():
        return SignedLogReal.zero()
    logs, signs = logs[keep], signs[keep]
    m = logs.max()
    tot = float(np.sum(signs * np.exp(logs - m)))
    if tot == 0.0:
        return SignedLogReal.zero()
    return SignedLogReal(math.log(abs(tot)) + m, 1 if tot > 0 else -1)


def gfc_row(n: int, alpha: float):
    """Row n of C(n, k; alpha) for k = 0..n as (log_magnitude, sign) arrays.

    Uses C(n,k) = alpha C(n-1,k-1) + (k alpha - n + 1) C(n-1,k) with two
    rolling rows.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n > GFC_MAX_N:
        raise ValueError(f"n={n} exceeds the supported maximum {GFC_MAX_N}")
    alpha = float(alpha)
    logm = np.full(n + 1, -np.inf)
    sign = np.zeros(n + 1, dtype=int)
    logm[0], sign[0] = 0.0, 1
    la = math.log(abs(alpha)) if alpha != 0 else -np.inf
    sa = int(np.sign(alpha))
    for m in range(1, n + 1):
        k = np.arange(m + 1)
        # term a: alpha * C(m-1, k-1)
        prev_l = np.concatenate([[-np.inf], logm[:m]])
        prev_s = np.concatenate([[0], sign[:m]])
        a_l, a_s = prev_l + la, prev_s * sa
        # term b: (k alpha - m + 1) * C(m-1, k)
        coef = k * alpha - m + 1
        cur_l = np.concatenate([logm[:m], [-np.inf]])
        cur_s = np.concatenate([sign[:m], [0]])
        with np.errstate(divide="ignore"):
            b_l = cur_l + np.log(np.abs(coef))
        b_s = cur_s * np.sign(coef).astype(int)
        a_l = np.where(a_s != 0, a_l, -np.inf)
        b_l = np.where(b_s != 0, b_l, -np.inf)
        new_l, new_s = _signed_add(a_l, a_s, b_l, b_s)
        logm[: m + 1], sign[: m + 1] = new_l, new_s
    return logm, sign


def gfc(n: int, k: int, alpha: float) -> SignedLogReal:
    """Central generalized factorial coefficient C(n, k; alpha)."""
    if n < 0 or k < 0:
        raise ValueError("n and k must be non-negative")
    if k > n:
        return SignedLogReal.zero()
    logm, sign = gfc_row(n, alpha)
    if sign[k] == 0:
        return SignedLogReal.zero()
    return SignedLogReal(float(logm[k]), int(sign[k]))


def bell(k: int) -> int:
    """Bell number B_k from the Bell triangle."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > BELL_MAX_K:
        raise ValueError(f"k={k} exceeds the supported maximum {BELL_MAX_K}")
    row = [1]
    for _ in range(k):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]


def log_pochhammer(alpha: float, n):
    """log of the rising factorial (alpha)_n = Gamma(alpha+n)/Gamma(alpha)."""
    if np.any(np.asarray(alpha) <= 0):
        raise ValueError("alpha must be positive")
    if np.any(np.asarray(n) < 0):
        raise ValueError("n must be non-negative")
    out = gammaln(np.add(alpha, n)) - gammaln(alpha)
    return float(out) if np.ndim(out) == 0 else out


def integrate_halfline(f: Callable[[float], float], rel_tol: float = 1e-10,
                       max_subintervals: int = 500) -> float:
    """Integral of f over (0, inf) after mapping u = t / (1 - t) onto (0, 1).

    Adaptive Gauss-Kronrod (QUADPACK) does the interval halving.
    """
    def g(t):
        if t >= 1.0:
            return 0.0
        s = 1.0 - t
        return f(t / s) / (s * s)

    val, err, info = integrate.quad(g, 0.0, 1.0, epsabs=0.0, epsrel=rel_tol,
                                    limit=max_subintervals, full_output=1)[:3]
    if not math.isfinite(val) or (val != 0 and err > max(rel_tol * abs(val), 1e-300) * 10):
        raise IntegrationError(f"integral did not converge (value={val}, error={err})")
    # extrapolation can assign a finite value to a divergent integral; an
    # integrable f must have u f(u) -> 0
    far = _TAIL_POINT * abs(f(_TAIL_POINT))
    if far > 1e-2 * max(abs(val), 1e-300):
        raise IntegrationError(f"integral did not converge: u f(u) = {far:.3g} at u = {_TAIL_POINT:.0e}")
    return float(val)
