"""Standard-normal CDF/quantile and one-sided Clopper-Pearson lower bounds."""
import math

import numba
import numpy as np

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)


class DomainError(ValueError):
    """An argument lies outside the domain where the quantity is defined."""


def norm_cdf(z: float) -> float:
    """Phi(z), computed through the complementary error function.

    ``erfc`` keeps full relative precision in the lower tail, so e.g.
    ``norm_cdf(-38.0)`` is a subnormal rather than zero.
    """
    return 0.5 * math.erfc(-z / SQRT2)


def norm_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / SQRT2PI


# Acklam's rational approximation (|rel err| < 1.15e-9 before polishing).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam_lower(p):
    # valid for 0 < p <= 0.5
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        c = _C
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        d = _D
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        return num / den
    q = p - 0.5
    r = q * q
    a, b = _A, _B
    num = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
    den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
    return num / den


def norm_ppf(p: float) -> float:
    """Phi^{-1}(p) for 0 < p < 1.

    Raises DomainError at or beyond the endpoints; callers clamp or abstain.
    """
    if not (0.0 < p < 1.0):
        raise DomainError(f"quantile undefined for p={p!r}")
    if p > 0.5:
        # 1 - p is exact for p in [0.5, 1], and the lower branch keeps
        # relative precision in the residual below.
        return -norm_ppf(1.0 - p)
    x = _acklam_lower(p)
    dens = norm_pdf(x)
    if dens > 0.0:
        x -= (norm_cdf(x) - p) / dens
    return x


def norm_ppf_grad(p: float) -> float:
    """d Phi^{-1}(p) / dp."""
    return 1.0 / norm_pdf(norm_ppf(p))


@numba.njit(cache=True)
def _log_tail_and_slope(k, n, p):
    """log P[Binomial(n, p) >= k] and its derivative in p, for 1 <= k <= n.

    Leading term t_k in log space, then the ratio recurrence t_{j+1}/t_j
    summed with rescaling; terms below 1e-17 of the running sum on the
    decreasing side are dropped. The slope uses d/dp tail = t_k * k / p.
    """
    log_lead = (math.lgamma(n + 1.0) - math.lgamma(k + 1.0) - math.lgamma(n - k + 1.0)
                + k * math.log(p) + (n - k) * math.log1p(-p))
    odds = p / (1.0 - p)
    s = 1.0
    t = 1.0
    log_scale = 0.0
    for j in range(k, n):
        ratio = (n - j) / (j + 1.0) * odds
        t *= ratio
        s += t
        if ratio < 1.0 and t < 1e-17 * s:
            break
        if s > 1e250:
            log_scale += math.log(s)
            t /= s
            s = 1.0
    log_sum = log_scale + math.log(s)
    slope = k / (p * math.exp(log_sum))
    return log_lead + log_sum, slope


@numba.njit(cache=True)
def _cp_lower_kernel(k, n, alpha):
    if k == 0:
        return 0.0
    if k == n:
        return alpha ** (1.0 / n)
    log_alpha = math.log(alpha)
    lo = 0.0
    # P[X >= k] >= 1/2 once n p >= k (the median is at least floor(np))
    hi = k / n if alpha < 0.5 else 1.0
    # Newton on log tail, kept inside the bracket; bisect when it escapes.
    p = 0.5 * (lo + hi)
    for _ in range(100):
        g, dg = _log_tail_and_slope(k, n, p)
        g -= log_alpha
        if g <= 0.0:
            lo = p
        else:
            hi = p
        step = g / dg
        nxt = p - step
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if abs(nxt - p) <= 1e-13 * p:
            break
        p = nxt
    # polish: plain bisection so the result is the largest p with tail <= alpha
    width = 1e-11 * p
    a = max(lo, p - width)
    b = min(hi, p + width)
    if a > lo and _log_tail_and_slope(k, n, a)[0] > log_alpha:
        a = lo
    else:
        lo = a
    if b < hi and _log_tail_and_slope(k, n, b)[0] <= log_alpha:
        b = hi
    hi = b
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _log_tail_and_slope(k, n, mid)[0] <= log_alpha:
            lo = mid
        else:
            hi = mid
    return lo


@numba.njit(cache=True)
def _cp_lower_many(ks, ns, alpha):
    out = np.empty(ks.shape[0])
    for i in range(ks.shape[0]):
        out[i] = _cp_lower_kernel(ks[i], ns[i], alpha)
    return out


def _check_cp_args(k, n, alpha):
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    if not (0 <= k <= n):
        raise DomainError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial rate.

    Returns the largest p with P[Binomial(n, p) >= k] <= alpha (0 when k = 0),
    found by safeguarded Newton steps on the exact binomial upper tail and a
    final bisection.
    """
    k, n = int(k), int(n)
    _check_cp_args(k, n, alpha)
    return float(_cp_lower_kernel(k, n, float(alpha)))


def clopper_pearson_lower_many(ks, ns, alpha: float) -> np.ndarray:
    """Vectorised :func:`clopper_pearson_lower` over paired count arrays."""
    ks = np.asarray(ks, dtype=np.int64)
    ns = np.broadcast_to(np.asarray(ns, dtype=np.int64), ks.shape).copy()
    if ks.size:
        if ns.min() < 1 or ks.min() < 0 or np.any(ks > ns):
            raise DomainError("need 0 <= k <= n and n >= 1 elementwise")
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return _cp_lower_many(ks.ravel(), ns.ravel(), float(alpha)).reshape(ks.shape)
