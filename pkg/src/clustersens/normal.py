"""Standard normal CDF, density, and quantile function.

``cdf`` goes through the complementary error function, ``ppf`` is
Wichura's PPND16 rational approximation; both are accurate to well below
1e-12 in absolute terms over the usable double range and accept scalars
or numpy arrays.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import DomainError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = 1.0 / float(np.sqrt(2.0 * np.pi))

# PPND16 coefficients (central region, |p - 0.5| <= 0.425)
_A = (
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
)
_B = (
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
)
# middle tail, sqrt(-log(min(p, 1-p))) <= 5
_C = (
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
)
_D = (
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
# far tail
_E = (
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
)
_F = (
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _polyval(coeffs, r):
    out = np.full_like(r, coeffs[-1])
    for c in coeffs[-2::-1]:
        out = out * r + c
    return out


def cdf(x):
    """P(Z <= x) for standard normal Z."""
    arr = np.asarray(x, dtype=float)
    out = 0.5 * special.erfc(-arr / _SQRT2)
    return float(out) if arr.ndim == 0 else out


def pdf(x):
    """Standard normal density."""
    arr = np.asarray(x, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * arr * arr)
    return float(out) if arr.ndim == 0 else out


def ppf(p):
    """Quantile function: the x with cdf(x) = p.

    Returns -inf/+inf at p = 0/1 and raises DomainError outside [0, 1].
    """
    arr = np.asarray(p, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise DomainError(f"probability outside [0, 1]: {p!r}")
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)

    q = arr - 0.5
    central = np.abs(q) <= 0.425
    if np.any(central):
        r = 0.180625 - q[central] ** 2
        out[central] = q[central] * _polyval(_A, r) / _polyval(_B, r)

    rest = ~central
    if np.any(rest):
        pr = np.minimum(arr[rest], 1.0 - arr[rest])
        with np.errstate(divide="ignore"):
            r = np.sqrt(-np.log(pr))
        val = np.empty_like(r)
        mid = r <= 5.0
        rm = r[mid] - 1.6
        val[mid] = _polyval(_C, rm) / _polyval(_D, rm)
        far = ~mid
        rf = r[far] - 5.0
        with np.errstate(invalid="ignore"):
            val[far] = _polyval(_E, rf) / _polyval(_F, rf)
        val[np.isinf(r)] = np.inf
        out[rest] = np.where(q[rest] < 0.0, -val, val)

    return float(out[0]) if scalar else out
