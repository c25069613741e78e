"""Amplitude statistics of the projected idle-phase samples.

All logarithms are natural logarithms.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate, special

from src.idlewatch.errors import InvalidArgumentError, NumericalFailureError
from src.idlewatch.signal_model import inr_db_to_sigma

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]
Hypothesis = Literal["H0", "H1"]

# Below this argument ln I0 is summed as a power series, above it the
# exponentially scaled Bessel function is used.
_SERIES_SWITCH = 7.75
_SERIES_TERMS = 40
_KL_SPAN = 10.0


class AmplitudeModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sigma_I: float = Field(..., ge=0.0)
    sigma_n: float = Field(1.0, gt=0.0)

    @property
    def sigma(self) -> float:
        """Normalized INR as an amplitude ratio sigma_I / sigma_n."""
        return self.sigma_I / self.sigma_n

    @classmethod
    def from_inr_db(cls, inr_db: float, sigma_n: float = 1.0) -> "AmplitudeModel":
        return cls(sigma_I=inr_db_to_sigma(inr_db) * sigma_n, sigma_n=sigma_n)


def _nonnegative(values: ArrayLike, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if np.isnan(array).any() or (array < 0).any():
        raise InvalidArgumentError(f"{name} must be nonnegative")
    return array


def _scalar_or_array(result: np.ndarray, like: ArrayLike) -> ArrayLike:
    return float(result) if np.ndim(like) == 0 else result


def log_bessel_i0(x: ArrayLike) -> ArrayLike:
    """ln I0(x) without overflow.

    Small arguments sum I0(x) - 1 = sum_k (x^2/4)^k / (k!)^2 and take log1p,
    which keeps full relative precision as x -> 0. Large arguments use
    ln I0(x) = ln(i0e(x)) + x.
    """
    x_arr = _nonnegative(x, "x")
    out = np.empty_like(x_arr)

    small = x_arr < _SERIES_SWITCH
    if small.any():
        q = (x_arr[small] / 2.0) ** 2
        term = np.ones_like(q)
        total = np.zeros_like(q)
        for k in range(1, _SERIES_TERMS + 1):
            term = term * q / (k * k)
            total += term
        out[small] = np.log1p(total)

    large = ~small
    if large.any():
        out[large] = np.log(special.i0e(x_arr[large])) + x_arr[large]
    return _scalar_or_array(out, x)


def rayleigh_pdf(r: ArrayLike, sigma_n: float) -> ArrayLike:
    r_arr = _nonnegative(r, "r")
    s2 = sigma_n * sigma_n
    return _scalar_or_array(2.0 * r_arr / s2 * np.exp(-r_arr * r_arr / s2), r)


def log_rice_pdf(r: ArrayLike, model: AmplitudeModel) -> ArrayLike:
    r_arr = _nonnegative(r, "r")
    s2 = model.sigma_n ** 2
    with np.errstate(divide="ignore"):
        out = (
            np.log(2.0 * r_arr / s2)
            - (r_arr * r_arr + model.sigma_I ** 2) / s2
            + np.asarray(log_bessel_i0(2.0 * model.sigma_I * r_arr / s2))
        )
    return _scalar_or_array(out, r)


def rice_pdf(r: ArrayLike, model: AmplitudeModel) -> ArrayLike:
    return _scalar_or_array(np.exp(np.asarray(log_rice_pdf(r, model))), r)


def llr(r: ArrayLike, model: AmplitudeModel) -> ArrayLike:
    """Per-sample log-likelihood ratio ln(f1(r) / f0(r))."""
    if model.sigma_I == 0.0:
        raise InvalidArgumentError("LLR is identically zero for sigma_I = 0")
    r_arr = _nonnegative(r, "r")
    s2 = model.sigma_n ** 2
    out = np.asarray(log_bessel_i0(2.0 * model.sigma_I * r_arr / s2)) - model.sigma_I ** 2 / s2
    return _scalar_or_array(out, r)


def kl_information(sigma: float, epsabs: float = 1e-9) -> float:
    """I(sigma) = E_H1[llr(r)], integrated in normalized units sigma_n = 1."""
    if not sigma > 0 or not math.isfinite(sigma):
        raise InvalidArgumentError(f"sigma must be positive and finite, got {sigma}")
    model = AmplitudeModel(sigma_I=sigma, sigma_n=1.0)
    r_max = sigma + _KL_SPAN

    tail = math.exp(-(r_max - sigma) ** 2) * (2.0 * sigma * r_max + sigma * sigma + 1.0)
    if tail >= 1e-12:
        raise NumericalFailureError("KL integrand tail is not negligible", {"sigma": sigma, "tail": tail})

    def integrand(r: float) -> float:
        if r == 0.0:
            return 0.0
        return llr(r, model) * math.exp(log_rice_pdf(r, model))

    result = integrate.quad(
        integrand, 0.0, r_max, points=[sigma], epsabs=epsabs, epsrel=1e-10, limit=200, full_output=1
    )
    value, abserr, info = result[0], result[1], result[2]
    if len(result) > 3:
        raise NumericalFailureError(
            "KL quadrature did not converge",
            {"sigma": sigma, "value": value, "abserr": abserr, "evaluations": info.get("neval"), "message": result[3]},
        )
    return float(value)


def theorem1_bounds(sigma: float) -> Tuple[float, float]:
    """Bounds on the asymptotic CADD / (-ln FAR) ratio 1/I(sigma)."""
    if not sigma > 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    s2 = sigma * sigma
    s4 = s2 * s2
    return (s2 + 1.0) / s4, (s2 + 3.0) / s4


def fitted_offset(sigma: float, information: Optional[float] = None) -> float:
    """The constant a with 1/I = (sigma^2 + a) / sigma^4, reported for documentation."""
    if information is None:
        information = kl_information(sigma)
    return sigma ** 4 / information - sigma ** 2


@dataclass(frozen=True)
class Theorem1Row:
    sigma_db: float
    information: float
    inverse_information: float
    lower: float
    upper: float
    fitted_a: float

    @property
    def within_bounds(self) -> bool:
        return self.lower <= self.inverse_information <= self.upper


def theorem1_row(sigma_db: float) -> Theorem1Row:
    """One row of the asymptotic delay-ratio bound table; ``sigma_db`` is the INR sigma^2 in dB."""
    if not math.isfinite(sigma_db):
        raise InvalidArgumentError(f"sigma_db must be finite, got {sigma_db}")
    sigma = inr_db_to_sigma(sigma_db)
    information = kl_information(sigma)
    lower, upper = theorem1_bounds(sigma)
    return Theorem1Row(
        sigma_db=sigma_db,
        information=information,
        inverse_information=1.0 / information,
        lower=lower,
        upper=upper,
        fitted_a=fitted_offset(sigma, information),
    )


def sample_amplitude(
    model: AmplitudeModel,
    hypothesis: Hypothesis,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> ArrayLike:
    """Exact draws of the projected amplitude.

    |sigma_I e^{i phi} + w| has the same law as |sigma_I + w| for circular w,
    so the phase is not drawn.
    """
    n = 1 if size is None else size
    parts = rng.standard_normal((n, 2))
    scale = model.sigma_n / math.sqrt(2.0)
    re = scale * parts[:, 0]
    im = scale * parts[:, 1]
    if hypothesis == "H1":
        re = re + model.sigma_I
    elif hypothesis != "H0":
        raise InvalidArgumentError(f"hypothesis must be 'H0' or 'H1', got {hypothesis!r}")
    r = np.hypot(re, im)
    return float(r[0]) if size is None else r
