# utils/mvn.py

"""
Gaussian numerical primitives.

``mvn_cdf`` evaluates upper-orthant multivariate normal probabilities with the
separation-of-variables transformation and a randomized rank-1 lattice rule.
Dimensions one and two are handled in closed form. ``conditional_normal`` and
``skew_normal_reduce`` provide the Gaussian algebra the likelihood is built on.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

from utils.exceptions import CapacityError, CdfDomainError, NumericalError

logger = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-10
NEGATIVE_PIVOT_TOLERANCE = 1e-8
SYMMETRY_TOLERANCE = 1e-10
_CHUNK = 8192
_TINY = np.finfo(float).tiny
MAX_LATTICE_DIM = 128
# fixed lattice, no reordering: the integral is a smooth deterministic function of its limits
ESTIMATION_DEFAULTS = {'adaptive': False, 'reorder': False, 'fixed_points': 500, 'randomizations': 8}


def _as_bool(value: Any) -> bool:
    if isinstance(value, str):
        text = value.strip().lower()
        if text in ('true', 'yes', 'on', '1'):
            return True
        if text in ('false', 'no', 'off', '0', ''):
            return False
        raise ValueError(f"not a boolean: '{value}'")
    return bool(value)


@dataclass
class CdfConfig:
    """
    Accuracy settings for ``mvn_cdf``.

    ``adaptive`` doubles the lattice size until ``abs_tolerance`` or ``max_points`` is
    reached; when false every randomization uses exactly ``fixed_points`` lattice
    points, which makes the result a smooth function of the integration limits.
    """
    abs_tolerance: float = 1e-4
    max_points: int = 1_000_000
    rng_seed: int = 20240601
    randomizations: int = 12
    max_dim: int = 64
    reorder: bool = True
    adaptive: bool = True
    fixed_points: int = 500
    initial_points: int = 128

    def __post_init__(self):
        if not self.abs_tolerance > 0:
            raise ValueError(f"abs_tolerance must be > 0, got {self.abs_tolerance}")
        if self.max_points < 1000:
            raise ValueError(f"max_points must be >= 1000, got {self.max_points}")
        if self.randomizations < 2:
            raise ValueError(f"randomizations must be >= 2, got {self.randomizations}")
        if not 1 <= self.max_dim <= MAX_LATTICE_DIM:
            raise ValueError(f"max_dim must be in [1, {MAX_LATTICE_DIM}], got {self.max_dim}")
        if self.fixed_points < 1 or self.initial_points < 1:
            raise ValueError("lattice sizes must be positive")

    @classmethod
    def estimation(cls, **overrides) -> "CdfConfig":
        """Settings used while optimizing a likelihood."""
        return cls(**{**ESTIMATION_DEFAULTS, **overrides})

    @classmethod
    def from_dict(cls, values: Optional[Dict[str, Any]], estimation: bool = False) -> "CdfConfig":
        """
        Build a configuration from a config-file section, ignoring unknown keys.

        :param values: Mapping such as ``config['cdf']``.
        :param estimation: Start from the estimation settings instead of the stand-alone ones.
        :return: CdfConfig instance.
        """
        values = values or {}
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        casts = {'abs_tolerance': float, 'max_points': int, 'rng_seed': int, 'randomizations': int,
                 'max_dim': int, 'fixed_points': int, 'initial_points': int,
                 'reorder': _as_bool, 'adaptive': _as_bool}
        settings = {k: casts[k](v) for k, v in known.items()}
        return cls.estimation(**settings) if estimation else cls(**settings)


@dataclass
class GaussianCdfQuery:
    """P(X <= upper) for X ~ N(mean, cov)."""
    upper: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = self.upper.size
        if n < 1:
            raise CdfDomainError("Gaussian CDF query has dimension 0")
        if self.mean.shape != (n,) or self.cov.shape != (n, n):
            raise CdfDomainError(
                f"inconsistent query shapes: upper {self.upper.shape}, mean {self.mean.shape}, cov {self.cov.shape}"
            )
        scale = max(np.max(np.abs(self.cov)), 1.0)
        if np.max(np.abs(self.cov - self.cov.T)) > SYMMETRY_TOLERANCE * scale:
            raise CdfDomainError("covariance matrix is not symmetric")
        if np.any(np.diag(self.cov) <= 0):
            raise CdfDomainError("covariance matrix has a non-positive diagonal entry")

    @property
    def dim(self) -> int:
        return self.upper.size


def mvn_cdf(query: GaussianCdfQuery, cfg: Optional[CdfConfig] = None) -> Tuple[float, float]:
    """
    Multivariate normal CDF with an error estimate.

    :param query: Upper limits, mean and covariance.
    :param cfg: Accuracy settings; defaults to ``CdfConfig()``.
    :return: Tuple (value, err_estimate). The error estimate is 0 for the closed-form cases.
    """
    cfg = cfg or CdfConfig()
    if query.dim > cfg.max_dim:
        raise CapacityError(f"Gaussian CDF dimension {query.dim} exceeds the maximum {cfg.max_dim}")

    b = query.upper - query.mean
    if np.any(np.isnan(b)):
        raise CdfDomainError("NaN integration limit")
    if np.any(b == -np.inf):
        return 0.0, 0.0
    keep = np.isfinite(b)
    if not np.all(keep):
        b = b[keep]
        cov = query.cov[np.ix_(keep, keep)]
    else:
        cov = query.cov
    n = b.size
    if n == 0:
        return 1.0, 0.0
    if n == 1:
        return float(ndtr(b[0] / np.sqrt(cov[0, 0]))), 0.0
    if n == 2:
        s1, s2 = np.sqrt(cov[0, 0]), np.sqrt(cov[1, 1])
        r = float(np.clip(cov[0, 1] / (s1 * s2), -1.0, 1.0))
        return bvn_upper(-b[0] / s1, -b[1] / s2, r), 0.0
    return _lattice_cdf(b, cov, cfg)


def bvn_upper(dh: float, dk: float, r: float) -> float:
    """
    P(X > dh, Y > dk) for a standard bivariate normal with correlation r.

    Drezner-Wesolowsky with Gauss-Legendre rules of 6, 12 or 20 points depending on |r|,
    and the asymptotic expansion for |r| >= 0.925.
    """
    if dh == np.inf or dk == np.inf:
        return 0.0
    if dh == -np.inf:
        return 1.0 if dk == -np.inf else float(ndtr(-dk))
    if dk == -np.inf:
        return float(ndtr(-dh))
    if r == 0:
        return float(ndtr(-dh) * ndtr(-dk))

    if abs(r) < 0.3:
        w = np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904])
        x = np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970])
    elif abs(r) < 0.75:
        w = np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                      0.2031674267230659, 0.2334925365383547, 0.2491470458134029])
        x = np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                      0.5873179542866171, 0.3678314989981802, 0.1252334085114692])
    else:
        w = np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                      0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
                      0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
                      0.1527533871307259])
        x = np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                      0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                      0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                      0.07652652113349733])
    w = np.concatenate([w, w])
    x = np.concatenate([1 - x, 1 + x])

    tp = 2 * np.pi
    h, k = dh, dk
    hk = h * k
    bvn = 0.0
    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2
        asr = np.arcsin(r) / 2
        sn = np.sin(asr * x)
        bvn = np.dot(np.exp((sn * hk - hs) / (1 - sn ** 2)), w)
        bvn = bvn * asr / tp + ndtr(-h) * ndtr(-k)
    else:
        if r < 0:
            k = -k
            hk = -hk
        if abs(r) < 1:
            a_s = 1 - r ** 2
            a = np.sqrt(a_s)
            bs = (h - k) ** 2
            asr = -(bs / a_s + hk) / 2
            c = (4 - hk) / 8
            d = (12 - hk) / 80
            if asr > -100:
                bvn = a * np.exp(asr) * (1 - c * (bs - a_s) * (1 - d * bs) / 3 + c * d * a_s ** 2)
            if hk > -100:
                bb = np.sqrt(bs)
                sp = np.sqrt(tp) * ndtr(-bb / a)
                bvn = bvn - np.exp(-hk / 2) * sp * bb * (1 - c * bs * (1 - d * bs) / 3)
            a = a / 2
            xs = (a * x) ** 2
            asr = -(bs / xs + hk) / 2
            ix = asr > -100
            xs = xs[ix]
            sp = 1 + c * xs * (1 + 5 * d * xs)
            rs = np.sqrt(1 - xs)
            ep = np.exp(-(hk / 2) * xs / (1 + rs) ** 2) / rs
            bvn = (a * np.dot(np.exp(asr[ix]) * (sp - ep), w[ix]) - bvn) / tp
        if r > 0:
            bvn = bvn + ndtr(-max(h, k))
        elif h >= k:
            bvn = -bvn
        else:
            if h < 0:
                lower = ndtr(k) - ndtr(h)
            else:
                lower = ndtr(-h) - ndtr(-k)
            bvn = lower - bvn
    return float(min(1.0, max(0.0, bvn)))


def _primes(count: int) -> np.ndarray:
    found = []
    candidate = 2
    while len(found) < count:
        if all(candidate % p for p in found if p * p <= candidate):
            found.append(candidate)
        candidate += 1
    return np.array(found, dtype=float)


_GENERATOR = np.sqrt(_primes(MAX_LATTICE_DIM)) % 1.0


def _factor(b: np.ndarray, cov: np.ndarray, reorder: bool):
    """
    Pivoted Cholesky factor with optional variable prioritisation.

    :return: (limits, lower factor, rank). Rows past ``rank`` are deterministic
             linear functions of the first ``rank`` standardized variables.
    """
    n = b.size
    c = cov.copy()
    b = b.copy()
    lower = np.zeros((n, n))
    y = np.zeros(n)
    max_diag = np.max(np.diag(c))
    tol = PIVOT_TOLERANCE * max_diag
    neg_tol = NEGATIVE_PIVOT_TOLERANCE * max_diag
    rank = 0
    for i in range(n):
        resid = np.diag(c)[i:] - np.sum(lower[i:, :rank] ** 2, axis=1)
        if np.any(resid < -neg_tol):
            raise CdfDomainError(f"covariance is not positive semidefinite (pivot {resid.min():.3g})")
        positive = resid > tol
        if not np.any(positive):
            break
        if reorder:
            shifted = b[i:] - lower[i:, :rank] @ y[:rank]
            scores = np.full(resid.size, np.inf)
            scores[positive] = ndtr(shifted[positive] / np.sqrt(resid[positive]))
            pick = int(np.argmin(scores))
        else:
            pick = int(np.argmax(positive))
        j = i + pick
        if j != i:
            c[[i, j], :] = c[[j, i], :]
            c[:, [i, j]] = c[:, [j, i]]
            b[[i, j]] = b[[j, i]]
            lower[[i, j], :] = lower[[j, i], :]
        pivot = np.sqrt(resid[pick])
        lower[i, rank] = pivot
        if i + 1 < n:
            lower[i + 1:, rank] = (c[i + 1:, i] - lower[i + 1:, :rank] @ lower[i, :rank]) / pivot
        if reorder:
            bt = (b[i] - lower[i, :rank] @ y[:rank]) / pivot
            mass = max(ndtr(bt), _TINY)
            y[rank] = -np.exp(-0.5 * bt * bt) / np.sqrt(2 * np.pi) / mass
        rank += 1
    return b, lower, rank


def _integrand(u: np.ndarray, b: np.ndarray, lower: np.ndarray, rank: int) -> np.ndarray:
    """Separation-of-variables integrand evaluated at points ``u`` in the unit cube."""
    npts = u.shape[0]
    y = np.zeros((npts, rank))
    e = np.full(npts, ndtr(b[0] / lower[0, 0]))
    f = e.copy()
    for p in range(1, rank):
        y[:, p - 1] = ndtri(np.clip(u[:, p - 1] * e, _TINY, 1 - 1e-16))
        bt = (b[p] - y[:, :p] @ lower[p, :p]) / lower[p, p]
        e = ndtr(bt)
        f = f * e
    n = b.size
    if rank < n:
        y[:, rank - 1] = ndtri(np.clip(u[:, rank - 1] * e, _TINY, 1 - 1e-16))
        for j in range(rank, n):
            inside = y @ lower[j, :rank] <= b[j] + 1e-12 * max(1.0, abs(b[j]))
            f = f * inside
    return f


def _lattice_cdf(b: np.ndarray, cov: np.ndarray, cfg: CdfConfig) -> Tuple[float, float]:
    b, lower, rank = _factor(b, cov, cfg.reorder)
    n = b.size
    dim = rank - 1 + (1 if rank < n else 0)
    if dim == 0:
        return float(ndtr(b[0] / lower[0, 0])), 0.0

    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    shifts = rng.random((cfg.randomizations, dim))
    z = _GENERATOR[:dim]
    sums = np.zeros(cfg.randomizations)

    done = 0
    target = cfg.initial_points if cfg.adaptive else cfg.fixed_points
    while True:
        for start in range(done + 1, target + 1, _CHUNK):
            j = np.arange(start, min(start + _CHUNK, target + 1), dtype=float)
            base = np.outer(j, z)
            for r in range(cfg.randomizations):
                x = (base + shifts[r]) % 1.0
                x = 1.0 - np.abs(2.0 * x - 1.0)
                sums[r] += np.sum(_integrand(x, b, lower, rank))
        done = target
        estimates = sums / done
        value = float(np.mean(estimates))
        err = float(np.std(estimates, ddof=1) / np.sqrt(cfg.randomizations))
        if not cfg.adaptive or err <= cfg.abs_tolerance:
            break
        if 2 * done * cfg.randomizations > cfg.max_points:
            logger.debug(f"mvn_cdf stopped at {done * cfg.randomizations} points with error {err:.2e}")
            break
        target = 2 * done
    return float(min(1.0, max(0.0, value))), err


def conditional_normal(mean_joint: Sequence[float], cov_joint: np.ndarray, observed_idx: Sequence[int],
                       observed_values: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Moments of the unobserved coordinates of a Gaussian vector given the observed ones.

    :param mean_joint: Joint mean.
    :param cov_joint: Joint covariance.
    :param observed_idx: Indices of the conditioning coordinates.
    :param observed_values: Observed values, aligned with ``observed_idx``.
    :return: (mean_cond, cov_cond) of the remaining coordinates, in their original order.
    """
    mean_joint = np.asarray(mean_joint, dtype=float)
    cov_joint = np.asarray(cov_joint, dtype=float)
    obs = np.asarray(observed_idx, dtype=int)
    free = np.setdiff1d(np.arange(mean_joint.size), obs)
    mu_a = mean_joint[free]
    s_aa = cov_joint[np.ix_(free, free)]
    if obs.size == 0:
        return mu_a.copy(), s_aa.copy()

    s_ab = cov_joint[np.ix_(free, obs)]
    s_bb = cov_joint[np.ix_(obs, obs)]
    resid = np.asarray(observed_values, dtype=float) - mean_joint[obs]
    try:
        factor = linalg.cho_factor(s_bb, lower=True, check_finite=False)
        gain = linalg.cho_solve(factor, s_ab.T, check_finite=False).T
    except linalg.LinAlgError:
        eigenvalues = linalg.eigvalsh(s_bb)
        if eigenvalues[0] < -NEGATIVE_PIVOT_TOLERANCE * max(eigenvalues[-1], 1.0):
            raise NumericalError(f"observed covariance block is indefinite (eigenvalue {eigenvalues[0]:.3g})")
        logger.warning("Observed covariance block is singular; using a pseudo-inverse.")
        gain = s_ab @ linalg.pinvh(s_bb)
    mean_cond = mu_a + gain @ resid
    cov_cond = s_aa - gain @ s_ab.T
    return mean_cond, 0.5 * (cov_cond + cov_cond.T)


def skew_normal_reduce(lambda0: Sequence[float], Delta: np.ndarray, Lambda: np.ndarray,
                       cfg: Optional[CdfConfig] = None) -> float:
    """
    Closed form of E[Phi_m(lambda0 + Lambda Z; 0, Delta)] for Z ~ N(0, I_k).

    The expectation equals Phi_m(lambda0; 0, Delta + Lambda Lambda^T).

    :param lambda0: m-vector.
    :param Delta: m x m positive semidefinite matrix.
    :param Lambda: m x k matrix.
    :param cfg: CDF accuracy settings.
    :return: Probability.
    """
    lambda0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    if Lambda.shape[0] != lambda0.size:
        Lambda = Lambda.reshape(lambda0.size, -1)
    cov = np.atleast_2d(np.asarray(Delta, dtype=float)) + Lambda @ Lambda.T
    value, _ = mvn_cdf(GaussianCdfQuery(upper=lambda0, mean=np.zeros(lambda0.size), cov=cov), cfg)
    return value
