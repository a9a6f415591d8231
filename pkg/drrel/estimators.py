"""
Closed-form relevance estimators over the interactions of one
query-document pair, their analytic bias/variance and the oracles that
check them.

An interaction set is a sequence of ``(position, click)`` pairs; positions
are 1-based and may repeat. Estimates are returned raw (they may leave
[0, 1]); use :func:`clamp_estimate` before ranking on them.
"""
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from drrel.click_sim import ClickModelParams, SessionLog, examination_posterior
from drrel.exceptions import (AlignmentError, CoverageError, DomainError, EmptyDataError,
                              PropensityError)
from drrel.log import logger
from drrel.mixins import ToDictMixin

KINDS = ('naive', 'ipw', 'affine', 'dr')
MAX_EXACT_INTERACTIONS = 12
THETA_FLOOR = 1e-6

PositionEstimator = Callable[[np.ndarray, np.ndarray], float]


@dataclass(frozen=True)
class RelevanceEstimate(ToDictMixin):
    value: float
    kind: str
    count: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError('unknown estimator kind {!r}'.format(self.kind))
        if self.count < 0:
            raise DomainError('interaction count must be nonnegative')


def clamp_estimate(estimate: RelevanceEstimate, low=0.0, high=1.0) -> RelevanceEstimate:
    return replace(estimate, value=float(min(high, max(low, estimate.value))))


def _vector(name, values, size):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.shape == (1,) and size > 1:
        arr = np.repeat(arr, size)
    if arr.shape != (size,):
        raise DomainError('{} must have {} entries'.format(name, size))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EstimatorParams(ToDictMixin):
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    theta_hat: np.ndarray
    eps_plus_hat: np.ndarray
    eps_minus_hat: np.ndarray

    def __post_init__(self):
        size = np.atleast_1d(np.asarray(self.alpha_hat)).size
        for name in ('alpha_hat', 'beta_hat', 'theta_hat', 'eps_plus_hat', 'eps_minus_hat'):
            object.__setattr__(self, name, _vector(name, getattr(self, name), size))
        for name in ('alpha_hat', 'theta_hat'):
            arr = getattr(self, name)
            if np.any(arr <= 0.0) or np.any(arr > 1.0):
                raise DomainError('{} entries must lie in (0, 1]'.format(name))
        for name in ('beta_hat', 'eps_plus_hat', 'eps_minus_hat'):
            arr = getattr(self, name)
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise DomainError('{} entries must lie in [0, 1]'.format(name))

    @property
    def num_positions(self) -> int:
        return int(self.alpha_hat.size)

    @property
    def eps_gap_hat(self) -> np.ndarray:
        return self.eps_plus_hat - self.eps_minus_hat

    @classmethod
    def from_click_model(cls, params: ClickModelParams, misspecification=None) -> "EstimatorParams":
        """
        Estimator-side parameters from the true ones, each scaled by its
        multiplicative knob in ``misspecification`` (1.0 = matched) and
        clipped back into its valid range.
        """
        knobs = dict(misspecification or {})
        scale = lambda name: float(knobs.get(name, 1.0))
        return cls(
            alpha_hat=np.clip(params.alpha * scale('alpha'), THETA_FLOOR, 1.0),
            beta_hat=np.clip(params.beta * scale('beta'), 0.0, 1.0),
            theta_hat=np.clip(params.theta * scale('theta'), THETA_FLOOR, 1.0),
            eps_plus_hat=np.clip(params.eps_plus * scale('eps_plus'), 0.0, 1.0),
            eps_minus_hat=np.clip(params.eps_minus * scale('eps_minus'), 0.0, 1.0),
        )


def _unpack(data, num_positions=None) -> Tuple[np.ndarray, np.ndarray]:
    pairs = np.asarray(list(data), dtype=float).reshape(-1, 2)
    positions = pairs[:, 0].astype(int)
    clicks = pairs[:, 1]
    if np.any(positions < 1) or (num_positions is not None and np.any(positions > num_positions)):
        raise DomainError('positions must lie in 1..{}'.format(num_positions))
    if np.any((clicks != 0.0) & (clicks != 1.0)):
        raise DomainError('clicks must be 0 or 1')
    return positions, clicks


def _conditional_e(e_hat, size) -> np.ndarray:
    """(size, 2) array of (e | c=0, e | c=1); a plain vector is click-independent."""
    arr = np.asarray(e_hat, dtype=float)
    if arr.ndim == 1:
        arr = np.stack([arr, arr], axis=1)
    if arr.shape != (size, 2):
        raise AlignmentError('got {} examination estimates for {} interactions'.format(len(arr), size))
    return arr


def naive_ctr(data) -> RelevanceEstimate:
    _, clicks = _unpack(data)
    if clicks.size == 0:
        raise EmptyDataError('naive CTR over zero interactions')
    return RelevanceEstimate(float(clicks.mean()), 'naive', int(clicks.size))


def ipw_estimate(data, theta_hat) -> RelevanceEstimate:
    if isinstance(theta_hat, EstimatorParams):
        theta_hat = theta_hat.theta_hat
    theta_hat = np.asarray(theta_hat, dtype=float)
    positions, clicks = _unpack(data, theta_hat.size)
    if clicks.size == 0:
        raise EmptyDataError('IPW estimate over zero interactions')
    propensity = theta_hat[positions - 1]
    if np.any(propensity <= 0.0):
        raise PropensityError('zero examination propensity at position(s) {}'.format(
            sorted(set(positions[propensity <= 0.0].tolist()))))
    return RelevanceEstimate(float(np.mean(clicks / propensity)), 'ipw', int(clicks.size))


def affine_estimate(data, params: EstimatorParams) -> RelevanceEstimate:
    positions, clicks = _unpack(data, params.num_positions)
    if clicks.size == 0:
        raise EmptyDataError('affine estimate over zero interactions')
    idx = positions - 1
    value = np.mean((clicks - params.beta_hat[idx]) / params.alpha_hat[idx])
    return RelevanceEstimate(float(value), 'affine', int(clicks.size))


def dr_estimate(data, params: EstimatorParams, gamma_imp, e_hat) -> RelevanceEstimate:
    """
    Doubly robust estimate: the affine estimate plus the imputed relevance
    weighted by how much examination mass the clicks leave unexplained.

    ``e_hat`` holds one examination estimate per interaction, either a
    number or an ``(e | c=0, e | c=1)`` pair. With no interactions the
    estimate falls back to ``gamma_imp``.
    """
    positions, clicks = _unpack(data, params.num_positions)
    e_pairs = _conditional_e(e_hat, clicks.size)
    if clicks.size == 0:
        return RelevanceEstimate(float(gamma_imp), 'dr', 0)
    idx = positions - 1
    e = np.where(clicks == 1.0, e_pairs[:, 1], e_pairs[:, 0])
    alpha_hat = params.alpha_hat[idx]
    alpha_tilde = e * params.eps_gap_hat[idx]
    terms = (alpha_hat - alpha_tilde) / alpha_hat * gamma_imp + (clicks - params.beta_hat[idx]) / alpha_hat
    return RelevanceEstimate(float(np.mean(terms)), 'dr', int(clicks.size))


def _click_prob(true: ClickModelParams, idx, gamma):
    return true.alpha[idx] * gamma + true.beta[idx]


def affine_bias_variance(positions: Sequence[int], true: ClickModelParams, est: EstimatorParams,
                         gamma: float, gamma_aff_hat: Optional[float] = None) -> Tuple[float, float]:
    """
    Analytic bias and variance of the affine estimator.

    The variance formula contains the realized click; it is evaluated in
    expectation over c in {0, 1}. ``gamma_aff_hat`` defaults to the
    estimator's expectation.
    """
    idx = np.asarray(positions, dtype=int) - 1
    if idx.size == 0:
        raise EmptyDataError('affine bias over zero interactions')
    alpha_hat, beta_hat = est.alpha_hat[idx], est.beta_hat[idx]
    d_alpha = true.alpha[idx] - alpha_hat
    d_beta = true.beta[idx] - beta_hat
    bias = float(np.mean((d_alpha * gamma + d_beta) / alpha_hat))
    if gamma_aff_hat is None:
        gamma_aff_hat = gamma + bias
    p = _click_prob(true, idx, gamma)
    centre = alpha_hat * gamma_aff_hat + beta_hat
    spread = p * (centre - 1.0) ** 2 + (1.0 - p) * centre ** 2
    return bias, float(np.mean(spread / alpha_hat ** 2))


def dr_bias_variance(positions: Sequence[int], true: ClickModelParams, est: EstimatorParams,
                     gamma: float, gamma_imp: float, e_hat, clicks: Optional[Sequence[int]] = None,
                     gamma_dr_hat: Optional[float] = None) -> Tuple[float, float, np.ndarray]:
    """
    Analytic bias, variance and per-interaction delta terms of the doubly
    robust estimator.

    ``e_hat`` is per interaction, a number or an ``(e | c=0, e | c=1)`` pair.
    Without ``clicks`` the variance and deltas are expectations over the
    click of each interaction; with ``clicks`` they are evaluated at the
    realized pattern. ``gamma_dr_hat`` defaults to the estimator's
    expectation, or its realized value when ``clicks`` are given.
    """
    idx = np.asarray(positions, dtype=int) - 1
    if idx.size == 0:
        raise EmptyDataError('doubly robust bias over zero interactions')
    e_pairs = _conditional_e(e_hat, idx.size)
    alpha_hat, beta_hat = est.alpha_hat[idx], est.beta_hat[idx]
    gap = est.eps_gap_hat[idx]
    p = _click_prob(true, idx, gamma)
    tilde = e_pairs * gap[:, None]  # column c holds alpha-tilde given click c
    expected_tilde = (1.0 - p) * tilde[:, 0] + p * tilde[:, 1]

    d_alpha = true.alpha[idx] - alpha_hat
    d_beta = true.beta[idx] - beta_hat
    d_tilde = expected_tilde - alpha_hat
    bias = float(np.mean((d_alpha * gamma + d_beta - d_tilde * gamma_imp) / alpha_hat))

    def spread(c, alpha_tilde, gamma_dr):
        main = (alpha_tilde * gamma_imp + beta_hat - c) ** 2 / alpha_hat ** 2
        delta = ((gamma_dr - gamma_imp)
                 * (alpha_hat * gamma_dr + (2.0 * alpha_tilde - alpha_hat) * gamma_imp + 2.0 * beta_hat - 2.0 * c)
                 / alpha_hat)
        return main, delta

    if clicks is not None:
        c = np.asarray(clicks, dtype=float)
        if c.shape != idx.shape:
            raise AlignmentError('got {} clicks for {} interactions'.format(c.size, idx.size))
        alpha_tilde = np.where(c == 1.0, tilde[:, 1], tilde[:, 0])
        if gamma_dr_hat is None:
            gamma_dr_hat = float(np.mean((alpha_hat - alpha_tilde) / alpha_hat * gamma_imp
                                         + (c - beta_hat) / alpha_hat))
        main, delta = spread(c, alpha_tilde, gamma_dr_hat)
    else:
        if gamma_dr_hat is None:
            gamma_dr_hat = gamma + bias
        main0, delta0 = spread(0.0, tilde[:, 0], gamma_dr_hat)
        main1, delta1 = spread(1.0, tilde[:, 1], gamma_dr_hat)
        main = (1.0 - p) * main0 + p * main1
        delta = (1.0 - p) * delta0 + p * delta1
    return bias, float(np.mean(main + delta)), delta


def ipw_bias(positions: Sequence[int], true: ClickModelParams, theta_hat, gamma: float) -> float:
    """IPW is the affine estimator with alpha-hat = theta-hat and beta-hat = 0."""
    idx = np.asarray(positions, dtype=int) - 1
    if idx.size == 0:
        raise EmptyDataError('IPW bias over zero interactions')
    theta_hat = np.asarray(theta_hat, dtype=float)[idx]
    return float(np.mean(((true.alpha[idx] - theta_hat) * gamma + true.beta[idx]) / theta_hat))


def naive_estimator() -> PositionEstimator:
    return lambda positions, clicks: float(np.mean(clicks))


def ipw_estimator(theta_hat) -> PositionEstimator:
    theta_hat = np.asarray(theta_hat, dtype=float)
    return lambda positions, clicks: float(np.mean(clicks / theta_hat[positions - 1]))


def affine_estimator(est: EstimatorParams) -> PositionEstimator:
    def estimator(positions, clicks):
        idx = positions - 1
        return float(np.mean((clicks - est.beta_hat[idx]) / est.alpha_hat[idx]))
    return estimator


def dr_estimator(est: EstimatorParams, gamma_imp: float, e_hat) -> PositionEstimator:
    """``e_hat`` is aligned with the positions the estimator will be called on."""
    def estimator(positions, clicks):
        e_pairs = _conditional_e(e_hat, len(positions))
        if len(positions) == 0:
            return float(gamma_imp)
        idx = positions - 1
        e = np.where(clicks == 1.0, e_pairs[:, 1], e_pairs[:, 0])
        alpha_hat = est.alpha_hat[idx]
        terms = ((alpha_hat - e * est.eps_gap_hat[idx]) / alpha_hat * gamma_imp
                 + (clicks - est.beta_hat[idx]) / alpha_hat)
        return float(np.mean(terms))
    return estimator


def oracle_e_hat(true: ClickModelParams, positions: Sequence[int], gamma: float) -> np.ndarray:
    """True examination posterior per interaction, shape (D, 2)."""
    return np.array([examination_posterior(true, int(k), gamma) for k in positions], dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class BiasVarianceReport(ToDictMixin):
    analytic_bias: float
    analytic_variance: float
    empirical_bias: float
    empirical_variance: float
    mc_standard_error: float
    irreducible_sigma2: float = 0.0
    exact_bias: float = float('nan')
    exact_variance: float = float('nan')
    replications: int = 0
    interactions: int = 0


def exact_moments(estimator: PositionEstimator, true: ClickModelParams, gamma: float,
                  positions: Sequence[int]) -> Tuple[float, float]:
    """Exact mean and variance of an estimator by enumerating every click pattern."""
    positions = np.asarray(positions, dtype=int)
    if positions.size > MAX_EXACT_INTERACTIONS:
        raise DomainError('exact enumeration is limited to {} interactions'.format(MAX_EXACT_INTERACTIONS))
    p = _click_prob(true, positions - 1, gamma)
    probs, values = [], []
    for pattern in itertools.product((0.0, 1.0), repeat=positions.size):
        clicks = np.array(pattern, dtype=float)
        probs.append(float(np.prod(np.where(clicks == 1.0, p, 1.0 - p))))
        values.append(estimator(positions, clicks))
    mean = math.fsum(w * v for w, v in zip(probs, values))
    variance = math.fsum(w * (v - mean) ** 2 for w, v in zip(probs, values))
    return mean, variance


def _mc_chunk(estimator, true, gamma, positions, replications, seed_seq):
    rng = np.random.default_rng(seed_seq)
    p = _click_prob(true, positions - 1, gamma)
    clicks = (rng.random((replications, positions.size)) < p).astype(float)
    values = np.array([estimator(positions, row) for row in clicks], dtype=float)
    # centred on the first draw so a constant estimator has exactly zero spread
    shifted = values - values[0]
    variance = float(shifted.var(ddof=1)) if replications > 1 else 0.0
    return BiasVarianceReport(
        analytic_bias=float('nan'), analytic_variance=float('nan'),
        empirical_bias=float(values[0] - gamma + shifted.mean()), empirical_variance=variance,
        mc_standard_error=math.sqrt(variance / replications),
        replications=replications, interactions=int(positions.size))


def pool_reports(reports: Sequence[BiasVarianceReport]) -> BiasVarianceReport:
    """Merge Monte Carlo chunks by count-weighted pooling of mean and variance."""
    reports = [r for r in reports if r.replications > 0]
    if not reports:
        raise EmptyDataError('nothing to pool')
    n = sum(r.replications for r in reports)
    ref = reports[0].empirical_bias
    offset = math.fsum(r.replications * (r.empirical_bias - ref) for r in reports) / n
    bias = ref + offset
    within = math.fsum((r.replications - 1) * r.empirical_variance for r in reports)
    between = math.fsum(r.replications * (r.empirical_bias - ref - offset) ** 2 for r in reports)
    variance = (within + between) / (n - 1) if n > 1 else 0.0
    return replace(reports[0], empirical_bias=bias, empirical_variance=variance,
                   mc_standard_error=math.sqrt(variance / n), replications=n)


def mc_bias_variance(estimator: PositionEstimator, true: ClickModelParams, gamma: float,
                     positions: Sequence[int], replications: int, seed, analytic=None,
                     chunks=1, jobs=1) -> BiasVarianceReport:
    """
    Monte Carlo bias/variance of ``estimator(positions, clicks)`` under the
    true click model, with exact enumeration added for small interaction sets.

    Replications are split into ``chunks`` with independent RNG streams and
    pooled; ``jobs`` only controls how many chunks run at once.
    """
    if replications < 2:
        raise DomainError('at least two replications are required')
    positions = np.asarray(positions, dtype=int)
    if positions.size:
        true.check_position(int(positions.max()))
    chunks = max(1, min(int(chunks), replications))
    sizes = [len(part) for part in np.array_split(np.arange(replications), chunks)]
    streams = np.random.SeedSequence(seed).spawn(chunks)
    run = lambda i: _mc_chunk(estimator, true, gamma, positions, sizes[i], streams[i])
    if jobs > 1 and chunks > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, range(chunks)))
    else:
        parts = [run(i) for i in range(chunks)]
    report = pool_reports(parts)
    if positions.size <= MAX_EXACT_INTERACTIONS:
        mean, variance = exact_moments(estimator, true, gamma, positions)
        report = replace(report, exact_bias=mean - gamma, exact_variance=variance)
    if analytic is not None:
        report = replace(report, analytic_bias=float(analytic[0]), analytic_variance=float(analytic[1]))
    return report


def estimate_theta_from_randomized_logs(sessions: Iterable[SessionLog], num_positions=None) -> np.ndarray:
    """
    Propensities from sessions ranked by a uniform shuffle:
    theta-hat_k = CTR(k) / CTR(1), clipped to (0, 1].
    """
    impressions, clicks = {}, {}
    for session in sessions:
        for inter in session.interactions:
            impressions[inter.position] = impressions.get(inter.position, 0) + 1
            clicks[inter.position] = clicks.get(inter.position, 0) + inter.clicked
    if num_positions is None:
        num_positions = max(impressions) if impressions else 0
    if num_positions < 1:
        raise CoverageError('no impressions in the randomized sessions')
    imps = np.array([impressions.get(k, 0) for k in range(1, num_positions + 1)], dtype=float)
    clks = np.array([clicks.get(k, 0) for k in range(1, num_positions + 1)], dtype=float)
    missing = [k + 1 for k in np.flatnonzero(imps == 0)]
    if missing:
        raise CoverageError('no impressions at position(s) {}'.format(missing))
    if clks[0] == 0:
        raise CoverageError('no clicks at position 1, propensity ratios are undefined')
    ctr = clks / imps
    theta_hat = np.clip(ctr / ctr[0], THETA_FLOOR, 1.0)
    logger.debug('propensities from randomized sessions', theta_hat=theta_hat, impressions=imps)
    return theta_hat


def group_interactions(sessions: Iterable[SessionLog]):
    """(query_id, doc_id) -> list of (position, click, e_hat) over all sessions."""
    grouped = {}
    for session in sessions:
        for inter in session.interactions:
            grouped.setdefault((inter.query_id, inter.doc_id), []).append(
                (inter.position, inter.clicked, inter.e_hat))
    return grouped
