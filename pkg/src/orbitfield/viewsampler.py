"""Progressive pose sampling for orbit training.

Early iterations draw camera angles close to the anchor (frontal) direction;
as training proceeds the distribution widens until it is uniform over the
whole orbit.  The angular offset from the anchor center is a fraction in
[0, 1] drawn from a beta distribution whose shape parameters decay linearly
to (1, 1) — i.e. to uniform — at a configured iteration.  A fair sign bit per
axis mirrors the offset to both sides of the anchor center.

Two alternative schedules used for comparison experiments live here too: one
whose shape parameters swap endpoints instead of decaying, and a stepped
sampler that concentrates a fixed probability mass on one advancing interval
of the orbit.

All samplers are pure functions of (iteration, params, random draws): callers
supply the uniform variates and sign bits, so this module holds no RNG state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Nodes of the cumulative quadrature table used for CDF evaluation/inversion.
CDF_TABLE_NODES = 4097
# Bisection tolerance on the inverted offset fraction.
INVERT_TOL = 1e-8


@dataclass(frozen=True)
class AngleSchedule:
    """Parameters of the progressive angle-sampling schedule.

    alpha0/beta0 are the initial excesses of the two beta-distribution shape
    parameters over 1: the schedule starts at shapes (alpha0+1, beta0+1) and
    decays linearly to (1, 1) at iteration ``uniform_start``, after which
    sampling is uniform.  Angles are measured in degrees.
    """

    alpha0: float = 2.0
    beta0: float = 8.0
    t_total: int = 5000
    uniform_start: int | None = None  # default resolves to 0.3 * t_total
    anchor_center: tuple[float, float] = (90.0, 0.0)  # (theta, phi)
    theta_range: tuple[float, float] = (-90.0, 270.0)
    phi_range: tuple[float, float] = (-30.0, 45.0)

    def __post_init__(self):
        if self.alpha0 <= 0 or self.beta0 <= 0:
            raise ValueError("shape excesses must be positive")
        if self.t_total <= 0:
            raise ValueError("t_total must be positive")
        if self.uniform_start is None:
            object.__setattr__(self, "uniform_start", int(round(0.3 * self.t_total)))
        if not (0 < self.uniform_start <= self.t_total):
            raise ValueError("uniform_start must lie in (0, t_total]")
        for lo, hi in (self.theta_range, self.phi_range):
            if not lo < hi:
                raise ValueError("angle ranges must be nondegenerate")


def beta_pdf(x, a: float, b: float):
    """Beta(a, b) density on [0, 1]; needs a, b >= 1 (no endpoint poles)."""
    if a < 1.0 or b < 1.0:
        raise ValueError("shape parameters below 1 are outside this sampler's range")
    x = np.asarray(x, dtype=np.float64)
    log_norm = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    # 0**0 == 1 covers the uniform (a == b == 1) endpoints.
    return math.exp(log_norm) * np.power(x, a - 1.0) * np.power(1.0 - x, b - 1.0)


def shape_params(t: float, sched: AngleSchedule) -> tuple[float, float]:
    """Beta shape parameters at iteration t: linear decay to (1, 1).

    From iteration ``uniform_start`` on (inclusive) the shapes are (1, 1),
    i.e. the offset distribution is uniform.
    """
    if t >= sched.uniform_start:
        return 1.0, 1.0
    frac = t / sched.uniform_start
    return (sched.alpha0 + 1.0 - sched.alpha0 * frac,
            sched.beta0 + 1.0 - sched.beta0 * frac)


def swap_shape_params(t: float, sched: AngleSchedule) -> tuple[float, float]:
    """Comparison schedule: shapes trade places instead of decaying.

    Over [0, uniform_start] the first shape moves (alpha0+1) -> (beta0+1)
    and the second the reverse; strictly after that the distribution is
    uniform.
    """
    if t > sched.uniform_start:
        return 1.0, 1.0
    a_start, b_start = sched.alpha0 + 1.0, sched.beta0 + 1.0
    frac = t / sched.uniform_start
    return (a_start + (b_start - a_start) * frac,
            b_start + (a_start - b_start) * frac)


@lru_cache(maxsize=64)
def _offset_cdf_table(a: float, b: float):
    """Cumulative density of Beta(a, b) tabulated on an even grid.

    Even nodes carry composite-Simpson pair integrals; odd nodes use the
    quadratic through each pair's endpoints for the half-panel integral.
    """
    n = CDF_TABLE_NODES - 1
    xs = np.linspace(0.0, 1.0, CDF_TABLE_NODES)
    f = beta_pdf(xs, a, b)
    h = 1.0 / n
    cdf = np.empty(CDF_TABLE_NODES)
    cdf[0] = 0.0
    pair = (h / 3.0) * (f[0:-2:2] + 4.0 * f[1:-1:2] + f[2::2])
    cdf[2::2] = np.cumsum(pair)
    half = (h / 12.0) * (5.0 * f[0:-2:2] + 8.0 * f[1:-1:2] - f[2::2])
    cdf[1::2] = cdf[0:-2:2] + half
    cdf /= cdf[-1]
    np.maximum.accumulate(cdf, out=cdf)
    xs.setflags(write=False)
    cdf.setflags(write=False)
    return xs, cdf


def offset_pdf(x, t: float, sched: AngleSchedule, shape_fn=shape_params):
    """Density of the angular offset fraction at iteration t."""
    a, b = shape_fn(t, sched)
    return beta_pdf(x, a, b)


def offset_cdf(x, t: float, sched: AngleSchedule, shape_fn=shape_params):
    """Cumulative distribution of the offset fraction at iteration t."""
    a, b = shape_fn(t, sched)
    if (a, b) == (1.0, 1.0):
        return np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    xs, cdf = _offset_cdf_table(a, b)
    return np.interp(np.asarray(x, dtype=np.float64), xs, cdf)


def _invert_cdf(u, a: float, b: float):
    """Solve CDF(x) = u for x on [0, 1] by bisection to INVERT_TOL."""
    xs, cdf = _offset_cdf_table(a, b)
    u = np.asarray(u, dtype=np.float64)
    lo = np.zeros_like(u)
    hi = np.ones_like(u)
    for _ in range(int(math.ceil(math.log2(1.0 / INVERT_TOL)))):
        mid = 0.5 * (lo + hi)
        below = np.interp(mid, xs, cdf) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sample_offset(t: float, sched: AngleSchedule, u, shape_fn=shape_params):
    """Inverse-CDF draw of the offset fraction; u may be scalar or array."""
    a, b = shape_fn(t, sched)
    if (a, b) == (1.0, 1.0):
        return np.asarray(u, dtype=np.float64) + 0.0  # identity on uniform
    return _invert_cdf(u, a, b)


def _to_angles(x_theta, x_phi, sign_theta, sign_phi, sched: AngleSchedule):
    ct, cp = sched.anchor_center
    half_theta = 0.5 * (sched.theta_range[1] - sched.theta_range[0])
    half_phi = 0.5 * (sched.phi_range[1] - sched.phi_range[0])
    theta = np.clip(ct + np.asarray(sign_theta) * x_theta * half_theta,
                    sched.theta_range[0], sched.theta_range[1])
    phi = np.clip(cp + np.asarray(sign_phi) * x_phi * half_phi,
                  sched.phi_range[0], sched.phi_range[1])
    if theta.ndim == 0:
        return float(theta), float(phi)
    return theta, phi


def sample_angles(t: float, sched: AngleSchedule, u_theta, u_phi,
                  sign_theta=1.0, sign_phi=1.0):
    """Draw (theta, phi) for iteration t.

    Each axis turns its uniform variate into an offset fraction via the
    inverse CDF, scales it by half the global range, applies the caller's
    sign bit (+1/-1) and shifts from the anchor center; results clamp to the
    global ranges.
    """
    x_theta = sample_offset(t, sched, u_theta)
    x_phi = sample_offset(t, sched, u_phi)
    return _to_angles(x_theta, x_phi, sign_theta, sign_phi, sched)


def sample_angles_swapped(t: float, sched: AngleSchedule, u_theta, u_phi,
                          sign_theta=1.0, sign_phi=1.0):
    """Comparison sampler using the endpoint-swapping shape schedule."""
    x_theta = sample_offset(t, sched, u_theta, shape_fn=swap_shape_params)
    x_phi = sample_offset(t, sched, u_phi, shape_fn=swap_shape_params)
    return _to_angles(x_theta, x_phi, sign_theta, sign_phi, sched)


def sample_angles_stepped(t: float, sched: AngleSchedule, r: float,
                          n_intervals: int, u):
    """Comparison sampler: one advancing azimuth interval holds mass r.

    The global theta range splits into n_intervals equal intervals; the
    active one (index advancing stepwise with t across the range) carries
    probability r and the rest share 1-r evenly.  Sampling inverts the
    piecewise-constant CDF; elevation stays at the anchor center.
    """
    if not 0.0 < r < 1.0:
        raise ValueError("interval mass r must lie in (0, 1)")
    if n_intervals < 2:
        raise ValueError("need at least 2 intervals")
    tmin, tmax = sched.theta_range
    edges = np.linspace(tmin, tmax, n_intervals + 1)
    active = min(n_intervals - 1, int(n_intervals * t) // sched.t_total)
    masses = np.full(n_intervals, (1.0 - r) / (n_intervals - 1))
    masses[active] = r
    cum = np.concatenate(([0.0], np.cumsum(masses)))
    cum[-1] = 1.0
    u = np.asarray(u, dtype=np.float64)
    idx = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, n_intervals - 1)
    frac = (u - cum[idx]) / masses[idx]
    theta = edges[idx] + frac * (edges[idx + 1] - edges[idx])
    phi_center = sched.anchor_center[1]
    if theta.ndim == 0:
        return float(theta), phi_center
    return theta, np.full_like(theta, phi_center)


def in_anchor_box(theta, phi, bounds) -> bool | np.ndarray:
    """True iff (theta, phi) lies inside the closed bounds box.

    bounds = (theta_min, theta_max, phi_min, phi_max) in degrees.
    """
    tmin, tmax, pmin, pmax = bounds
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    inside = (theta >= tmin) & (theta <= tmax) & (phi >= pmin) & (phi <= pmax)
    if inside.ndim == 0:
        return bool(inside)
    return inside
