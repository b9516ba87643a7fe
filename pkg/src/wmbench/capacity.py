"""Watermarking capacity: collision moments, failure/success probabilities,
the capacity bound, and a Monte Carlo check of the Gaussian approximation.

Code-space size |U| is carried as log2 so that 256-bit codes can be analysed;
simulation is limited to |U| <= 2^32.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .verifier import gaussian_cdf


class CapacityWarning(UserWarning):
    pass


class ApproximationError(ValueError):
    """sigma^2 < 0: the parameters sit outside the Gaussian approximation."""


@dataclass(frozen=True)
class CapacityParams:
    N: int
    C: int
    log2_U: float
    S_eps: int
    zeta: float = 0.95
    gamma: float = 0.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.C < 2:
            raise ValueError("C must be >= 2")
        if self.S_eps < 0 or (self.S_eps > 0 and math.log2(self.S_eps) > self.log2_U):
            raise ValueError("need 0 <= S(eps) <= |U|")
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")

    @property
    def U_size(self):
        return 2.0 ** self.log2_U

    @property
    def pair_probability(self):
        """Chance that one given pair of codes collides with differing labels."""
        return self.S_eps * (self.C - 1) / (self.U_size * self.C)

    @property
    def fail_threshold(self):
        return self.N * self.C / (self.C - 1)


def collision_moments(J, p):
    """``(mu(J), sigma^2(J))`` exactly as the binomial-to-Gaussian reduction writes them."""
    if J < 1:
        raise ValueError("J must be >= 1")
    q = p.pair_probability
    mu = J * p.N * p.N * q
    sigma2 = mu * (1.0 - J * p.N * q)
    if sigma2 < 0:
        warnings.warn(f"sigma^2 = {sigma2:.4g} < 0 at J={J}: outside approximation validity",
                      CapacityWarning, stacklevel=2)
    return mu, sigma2


def textbook_variance(J, p):
    """np(1-p) over the J*N*N pairs, for comparison with the verbatim sigma^2."""
    q = p.pair_probability
    return J * p.N * p.N * q * (1.0 - q)


def p_fail(J, p):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CapacityWarning)
        mu, sigma2 = collision_moments(J, p)
    if sigma2 < 0:
        raise ApproximationError(f"sigma^2 < 0 at J={J}")
    threshold = p.fail_threshold
    if sigma2 == 0:
        return 0.0 if mu < threshold else 1.0
    return gaussian_cdf((mu - threshold) / math.sqrt(sigma2))


def p_success(J, p):
    prod = 1.0
    for j in range(1, J + 1):
        prod *= 1.0 - p_fail(j, p)
    return prod


@dataclass
class CapacityRow:
    J: int
    mu: float
    sigma2: float
    p_fail: float
    p_success: float


@dataclass
class CapacityReport:
    params: CapacityParams
    rows: list
    J_star: float  # math.inf when collisions are impossible
    n_hat: int
    bound: float
    notes: list = field(default_factory=list)

    @property
    def keys_embeddable(self):
        return math.floor(self.bound) if math.isfinite(self.bound) else math.inf


def capacity_bound(p, n_hat, j_max=100_000):
    """Scan J upward until P_Success drops below zeta (it is non-increasing).

    The scan also stops where sigma^2 turns negative; J_star is then the last
    valid J and a note says so.
    """
    if n_hat < 0:
        raise ValueError("n_hat must be >= 0")
    notes = []
    if p.fail_threshold > p.N:
        notes.append(f"failure threshold NC/(C-1) = {p.fail_threshold:.4g} exceeds N = {p.N}; "
                     "the per-key failure event cannot occur literally")
    rows = []
    if p.S_eps == 0:
        J_star = math.inf
        notes.append("S(eps) = 0: no collisions, J_star unbounded")
    else:
        J_star = None
        prod = 1.0
        for J in range(1, j_max + 1):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CapacityWarning)
                mu, sigma2 = collision_moments(J, p)
            if sigma2 < 0:
                J_star = J - 1
                notes.append(f"sigma^2 < 0 from J={J}; scan stopped, J_star capped")
                break
            pf = p_fail(J, p)
            prod *= 1.0 - pf
            rows.append(CapacityRow(J, mu, sigma2, pf, prod))
            if prod < p.zeta:
                J_star = J - 1
                break
        if J_star is None:
            J_star = j_max
            notes.append(f"P_Success >= zeta up to j_max={j_max}; J_star capped")
    bound = min(n_hat / p.N, J_star)
    if n_hat < p.N:
        notes.append(f"n_hat = {n_hat} < N: no complete key fits")
    return CapacityReport(p, rows, J_star, n_hat, bound, notes)


# -- Monte Carlo ------------------------------------------------------------

def simulate_collisions(J, p, trials, seed):
    """Per-trial count of collisions between a new key's N codes and J*N
    established codes, on a 1-D torus of size |U|.

    Two codes collide when ``(b - a + S//2) mod |U| < S``, i.e. exactly S(eps)
    offsets, and independently their labels differ with probability (C-1)/C.
    Returns ``(mean, var, counts)``.
    """
    if p.log2_U > 32:
        raise ValueError("simulation needs |U| <= 2^32")
    if trials < 2:
        raise ValueError("trials must be >= 2")
    if trials < 1000:
        warnings.warn(f"{trials} trials gives a loose estimate", CapacityWarning, stacklevel=2)
    U = int(round(p.U_size))
    S = int(p.S_eps)
    rng = np.random.Generator(np.random.Philox(seed))
    if S == 0:
        counts = np.zeros(trials, dtype=np.int64)
        return 0.0, 0.0, counts
    counts = np.empty(trials, dtype=np.int64)
    chunk = max(1, 2_000_000 // (J * p.N + p.N))
    for start in range(0, trials, chunk):
        t = min(chunk, trials - start)
        est = np.sort(rng.integers(0, U, size=(t, J * p.N), dtype=np.int64), axis=1)
        new = rng.integers(0, U, size=(t, p.N), dtype=np.int64)
        # flatten trials onto one line so a single searchsorted serves all rows
        shift = (np.arange(t, dtype=np.int64) * U)[:, None]
        flat = (est + shift).ravel()
        lo = (new - S // 2) % U
        hi = lo + S
        def count(a, b):
            return np.searchsorted(flat, (b + shift).ravel()) - np.searchsorted(flat, (a + shift).ravel())
        n_hit = count(lo, np.minimum(hi, U)) + count(np.zeros_like(lo), np.maximum(hi - U, 0))
        differ = rng.binomial(n_hit, (p.C - 1) / p.C).reshape(t, p.N)
        counts[start:start + t] = differ.sum(axis=1)
    return float(counts.mean()), float(counts.var(ddof=1)), counts


# -- performance-limited capacity --------------------------------------------

def n_hat_sweep(pkg_builder, evaluate, gamma, batch=50, max_n=1000):
    """Inject ``batch, 2*batch, ...`` triggers until test accuracy drops below
    ``gamma``. ``pkg_builder(n)`` returns a watermarked model and
    ``evaluate(model)`` its test accuracy. Returns ``(n_hat, curve)``.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    n_hat, curve = 0, []
    for n in range(batch, max_n + 1, batch):
        acc = evaluate(pkg_builder(n))
        curve.append((n, acc))
        if acc < gamma:
            break
        n_hat = n
    return n_hat, curve


def measure_n_hat(pkg_builder, evaluate, gamma, batch=50, max_n=1000):
    return n_hat_sweep(pkg_builder, evaluate, gamma, batch, max_n)[0]


CSV_COLUMNS = ("J", "mu", "sigma2", "p_fail", "p_success", "empirical_mean", "empirical_var")


def write_csv(path, report, empirical=None, header=None):
    """One row per scanned J; ``empirical`` maps J to ``(mean, var)``."""
    empirical = empirical or {}
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            em, ev = empirical.get(r.J, ("", ""))
            w.writerow([r.J, repr(r.mu), repr(r.sigma2), repr(r.p_fail), repr(r.p_success), em, ev])
