"""Synthetic panels with planted parameters, and the participation game.

A simulated subject draws a pre-intervention belief and a reference belief
from beta distributions, is randomized into treatment, moves their belief by
a treatment effect whose sign depends on whether the reference belief lies
above the location signal, and participates when a probit index in the
belief change plus a correlated error is positive.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .domain import Dataset, SubjectRecord, validate_dataset
from .numerics import RandomStream, std_normal_cdf

logger = logging.getLogger(__name__)

# non-participant response shares (codes 2..5) from the overall column of the
# attendance-item table: observer, counter-protester, elsewhere, absent
NONPARTICIPANT_CODE_SHARES = (0.0927, 0.0007, 0.0338, 0.7629)


class ClippingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PlantedTruth:
    theta: tuple
    alpha: float
    beta: float
    rho: float
    sigma_e: float
    gamma: tuple = ()
    gamma_names: tuple = ()

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError(f"|rho| must be < 1, got {self.rho}")
        if not self.sigma_e > 0:
            raise ValueError(f"sigma_e must be positive, got {self.sigma_e}")
        if len(self.theta) != 4:
            raise ValueError("theta needs four entries")
        if len(self.gamma) != len(self.gamma_names):
            raise ValueError("gamma and gamma_names differ in length")

    def as_dict(self) -> dict:
        return {
            "theta": list(self.theta),
            "alpha": self.alpha,
            "beta": self.beta,
            "rho": self.rho,
            "sigma_e": self.sigma_e,
            "gamma": dict(zip(self.gamma_names, self.gamma)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedTruth":
        g = d.get("gamma", {})
        return cls(tuple(d["theta"]), d["alpha"], d["beta"], d["rho"], d["sigma_e"],
                   tuple(g.values()), tuple(g.keys()))


@dataclass(frozen=True)
class LocationSpec:
    name: str
    share: float
    s: float


@dataclass(frozen=True)
class DateSpec:
    key: str
    share: float


@dataclass(frozen=True)
class SimConfig:
    """Full description of one synthetic sample.

    ``psi`` is ``"group"`` for the cell-mean model (treatment shifts the
    belief change by ``theta1`` below the signal and ``theta1 + theta3`` at or
    above it) or a callable giving the treatment effect as a function of
    ``s - b_ref``; it should be increasing and pass through the origin.

    ``belief_bounds`` decides how beliefs are kept inside [0, 1]:
    ``"condition_prior"`` draws the prior belief from its beta law truncated
    to the range that keeps the posterior inside [0, 1] (the belief change
    keeps its planted normal law); ``"clip"`` clips the posterior instead.
    """

    n: int
    locations: tuple
    enroll_dates: tuple
    treat_dates: tuple
    prior_belief_shapes: tuple
    ref_belief_shapes: tuple
    treat_prob: float
    truth: PlantedTruth
    seed: int = 0
    psi: Union[str, Callable] = "group"
    direct_effect: float = 0.0
    belief_bounds: str = "condition_prior"
    clip_warn_share: float = 0.05

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 < self.treat_prob < 1:
            raise ValueError("treat_prob must lie in (0, 1)")
        for shp in (self.prior_belief_shapes, self.ref_belief_shapes):
            if len(shp) != 2 or min(shp) <= 0:
                raise ValueError(f"beta shapes must be two positive numbers, got {shp}")
        if self.belief_bounds not in ("condition_prior", "clip"):
            raise ValueError("belief_bounds must be 'condition_prior' or 'clip'")

    def replace(self, **changes) -> "SimConfig":
        truth_changes = {k: changes.pop(k) for k in list(changes) if k in PlantedTruth.__dataclass_fields__}
        if truth_changes:
            changes["truth"] = dataclasses.replace(changes.get("truth", self.truth), **truth_changes)
        return dataclasses.replace(self, **changes)


@dataclass
class Population:
    dataset: Dataset
    truth: PlantedTruth
    clip_counts: dict = field(default_factory=dict)
    latent: dict = field(default_factory=dict, repr=False)


def _categorical(rng, specs, n) -> np.ndarray:
    shares = np.array([s.share for s in specs], dtype=float)
    idx = rng.choice(len(specs), size=n, p=shares / shares.sum())
    return idx


def generate_population(config: SimConfig) -> Population:
    cfg = config
    tr = cfg.truth
    rng = RandomStream(cfg.seed, 0).generator()
    n = cfg.n

    loc_idx = _categorical(rng, cfg.locations, n)
    location = np.array([cfg.locations[i].name for i in loc_idx], dtype=object)
    s = np.array([cfg.locations[i].s for i in loc_idx])
    enroll = np.array([cfg.enroll_dates[i].key for i in _categorical(rng, cfg.enroll_dates, n)], dtype=object)
    treat = np.array([cfg.treat_dates[i].key for i in _categorical(rng, cfg.treat_dates, n)], dtype=object)

    b_ref = rng.beta(*cfg.ref_belief_shapes, size=n)
    c = (b_ref >= s).astype(np.int8)
    z = (rng.random(n) < cfg.treat_prob).astype(np.int8)

    e = rng.normal(0.0, tr.sigma_e, size=n)
    t0, t1, t2, t3 = tr.theta
    if cfg.psi == "group":
        effect = t1 + t3 * c
    elif callable(cfg.psi):
        effect = np.asarray(cfg.psi(s - b_ref), dtype=float)
    else:
        raise ValueError(f"psi must be 'group' or a callable, got {cfg.psi!r}")
    delta_b = t0 + t2 * c + z * effect + e

    prior = stats.beta(*cfg.prior_belief_shapes)
    u_prior = rng.random(n)
    naive_prior = prior.ppf(u_prior)
    counts = {"n": n}
    if cfg.belief_bounds == "condition_prior":
        too_big = np.abs(delta_b) > 1.0
        delta_b = np.clip(delta_b, -1.0, 1.0)
        lo = np.maximum(0.0, -delta_b)
        hi = np.minimum(1.0, 1.0 - delta_b)
        Flo, Fhi = prior.cdf(lo), prior.cdf(hi)
        b_prior = prior.ppf(Flo + u_prior * (Fhi - Flo))
        b_prior = np.clip(b_prior, lo, hi)
        b_post = np.clip(b_prior + delta_b, 0.0, 1.0)
        delta_b = b_post - b_prior
        counts["prior_conditioned"] = int(np.sum((naive_prior < lo) | (naive_prior > hi)))
        counts["delta_clipped"] = int(too_big.sum())
        share = counts["delta_clipped"] / n
    else:
        b_prior = naive_prior
        raw = b_prior + delta_b
        counts["posterior_clipped"] = int(np.sum((raw < 0) | (raw > 1)))
        b_post = np.clip(raw, 0.0, 1.0)
        delta_b = b_post - b_prior
        share = counts["posterior_clipped"] / n
    if share > cfg.clip_warn_share:
        warnings.warn(f"{share:.1%} of belief draws were clipped to [0,1] ({counts})",
                      ClippingWarning, stacklevel=2)

    rho = tr.rho
    u = rho * e / tr.sigma_e + np.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    index = tr.alpha + tr.beta * delta_b + cfg.direct_effect * z
    for name, g in zip(tr.gamma_names, tr.gamma):
        key, level = name.split("=", 1)
        col = {"location": location, "enroll_date": enroll, "treat_date": treat}[key]
        index = index + g * (col == level)
    a = (index + u > 0).astype(np.int8)

    shares = np.asarray(NONPARTICIPANT_CODE_SHARES)
    other = rng.choice([2, 3, 4, 5], size=n, p=shares / shares.sum())
    code = np.where(a == 1, 1, other).astype(np.int8)

    width = max(5, len(str(n)))
    ds = Dataset(
        subject_id=np.array([f"S{i:0{width}d}" for i in range(1, n + 1)], dtype=object),
        location=location,
        enroll_date=enroll,
        treat_date=treat,
        b_prior=b_prior,
        b_post=b_post,
        b_ref=b_ref,
        z=z,
        a=a,
        raw_outcome_code=code,
        covariates=np.zeros((n, 0)),
        covariate_names=(),
        signals={l.name: l.s for l in sorted(cfg.locations, key=lambda l: l.name)},
        c=c,
        delta_b=delta_b,
    )
    from .domain import _summarize

    ds = dataclasses.replace(ds, summary=_summarize(location, c, z))
    return Population(ds, tr, counts, {"e": e, "u": u, "index": index})


def write_truth(truth: PlantedTruth, path, config: Optional[SimConfig] = None, extra: Optional[dict] = None) -> None:
    doc = {"truth": truth.as_dict()}
    if config is not None:
        doc["config"] = {
            "n": config.n,
            "seed": config.seed,
            "treat_prob": config.treat_prob,
            "prior_belief_shapes": list(config.prior_belief_shapes),
            "ref_belief_shapes": list(config.ref_belief_shapes),
            "direct_effect": config.direct_effect,
            "belief_bounds": config.belief_bounds,
            "psi": config.psi if isinstance(config.psi, str) else "custom",
        }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_truth(path) -> PlantedTruth:
    return PlantedTruth.from_dict(json.loads(Path(path).read_text())["truth"])


# ---------------------------------------------------------------------------
# participation game


@dataclass(frozen=True)
class EquilibriumResult:
    b_star: float
    iterations: int
    residual: float
    unique: bool
    fixed_points: tuple = ()


def _bisect(h: Callable, lo: float, hi: float, tol: float) -> tuple:
    hlo = h(lo)
    it = 0
    while True:
        it += 1
        mid = 0.5 * (lo + hi)
        hm = h(mid)
        if abs(hm) <= tol or hi - lo <= 4e-16:
            return mid, hm, it
        if (hm > 0) == (hlo > 0):
            lo, hlo = mid, hm
        else:
            hi = mid


def solve_equilibrium(alpha: float, beta: float, tol: float = 1e-12, grid: int = 2001) -> EquilibriumResult:
    """Fixed points of ``b -> Phi(alpha + beta b)`` on [0, 1].

    With ``beta < 0`` the map is decreasing, the fixed point is unique and
    found by bisection.  With ``beta > 0`` every sign change of the residual
    on a grid is bisected and all fixed points are returned; ``b_star`` is
    then the smallest one and ``unique`` says whether there is only one.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if beta == 0:
        b = float(std_normal_cdf(alpha))
        return EquilibriumResult(b, 0, 0.0, True, (b,))

    def h(b):
        return float(std_normal_cdf(alpha + beta * b)) - b

    if beta < 0:
        b, r, it = _bisect(h, 0.0, 1.0, tol)
        return EquilibriumResult(b, it, abs(r), True, (b,))

    xs = np.linspace(0.0, 1.0, grid)
    hs = std_normal_cdf(alpha + beta * xs) - xs
    roots, total = [], 0
    for i in range(grid - 1):
        if hs[i] == 0.0:
            roots.append((float(xs[i]), 0.0))
        elif hs[i] * hs[i + 1] < 0:
            b, r, it = _bisect(h, float(xs[i]), float(xs[i + 1]), tol)
            total += it
            roots.append((b, r))
    if hs[-1] == 0.0:
        roots.append((1.0, 0.0))
    bs = tuple(r[0] for r in roots)
    worst = max(abs(r[1]) for r in roots)
    return EquilibriumResult(bs[0], total, worst, len(bs) == 1, bs)


@dataclass(frozen=True)
class FreeRidingOffset:
    naive_response: float
    equilibrium_response: float
    offset_share: float
    b_old: float
    b_new: float


def free_riding_offset(alpha: float, alpha_shift: float, beta: float, tol: float = 1e-13) -> FreeRidingOffset:
    """How much of a shift in unconditional motivation survives in equilibrium.

    The naive response holds beliefs at the old equilibrium; the equilibrium
    response lets them adjust.  ``offset_share`` is the fraction of the naive
    response eaten up by the belief adjustment.
    """
    if beta >= 0:
        raise ValueError("free-riding offset needs beta < 0; for beta >= 0 the game can have "
                         "several equilibria, use solve_equilibrium and compare fixed points")
    if alpha_shift == 0:
        raise ValueError("alpha_shift must be non-zero")
    old = solve_equilibrium(alpha, beta, tol).b_star
    new = solve_equilibrium(alpha + alpha_shift, beta, tol).b_star
    naive = float(std_normal_cdf(alpha + alpha_shift + beta * old) - std_normal_cdf(alpha + beta * old))
    eq = new - old
    return FreeRidingOffset(naive, eq, 1.0 - eq / naive, old, new)
