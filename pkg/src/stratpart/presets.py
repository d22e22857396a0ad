"""Named calibrations of the synthetic data-generating process.

``paper2019`` reproduces the published German climate-protest panel as
closely as its summary tables allow.  Each constant below names the table
it was read from.
"""

from __future__ import annotations

from .simulator import DateSpec, LocationSpec, PlantedTruth, SimConfig


def paper2019(seed: int = 0, **overrides) -> SimConfig:
    locations = (
        # share: final-sample row of "Sample breakdown by location and survey";
        # s: "signal values (s)" row of the intervention-input table
        LocationSpec("Berlin", 0.3245, 0.325),
        LocationSpec("Hamburg", 0.2642, 0.367),
        LocationSpec("Munich", 0.1854, 0.367),
        LocationSpec("Cologne", 0.2258, 0.366),
    )
    # Only the day labels and their size ranking are published (CF-MLE table:
    # Sep 10 / Sep 18 largest, others sorted by size); the shares are
    # illustrative values consistent with that ranking.
    enroll_dates = (
        DateSpec("2019-09-10", 0.35),
        DateSpec("2019-09-09", 0.25),
        DateSpec("2019-09-11", 0.15),
        DateSpec("2019-09-07", 0.12),
        DateSpec("2019-09-06", 0.08),
        DateSpec("2019-09-08", 0.05),
    )
    treat_dates = (
        DateSpec("2019-09-18", 0.40),
        DateSpec("2019-09-17", 0.30),
        DateSpec("2019-09-16", 0.18),
        DateSpec("2019-09-19", 0.09),
        DateSpec("2019-09-20", 0.03),
    )
    # fixed-effect coefficients: CF-MLE participation table (Berlin, Sep 10,
    # Sep 18 are the reference cells; Sep 19/20 share one coefficient there)
    gamma = {
        "location=Hamburg": 0.1203,
        "location=Munich": 0.0827,
        "location=Cologne": 0.2485,
        "enroll_date=2019-09-09": -0.0110,
        "enroll_date=2019-09-11": 0.0650,
        "enroll_date=2019-09-07": -0.2655,
        "enroll_date=2019-09-06": -0.0052,
        "enroll_date=2019-09-08": -0.2767,
        "treat_date=2019-09-17": -0.0478,
        "treat_date=2019-09-16": -0.2168,
        "treat_date=2019-09-19": -0.1817,
        "treat_date=2019-09-20": -0.1817,
    }
    truth = PlantedTruth(
        # OLS belief-updating table
        theta=(0.0071, 0.0425, -0.0003, -0.0979),
        # CF-MLE table: alpha, beta, "Corr. of errors", "e-hat st. dev."
        alpha=-1.0855,
        beta=-3.3062,
        rho=0.4519,
        sigma_e=0.1375,
        gamma=tuple(gamma.values()),
        gamma_names=tuple(gamma.keys()),
    )
    cfg = SimConfig(
        n=1510,  # final sample size
        locations=locations,
        enroll_dates=enroll_dates,
        treat_dates=treat_dates,
        # ML beta fit in the pre-intervention belief table notes
        prior_belief_shapes=(0.9805, 2.8988),
        # method of moments on "Mean of b~" .3324 +- .2317 (overall column)
        ref_belief_shapes=(1.0416, 2.0920),
        # "target treatment assignment probability was two over three"
        treat_prob=2.0 / 3.0,
        truth=truth,
        seed=seed,
    )
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {"paper2019": paper2019}


def get_preset(name: str, seed: int = 0, **overrides) -> SimConfig:
    try:
        return PRESETS[name](seed, **overrides)
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
