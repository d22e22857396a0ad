"""Panel records, location signals and the derived analysis dataset.

The :class:`Dataset` is columnar: every field lives in a numpy array so that
estimators and resampling never loop over Python objects.  Records are
still available one at a time through :meth:`Dataset.record`.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

CLUSTER_KEYS = ("location", "enroll_date", "treat_date")
REQUIRED_COLUMNS = (
    "subject_id",
    "location",
    "enroll_date",
    "treat_date",
    "b_prior",
    "b_post",
    "b_ref",
    "z",
)
COVARIATE_PREFIX = "x_"


class ValidationError(ValueError):
    """Raised with one diagnostic line per offending record."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        head = "; ".join(self.problems[:10])
        more = f" (+{len(self.problems) - 10} more)" if len(self.problems) > 10 else ""
        super().__init__(f"{len(self.problems)} validation problem(s): {head}{more}")


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    location: str
    enroll_date: str
    treat_date: str
    b_prior: float
    b_post: float
    b_ref: float
    z: int
    a: int
    raw_outcome_code: Optional[int] = None
    covariates: tuple = ()


@dataclass(frozen=True)
class LocationSignal:
    location: str
    s: float

    def __post_init__(self):
        if not (0.0 <= self.s <= 1.0):
            raise ValueError(f"signal for {self.location!r} outside [0,1]: {self.s}")


def derive_outcome(raw_outcome_code: int, subject_id: Optional[str] = None) -> int:
    """Participation indicator from the five-point attendance item.

    Only "attended as a participant" (code 1) counts; observers,
    counter-demonstrators and people at another event are non-participants.
    """
    if isinstance(raw_outcome_code, bool) or int(raw_outcome_code) != raw_outcome_code:
        raise ValidationError([f"{subject_id or '?'}: outcome code {raw_outcome_code!r} is not an integer"])
    code = int(raw_outcome_code)
    if not 1 <= code <= 5:
        raise ValidationError([f"{subject_id or '?'}: outcome code {code} outside 1..5"])
    return int(code == 1)


def compute_signal(intent_codes: Iterable[int], location: str) -> LocationSignal:
    """Share of intention responses that are "yes" (1) or "rather yes" (2)."""
    codes = np.asarray(list(intent_codes))
    if codes.size == 0:
        raise ValueError(f"no intention responses for location {location!r}")
    if not np.all(np.isin(codes, (1, 2, 3, 4))):
        bad = sorted(set(codes[~np.isin(codes, (1, 2, 3, 4))].tolist()))
        raise ValueError(f"intention codes outside 1..4 for {location!r}: {bad}")
    return LocationSignal(location, float(np.isin(codes, (1, 2)).mean()))


def signal_from_shares(shares: Sequence[float], location: str) -> LocationSignal:
    """Signal from reported response shares of the four intention codes."""
    shares = np.asarray(shares, dtype=float)
    if shares.shape != (4,) or np.any(shares < 0):
        raise ValueError("need four non-negative response shares")
    return LocationSignal(location, float(shares[:2].sum() / shares.sum()))


def derive_condition(b_ref: float, s: float) -> int:
    """1 for the "above group" (reference belief at or above the signal)."""
    for name, v in (("b_ref", b_ref), ("s", s)):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name}={v} outside [0,1]")
    return int(b_ref >= s)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Validated analysis sample with derived condition and belief change."""

    subject_id: np.ndarray
    location: np.ndarray
    enroll_date: np.ndarray
    treat_date: np.ndarray
    b_prior: np.ndarray
    b_post: np.ndarray
    b_ref: np.ndarray
    z: np.ndarray
    a: np.ndarray
    raw_outcome_code: np.ndarray  # 0 where absent
    covariates: np.ndarray  # (n, k)
    covariate_names: tuple
    signals: Mapping[str, float]
    c: np.ndarray
    delta_b: np.ndarray
    summary: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return int(self.a.size)

    def __len__(self):
        return self.n

    def record(self, i: int) -> SubjectRecord:
        code = int(self.raw_outcome_code[i])
        return SubjectRecord(
            subject_id=str(self.subject_id[i]),
            location=str(self.location[i]),
            enroll_date=str(self.enroll_date[i]),
            treat_date=str(self.treat_date[i]),
            b_prior=float(self.b_prior[i]),
            b_post=float(self.b_post[i]),
            b_ref=float(self.b_ref[i]),
            z=int(self.z[i]),
            a=int(self.a[i]),
            raw_outcome_code=code or None,
            covariates=tuple(float(v) for v in self.covariates[i]),
        )

    @property
    def records(self) -> list:
        return [self.record(i) for i in range(self.n)]

    def column(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def cluster_ids(self, keys: Sequence[str] = CLUSTER_KEYS) -> np.ndarray:
        """Integer cluster label per record for the crossing of ``keys``."""
        if not keys:
            return np.arange(self.n)
        cols = [np.asarray(self.column(k)).astype(str) for k in keys]
        joined = np.array(["\x1f".join(t) for t in zip(*cols)])
        _, ids = np.unique(joined, return_inverse=True)
        return ids

    def take(self, idx) -> "Dataset":
        """Row subset or resample.  Duplicate rows are allowed here, which is
        what bootstrap resampling needs; derived columns are carried over."""
        idx = np.asarray(idx)
        return Dataset(
            subject_id=self.subject_id[idx],
            location=self.location[idx],
            enroll_date=self.enroll_date[idx],
            treat_date=self.treat_date[idx],
            b_prior=self.b_prior[idx],
            b_post=self.b_post[idx],
            b_ref=self.b_ref[idx],
            z=self.z[idx],
            a=self.a[idx],
            raw_outcome_code=self.raw_outcome_code[idx],
            covariates=self.covariates[idx],
            covariate_names=self.covariate_names,
            signals=self.signals,
            c=self.c[idx],
            delta_b=self.delta_b[idx],
        )

    def replace_outcome(self, a) -> "Dataset":
        a = np.asarray(a, dtype=np.int8)
        return Dataset(**{**self._fields(), "a": a, "raw_outcome_code": np.zeros_like(self.raw_outcome_code)})

    def _fields(self) -> dict:
        return {
            k: getattr(self, k)
            for k in (
                "subject_id location enroll_date treat_date b_prior b_post b_ref z a "
                "raw_outcome_code covariates covariate_names signals c delta_b"
            ).split()
        }


def _summarize(location, c, z) -> dict:
    by_loc = Counter(location.tolist())
    cells = Counter(zip(location.tolist(), c.tolist(), z.tolist()))
    return {
        "n": int(location.size),
        "by_location": dict(sorted(by_loc.items())),
        "by_condition": {"below": int((c == 0).sum()), "above": int((c == 1).sum())},
        "by_treatment": {"control": int((z == 0).sum()), "treated": int((z == 1).sum())},
        "cells": {f"{l}|c={ci}|z={zi}": k for (l, ci, zi), k in sorted(cells.items())},
    }


def validate_dataset(
    records: Iterable[SubjectRecord],
    signals: Iterable[LocationSignal] | Mapping[str, float],
) -> Dataset:
    """Check every record and build the analysis dataset.

    All problems are collected before raising, so one call reports every
    bad row.  The summary counts by location, condition and treatment are
    attached as ``Dataset.summary``.
    """
    records = list(records)
    if isinstance(signals, Mapping):
        sig = {str(k): float(v) for k, v in signals.items()}
    else:
        sig = {}
        for s in signals:
            if s.location in sig:
                raise ValidationError([f"duplicate signal for location {s.location!r}"])
            sig[s.location] = float(s.s)
    problems = []
    for loc, s in sig.items():
        if not 0.0 <= s <= 1.0:
            problems.append(f"signal {loc!r}: s={s} outside [0,1]")

    seen = set()
    k = None
    for r in records:
        sid = r.subject_id
        if sid in seen:
            problems.append(f"{sid}: duplicate subject_id")
        seen.add(sid)
        for name in ("b_prior", "b_post", "b_ref"):
            v = getattr(r, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
                problems.append(f"{sid}: {name}={v} outside [0,1]")
        if r.z not in (0, 1):
            problems.append(f"{sid}: z={r.z} not binary")
        if r.a not in (0, 1):
            problems.append(f"{sid}: a={r.a} not binary")
        if r.raw_outcome_code is not None:
            if r.raw_outcome_code not in (1, 2, 3, 4, 5):
                problems.append(f"{sid}: raw_outcome_code={r.raw_outcome_code} outside 1..5")
            elif (r.raw_outcome_code == 1) != (r.a == 1):
                problems.append(f"{sid}: a={r.a} inconsistent with raw_outcome_code={r.raw_outcome_code}")
        if r.location not in sig:
            problems.append(f"{sid}: no signal for location {r.location!r}")
        if k is None:
            k = len(r.covariates)
        elif len(r.covariates) != k:
            problems.append(f"{sid}: expected {k} covariates, got {len(r.covariates)}")
    if problems:
        raise ValidationError(problems)

    n = len(records)
    k = k or 0
    location = np.array([r.location for r in records], dtype=object)
    b_prior = np.array([r.b_prior for r in records], dtype=float)
    b_post = np.array([r.b_post for r in records], dtype=float)
    b_ref = np.array([r.b_ref for r in records], dtype=float)
    z = np.array([r.z for r in records], dtype=np.int8)
    s_vec = np.array([sig[l] for l in location], dtype=float)
    c = (b_ref >= s_vec).astype(np.int8)
    cov = np.array([r.covariates for r in records], dtype=float).reshape(n, k)
    return Dataset(
        subject_id=np.array([str(r.subject_id) for r in records], dtype=object),
        location=location,
        enroll_date=np.array([str(r.enroll_date) for r in records], dtype=object),
        treat_date=np.array([str(r.treat_date) for r in records], dtype=object),
        b_prior=b_prior,
        b_post=b_post,
        b_ref=b_ref,
        z=z,
        a=np.array([r.a for r in records], dtype=np.int8),
        raw_outcome_code=np.array([r.raw_outcome_code or 0 for r in records], dtype=np.int8),
        covariates=cov,
        covariate_names=tuple(f"x{j}" for j in range(k)),
        signals=dict(sorted(sig.items())),
        c=c,
        delta_b=b_post - b_prior,
        summary=_summarize(location, c, z),
    )


def with_covariate_names(ds: Dataset, names: Sequence[str]) -> Dataset:
    if len(names) != ds.covariates.shape[1]:
        raise ValueError("covariate name count does not match")
    return Dataset(**{**ds._fields(), "covariate_names": tuple(names), "summary": ds.summary})


# ---------------------------------------------------------------------------
# CSV


def _scale_belief(raw: str, scale: str, sid: str, col: str, problems: list) -> float:
    try:
        v = float(raw)
    except ValueError:
        problems.append(f"{sid}: {col}={raw!r} is not a number")
        return float("nan")
    if scale == "percent":
        return v / 100.0
    if scale == "unit":
        return v
    raise ValueError(f"belief scale must be 'percent' or 'unit', got {scale!r}")


def read_records_csv(path, belief_scale: str = "unit") -> tuple:
    """Parse the panel CSV.  Returns ``(records, covariate_names)``.

    ``belief_scale`` is mandatory knowledge about the file: ``"percent"``
    divides the three belief columns by 100, ``"unit"`` takes them as is.
    """
    if belief_scale not in ("percent", "unit"):
        raise ValueError(f"belief scale must be 'percent' or 'unit', got {belief_scale!r}")
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if "a" not in header and "raw_outcome_code" not in header:
            missing.append("a|raw_outcome_code")
        if missing:
            raise ValidationError([f"{path}: missing column(s) {', '.join(missing)}"])
        xcols = [c for c in header if c.startswith(COVARIATE_PREFIX)]
        records, problems = [], []
        for row in reader:
            sid = row["subject_id"]
            beliefs = {
                col: _scale_belief(row[col], belief_scale, sid, col, problems)
                for col in ("b_prior", "b_post", "b_ref")
            }
            code = row.get("raw_outcome_code", "")
            code = int(code) if code not in ("", None) else None
            if "a" in header and row["a"] != "":
                a = int(row["a"])
            elif code is not None:
                try:
                    a = derive_outcome(code, sid)
                except ValidationError as exc:
                    problems.extend(exc.problems)
                    a = 0
            else:
                problems.append(f"{sid}: neither a nor raw_outcome_code given")
                a = 0
            try:
                z = int(row["z"])
            except ValueError:
                problems.append(f"{sid}: z={row['z']!r} is not an integer")
                z = -1
            records.append(
                SubjectRecord(
                    subject_id=sid,
                    location=row["location"],
                    enroll_date=row["enroll_date"],
                    treat_date=row["treat_date"],
                    z=z,
                    a=a,
                    raw_outcome_code=code,
                    covariates=tuple(float(row[c]) for c in xcols),
                    **beliefs,
                )
            )
    if problems:
        raise ValidationError(problems)
    return records, [c[len(COVARIATE_PREFIX):] for c in xcols]


def read_signals_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return [LocationSignal(row["location"], float(row["s"])) for row in csv.DictReader(fh)]


def signals_from_intents_csv(path) -> list:
    by_loc: dict = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            by_loc.setdefault(row["location"], []).append(int(row["intent_code"]))
    return [compute_signal(codes, loc) for loc, codes in sorted(by_loc.items())]


def load_dataset(path, signals=None, intents=None, belief_scale: str = "unit") -> Dataset:
    records, xnames = read_records_csv(path, belief_scale)
    if signals is not None:
        sig = read_signals_csv(signals)
    elif intents is not None:
        sig = signals_from_intents_csv(intents)
    else:
        raise ValueError("supply either a signals CSV or an intents CSV")
    ds = validate_dataset(records, sig)
    return with_covariate_names(ds, xnames) if xnames else ds


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset_csv(ds: Dataset, path) -> None:
    """Write records in the ingestion schema (unit-interval beliefs)."""
    xcols = [COVARIATE_PREFIX + n for n in ds.covariate_names]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REQUIRED_COLUMNS) + ["a", "raw_outcome_code"] + xcols)
        for i in range(ds.n):
            code = int(ds.raw_outcome_code[i])
            w.writerow(
                [
                    ds.subject_id[i],
                    ds.location[i],
                    ds.enroll_date[i],
                    ds.treat_date[i],
                    _fmt(ds.b_prior[i]),
                    _fmt(ds.b_post[i]),
                    _fmt(ds.b_ref[i]),
                    int(ds.z[i]),
                    int(ds.a[i]),
                    code if code else "",
                ]
                + [_fmt(v) for v in ds.covariates[i]]
            )


def write_signals_csv(signals: Mapping[str, float], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location", "s"])
        for loc, s in sorted(signals.items()):
            w.writerow([loc, _fmt(s)])


# ---------------------------------------------------------------------------
# fixed-effect design


@dataclass(frozen=True)
class FixedEffectDesign:
    """Dummy coding for categorical keys, reusable on any dataset.

    ``levels[key]`` lists the non-reference levels (one dummy each) ordered
    by descending cell size; ``merges[key]`` maps merged-away levels to the
    level that absorbed them.
    """

    keys: tuple
    reference: dict
    levels: dict
    merges: dict

    @property
    def names(self) -> list:
        out = []
        for k in self.keys:
            for lev in self.levels[k]:
                merged = sorted([m for m, t in self.merges[k].items() if t == lev])
                out.append(f"{k}={'/'.join([lev] + merged)}")
        return out

    def matrix(self, ds: Dataset) -> np.ndarray:
        cols = []
        for k in self.keys:
            vals = np.asarray(ds.column(k)).astype(str)
            mapped = np.array([self.merges[k].get(v, v) for v in vals]) if self.merges[k] else vals
            for lev in self.levels[k]:
                cols.append((mapped == lev).astype(float))
        if not cols:
            return np.zeros((ds.n, 0))
        return np.column_stack(cols)


def _neighbour(levels_sorted: list, lev: str) -> str:
    i = levels_sorted.index(lev)
    return levels_sorted[i - 1] if i > 0 else levels_sorted[i + 1]


def fixed_effect_design(
    ds: Dataset,
    keys: Sequence[str] = CLUSTER_KEYS,
    outcome: Optional[np.ndarray] = None,
    merge_separated: bool = True,
) -> FixedEffectDesign:
    """Reference category = largest cell (ties broken by sort order).

    With ``outcome`` and ``merge_separated``, a date cell whose outcomes are
    all equal (it would predict the outcome perfectly) is merged into its
    neighbour in sorted key order, repeatedly, until no such cell is left.
    Locations are never merged.
    """
    reference, levels, merges = {}, {}, {}
    for k in keys:
        vals = np.asarray(ds.column(k)).astype(str)
        merge: dict = {}
        while True:
            mapped = np.array([merge.get(v, v) for v in vals]) if merge else vals
            uniq = sorted(set(mapped.tolist()))
            if len(uniq) < 2 or outcome is None or not merge_separated or k == "location":
                break
            bad = None
            for lev in sorted(uniq, key=lambda l: ((mapped == l).sum(), l)):
                ys = outcome[mapped == lev]
                if ys.min() == ys.max():
                    bad = lev
                    break
            if bad is None:
                break
            target = _neighbour(uniq, bad)
            for src, dst in list(merge.items()):
                if dst == bad:
                    merge[src] = target
            merge[bad] = target
        mapped = np.array([merge.get(v, v) for v in vals]) if merge else vals
        counts = Counter(mapped.tolist())
        order = sorted(counts, key=lambda l: (-counts[l], l))
        reference[k] = order[0]
        levels[k] = order[1:]
        merges[k] = merge
    return FixedEffectDesign(tuple(keys), reference, levels, merges)
