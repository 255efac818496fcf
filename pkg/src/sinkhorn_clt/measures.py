"""Finitely supported probability measures: validation, file I/O and resampling."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidMeasure, ParseError

MERGE_TOL = 1e-12
RENORMALIZE_TOL = 1e-9
MIN_WEIGHT = 1e-15
SUM_TOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


def _merge_duplicates(points: np.ndarray, weights: np.ndarray):
    """Group atoms equal componentwise within ``MERGE_TOL``; first occurrence wins."""
    n = len(points)
    label = np.full(n, -1)
    keep = []
    for i in range(n):
        if label[i] >= 0:
            continue
        same = np.all(np.abs(points - points[i]) <= MERGE_TOL, axis=1) & (label < 0)
        label[same] = len(keep)
        keep.append(i)
    merged = np.zeros(len(keep))
    np.add.at(merged, label, weights)
    return points[keep], merged


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability measure with finitely many atoms in R^d.

    Instances are immutable: ``points`` (shape ``(n, d)``) and ``weights``
    (shape ``(n,)``) are read-only arrays. Build them with :meth:`from_arrays`,
    which merges duplicate atoms and validates the weights.
    """

    points: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_arrays(cls, points, weights) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(weights, dtype=float).ravel()
        if pts.ndim != 2 or len(pts) != len(w):
            raise DimensionMismatch(
                f"{len(w)} weights for points of shape {pts.shape}"
            )
        if len(w) == 0:
            raise InvalidMeasure("measure has no atoms")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise InvalidMeasure("non-finite coordinate or weight")
        if np.any(w <= 0):
            raise InvalidMeasure(f"nonpositive weight {w.min()!r}")
        total = w.sum()
        if abs(total - 1.0) > RENORMALIZE_TOL:
            raise InvalidMeasure(f"weights sum to {total!r}, not 1")
        pts, w = _merge_duplicates(pts, w)
        w = w / w.sum()
        if np.any(w < MIN_WEIGHT):
            raise InvalidMeasure(f"weight {w.min()!r} below {MIN_WEIGHT}")
        return cls(_frozen(pts), _frozen(w))

    @classmethod
    def dirac(cls, point) -> "DiscreteMeasure":
        return cls.from_arrays(np.atleast_2d(np.asarray(point, dtype=float)), [1.0])

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self, values) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))

    def variance(self, values) -> float:
        """Variance of a function given by its values at the atoms."""
        v = np.asarray(values, dtype=float)
        centered = v - self.weights @ v
        return float(self.weights @ centered**2)

    def equals(self, other: "DiscreteMeasure", tol: float = 0.0) -> bool:
        """Same atoms (in the same order) and same weights, within ``tol``."""
        return (
            self.points.shape == other.points.shape
            and bool(np.all(np.abs(self.points - other.points) <= tol))
            and bool(np.all(np.abs(self.weights - other.weights) <= tol))
        )

    def permuted(self, order) -> "DiscreteMeasure":
        order = np.asarray(order)
        return DiscreteMeasure(_frozen(self.points[order]), _frozen(self.weights[order]))

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}


@dataclass(frozen=True)
class SampleBatch:
    """An i.i.d. sample from ``source`` stored as atom indices."""

    draws: np.ndarray
    source: DiscreteMeasure

    def __post_init__(self):
        d = np.asarray(self.draws)
        if d.ndim != 1 or len(d) < 1:
            raise ValueError("a sample needs at least one draw")
        if d.min() < 0 or d.max() >= self.source.size:
            raise ValueError("draw index outside the source support")

    @property
    def n(self) -> int:
        return len(self.draws)

    def counts(self) -> np.ndarray:
        return np.bincount(self.draws, minlength=self.source.size)

    def support(self) -> np.ndarray:
        """Indices of source atoms that were drawn at least once."""
        return np.flatnonzero(self.counts())

    def to_measure(self) -> DiscreteMeasure:
        c = self.counts()
        idx = np.flatnonzero(c)
        return DiscreteMeasure(
            _frozen(self.source.points[idx]), _frozen(c[idx] / self.n)
        )


def draw_sample(truth: DiscreteMeasure, n: int, rng: np.random.Generator) -> SampleBatch:
    if n < 1:
        raise ValueError(f"sample size must be >= 1, got {n}")
    draws = rng.choice(truth.size, size=n, p=truth.weights)
    return SampleBatch(draws, truth)


def empirical_counts(truth: DiscreteMeasure, n: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial atom counts of an n-sample from ``truth``."""
    if n < 1:
        raise ValueError(f"sample size must be >= 1, got {n}")
    return rng.multinomial(n, truth.weights)


def restrict(truth: DiscreteMeasure, counts: np.ndarray):
    """Empirical measure for the given counts and the indices of its atoms in ``truth``."""
    idx = np.flatnonzero(counts)
    w = counts[idx] / counts.sum()
    return DiscreteMeasure(_frozen(truth.points[idx]), _frozen(w)), idx


def empirical_from_sample(
    truth: DiscreteMeasure, n: int, rng: np.random.Generator
) -> DiscreteMeasure:
    """Empirical measure of an i.i.d. n-sample from ``truth``.

    Atoms that receive no draw are dropped; the remaining weights are
    ``count / n``.
    """
    measure, _ = restrict(truth, empirical_counts(truth, n, rng))
    return measure


# -- file formats -----------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _parse_csv(text: str, source: str) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    width = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            values = [float(cell) for cell in row]
        except ValueError:
            raise ParseError(f"{source}:{lineno}: non-numeric field in {row!r}") from None
        if len(values) < 2:
            raise ParseError(f"{source}:{lineno}: need at least one coordinate and a weight")
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise ParseError(f"{source}:{lineno}: expected {width} fields, got {len(values)}")
        rows.append(values)
    if not rows:
        raise InvalidMeasure(f"{source}: no atoms")
    arr = np.array(rows)
    return arr[:, :-1], arr[:, -1]


def _parse_json(text: str, source: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        doc = json.loads(text)
        points = np.array(doc["points"], dtype=float)
        weights = np.array(doc["weights"], dtype=float)
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{source}: {exc}") from None
    if points.ndim == 1:
        points = points[:, None]
    if weights.ndim != 1 or points.ndim != 2:
        raise ParseError(f"{source}: points must be a list of vectors, weights a flat list")
    if len(weights) == 0:
        raise InvalidMeasure(f"{source}: no atoms")
    return points, weights


def measure_from_text(text: str, format: str, source: str = "<string>") -> DiscreteMeasure:
    if format == "csv":
        points, weights = _parse_csv(text, source)
    elif format == "json":
        points, weights = _parse_json(text, source)
    else:
        raise ValueError(f"unknown measure format {format!r}")
    return DiscreteMeasure.from_arrays(points, weights)


def load_measure(path, format: str | None = None) -> DiscreteMeasure:
    """Read a measure from CSV (coordinates then weight per row) or JSON.

    The format defaults to the file extension.
    """
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    return measure_from_text(path.read_text(), format, str(path))


def measure_to_csv(measure: DiscreteMeasure) -> str:
    lines = [
        ",".join(_fmt(v) for v in (*pt, w))
        for pt, w in zip(measure.points, measure.weights)
    ]
    return "\n".join(lines) + "\n"


def measure_to_json(measure: DiscreteMeasure) -> str:
    pts = ", ".join("[" + ", ".join(_fmt(v) for v in pt) + "]" for pt in measure.points)
    ws = ", ".join(_fmt(w) for w in measure.weights)
    return f'{{"points": [{pts}], "weights": [{ws}]}}\n'


def save_measure(measure: DiscreteMeasure, path, format: str | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    text = measure_to_json(measure) if format == "json" else measure_to_csv(measure)
    path.write_text(text)


def load_points(path) -> np.ndarray:
    """Read raw sample points (one observation per CSV row, no weights)."""
    path = Path(path)
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if arr.size == 0:
        raise ParseError(f"{path}: no observations")
    return arr


def empirical_from_points(points) -> DiscreteMeasure:
    """Empirical measure of raw observations; repeated points merge into one atom."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return DiscreteMeasure.from_arrays(pts, np.full(len(pts), 1.0 / len(pts)))
