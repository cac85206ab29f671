"""Parametric data-generating models, contamination recipes, CSV ingestion.

Samplers are pure functions of ``(DatasetSpec, seed)``: the same spec and
seed always reproduce the same dataset bit for bit, under any parallel
schedule.
"""

from __future__ import annotations

import csv
import importlib.resources
import math
from dataclasses import dataclass

import numpy as np

from .rng import derive_rng

__all__ = [
    "TwoSampleModel",
    "OneSampleModel",
    "RegressionModel",
    "ContaminationRecipe",
    "DatasetSpec",
    "TwoSampleData",
    "RegressionData",
    "CsvFormatError",
    "sample",
    "regression_sample",
    "contaminated_count",
    "load_two_sample_csv",
    "load_regression_csv",
    "load_one_sample_csv",
    "load_synthetic_trial",
]


class CsvFormatError(ValueError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass(frozen=True)
class TwoSampleModel:
    """Two-arm trial model: Y_S = mu_n + psi + u, Y_N = mu_n + u, u ~ N(0, sigma^2)."""

    mu_n: float
    psi: float
    sigma: float
    n_per_group: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.n_per_group < 2:
            raise ValueError("n_per_group must be at least 2")


@dataclass(frozen=True)
class OneSampleModel:
    """One-sample normal model N(theta, sigma^2)."""

    theta: float
    n: int
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.n < 2:
            raise ValueError("n must be at least 2")


@dataclass(frozen=True)
class RegressionModel:
    """Linear follow-up model y_fu = b0 + b1 * y_bl + b2 * p + u."""

    beta0: float
    beta1: float
    beta2: float
    sigma: float
    y_bl: tuple[float, ...]
    p: tuple[int, ...]

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if len(self.y_bl) != len(self.p) or len(self.y_bl) < 4:
            raise ValueError("design needs >= 4 subjects with matching covariates")
        groups = set(self.p)
        if not groups.issuperset({0, 1}):
            raise ValueError("both treatment groups must be present")


@dataclass(frozen=True)
class ContaminationRecipe:
    """How a fraction of the sample departs from the central model.

    ``half_cauchy_errors_new_group`` replaces the chosen count of new-group
    error terms with half-Cauchy draws oriented so that the new arm looks
    worse (response degradation).  ``cauchy_extreme_replacement`` replaces
    observations with the most extreme positive value of a same-size Cauchy
    draw.  ``scale=None`` means "use the model sigma" for the half-Cauchy
    mechanism and 1.0 for the Cauchy-extreme mechanism.
    """

    fraction: float
    mechanism: str = "half_cauchy_errors_new_group"
    scale: float | None = None
    extremes: str = "single_max"  # or "iid_extremes"

    def __post_init__(self):
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError("contamination fraction must lie in [0, 1)")
        if self.mechanism not in ("half_cauchy_errors_new_group", "cauchy_extreme_replacement"):
            raise ValueError(f"unknown contamination mechanism {self.mechanism!r}")
        if self.extremes not in ("single_max", "iid_extremes"):
            raise ValueError(f"unknown extremes policy {self.extremes!r}")


@dataclass(frozen=True)
class DatasetSpec:
    model: object
    seed: int
    contamination: ContaminationRecipe | None = None


@dataclass(frozen=True)
class TwoSampleData:
    y_s: np.ndarray
    y_n: np.ndarray

    @property
    def n_total(self) -> int:
        return self.y_s.size + self.y_n.size


@dataclass(frozen=True)
class RegressionData:
    y_fu: np.ndarray
    y_bl: np.ndarray
    p: np.ndarray

    @property
    def n(self) -> int:
        return self.y_fu.size


def contaminated_count(fraction: float, n: int) -> int:
    """Deterministic number of contaminated observations: round half up."""
    return int(math.floor(fraction * n + 0.5))


def _half_cauchy_contaminate(u_n, recipe: ContaminationRecipe, sigma: float, rng) -> np.ndarray:
    k = contaminated_count(recipe.fraction, u_n.size)
    if k == 0:
        return u_n
    scale = recipe.scale if recipe.scale is not None else (sigma if sigma > 0 else 1.0)
    heavy = scale * np.abs(rng.standard_cauchy(k))
    out = u_n.copy()
    # Degrade the new arm: heavy-tailed errors push its responses down.
    out[-k:] = -heavy
    return rng.permutation(out)


def _cauchy_extreme_contaminate(y, recipe: ContaminationRecipe, rng) -> np.ndarray:
    n = y.size
    k = contaminated_count(recipe.fraction, n)
    if k == 0:
        return y
    scale = recipe.scale if recipe.scale is not None else 1.0
    out = y.copy()
    if recipe.extremes == "single_max":
        extreme = scale * np.max(rng.standard_cauchy(n))
        out[-k:] = extreme
    else:
        draws = rng.standard_cauchy((k, n))
        out[-k:] = scale * np.max(draws, axis=1)
    return rng.permutation(out)


def sample(spec: DatasetSpec):
    """Draw one dataset; identical specs and seeds give identical data."""
    model = spec.model
    rng = derive_rng(spec.seed, "data")
    if isinstance(model, TwoSampleModel):
        n = model.n_per_group
        u_s = model.sigma * rng.standard_normal(n)
        u_n = model.sigma * rng.standard_normal(n)
        if spec.contamination is not None and spec.contamination.fraction > 0:
            if spec.contamination.mechanism != "half_cauchy_errors_new_group":
                raise ValueError("two-sample data supports the half-Cauchy mechanism only")
            u_n = _half_cauchy_contaminate(u_n, spec.contamination, model.sigma, rng)
        return TwoSampleData(y_s=model.mu_n + model.psi + u_s, y_n=model.mu_n + u_n)
    if isinstance(model, OneSampleModel):
        y = model.theta + model.sigma * rng.standard_normal(model.n)
        if spec.contamination is not None and spec.contamination.fraction > 0:
            if spec.contamination.mechanism != "cauchy_extreme_replacement":
                raise ValueError("one-sample data supports the Cauchy-extreme mechanism only")
            y = _cauchy_extreme_contaminate(y, spec.contamination, rng)
        return y
    if isinstance(model, RegressionModel):
        return regression_sample(spec)
    raise TypeError(f"unknown model type {type(model).__name__}")


def regression_sample(spec: DatasetSpec) -> RegressionData:
    model = spec.model
    if not isinstance(model, RegressionModel):
        raise TypeError("regression_sample needs a RegressionModel spec")
    rng = derive_rng(spec.seed, "data")
    y_bl = np.asarray(model.y_bl, dtype=float)
    p = np.asarray(model.p, dtype=float)
    u = model.sigma * rng.standard_normal(y_bl.size)
    y_fu = model.beta0 + model.beta1 * y_bl + model.beta2 * p + u
    return RegressionData(y_fu=y_fu, y_bl=y_bl, p=p)


# -- CSV ingestion -----------------------------------------------------

def _read_rows(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = [(i + 1, row) for i, row in enumerate(reader)
                if row and not row[0].lstrip().startswith("#")]
    if not rows:
        raise CsvFormatError(path, 1, "empty file")
    return rows


def _parse_float(path, line_no, token, column):
    try:
        return float(token)
    except ValueError:
        raise CsvFormatError(path, line_no, f"cannot parse {column}={token!r} as a number") from None


def load_two_sample_csv(path) -> TwoSampleData:
    """Read `y,group` rows; group labels are S (standard) and N (new)."""
    rows = _read_rows(path)
    line_no, header = rows[0]
    if [h.strip().lower() for h in header] != ["y", "group"]:
        raise CsvFormatError(path, line_no, "expected header 'y,group'")
    ys, yn = [], []
    for line_no, row in rows[1:]:
        if len(row) != 2:
            raise CsvFormatError(path, line_no, f"expected 2 columns, found {len(row)}")
        value = _parse_float(path, line_no, row[0], "y")
        group = row[1].strip().upper()
        if group == "S":
            ys.append(value)
        elif group == "N":
            yn.append(value)
        else:
            raise CsvFormatError(path, line_no, f"group must be S or N, found {row[1]!r}")
    if len(ys) < 2 or len(yn) < 2:
        raise CsvFormatError(path, rows[-1][0], "need at least 2 observations per group")
    return TwoSampleData(y_s=np.array(ys), y_n=np.array(yn))


def load_regression_csv(path) -> RegressionData:
    """Read `y_fu,y_bl,p` rows; p is the treatment indicator (0/1)."""
    rows = _read_rows(path)
    line_no, header = rows[0]
    if [h.strip().lower() for h in header] != ["y_fu", "y_bl", "p"]:
        raise CsvFormatError(path, line_no, "expected header 'y_fu,y_bl,p'")
    y_fu, y_bl, p = [], [], []
    for line_no, row in rows[1:]:
        if len(row) != 3:
            raise CsvFormatError(path, line_no, f"expected 3 columns, found {len(row)}")
        y_fu.append(_parse_float(path, line_no, row[0], "y_fu"))
        y_bl.append(_parse_float(path, line_no, row[1], "y_bl"))
        flag = _parse_float(path, line_no, row[2], "p")
        if flag not in (0.0, 1.0):
            raise CsvFormatError(path, line_no, f"p must be 0 or 1, found {row[2]!r}")
        p.append(flag)
    if len(y_fu) < 4 or len(set(p)) < 2:
        raise CsvFormatError(path, rows[-1][0], "need >= 4 subjects and both groups present")
    return RegressionData(y_fu=np.array(y_fu), y_bl=np.array(y_bl), p=np.array(p))


def load_one_sample_csv(path) -> np.ndarray:
    """Read single-column `y` rows."""
    rows = _read_rows(path)
    line_no, header = rows[0]
    if [h.strip().lower() for h in header] != ["y"]:
        raise CsvFormatError(path, line_no, "expected header 'y'")
    values = []
    for line_no, row in rows[1:]:
        if len(row) != 1:
            raise CsvFormatError(path, line_no, f"expected 1 column, found {len(row)}")
        values.append(_parse_float(path, line_no, row[0], "y"))
    if len(values) < 2:
        raise CsvFormatError(path, rows[-1][0], "need at least 2 observations")
    return np.array(values)


def load_synthetic_trial() -> RegressionData:
    """Bundled synthetic follow-up trial dataset (57 subjects).

    This is generated stand-in data, not patient records; its fitted
    summary statistics are documented in the file header.
    """
    ref = importlib.resources.files("robustcd.data").joinpath("synthetic_trial.csv")
    with importlib.resources.as_file(ref) as path:
        return load_regression_csv(path)
