"""Panel data container, treatment histories and history matrices.

A panel holds ``n`` units observed over ``T`` periods. In period ``t`` unit
``i`` reveals covariates ``x[i, t]``, then receives treatment ``d[i, t]``,
then reveals outcome ``y[i, t]``.

The history matrix at period ``t`` stacks, for every unit, everything known
before the period-``t`` treatment is assigned::

    [d_1 .. d_{t-1} | x_1 .. x_t | y_1 .. y_{t-1} | 1 | d_s * x_{r,j} ...]

The block order is fixed. Interactions are off by default.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingCell, NonBinaryTreatment, ParseError, PeriodOutOfRange

DEFAULT_SCHEMA = {
    "unit": "unit_id",
    "period": "period",
    "treatment": "treatment",
    "outcome": "outcome",
    "covariates": None,  # None -> every column named x<k>, in numeric order
}


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Rectangular panel of covariates, binary treatments and outcomes.

    Parameters
    ----------
    x : array of shape (n, T, p)
    d : array of shape (n, T) with entries in {0, 1}
    y : array of shape (n, T)
    unit_ids : optional labels, one per unit
    covariate_names : optional labels, one per covariate
    """

    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    unit_ids: tuple = None
    covariate_names: tuple = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        d_raw = np.asarray(self.d)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or d_raw.ndim != 2 or y.ndim != 2:
            raise ValueError("expected x (n, T, p), d (n, T), y (n, T)")
        n, T, p = x.shape
        if d_raw.shape != (n, T) or y.shape != (n, T):
            raise MissingCell(
                f"shape mismatch: x {x.shape}, d {d_raw.shape}, y {y.shape}"
            )
        if not np.all(np.isin(d_raw, (0, 1))):
            bad = np.unique(d_raw[~np.isin(d_raw, (0, 1))])
            raise NonBinaryTreatment(f"treatment values must be 0 or 1, got {bad[:5]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise MissingCell("covariates and outcomes must be finite")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "d", _readonly(d_raw.astype(np.int8)))
        object.__setattr__(self, "y", _readonly(y))
        ids = tuple(range(n)) if self.unit_ids is None else tuple(self.unit_ids)
        names = (
            tuple(f"x{j + 1}" for j in range(p))
            if self.covariate_names is None
            else tuple(self.covariate_names)
        )
        if len(ids) != n or len(names) != p:
            raise ValueError("unit_ids / covariate_names length mismatch")
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def T(self):
        return self.x.shape[1]

    @property
    def p_cov(self):
        return self.x.shape[2]

    def truncate(self, T):
        """Return the panel restricted to its first ``T`` periods."""
        if not 1 <= T <= self.T:
            raise PeriodOutOfRange(f"cannot truncate a {self.T}-period panel to {T}")
        return PanelDataset(
            self.x[:, :T], self.d[:, :T], self.y[:, :T], self.unit_ids, self.covariate_names
        )


def treatment_history(d):
    """Validate and normalise a treatment history.

    Accepts a sequence of 0/1 values or a comma separated string such as
    ``"1,0,1"``. Returns a tuple of ints.
    """
    if isinstance(d, str):
        parts = [s.strip() for s in d.split(",") if s.strip() != ""]
        try:
            d = [int(s) for s in parts]
        except ValueError:
            raise ValueError(f"treatment history {d!r} is not a list of bits") from None
    d = tuple(int(v) for v in np.atleast_1d(np.asarray(d)).ravel()) if len(d) else ()
    if len(d) < 1:
        raise ValueError("treatment history must have length >= 1")
    if any(v not in (0, 1) for v in d):
        raise ValueError(f"treatment history entries must be 0 or 1, got {d}")
    return d


@dataclass(frozen=True)
class HistoryMatrix:
    """Per-unit history at period ``t`` (1-based) with column labels."""

    t: int
    values: np.ndarray
    col_names: tuple
    blocks: dict = field(default_factory=dict)

    @property
    def width(self):
        return self.values.shape[1]

    def columns(self, kind):
        """Indices of the columns in block ``kind`` ('treatment', 'covariate',
        'outcome', 'intercept' or 'interaction')."""
        return np.asarray(self.blocks.get(kind, ()), dtype=int)


def build_history(data, t, intercept=True, interactions=False):
    """Build the history matrix ``H_t`` of a panel.

    Parameters
    ----------
    data : PanelDataset
    t : int
        Period, 1-based, ``1 <= t <= T``.
    intercept : bool
        Append a constant column.
    interactions : bool
        Append every product ``d_s * x_{r, j}`` of a past treatment with a
        covariate observed up to ``t``.
    """
    if not 1 <= t <= data.T:
        raise PeriodOutOfRange(f"period {t} outside 1..{data.T}")
    n, p = data.n, data.p_cov
    parts, names = [], []
    blocks = {"treatment": [], "covariate": [], "outcome": [], "intercept": [], "interaction": []}

    def add(kind, cols, labels):
        start = sum(c.shape[1] for c in parts)
        parts.append(cols)
        names.extend(labels)
        blocks[kind].extend(range(start, start + cols.shape[1]))

    if t > 1:
        add("treatment", data.d[:, : t - 1].astype(float), [f"d{s}" for s in range(1, t)])
    add(
        "covariate",
        data.x[:, :t, :].reshape(n, t * p),
        [f"{c}_t{s}" for s in range(1, t + 1) for c in data.covariate_names],
    )
    if t > 1:
        add("outcome", data.y[:, : t - 1], [f"y{s}" for s in range(1, t)])
    if intercept:
        add("intercept", np.ones((n, 1)), ["intercept"])
    if interactions and t > 1:
        dd = data.d[:, : t - 1].astype(float)
        xx = data.x[:, :t, :].reshape(n, t * p)
        inter = (dd[:, :, None] * xx[:, None, :]).reshape(n, -1)
        labels = [
            f"d{s}*{c}_t{r}"
            for s in range(1, t)
            for r in range(1, t + 1)
            for c in data.covariate_names
        ]
        add("interaction", inter, labels)

    values = np.hstack(parts) if parts else np.empty((n, 0))
    values.setflags(write=False)
    return HistoryMatrix(t, values, tuple(names), {k: tuple(v) for k, v in blocks.items()})


def match_mask(data, d):
    """Boolean mask of units whose first ``len(d)`` treatments equal ``d``."""
    d = treatment_history(d)
    if len(d) > data.T:
        raise PeriodOutOfRange(f"history of length {len(d)} exceeds T={data.T}")
    return np.all(data.d[:, : len(d)] == np.asarray(d, dtype=np.int8), axis=1)


def _covariate_columns(header, schema):
    cov = schema.get("covariates")
    if cov is not None:
        return list(cov)
    found = []
    for name in header:
        if len(name) > 1 and name[0] == "x" and name[1:].isdigit():
            found.append(name)
    return sorted(found, key=lambda s: int(s[1:]))


def load_panel(path, schema=None):
    """Read a long-form CSV panel.

    The file needs a header row and one line per (unit, period). Periods must
    be consecutive integers starting at 1 and every unit must have all of
    them. Rows are sorted by (unit, period) on the way in.
    """
    sch = dict(DEFAULT_SCHEMA)
    if schema:
        sch.update(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        cov_cols = _covariate_columns(header, sch)
        required = [sch["unit"], sch["period"], sch["treatment"], sch["outcome"], *cov_cols]
        for col in required:
            if col not in header:
                raise ParseError("missing column", row=1, column=col)
        if not cov_cols:
            raise ParseError("no covariate columns found", row=1)
        idx = {c: header.index(c) for c in required}

        cells = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=lineno)
            unit = row[idx[sch["unit"]]].strip()

            def num(col, cast=float):
                raw = row[idx[col]].strip()
                try:
                    return cast(raw)
                except ValueError:
                    raise ParseError(f"cannot parse {raw!r}", row=lineno, column=col) from None

            period = num(sch["period"], int)
            treat = num(sch["treatment"])
            if treat not in (0.0, 1.0):
                raise NonBinaryTreatment(
                    f"treatment {row[idx[sch['treatment']]].strip()!r} at row {lineno} is not 0/1"
                )
            outcome = num(sch["outcome"])
            xs = [num(c) for c in cov_cols]
            if (unit, period) in cells:
                raise ParseError(f"duplicate (unit, period) = ({unit}, {period})", row=lineno)
            cells[(unit, period)] = (int(treat), outcome, xs)

    if not cells:
        raise ParseError("no data rows", row=2)
    periods = sorted({p for _, p in cells})
    T = periods[-1]
    if periods != list(range(1, T + 1)):
        raise ParseError(f"periods must be consecutive integers from 1, got {periods[:10]}")

    def unit_key(u):
        try:
            return (0, float(u), u)
        except ValueError:
            return (1, 0.0, u)

    units = sorted({u for u, _ in cells}, key=unit_key)
    n, p = len(units), len(cov_cols)
    x = np.empty((n, T, p))
    d = np.empty((n, T), dtype=np.int8)
    y = np.empty((n, T))
    for i, u in enumerate(units):
        for t in range(1, T + 1):
            try:
                treat, outcome, xs = cells[(u, t)]
            except KeyError:
                raise MissingCell(f"unit {u!r} has no row for period {t}") from None
            x[i, t - 1] = xs
            d[i, t - 1] = treat
            y[i, t - 1] = outcome
    return PanelDataset(x, d, y, unit_ids=tuple(units), covariate_names=tuple(cov_cols))


def write_panel(data, path):
    """Write a panel as long-form CSV readable by :func:`load_panel`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "period", "treatment", "outcome", *data.covariate_names])
        for i in range(data.n):
            for t in range(data.T):
                w.writerow(
                    [data.unit_ids[i], t + 1, int(data.d[i, t]), repr(float(data.y[i, t]))]
                    + [repr(float(v)) for v in data.x[i, t]]
                )
