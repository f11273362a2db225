"""Pixel-grid domain: loading, validation, covariate standardization and binning.

The domain couples three ingredients: a pixel table (counts plus covariates),
a partition of the pixels into slope units (SUs), and the SU adjacency graph
on which the spatial random effects live.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

N_ASPECT_BINS = 16
N_SLOPE_CLASSES = 10

# header prefix marking categorical covariate columns in pixels.csv
CATEGORICAL_PREFIX = "cat_"


class DataError(ValueError):
    """Raised when an input table violates the domain contracts."""


@dataclass(frozen=True)
class PixelRecord:
    """One grid cell: observed count plus covariates, post standardization."""

    pixel_id: int
    su_id: int
    count: int
    continuous_covariates: np.ndarray
    categorical_covariates: np.ndarray
    aspect_bin: int
    slope_class: int
    slope_value: float


class SlopeUnitGraph:
    """Undirected SU adjacency graph with 1-based node ids.

    Stores the edge set and per-node degrees.  Structural invariants
    (no self-loops, no duplicate edges) are enforced at construction;
    connectivity is checked by the loader and by the CAR builder, so a
    hand-built disconnected graph can exist for testing.
    """

    def __init__(self, n_su: int, edges):
        if n_su < 1:
            raise DataError("slope-unit graph needs at least one node")
        seen = set()
        for a, b in edges:
            if a == b:
                raise DataError(f"self-loop on slope unit {a}")
            if not (1 <= a <= n_su and 1 <= b <= n_su):
                raise DataError(f"edge ({a},{b}) outside node range 1..{n_su}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise DataError(f"duplicate edge ({key[0]},{key[1]})")
            seen.add(key)
        self.n_su = int(n_su)
        self.edges = tuple(sorted(seen))
        degrees = np.zeros(n_su, dtype=np.int64)
        for a, b in self.edges:
            degrees[a - 1] += 1
            degrees[b - 1] += 1
        self.degrees = degrees

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self) -> list[list[int]]:
        """Adjacency lists indexed 0..n_su-1 (neighbor ids also 0-based)."""
        nb: list[list[int]] = [[] for _ in range(self.n_su)]
        for a, b in self.edges:
            nb[a - 1].append(b - 1)
            nb[b - 1].append(a - 1)
        return nb

    def is_connected(self) -> bool:
        if self.n_su == 1:
            return True
        nb = self.neighbors()
        seen = np.zeros(self.n_su, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            i = stack.pop()
            for j in nb[i]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        return bool(seen.all())


@dataclass
class SpatialDomain:
    """Validated pixel grid plus SU partition, ready for model assembly.

    Columnar storage; ``pixels`` materializes per-pixel records on demand.
    Continuous covariates (including slope) are stored standardized.
    Instances are immutable by convention once built and safe to share.
    """

    pixel_id: np.ndarray
    su_id: np.ndarray                  # 1-based, aligned with su_graph nodes
    count: np.ndarray
    continuous: np.ndarray             # (n_grid, k) standardized
    continuous_names: tuple[str, ...]
    categorical: np.ndarray            # (n_grid, m) dense codes
    categorical_names: tuple[str, ...]
    categorical_levels: tuple[int, ...]
    aspect: np.ndarray                 # radians in [0, 2*pi)
    aspect_bin: np.ndarray
    su_graph: SlopeUnitGraph
    pixel_area: float
    slope_value: np.ndarray | None = None   # standardized slope column
    slope_class: np.ndarray | None = None
    slope_bin_range: tuple[float, float] | None = None
    _pixel_cache: list[PixelRecord] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.pixel_area <= 0:
            raise DataError("pixel_area must be positive")
        if np.any(self.count < 0):
            raise DataError("negative count in domain")
        if len(np.unique(self.pixel_id)) != self.n_grid:
            raise DataError("duplicate pixel id in domain")
        bad = ~np.isin(self.su_id, np.arange(1, self.su_graph.n_su + 1))
        if np.any(bad):
            raise DataError(f"unknown slope unit {int(self.su_id[bad][0])}")

    @property
    def n_grid(self) -> int:
        return len(self.pixel_id)

    @property
    def su_index(self) -> np.ndarray:
        """0-based SU index per pixel."""
        return self.su_id - 1

    @property
    def has_slope(self) -> bool:
        return self.slope_value is not None

    @property
    def pixels(self) -> list[PixelRecord]:
        if self._pixel_cache is None:
            recs = []
            for i in range(self.n_grid):
                recs.append(PixelRecord(
                    pixel_id=int(self.pixel_id[i]),
                    su_id=int(self.su_id[i]),
                    count=int(self.count[i]),
                    continuous_covariates=self.continuous[i].copy(),
                    categorical_covariates=self.categorical[i].copy(),
                    aspect_bin=int(self.aspect_bin[i]),
                    slope_class=int(self.slope_class[i]) if self.slope_class is not None else -1,
                    slope_value=float(self.slope_value[i]) if self.slope_value is not None else 0.0,
                ))
            object.__setattr__(self, "_pixel_cache", recs)
        return self._pixel_cache

    @cached_property
    def su_counts(self) -> np.ndarray:
        """Observed count totals per SU (length n_su)."""
        out = np.zeros(self.su_graph.n_su, dtype=np.int64)
        np.add.at(out, self.su_index, self.count)
        return out


def standardize_column(values) -> np.ndarray:
    """Center and scale to empirical mean 0, variance 1 (denominator n-1).

    Raises DataError on constant input.  Idempotent up to floating point:
    standardizing twice equals standardizing once.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) < 2:
        raise DataError("standardization needs a vector of length >= 2")
    if not np.all(np.isfinite(v)):
        raise DataError("non-finite value in covariate column")
    sd = v.std(ddof=1)
    if sd == 0.0:
        raise DataError("constant covariate")
    return (v - v.mean()) / sd


def bin_aspect(angle: float) -> int:
    """Map an angle to one of 16 equal circular sectors of width 2*pi/16."""
    if not math.isfinite(angle):
        raise DataError("non-finite aspect angle")
    a = math.fmod(angle, 2.0 * math.pi)
    if a < 0.0:
        a += 2.0 * math.pi
    b = int(a / (2.0 * math.pi / N_ASPECT_BINS))
    return min(b, N_ASPECT_BINS - 1)


def bin_slope(value: float, lo: float, hi: float) -> int:
    """Assign value to one of 10 equidistant classes over [lo, hi].

    The right edge closes the last class: value == hi maps to class 9.
    """
    if not (lo < hi):
        raise DataError("slope bin range must satisfy min < max")
    if not (lo <= value <= hi):
        raise DataError(f"slope value {value} outside [{lo}, {hi}]")
    b = int((value - lo) / (hi - lo) * N_SLOPE_CLASSES)
    return min(b, N_SLOPE_CLASSES - 1)


def _parse_int(text: str, what: str, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {line}: non-integer {what} {text!r}") from None


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {line}: non-numeric {what} {text!r}") from None


def _read_rows(path):
    """Yield (physical 1-based line number, comma-split fields).

    Blank lines and `#` comment lines (the config-hash header written by the
    CLI) are skipped but still counted, so error line numbers match the file.
    """
    with open(path, encoding="utf-8") as fh:
        for line, raw in enumerate(fh, start=1):
            text = raw.rstrip("\n").rstrip("\r")
            if not text.strip() or text.lstrip().startswith("#"):
                continue
            yield line, [f.strip() for f in text.split(",")]


def load_adjacency(path) -> SlopeUnitGraph:
    """Read the `su_a,su_b` edge list and build the SU graph."""
    edges = []
    edge_set = set()
    max_id = 0
    rows = _read_rows(path)
    first = next(rows, None)
    if first is None or first[1][:2] != ["su_a", "su_b"]:
        raise DataError("line 1: adjacency header must be 'su_a,su_b'")
    for line, row in rows:
        if len(row) != 2:
            raise DataError(f"line {line}: expected two columns, got {len(row)}")
        a = _parse_int(row[0], "slope unit id", line)
        b = _parse_int(row[1], "slope unit id", line)
        if a < 1 or b < 1:
            raise DataError(f"line {line}: slope unit ids must be positive")
        if a == b:
            raise DataError(f"line {line}: self-loop on slope unit {a}")
        key = (min(a, b), max(a, b))
        if key in edge_set:
            raise DataError(f"line {line}: duplicate edge ({key[0]},{key[1]})")
        edge_set.add(key)
        edges.append(key)
        max_id = max(max_id, a, b)
    if max_id == 0:
        raise DataError("adjacency file declares no edges")
    return SlopeUnitGraph(max_id, edges)


def _split_header(header: list[str]):
    """Resolve pixels.csv columns.

    Layout is `pixel_id,su_id,count,<cont...>,<cat...>,aspect,slope_raw`;
    categorical columns are recognized by the `cat_` name prefix, everything
    between `count` and the first categorical (or `aspect`) is continuous.
    """
    names = [h.strip() for h in header]
    if names[:3] != ["pixel_id", "su_id", "count"]:
        raise DataError("line 1: header must start with 'pixel_id,su_id,count'")
    if len(names) < 5 or names[-2:] != ["aspect", "slope_raw"]:
        raise DataError("line 1: header must end with 'aspect,slope_raw'")
    middle = names[3:-2]
    cont, cat = [], []
    for name in middle:
        if name.startswith(CATEGORICAL_PREFIX):
            cat.append(name)
        elif cat:
            raise DataError(
                f"line 1: continuous column {name!r} after categorical columns")
        else:
            cont.append(name)
    return cont, cat


def build_domain(pixel_id, su_id, count, continuous, continuous_names,
                 categorical, categorical_names, aspect, slope_raw,
                 su_graph: SlopeUnitGraph, pixel_area: float) -> SpatialDomain:
    """Assemble a SpatialDomain from raw columns.

    Standardizes continuous covariates and slope, bins aspect and slope,
    and validates categorical codes for dense 0..(levels-1) coding.
    Pass ``slope_raw=None`` for a domain without a slope covariate (the
    nonlinear and space-varying slope models then refuse to assemble).
    """
    pixel_id = np.asarray(pixel_id, dtype=np.int64)
    su_id = np.asarray(su_id, dtype=np.int64)
    count = np.asarray(count, dtype=np.int64)
    n = len(pixel_id)

    cont = np.asarray(continuous, dtype=float).reshape(n, -1) if len(continuous_names) \
        else np.zeros((n, 0))
    for j in range(cont.shape[1]):
        try:
            cont[:, j] = standardize_column(cont[:, j])
        except DataError as e:
            raise DataError(f"column {continuous_names[j]!r}: {e}") from None

    cat = np.asarray(categorical, dtype=np.int64).reshape(n, -1) if len(categorical_names) \
        else np.zeros((n, 0), dtype=np.int64)
    levels = []
    for j, name in enumerate(categorical_names):
        codes = cat[:, j]
        if codes.min(initial=0) < 0:
            raise DataError(f"column {name!r}: negative category code")
        n_lev = int(codes.max()) + 1 if len(codes) else 0
        present = np.unique(codes)
        if len(present) != n_lev:
            missing = sorted(set(range(n_lev)) - set(present.tolist()))
            raise DataError(
                f"column {name!r}: category codes must be dense 0..{n_lev - 1}, "
                f"missing {missing}")
        levels.append(n_lev)

    aspect = np.asarray(aspect, dtype=float)
    if not np.all(np.isfinite(aspect)):
        raise DataError("non-finite aspect angle")
    aspect = np.mod(aspect, 2.0 * np.pi)
    aspect_bin = np.array([bin_aspect(a) for a in aspect], dtype=np.int64)

    slope_value = slope_class = bin_range = None
    if slope_raw is not None:
        slope_value = standardize_column(np.asarray(slope_raw, dtype=float))
        lo, hi = float(slope_value.min()), float(slope_value.max())
        bin_range = (lo, hi)
        slope_class = np.array([bin_slope(s, lo, hi) for s in slope_value],
                               dtype=np.int64)

    return SpatialDomain(
        pixel_id=pixel_id, su_id=su_id, count=count,
        continuous=cont, continuous_names=tuple(continuous_names),
        categorical=cat, categorical_names=tuple(categorical_names),
        categorical_levels=tuple(levels),
        aspect=aspect, aspect_bin=aspect_bin,
        su_graph=su_graph, pixel_area=float(pixel_area),
        slope_value=slope_value, slope_class=slope_class,
        slope_bin_range=bin_range,
    )


def load_domain(pixel_table_path, adjacency_path, pixel_area: float) -> SpatialDomain:
    """Load and validate pixels.csv plus su_adjacency.csv into a SpatialDomain.

    Parse errors carry 1-based line numbers.  The loaded domain satisfies:
    unique pixel ids, non-negative integer counts, every su_id present in the
    adjacency graph, connected SU graph, standardized continuous covariates.
    """
    graph = load_adjacency(adjacency_path)
    if not graph.is_connected():
        raise DataError("disconnected slope-unit graph")

    rows = _read_rows(pixel_table_path)
    first = next(rows, None)
    if first is None:
        raise DataError("line 1: empty pixel table")
    cont_names, cat_names = _split_header(first[1])
    n_cont, n_cat = len(cont_names), len(cat_names)
    ncol = 3 + n_cont + n_cat + 2

    pixel_id, su_id, count = [], [], []
    cont_rows, cat_rows, aspect, slope = [], [], [], []
    seen_ids = {}
    for line, row in rows:
        if len(row) != ncol:
            raise DataError(f"line {line}: expected {ncol} columns, got {len(row)}")
        pid = _parse_int(row[0], "pixel_id", line)
        if pid in seen_ids:
            raise DataError(
                f"line {line}: duplicate pixel id {pid} (first on line {seen_ids[pid]})")
        seen_ids[pid] = line
        sid = _parse_int(row[1], "su_id", line)
        if sid < 1 or sid > graph.n_su:
            raise DataError(f"line {line}: unknown slope unit {sid}")
        cnt = _parse_int(row[2], "count", line)
        if cnt < 0:
            raise DataError(f"line {line}: negative count {cnt}")
        pixel_id.append(pid)
        su_id.append(sid)
        count.append(cnt)
        cvals = [_parse_float(row[3 + j], f"covariate {cont_names[j]!r}", line)
                 for j in range(n_cont)]
        cont_rows.append(cvals)
        kvals = [_parse_int(row[3 + n_cont + j],
                            f"category code {cat_names[j]!r}", line)
                 for j in range(n_cat)]
        cat_rows.append(kvals)
        aspect.append(_parse_float(row[-2], "aspect", line))
        slope.append(_parse_float(row[-1], "slope_raw", line))

    if len(pixel_id) < 2:
        raise DataError("pixel table needs at least two rows")
    return build_domain(pixel_id, su_id, count, cont_rows, cont_names,
                        cat_rows, cat_names, aspect, slope, graph, pixel_area)
