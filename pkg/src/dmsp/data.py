"""Multi-source point datasets, CSV I/O, the SCR generator, splits and masking.

A dataset holds ``N`` sources.  Source ``i`` has ``n_i`` samples, each with a
location, ``p_i`` ancillary features, a scalar target and an integer timestamp.
Feature dimensions may differ between sources.

CSV layout (one file per dataset)::

    source_id,timestamp,x,y,target,f0,f1,...,fM

Rows of a source with fewer than ``M+1`` features leave the trailing feature
cells empty.  The timestamp column is optional on input (missing means 0).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .geometry import GeoPoint


class DataError(ValueError):
    """Raised for malformed datasets, CSV files or infeasible requests."""


class Sample(NamedTuple):
    location: GeoPoint
    features: np.ndarray
    target: float
    timestamp: int


@dataclass(frozen=True, eq=False)
class SourceDataset:
    """One data source stored column-wise.

    ``locations`` is (n, 2), ``features`` is (n, p), ``targets`` and ``timestamps``
    are length n.  Arrays are made read-only on construction.
    """

    source_id: int
    locations: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    timestamps: np.ndarray
    declared_name: str = ""

    def __post_init__(self) -> None:
        locs = np.array(self.locations, dtype=float).reshape(-1, 2)
        n = len(locs)
        feats = np.array(self.features, dtype=float)
        if feats.size == 0:
            feats = feats.reshape(n, 0)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise DataError(f"ragged features: source {self.source_id} features shape {feats.shape} for {n} samples")
        targets = np.array(self.targets, dtype=float).reshape(-1)
        stamps = np.array(self.timestamps, dtype=np.int64).reshape(-1)
        if n < 1:
            raise DataError(f"source {self.source_id} has no samples")
        if len(targets) != n or len(stamps) != n:
            raise DataError(f"source {self.source_id}: column lengths disagree")
        for name, arr in (("locations", locs), ("features", feats), ("targets", targets)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"source {self.source_id}: non-finite {name}")
        for arr in (locs, feats, targets, stamps):
            arr.setflags(write=False)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "timestamps", stamps)
        if not self.declared_name:
            object.__setattr__(self, "declared_name", f"source_{self.source_id}")

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, j: int) -> Sample:
        x, y = self.locations[j]
        return Sample(GeoPoint(float(x), float(y)), self.features[j],
                      float(self.targets[j]), int(self.timestamps[j]))

    @property
    def samples(self) -> list[Sample]:
        return [self[j] for j in range(self.n)]

    def timestamp_groups(self) -> dict[int, np.ndarray]:
        """Sample indices per timestamp, each group in ascending index order."""
        out: dict[int, np.ndarray] = {}
        for t in np.unique(self.timestamps):
            out[int(t)] = np.flatnonzero(self.timestamps == t)
        return out

    def with_locations(self, locations: np.ndarray) -> "SourceDataset":
        return SourceDataset(self.source_id, locations, self.features, self.targets,
                             self.timestamps, self.declared_name)


@dataclass(frozen=True, eq=False)
class MultiSourceDataset:
    sources: tuple[SourceDataset, ...]

    def __post_init__(self) -> None:
        sources = tuple(self.sources)
        if not sources:
            raise DataError("dataset needs at least one source")
        for i, src in enumerate(sources):
            if src.source_id != i:
                raise DataError(f"schema violation: source ids must be 0..N-1, found {src.source_id} at position {i}")
        object.__setattr__(self, "sources", sources)

    @property
    def N(self) -> int:
        return len(self.sources)

    @property
    def feature_dims(self) -> list[int]:
        return [s.feature_dim for s in self.sources]

    def __getitem__(self, i: int) -> SourceDataset:
        return self.sources[i]

    def observed_target(self, source_id: int, index: int) -> tuple[float, int]:
        """Target as the model sees it: ``(value, mask_flag)``."""
        return float(self.sources[source_id].targets[index]), 0

    def node_inputs(self, source_id: int, indices: np.ndarray) -> np.ndarray:
        """Rows ``[features ; target ; mask_flag]`` for the given samples."""
        src = self.sources[source_id]
        idx = np.asarray(indices, dtype=np.int64)
        out = np.empty((len(idx), src.feature_dim + 2))
        out[:, :-2] = src.features[idx]
        out[:, -2] = src.targets[idx]
        out[:, -1] = 0.0
        return out

    def transformed(self, rotation: float = 0.0, shift=(0.0, 0.0)) -> "MultiSourceDataset":
        """Copy with every location rigidly rotated (radians) then translated."""
        c, s = math.cos(rotation), math.sin(rotation)
        rot = np.array([[c, -s], [s, c]])
        shift = np.asarray(shift, dtype=float)
        return MultiSourceDataset(tuple(src.with_locations(src.locations @ rot.T + shift)
                                        for src in self.sources))


MASK_VALUE = 0.0
MASK_FLAG = 1.0


@dataclass(frozen=True)
class MaskedView:
    """Read-only view of a dataset with one target hidden.

    The hidden target reads as ``(MASK_VALUE, MASK_FLAG)`` through every accessor;
    the underlying arrays are never copied.
    """

    base: MultiSourceDataset
    masked_source: int
    masked_index: int

    @property
    def sources(self) -> tuple[SourceDataset, ...]:
        return self.base.sources

    @property
    def N(self) -> int:
        return self.base.N

    @property
    def feature_dims(self) -> list[int]:
        return self.base.feature_dims

    def __getitem__(self, i: int) -> SourceDataset:
        # Callers needing targets must use observed_target/node_inputs.
        return self.base[i]

    def is_masked(self, source_id: int, index: int) -> bool:
        return source_id == self.masked_source and index == self.masked_index

    def observed_target(self, source_id: int, index: int) -> tuple[float, int]:
        if self.is_masked(source_id, index):
            return MASK_VALUE, 1
        return self.base.observed_target(source_id, index)

    def masked_sample(self) -> Sample:
        """The masked sample with its target replaced by the mask value."""
        s = self.base[self.masked_source][self.masked_index]
        return s._replace(target=MASK_VALUE)

    def node_inputs(self, source_id: int, indices: np.ndarray) -> np.ndarray:
        out = self.base.node_inputs(source_id, indices)
        if source_id == self.masked_source:
            hit = np.asarray(indices) == self.masked_index
            out[hit, -2] = MASK_VALUE
            out[hit, -1] = MASK_FLAG
        return out

    def unmask(self) -> MultiSourceDataset:
        return self.base


def mask_target(dataset: MultiSourceDataset, source_id: int, index: int) -> MaskedView:
    if not 0 <= source_id < dataset.N or not 0 <= index < dataset[source_id].n:
        raise DataError(f"invalid mask target: ({source_id}, {index})")
    return MaskedView(dataset, source_id, index)


def simultaneous_samples(source: SourceDataset, timestamp: int) -> list[Sample]:
    return [source[j] for j in np.flatnonzero(source.timestamps == timestamp)]


# --------------------------------------------------------------------------- CSV

@dataclass(frozen=True)
class CsvSchema:
    source_col: str = "source_id"
    timestamp_col: str = "timestamp"
    x_col: str = "x"
    y_col: str = "y"
    target_col: str = "target"
    feature_prefix: str = "f"


def _parse_float(cell: str, row_no: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"parse error: row {row_no}, column {col!r}: {cell!r} is not numeric") from None
    if not math.isfinite(value):
        raise DataError(f"parse error: row {row_no}, column {col!r}: non-finite value")
    return value


def load_csv(path, schema: CsvSchema | None = None) -> MultiSourceDataset:
    """Read a dataset CSV.  Row numbers in errors count the header as row 1."""
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("schema violation: empty file") from None
        for col in (schema.source_col, schema.x_col, schema.y_col, schema.target_col):
            if col not in header:
                raise DataError(f"schema violation: missing column {col!r}")
        pos = {name: i for i, name in enumerate(header)}
        feat_cols = sorted(
            (int(h[len(schema.feature_prefix):]), pos[h]) for h in header
            if h.startswith(schema.feature_prefix) and h[len(schema.feature_prefix):].isdigit()
        )
        if [c for c, _ in feat_cols] != list(range(len(feat_cols))):
            raise DataError("schema violation: feature columns must be f0..fM without gaps")
        has_ts = schema.timestamp_col in pos

        rows: dict[int, dict[str, list]] = {}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            sid_f = _parse_float(row[pos[schema.source_col]], row_no, schema.source_col)
            if sid_f != int(sid_f) or sid_f < 0:
                raise DataError(f"parse error: row {row_no}: source_id must be a nonnegative integer")
            sid = int(sid_f)
            ts = 0
            if has_ts and row[pos[schema.timestamp_col]].strip():
                ts_f = _parse_float(row[pos[schema.timestamp_col]], row_no, schema.timestamp_col)
                if ts_f != int(ts_f):
                    raise DataError(f"parse error: row {row_no}: timestamp must be an integer")
                ts = int(ts_f)
            x = _parse_float(row[pos[schema.x_col]], row_no, schema.x_col)
            y = _parse_float(row[pos[schema.y_col]], row_no, schema.y_col)
            target = _parse_float(row[pos[schema.target_col]], row_no, schema.target_col)
            cells = [row[c].strip() for _, c in feat_cols]
            while cells and not cells[-1]:
                cells.pop()
            feats = [_parse_float(c, row_no, f"{schema.feature_prefix}{i}") for i, c in enumerate(cells)]
            acc = rows.setdefault(sid, {"loc": [], "feat": [], "y": [], "t": [], "first_row": row_no})
            if acc["feat"] and len(feats) != len(acc["feat"][0]):
                raise DataError(
                    f"ragged features: source {sid} row {row_no} has {len(feats)} features, "
                    f"expected {len(acc['feat'][0])}")
            acc["loc"].append((x, y))
            acc["feat"].append(feats)
            acc["y"].append(target)
            acc["t"].append(ts)

    if not rows:
        raise DataError("schema violation: no data rows")
    if sorted(rows) != list(range(len(rows))):
        raise DataError(f"schema violation: source ids must be 0..N-1, found {sorted(rows)}")
    sources = []
    for sid in range(len(rows)):
        acc = rows[sid]
        p = len(acc["feat"][0])
        feats = np.array(acc["feat"], dtype=float).reshape(len(acc["y"]), p)
        sources.append(SourceDataset(sid, np.array(acc["loc"]), feats, np.array(acc["y"]), np.array(acc["t"])))
    return MultiSourceDataset(tuple(sources))


def save_csv(dataset: MultiSourceDataset, path) -> None:
    """Write ``dataset`` in the CSV layout; floats use repr so they round-trip."""
    m = max(dataset.feature_dims) if dataset.N else 0
    header = ["source_id", "timestamp", "x", "y", "target"] + [f"f{i}" for i in range(m)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for src in dataset.sources:
            for j in range(src.n):
                feats = [repr(float(v)) for v in src.features[j]]
                feats += [""] * (m - len(feats))
                w.writerow([src.source_id, int(src.timestamps[j]),
                            repr(float(src.locations[j, 0])), repr(float(src.locations[j, 1])),
                            repr(float(src.targets[j]))] + feats)


# --------------------------------------------------------------------------- SCR

FEATURE_TRANSFORMS = {
    "sum12": lambda f: f[0] + f[1],
    "abs3": lambda f: np.abs(f[2]),
    "prod12": lambda f: f[0] * f[1],
    "sq2": lambda f: f[1] ** 2,
}


def scr_target(fields: np.ndarray) -> np.ndarray:
    """Nonlinear ground truth from latent fields stacked on axis 0."""
    f1, f2, f3 = fields[0], fields[1], fields[2]
    return np.sin(f1) + f2 * f3 + 0.5 * f1 ** 2


@dataclass(frozen=True)
class ScrConfig:
    """Synthetic spatially-correlated regression benchmark.

    Latent fields are white noise on a ``grid_size`` square grid smoothed by a
    Gaussian kernel of ``length_scale`` cells, standardised, and bilinearly
    interpolated off-grid.  Locations live in ``[0, grid_size - 1]^2``.
    """

    grid_size: int = 64
    length_scale: float = 8.0
    n_fields: int = 3
    n_high: int = 200
    n_low: int = 2000
    noise_sigma: float = 0.5
    high_features: tuple[str, ...] = ("sum12", "abs3", "prod12")
    low_features: tuple[str, ...] = ("sum12", "abs3")
    identical_sources: bool = False

    def validate(self) -> None:
        if self.grid_size < 2 or self.n_high < 1 or self.n_low < 1:
            raise DataError("SCR config sizes must be positive (grid_size >= 2)")
        if self.n_fields < 3:
            raise DataError("SCR needs at least 3 latent fields")
        if not self.length_scale > 0:
            raise DataError("SCR length_scale must be positive")
        if not self.noise_sigma >= 0:
            raise DataError("SCR noise_sigma must be >= 0")
        for name in self.high_features + self.low_features:
            if name not in FEATURE_TRANSFORMS:
                raise DataError(f"unknown SCR feature transform {name!r}")
        if self.identical_sources and self.n_high != self.n_low:
            raise DataError("identical_sources requires n_high == n_low")


@dataclass
class GroundTruth:
    """Latent fields on the grid plus the noise-free target they imply."""

    fields: np.ndarray  # (F, G, G), indexed [field, x, y]
    grid_size: int

    @property
    def coords(self) -> np.ndarray:
        return np.arange(self.grid_size, dtype=float)

    def fields_at(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return np.stack([ndimage.map_coordinates(f, pts.T, order=1, mode="nearest")
                         for f in self.fields])

    def at(self, points: np.ndarray) -> np.ndarray:
        """Exact ground truth at arbitrary locations."""
        return scr_target(self.fields_at(points))

    def grid_table(self) -> np.ndarray:
        """Rows ``(x, y, truth)`` over every grid node, x-major."""
        gx, gy = np.meshgrid(self.coords, self.coords, indexing="ij")
        truth = scr_target(self.fields)
        return np.column_stack([gx.ravel(), gy.ravel(), truth.ravel()])


def _latent_fields(cfg: ScrConfig, rng: np.random.Generator) -> np.ndarray:
    out = []
    for _ in range(cfg.n_fields):
        noise = rng.standard_normal((cfg.grid_size, cfg.grid_size))
        smooth = ndimage.gaussian_filter(noise, sigma=cfg.length_scale, mode="wrap")
        smooth = (smooth - smooth.mean()) / smooth.std()
        out.append(smooth)
    return np.stack(out)


def generate_scr(config: ScrConfig | None = None, seed: int = 0) -> tuple[MultiSourceDataset, GroundTruth]:
    """Generate the two-source SCR dataset and its ground truth.

    Source 0 is high quality (targets equal the truth); source 1 is low quality
    (truth plus Gaussian noise of ``noise_sigma``).  Features released to the
    model are lossy combinations of the latent fields.
    """
    cfg = config or ScrConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    fields = _latent_fields(cfg, rng)
    truth = GroundTruth(fields, cfg.grid_size)
    hi = cfg.grid_size - 1

    loc_high = rng.uniform(0.0, hi, size=(cfg.n_high, 2))
    loc_low = loc_high.copy() if cfg.identical_sources else rng.uniform(0.0, hi, size=(cfg.n_low, 2))
    noise = rng.standard_normal(cfg.n_low) * cfg.noise_sigma

    def make(sid, locs, names, extra, label):
        f = truth.fields_at(locs)
        feats = np.column_stack([FEATURE_TRANSFORMS[name](f) for name in names])
        y = scr_target(f) + extra
        return SourceDataset(sid, locs, feats, y, np.zeros(len(locs), dtype=np.int64), label)

    high = make(0, loc_high, cfg.high_features, 0.0, "high_quality")
    low_names = cfg.high_features if cfg.identical_sources else cfg.low_features
    low = make(1, loc_low, low_names, noise, "low_quality")
    return MultiSourceDataset((high, low)), truth


def save_truth_csv(truth: GroundTruth, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "truth"])
        for x, y, v in truth.grid_table():
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


@dataclass
class TruthGrid:
    """A ground-truth table read back from CSV, queried by nearest grid node."""

    points: np.ndarray
    values: np.ndarray

    def nearest(self, points: np.ndarray) -> np.ndarray:
        from scipy.spatial import cKDTree

        _, idx = cKDTree(self.points).query(np.asarray(points, dtype=float).reshape(-1, 2))
        return self.values[idx]


def load_truth_csv(path) -> TruthGrid:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        for col in ("x", "y", "truth"):
            if col not in header:
                raise DataError(f"schema violation: missing column {col!r}")
        ix, iy, iv = header.index("x"), header.index("y"), header.index("truth")
        rows = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            rows.append([_parse_float(row[ix], row_no, "x"), _parse_float(row[iy], row_no, "y"),
                         _parse_float(row[iv], row_no, "truth")])
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    return TruthGrid(arr[:, :2], arr[:, 2])


def truth_grid_from(truth: GroundTruth) -> TruthGrid:
    table = truth.grid_table()
    return TruthGrid(table[:, :2], table[:, 2])


# ------------------------------------------------------------------------- split

@dataclass
class Split:
    """Per-source train/validation/test index arrays."""

    train: list[np.ndarray]
    validation: list[np.ndarray]
    test: list[np.ndarray]
    seed: int = 0
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def part(self, name: str) -> list[np.ndarray]:
        return {"train": self.train, "validation": self.validation, "val": self.validation,
                "test": self.test}[name]


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation, then at least one sample per nonzero part."""
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:n - sum(sizes)]:
        sizes[i] += 1
    for i, f in enumerate(fractions):
        if f > 0 and sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda d: sizes[d])
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split(dataset: MultiSourceDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Split:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for src in dataset.sources:
        if src.n < 3:
            raise DataError(f"split infeasible: source {src.source_id} has {src.n} samples")
        perm = rng.permutation(src.n)
        a, b, _ = split_sizes(src.n, fractions)
        for p, chunk in zip(parts, (perm[:a], perm[a:a + b], perm[a + b:])):
            p.append(np.sort(chunk))
    return Split(parts[0], parts[1], parts[2], seed, fractions)
