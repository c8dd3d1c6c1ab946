"""Series containers, CSV ingestion, splits, and synthetic generators.

A `SeriesFrame` holds a multichannel series as a [channels x time] float64
array plus split boundaries and the standardization scaler. Splits follow the
usual forecasting protocol: chronological train/val/test, scaler fit on the
train slice only and applied everywhere, metrics reported on the standardized
scale.

Generators cover the dependency-structure experiments: a random-walk master
with lagged copies and random linear mixtures of them (strong, learnable
cross-channel structure), and independent AR(1)-plus-noise channels (no
cross-channel structure at all).
"""

from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ExperimentError, IngestionError

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SplitSpec:
    """Chronological split fractions plus the few-shot training fraction."""

    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    few_shot_fraction: float = 1.0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError(f"split fractions must be 3 positives, got "
                              f"{self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got "
                              f"{sum(self.fractions)}")
        if not 0.0 < self.few_shot_fraction <= 1.0:
            raise ConfigError(f"few-shot fraction must be in (0, 1], got "
                              f"{self.few_shot_fraction}")


@dataclass
class SeriesFrame:
    """A [channels x time] series with optional split boundaries and scaler.

    `train_end` may be pulled below `val_start` by few-shot truncation; the
    validation and test slices never move once assigned.
    """

    values: np.ndarray
    channel_names: list[str]
    train_end: int | None = None
    val_start: int | None = None
    val_end: int | None = None
    scaler: tuple[np.ndarray, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigError(f"series values must be [channels x time], got "
                              f"shape {self.values.shape}")
        c, t = self.values.shape
        if c < 1 or t < 1:
            raise ConfigError(f"series needs >= 1 channel and step, got {c}x{t}")
        if len(self.channel_names) != c:
            raise ConfigError(f"{len(self.channel_names)} names for {c} channels")
        if self.is_split:
            if not (0 < self.train_end <= self.val_start
                    < self.val_end <= t):
                raise ConfigError(
                    f"split boundaries 0 < {self.train_end} <= "
                    f"{self.val_start} < {self.val_end} <= {t} violated")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def is_split(self) -> bool:
        return self.train_end is not None

    def split_bounds(self, split: str) -> tuple[int, int]:
        """(start, stop) of a named slice along the time axis."""
        if not self.is_split:
            raise ConfigError("frame has no split boundaries yet")
        if split == "train":
            return 0, self.train_end
        if split == "val":
            return self.val_start, self.val_end
        if split == "test":
            return self.val_end, self.n_steps
        raise ConfigError(f"unknown split {split!r}; expected one of "
                          f"{SPLIT_NAMES}")

    def select_channels(self, indices) -> "SeriesFrame":
        """A frame restricted to the given channel indices (copies values)."""
        indices = list(indices)
        scaler = None
        if self.scaler is not None:
            scaler = (self.scaler[0][indices].copy(),
                      self.scaler[1][indices].copy())
        return dataclasses.replace(
            self,
            values=self.values[indices].copy(),
            channel_names=[self.channel_names[i] for i in indices],
            scaler=scaler,
            meta=dict(self.meta),
        )

    def inverse_transform(self, standardized: np.ndarray) -> np.ndarray:
        """Map standardized values back to the original scale."""
        if self.scaler is None:
            return np.asarray(standardized, dtype=np.float64)
        mean, std = self.scaler
        return np.asarray(standardized) * std[:, None] + mean[:, None]


@dataclass
class MultiSpec:
    """Master random walk + lagged copies + random linear mixtures."""

    n_steps: int = 20000
    shifts: tuple[int, ...] = (96, 192, 336, 720)
    combinations: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be positive, got {self.n_steps}")
        if any(s < 1 for s in self.shifts):
            raise ConfigError(f"shifts must be positive, got {self.shifts}")
        if any(s >= self.n_steps for s in self.shifts):
            raise ConfigError(f"shift {max(self.shifts)} >= series length "
                              f"{self.n_steps}")
        if self.combinations < 0:
            raise ConfigError("combinations must be >= 0")

    @property
    def n_channels(self) -> int:
        return 1 + len(self.shifts) + self.combinations


# -- ingestion ----------------------------------------------------------------


def load_csv(path) -> SeriesFrame:
    """Read a header-first CSV of numeric channels into an unsplit frame.

    An optional leading column named `date` (any case) is ignored. Errors name
    the offending 1-based data row and the column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if not header or all(not h for h in header):
            raise IngestionError(f"{path}: header row is empty")
        skip_first = bool(header) and header[0].lower() == "date"
        names = header[1:] if skip_first else header
        if not names:
            raise IngestionError(f"{path}: no value columns after the date "
                                 f"column")
        rows: list[list[float]] = []
        for row_idx, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {row_idx} has {len(row)} cells, expected "
                    f"{len(header)}")
            cells = row[1:] if skip_first else row
            parsed = []
            for name, cell in zip(names, cells):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise IngestionError(
                        f"{path}: non-numeric cell {cell!r} at row {row_idx}, "
                        f"column {name!r}") from None
            rows.append(parsed)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64).T  # [C, T]
    return SeriesFrame(values=values, channel_names=list(names))


def write_csv(frame: SeriesFrame, path) -> None:
    """Write a frame as a header-first CSV (inverse of `load_csv`)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(frame.channel_names)
        for t in range(frame.n_steps):
            writer.writerow([repr(float(v)) for v in frame.values[:, t]])


# -- splitting and scaling -----------------------------------------------------


def split_standardize(frame: SeriesFrame, spec: SplitSpec | None = None
                      ) -> SeriesFrame:
    """Assign chronological splits and standardize with train-only statistics.

    Mean and population standard deviation are computed per channel over the
    train slice and applied to the whole series. A constant channel gets its
    std clamped to 1 with a warning instead of dividing by zero.
    """
    spec = spec or SplitSpec()
    t = frame.n_steps
    # epsilon guards the floor against float artifacts like 0.7+0.1 -> 0.79..9
    train_end = int(spec.fractions[0] * t + 1e-9)
    val_end = int((spec.fractions[0] + spec.fractions[1]) * t + 1e-9)
    if not (0 < train_end < val_end < t):
        raise ConfigError(
            f"series of length {t} too short for fractions {spec.fractions}")
    train = frame.values[:, :train_end]
    mean = train.mean(axis=1)
    std = train.std(axis=1)  # population variance
    flat = std == 0.0
    if flat.any():
        flat_names = [frame.channel_names[i] for i in np.flatnonzero(flat)]
        warnings.warn(f"constant channel(s) {flat_names} in the train slice; "
                      f"std clamped to 1", stacklevel=2)
        std = np.where(flat, 1.0, std)
    values = (frame.values - mean[:, None]) / std[:, None]
    return dataclasses.replace(
        frame, values=values, train_end=train_end, val_start=train_end,
        val_end=val_end, scaler=(mean, std), meta=dict(frame.meta))


def few_shot_truncate(frame: SeriesFrame, fraction: float,
                      min_len: int | None = None) -> SeriesFrame:
    """Shrink the train slice to its first floor(fraction * train_len) steps.

    Validation and test slices stay where they are. If the result is shorter
    than `min_len` the experiment cannot run (mirrors the blank cells of
    too-small few-shot setups) and a structured error is raised.
    """
    if not frame.is_split:
        raise ConfigError("few_shot_truncate needs a split frame")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"few-shot fraction must be in (0, 1], got {fraction}")
    new_end = int(fraction * frame.train_end)
    if min_len is not None and new_end < min_len:
        raise ExperimentError(
            f"few-shot train slice of {new_end} steps is shorter than the "
            f"required {min_len}", reason="insufficient-train-data")
    if new_end < 1:
        raise ExperimentError("few-shot train slice is empty",
                              reason="insufficient-train-data")
    return dataclasses.replace(frame, train_end=new_end, meta=dict(frame.meta))


# -- synthetic generators ------------------------------------------------------


def gen_random_walk(n_steps: int, seed) -> np.ndarray:
    """Random walk x(0)=0, x(t) = x(t-1) + eps(t), unit normal increments."""
    if n_steps < 1:
        raise ConfigError(f"n_steps must be positive, got {n_steps}")
    rng = np.random.default_rng(seed)
    increments = rng.standard_normal(n_steps - 1)
    walk = np.empty(n_steps, dtype=np.float64)
    walk[0] = 0.0
    np.cumsum(increments, out=walk[1:])
    return walk


def gen_multi(spec: MultiSpec) -> SeriesFrame:
    """Master walk, lagged copies, and recorded random mixtures of both.

    Channel 1+i equals the master lagged by shifts[i]; the warm-up region
    t < shift is filled with the master's initial value. Mixture channels are
    uniform[-1, 1] combinations of the master and lagged channels, with the
    coefficients recorded in `frame.meta`.
    """
    walk_seq, combo_seq = np.random.SeedSequence(spec.seed).spawn(2)
    master = gen_random_walk(spec.n_steps, walk_seq)
    base = [master]
    names = ["master"]
    for s in spec.shifts:
        lagged = np.empty_like(master)
        lagged[:s] = master[0]
        lagged[s:] = master[:spec.n_steps - s]
        base.append(lagged)
        names.append(f"shift_{s}")
    base_matrix = np.stack(base)
    combo_rng = np.random.default_rng(combo_seq)
    coeffs = combo_rng.uniform(-1.0, 1.0,
                               size=(spec.combinations, len(base)))
    channels = [base_matrix]
    if spec.combinations:
        channels.append(coeffs @ base_matrix)
        names.extend(f"combo_{j}" for j in range(spec.combinations))
    values = np.concatenate(channels, axis=0)
    meta = {
        "generator": "multi",
        "shifts": list(spec.shifts),
        "combination_coefficients": coeffs.tolist(),
        "seed": spec.seed,
    }
    return SeriesFrame(values=values, channel_names=names, meta=meta)


def gen_channels_independent(n_steps: int, n_channels: int, seed,
                             phi: float = 0.9) -> SeriesFrame:
    """Independent AR(1) channels observed through unit noise.

    Per channel: x(t) = phi * x(t-1) + eps(t), y(t) = x(t) + eta(t), with eps
    and eta unit normal from channel-specific spawned streams. phi = 0
    degenerates to white noise.
    """
    if n_steps < 1 or n_channels < 1:
        raise ConfigError(f"need positive sizes, got {n_steps}x{n_channels}")
    if not -1.0 < phi < 1.0:
        raise ConfigError(f"phi must be in (-1, 1) for stationarity, got {phi}")
    streams = np.random.SeedSequence(seed).spawn(n_channels)
    values = np.empty((n_channels, n_steps), dtype=np.float64)
    for c, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        eps = rng.standard_normal(n_steps)
        eta = rng.standard_normal(n_steps)
        state = np.empty(n_steps, dtype=np.float64)
        acc = 0.0
        for t in range(n_steps):
            acc = phi * acc + eps[t]
            state[t] = acc
        values[c] = state + eta
    meta = {"generator": "independent_ar", "phi": phi, "seed": seed}
    names = [f"ch_{c}" for c in range(n_channels)]
    return SeriesFrame(values=values, channel_names=names, meta=meta)
