"""Fingerprint records, CSV I/O, sample reduction and stratified splitting."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from vital.errors import DataError
from vital.io_utils import atomic_open

RSSI_MIN = -100.0
RSSI_MAX = 0.0
NOT_VISIBLE = RSSI_MIN
DEFAULT_SAMPLES = 5

KEY_COLUMNS = ("building_id", "rp_id", "x_m", "y_m", "device_id", "sample_idx")
AP_PREFIX = "ap_"


@dataclass(frozen=True)
class ReferencePoint:
    rp_id: int
    building_id: int
    x: float
    y: float


@dataclass(frozen=True)
class FingerprintRecord:
    """Raw scans of one device at one RP.

    ``readings`` maps AP id to its ``samples``-long reading sequence; APs
    never seen in any scan are simply absent.
    """

    building_id: int
    rp_id: int
    device_id: str
    readings: Mapping[str, np.ndarray] = field(repr=False)

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.building_id, self.rp_id, self.device_id)

    def reduce(self) -> dict[str, tuple[float, float, float]]:
        return {ap: reduce_samples(v) for ap, v in self.readings.items()}


def reduce_samples(samples: Sequence[float]) -> tuple[float, float, float]:
    """Collapse repeated scans of one AP to ``(min, max, mean)``."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise DataError("cannot reduce an empty sample sequence")
    if np.any(arr < RSSI_MIN) or np.any(arr > RSSI_MAX):
        raise DataError(f"RSSI samples outside [{RSSI_MIN:g}, {RSSI_MAX:g}]: {arr.tolist()}")
    lo, hi = float(arr.min()), float(arr.max())
    # clamp guards the last-ulp rounding of the mean
    mid = min(max(float(arr.mean()), lo), hi)
    return lo, hi, mid


def to_1d_image(record, ap_index: Mapping[str, int] | Sequence[str]) -> np.ndarray:
    """``(A, 3)`` image in dB: pixel ``p`` holds (min, max, mean) of AP ``p``.

    ``record`` is a :class:`FingerprintRecord` or an already reduced
    ``{ap_id: (min, max, mean)}`` mapping.  Absent APs get the sentinel -100.
    """
    if not isinstance(ap_index, Mapping):
        ap_index = {ap: i for i, ap in enumerate(ap_index)}
    reduced = record.reduce() if isinstance(record, FingerprintRecord) else record
    img = np.full((len(ap_index), 3), NOT_VISIBLE, dtype=np.float64)
    for ap, triple in reduced.items():
        pos = ap_index.get(ap)
        if pos is None:
            raise DataError(f"AP {ap!r} is not in the AP index")
        img[pos] = triple
    return img


@dataclass(frozen=True)
class FingerprintDataset:
    records: tuple[FingerprintRecord, ...]
    rps: Mapping[tuple[int, int], ReferencePoint]
    ap_ids: tuple[str, ...]
    samples_per_record: int = DEFAULT_SAMPLES

    def __post_init__(self):
        if list(self.ap_ids) != sorted(set(self.ap_ids)):
            raise DataError("AP ids must be unique and sorted")
        index = self.ap_index
        for rec in self.records:
            if (rec.building_id, rec.rp_id) not in self.rps:
                raise DataError(f"record {rec.key} has no RP coordinates")
            for ap in rec.readings:
                if ap not in index:
                    raise DataError(f"record {rec.key} uses unknown AP {ap!r}")

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def ap_index(self) -> dict[str, int]:
        return {ap: i for i, ap in enumerate(self.ap_ids)}

    @property
    def devices(self) -> tuple[str, ...]:
        return tuple(sorted({r.device_id for r in self.records}))

    @property
    def buildings(self) -> tuple[int, ...]:
        return tuple(sorted({r.building_id for r in self.records}))

    def rp_ids(self, building_id: int) -> tuple[int, ...]:
        return tuple(sorted(rp for (b, rp) in self.rps if b == building_id))

    def building_ap_ids(self, building_id: int) -> tuple[str, ...]:
        """APs heard anywhere in one building, in global index order."""
        seen = set()
        for rec in self.records:
            if rec.building_id == building_id:
                seen.update(rec.readings)
        return tuple(ap for ap in self.ap_ids if ap in seen)

    def subset(self, keep: Iterable[int] | np.ndarray) -> "FingerprintDataset":
        idx = np.asarray(list(keep) if not isinstance(keep, np.ndarray) else keep)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return FingerprintDataset(
            tuple(self.records[i] for i in idx), self.rps, self.ap_ids, self.samples_per_record
        )

    def where(self, building_id=None, devices: Iterable[str] | None = None) -> "FingerprintDataset":
        devs = None if devices is None else set(devices)
        keep = [
            i for i, r in enumerate(self.records)
            if (building_id is None or r.building_id == building_id)
            and (devs is None or r.device_id in devs)
        ]
        return self.subset(keep)

    def images_1d(self, ap_ids: Sequence[str] | None = None) -> np.ndarray:
        """Stacked ``(n, A, 3)`` dB images for every record."""
        ap_ids = self.ap_ids if ap_ids is None else ap_ids
        index = {ap: i for i, ap in enumerate(ap_ids)}
        out = np.full((len(self.records), len(ap_ids), 3), NOT_VISIBLE)
        for n, rec in enumerate(self.records):
            if not rec.readings:
                continue
            try:
                cols = [index[ap] for ap in rec.readings]
            except KeyError as exc:
                raise DataError(f"AP {exc.args[0]!r} is not in the AP index") from None
            block = np.stack(list(rec.readings.values()))
            mean = np.minimum(np.maximum(block.mean(axis=1), block.min(axis=1)), block.max(axis=1))
            out[n, cols, 0] = block.min(axis=1)
            out[n, cols, 1] = block.max(axis=1)
            out[n, cols, 2] = mean
        return out


# ---------------------------------------------------------------------------
# CSV I/O


def load_dataset(path, samples_per_record: int | None = None) -> FingerprintDataset:
    """Parse the fingerprint CSV (one row per scan sample).

    Raises :class:`DataError` on malformed rows, out-of-range RSSI, duplicate
    ``(building, rp, device, sample)`` keys or inconsistent sample counts.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"device_id": str}, keep_default_na=True, encoding="utf-8")
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: malformed CSV: {exc}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None

    cols = list(df.columns)
    if tuple(cols[: len(KEY_COLUMNS)]) != KEY_COLUMNS:
        raise DataError(f"{path}: header must start with {','.join(KEY_COLUMNS)}")
    ap_cols = cols[len(KEY_COLUMNS):]
    bad = [c for c in ap_cols if not c.startswith(AP_PREFIX) or len(c) == len(AP_PREFIX)]
    if bad:
        raise DataError(f"{path}: unexpected columns {bad}")
    ap_ids = [c[len(AP_PREFIX):] for c in ap_cols]
    if len(set(ap_ids)) != len(ap_ids):
        raise DataError(f"{path}: duplicate AP columns")

    def line_of(i: int) -> int:
        return int(i) + 2  # header is line 1

    for c in ("building_id", "rp_id", "sample_idx", "x_m", "y_m"):
        num = pd.to_numeric(df[c], errors="coerce")
        badrows = np.flatnonzero(num.isna().to_numpy() | ~np.isfinite(num.to_numpy(dtype=float, na_value=np.nan)))
        if badrows.size:
            raise DataError(f"{path}: row {line_of(badrows[0])}: bad value in column {c}")
        if c in ("building_id", "rp_id", "sample_idx") and np.any(num != np.round(num)):
            i = np.flatnonzero((num != np.round(num)).to_numpy())[0]
            raise DataError(f"{path}: row {line_of(i)}: column {c} must be an integer")
        df[c] = num
    if df["device_id"].isna().any():
        i = np.flatnonzero(df["device_id"].isna().to_numpy())[0]
        raise DataError(f"{path}: row {line_of(i)}: missing device_id")

    if ap_cols:
        rssi_df = df[ap_cols].apply(pd.to_numeric, errors="coerce")
        nonnum = rssi_df.isna().to_numpy() & df[ap_cols].notna().to_numpy()
        if nonnum.any():
            i, j = np.argwhere(nonnum)[0]
            raise DataError(f"{path}: row {line_of(i)}: non-numeric RSSI in column {ap_cols[j]}")
        rssi = rssi_df.to_numpy(dtype=np.float64, na_value=NOT_VISIBLE)
    else:
        rssi = np.zeros((len(df), 0))
    out_of_range = ~np.isfinite(rssi) | (rssi < RSSI_MIN) | (rssi > RSSI_MAX)
    if out_of_range.any():
        i, j = np.argwhere(out_of_range)[0]
        raise DataError(
            f"{path}: row {line_of(i)}: RSSI {rssi[i, j]:g} in column {ap_cols[j]} outside [-100, 0]"
        )

    b = df["building_id"].to_numpy(dtype=np.int64)
    rp = df["rp_id"].to_numpy(dtype=np.int64)
    dev = df["device_id"].astype(str).to_numpy()
    s = df["sample_idx"].to_numpy(dtype=np.int64)
    x = df["x_m"].to_numpy(dtype=np.float64)
    y = df["y_m"].to_numpy(dtype=np.float64)

    keys = pd.DataFrame({"b": b, "rp": rp, "dev": dev, "s": s})
    dup = keys.duplicated(keep="first").to_numpy()
    if dup.any():
        i = np.flatnonzero(dup)[0]
        raise DataError(
            f"{path}: row {line_of(i)}: duplicate key (building={b[i]}, rp={rp[i]}, device={dev[i]}, sample={s[i]})"
        )

    rps: dict[tuple[int, int], ReferencePoint] = {}
    for i in range(len(df)):
        k = (int(b[i]), int(rp[i]))
        ref = rps.get(k)
        if ref is None:
            rps[k] = ReferencePoint(k[1], k[0], float(x[i]), float(y[i]))
        elif ref.x != x[i] or ref.y != y[i]:
            raise DataError(f"{path}: row {line_of(i)}: coordinates of RP {k} disagree with earlier rows")

    order = np.lexsort((s, dev, rp, b))
    ap_order = np.argsort(np.array(ap_ids, dtype=object), kind="stable") if ap_ids else np.array([], int)
    sorted_ap_ids = tuple(ap_ids[j] for j in ap_order)
    rssi = rssi[:, ap_order]

    records = []
    start = 0
    n = len(order)
    expected = samples_per_record
    while start < n:
        i0 = order[start]
        stop = start
        while stop < n and b[order[stop]] == b[i0] and rp[order[stop]] == rp[i0] and dev[order[stop]] == dev[i0]:
            stop += 1
        rows = order[start:stop]
        count = stop - start
        if expected is None:
            expected = count
        if count != expected or not np.array_equal(np.sort(s[rows]), np.arange(count)):
            raise DataError(
                f"{path}: record (building={b[i0]}, rp={rp[i0]}, device={dev[i0]}) has sample indices "
                f"{sorted(s[rows].tolist())}, expected 0..{expected - 1}"
            )
        block = rssi[rows]
        visible = np.flatnonzero((block > NOT_VISIBLE).any(axis=0))
        readings = {sorted_ap_ids[j]: block[:, j].copy() for j in visible}
        records.append(FingerprintRecord(int(b[i0]), int(rp[i0]), str(dev[i0]), readings))
        start = stop

    return FingerprintDataset(tuple(records), rps, sorted_ap_ids, expected or DEFAULT_SAMPLES)


def save_dataset(dataset: FingerprintDataset, path) -> None:
    """Write ``dataset`` in canonical order; values use shortest round-trip repr."""
    header = ",".join(KEY_COLUMNS + tuple(AP_PREFIX + ap for ap in dataset.ap_ids))
    index = dataset.ap_index
    n_ap = len(dataset.ap_ids)
    recs = sorted(dataset.records, key=lambda r: r.key)
    with atomic_open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for rec in recs:
            ref = dataset.rps[(rec.building_id, rec.rp_id)]
            block = np.full((dataset.samples_per_record, n_ap), NOT_VISIBLE)
            for ap, vals in rec.readings.items():
                block[:, index[ap]] = vals
            prefix = f"{rec.building_id},{rec.rp_id},{ref.x!r},{ref.y!r},{rec.device_id},"
            for k in range(dataset.samples_per_record):
                fh.write(prefix + str(k) + ("," if n_ap else "") + ",".join(map(repr, block[k].tolist())) + "\n")


# ---------------------------------------------------------------------------
# splitting


def split(dataset: FingerprintDataset, ratio: float = 0.8, seed: int = 0):
    """Stratified train/test split per (building, RP).

    Every RP keeps at least one record in the training part.  The total test
    count is ``round(len * (1 - ratio))``, shared across RPs by largest
    remainder with ties broken by a seeded shuffle.
    """
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, rec in enumerate(dataset.records):
        groups.setdefault((rec.building_id, rec.rp_id), []).append(i)
    keys = sorted(groups)
    for k in keys:
        if len(groups[k]) < 2:
            raise DataError(f"RP {k} has {len(groups[k])} record(s); at least 2 are needed to stratify")

    sizes = np.array([len(groups[k]) for k in keys])
    quota = sizes * (1.0 - ratio)
    n_test = np.minimum(np.floor(quota).astype(int), sizes - 1)
    target = min(int(round(len(dataset) * (1.0 - ratio))), int((sizes - 1).sum()))
    remaining = target - int(n_test.sum())
    if remaining > 0:
        tiebreak = rng.permutation(len(keys))
        frac = quota - np.floor(quota)
        order = sorted(range(len(keys)), key=lambda g: (-frac[g], tiebreak[g]))
        for g in order:
            if remaining == 0:
                break
            if n_test[g] < sizes[g] - 1:
                n_test[g] += 1
                remaining -= 1

    train_idx, test_idx = [], []
    for g, k in enumerate(keys):
        members = np.array(groups[k])
        perm = members[rng.permutation(len(members))]
        test_idx.extend(perm[: n_test[g]].tolist())
        train_idx.extend(perm[n_test[g]:].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))
