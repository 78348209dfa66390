"""Dataset, truth-table and model files.

A dataset file (``.qpd``) is a magic line, one JSON header line, a column
line and then one ``i,t,m,N,Y`` record per experiment, sorted by
(initialization, t, measurement) in header label order. Truth tables
(``.qpt``) use the same layout with ``i,t,m,F`` records.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CoverageGap, DatasetError, DuplicateKey, MalformedLine
from .model import Model
from .schedule import Schedule

DATASET_MAGIC = "#qpi-dataset 1"
TRUTH_MAGIC = "#qpi-truth 1"


@dataclass(frozen=True)
class ExperimentRecord:
    i: str
    t: int
    m: str
    N: int
    Y: int

    def __post_init__(self):
        if self.N < 1 or not 0 <= self.Y <= self.N:
            raise ValueError(f"invalid counts N={self.N} Y={self.Y}")
        if self.t < 0:
            raise ValueError("t must be nonnegative")


def freq(record: ExperimentRecord) -> float:
    return record.Y / record.N


def estimate_variance(record: ExperimentRecord, pseudocount: float = 1.0) -> float:
    """Smoothed binomial variance F(1-F)/N, strictly positive even at Y in {0, N}."""
    return _variance(record.Y, record.N, pseudocount)


def _variance(Y, N, pseudocount=1.0):
    F = (Y + pseudocount) / (N + 2 * pseudocount)
    return F * (1 - F) / N


@dataclass(frozen=True)
class Dataset:
    schedule: Schedule
    init_labels: tuple
    meas_labels: tuple
    records: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "init_labels", tuple(self.init_labels))
        object.__setattr__(self, "meas_labels", tuple(self.meas_labels))
        recs = sorted(self.records, key=self._key)
        object.__setattr__(self, "records", tuple(recs))
        _check_coverage(self._index_keys(recs), self.schedule.T_set,
                        len(self.init_labels), len(self.meas_labels))

    def _key(self, r: ExperimentRecord):
        try:
            return (self.init_labels.index(r.i), r.t, self.meas_labels.index(r.m))
        except ValueError:
            raise CoverageGap(f"record label not in header: {r.i!r}/{r.m!r}") from None

    def _index_keys(self, recs):
        return [self._key(r) for r in recs]

    def arrays(self):
        """Count arrays N, Y indexed [i, t_index, m] plus the t list."""
        ts = list(self.schedule.T_set)
        shape = (len(self.init_labels), len(ts), len(self.meas_labels))
        N = np.zeros(shape, dtype=np.int64)
        Y = np.zeros(shape, dtype=np.int64)
        pos = {t: k for k, t in enumerate(ts)}
        for r in self.records:
            i, t, m = self._key(r)
            N[i, pos[t], m] = r.N
            Y[i, pos[t], m] = r.Y
        return np.array(ts), N, Y

    def lookup(self) -> dict:
        """Map (i_index, t, m_index) -> (N, Y)."""
        return {self._key(r): (r.N, r.Y) for r in self.records}


def _check_coverage(keys, T_set, n_init, n_meas):
    seen = set()
    for k in keys:
        if k in seen:
            raise DuplicateKey(f"duplicate experiment {k}")
        seen.add(k)
    T = set(T_set)
    extra = [k for k in seen if k[1] not in T]
    if extra:
        raise CoverageGap(f"record at t={extra[0][1]} not in schedule")
    for i in range(n_init):
        for t in T_set:
            for m in range(n_meas):
                if (i, t, m) not in seen:
                    raise CoverageGap(f"missing experiment (i={i}, t={t}, m={m})")


def _header_line(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def dumps_dataset(ds: Dataset) -> str:
    header = {"schedule": ds.schedule.header(),
              "init_labels": list(ds.init_labels),
              "meas_labels": list(ds.meas_labels),
              "meta": ds.meta}
    lines = [DATASET_MAGIC, _header_line(header), "i,t,m,N,Y"]
    lines += [f"{r.i},{r.t},{r.m},{r.N},{r.Y}" for r in ds.records]
    return "\n".join(lines) + "\n"


def _split_header(text: str, magic: str, columns: str):
    lines = text.splitlines()
    if len(lines) < 3 or lines[0] != magic:
        raise MalformedLine(f"missing {magic!r} header")
    try:
        header = json.loads(lines[1])
    except json.JSONDecodeError as exc:
        raise MalformedLine(f"header is not valid JSON: {exc}") from None
    if lines[2] != columns:
        raise MalformedLine(f"expected column line {columns!r}")
    return header, lines[3:]


def loads_dataset(text: str) -> Dataset:
    header, body = _split_header(text, DATASET_MAGIC, "i,t,m,N,Y")
    records = []
    for lineno, line in enumerate(body, start=4):
        parts = line.split(",")
        if len(parts) != 5:
            raise MalformedLine(f"line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            records.append(ExperimentRecord(parts[0], int(parts[1]), parts[2],
                                            int(parts[3]), int(parts[4])))
        except ValueError as exc:
            raise MalformedLine(f"line {lineno}: {exc}") from None
    try:
        schedule = Schedule.from_header(header["schedule"])
    except (KeyError, ValueError) as exc:
        raise MalformedLine(f"bad schedule header: {exc}") from None
    return Dataset(schedule, header["init_labels"], header["meas_labels"],
                   tuple(records), header.get("meta", {}))


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def read_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text())


def export_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "t", "m", "N", "Y", "freq"])
    for r in ds.records:
        w.writerow([r.i, r.t, r.m, r.N, r.Y, repr(freq(r))])
    return buf.getvalue()


# truth tables -------------------------------------------------------------

@dataclass(frozen=True)
class TruthTable:
    """Exact YES probabilities F[i, t, m] for every t in ``times``."""

    init_labels: tuple
    meas_labels: tuple
    times: np.ndarray
    F: np.ndarray
    meta: dict = field(default_factory=dict)
    frame_F: np.ndarray | None = field(default=None, repr=False)
    frame_labels: tuple = ()

    def at(self, t: int) -> np.ndarray:
        idx = np.searchsorted(self.times, t)
        if idx >= len(self.times) or self.times[idx] != t:
            raise KeyError(f"t={t} not in truth table")
        return self.F[:, idx, :]

    def take(self, ts) -> np.ndarray:
        """Probabilities for each t in ts, shape (|I|, len(ts), |M|)."""
        ts = np.asarray(ts, dtype=int)
        idx = np.searchsorted(self.times, ts)
        if np.any(idx >= len(self.times)) or np.any(self.times[np.minimum(idx, len(self.times) - 1)] != ts):
            raise KeyError("requested times missing from truth table")
        return self.F[:, idx, :]


def dumps_truth(tt: TruthTable) -> str:
    header = {"init_labels": list(tt.init_labels),
              "meas_labels": list(tt.meas_labels),
              "meta": tt.meta}
    if tt.frame_F is not None:
        header["frame_labels"] = list(tt.frame_labels)
        header["frame_F01"] = tt.frame_F.tolist()
    lines = [TRUTH_MAGIC, _header_line(header), "i,t,m,F"]
    for k, t in enumerate(tt.times):
        for i, il in enumerate(tt.init_labels):
            for m, ml in enumerate(tt.meas_labels):
                lines.append(f"{il},{int(t)},{ml},{float(tt.F[i, k, m])!r}")
    return "\n".join(lines) + "\n"


def loads_truth(text: str) -> TruthTable:
    header, body = _split_header(text, TRUTH_MAGIC, "i,t,m,F")
    init, meas = tuple(header["init_labels"]), tuple(header["meas_labels"])
    ipos = {x: k for k, x in enumerate(init)}
    mpos = {x: k for k, x in enumerate(meas)}
    rows = {}
    for lineno, line in enumerate(body, start=4):
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedLine(f"line {lineno}: expected 4 fields")
        try:
            key = (ipos[parts[0]], int(parts[1]), mpos[parts[2]])
            value = float(parts[3])
        except (KeyError, ValueError) as exc:
            raise MalformedLine(f"line {lineno}: {exc}") from None
        if key in rows:
            raise DuplicateKey(f"duplicate truth entry {key}")
        rows[key] = value
    times = np.array(sorted({k[1] for k in rows}), dtype=int)
    F = np.full((len(init), len(times), len(meas)), np.nan)
    tpos = {t: k for k, t in enumerate(times)}
    for (i, t, m), v in rows.items():
        F[i, tpos[t], m] = v
    if np.isnan(F).any():
        raise CoverageGap("truth table does not cover every (i, t, m)")
    frame = header.get("frame_F01")
    return TruthTable(init, meas, times, F, header.get("meta", {}),
                      None if frame is None else np.array(frame),
                      tuple(header.get("frame_labels", ())))


def write_truth(tt: TruthTable, path) -> None:
    Path(path).write_text(dumps_truth(tt))


def read_truth(path) -> TruthTable:
    return loads_truth(Path(path).read_text())


def write_model(model: Model, path) -> None:
    Path(path).write_text(model.dumps())


def read_model(path) -> Model:
    try:
        return Model.loads(Path(path).read_text())
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"bad model file {path}: {exc}") from None
