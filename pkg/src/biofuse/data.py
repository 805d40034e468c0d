"""Dataset types and the on-disk layout.

Layout (one CSV per stream, header row first)::

    <root>/<subject_id>/session_<k>/device.csv        screen_width,screen_height,model
    <root>/<subject_id>/session_<k>/<task>/<modality>.csv

Triaxial sensors use ``timestamp,x,y,z``, gravity ``timestamp,v``, touch
streams ``timestamp,x,y,p`` and keystroke ``timestamp,keycode``. Timestamps
are integer milliseconds from session start.
"""

import csv
import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BiofuseError, InsufficientData, InvalidDevice, SamplingUndefined

log = logging.getLogger(__name__)

N_SESSIONS = 5


class TaskKind(str, enum.Enum):
    KEYSTROKE = "keystroke"
    SCROLL_UP = "scroll_up"
    SCROLL_DOWN = "scroll_down"
    DRAW8 = "draw8"
    TAP = "tap"


class ModalityKind(str, enum.Enum):
    ACCELEROMETER = "accelerometer"
    GRAVITY = "gravity"
    GYROSCOPE = "gyroscope"
    LINEAR_ACCELEROMETER = "linear_accelerometer"
    MAGNETOMETER = "magnetometer"
    TOUCH_KEYSTROKE = "keystroke"
    TOUCH_SCROLL_UP = "scroll_up"
    TOUCH_SCROLL_DOWN = "scroll_down"
    TOUCH_DRAW8 = "draw8"
    TOUCH_TAP = "tap"

    @property
    def is_background(self):
        return self in BACKGROUND_MODALITIES

    @property
    def is_touch(self):
        return self in TOUCH_MODALITIES

    @property
    def acronym(self):
        return ACRONYMS[self]


BACKGROUND_MODALITIES = (
    ModalityKind.ACCELEROMETER,
    ModalityKind.GRAVITY,
    ModalityKind.GYROSCOPE,
    ModalityKind.LINEAR_ACCELEROMETER,
    ModalityKind.MAGNETOMETER,
)
TOUCH_MODALITIES = (
    ModalityKind.TOUCH_KEYSTROKE,
    ModalityKind.TOUCH_SCROLL_UP,
    ModalityKind.TOUCH_SCROLL_DOWN,
    ModalityKind.TOUCH_DRAW8,
    ModalityKind.TOUCH_TAP,
)

TASK_TO_TOUCH = {
    TaskKind.KEYSTROKE: ModalityKind.TOUCH_KEYSTROKE,
    TaskKind.SCROLL_UP: ModalityKind.TOUCH_SCROLL_UP,
    TaskKind.SCROLL_DOWN: ModalityKind.TOUCH_SCROLL_DOWN,
    TaskKind.DRAW8: ModalityKind.TOUCH_DRAW8,
    TaskKind.TAP: ModalityKind.TOUCH_TAP,
}
TOUCH_TO_TASK = {m: t for t, m in TASK_TO_TOUCH.items()}

ACRONYMS = {
    ModalityKind.TOUCH_KEYSTROKE: "K",
    ModalityKind.TOUCH_SCROLL_UP: "SU",
    ModalityKind.TOUCH_SCROLL_DOWN: "SD",
    ModalityKind.TOUCH_TAP: "T",
    ModalityKind.TOUCH_DRAW8: "TD",
    ModalityKind.ACCELEROMETER: "A",
    ModalityKind.GRAVITY: "Gr",
    ModalityKind.GYROSCOPE: "Gy",
    ModalityKind.LINEAR_ACCELEROMETER: "L",
    ModalityKind.MAGNETOMETER: "M",
}

TRIAXIAL = {
    ModalityKind.ACCELEROMETER,
    ModalityKind.GYROSCOPE,
    ModalityKind.LINEAR_ACCELEROMETER,
    ModalityKind.MAGNETOMETER,
}

HEADERS = {m: ("timestamp", "x", "y", "z") for m in TRIAXIAL}
HEADERS[ModalityKind.GRAVITY] = ("timestamp", "v")
HEADERS[ModalityKind.TOUCH_KEYSTROKE] = ("timestamp", "keycode")
for _m in TOUCH_MODALITIES[1:]:
    HEADERS[_m] = ("timestamp", "x", "y", "p")

DEVICE_HEADER = ("screen_width", "screen_height", "model")


def task_modalities(task):
    """The six modalities recorded during ``task``: touch first, then sensors."""
    return (TASK_TO_TOUCH[TaskKind(task)],) + BACKGROUND_MODALITIES


@dataclass(frozen=True)
class RawSeries:
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != ts.shape[0]:
            raise ValueError(f"{ts.shape[0]} timestamps for {vals.shape[0]} rows")
        if np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if not np.all(np.isfinite(vals)):
            raise ValueError("series values must be finite")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.timestamps.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class DeviceMeta:
    screen_width: int
    screen_height: int
    device_model: str = ""

    def __post_init__(self):
        if self.screen_width <= 0 or self.screen_height <= 0:
            raise InvalidDevice(f"screen {self.screen_width}x{self.screen_height}")


@dataclass(frozen=True)
class SamplingInfo:
    f_s: float


@dataclass
class SessionRecord:
    subject_id: str
    session_index: int
    device: DeviceMeta
    streams: dict = field(default_factory=dict)  # TaskKind -> {ModalityKind -> RawSeries}

    def get(self, task, modality):
        return self.streams.get(TaskKind(task), {}).get(ModalityKind(modality))


@dataclass(frozen=True)
class DatasetSplit:
    train_subjects: tuple
    validation_subjects: tuple
    test_subjects: tuple

    def __post_init__(self):
        a, b, c = map(set, (self.train_subjects, self.validation_subjects, self.test_subjects))
        if a & b or a & c or b & c:
            raise ValueError("split subsets overlap")

    def to_dict(self):
        return {
            "train": list(self.train_subjects),
            "validation": list(self.validation_subjects),
            "test": list(self.test_subjects),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]))


@dataclass
class IngestReport:
    n_sessions_read: int = 0
    invalid_sessions: list = field(default_factory=list)  # (path, reason)
    rejected_subjects: list = field(default_factory=list)  # (subject_id, reason)

    @property
    def warning_count(self):
        return len(self.invalid_sessions) + len(self.rejected_subjects)


class MalformedFile(BiofuseError):
    pass


# ---------------------------------------------------------------------------
# sampling frequency / split
# ---------------------------------------------------------------------------

def estimate_sampling_frequency(series):
    """Average rate over the whole stream, from first and last timestamps."""
    n = len(series)
    if n < 2:
        raise SamplingUndefined(f"need at least 2 samples, got {n}")
    duration = (int(series.timestamps[-1]) - int(series.timestamps[0])) / 1000.0
    if duration <= 0:
        raise SamplingUndefined("zero-duration stream")
    return SamplingInfo((n - 1) / duration)


def split_dataset(subjects, seed, n_val, n_test):
    subjects = sorted(set(subjects))
    if n_val < 0 or n_test < 0 or n_val + n_test > len(subjects):
        raise InsufficientData(
            f"cannot take {n_val} validation + {n_test} test subjects from {len(subjects)}"
        )
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    val = sorted(shuffled[:n_val])
    test = sorted(shuffled[n_val:n_val + n_test])
    train = sorted(shuffled[n_val + n_test:])
    return DatasetSplit(tuple(train), tuple(val), tuple(test))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _bad_stream(series):
    return series is None or len(series) == 0 or not np.any(series.values)


def required_streams(background=BACKGROUND_MODALITIES):
    """(task, modality) pairs whose absence or all-zero content rejects a subject."""
    req = [(t, TASK_TO_TOUCH[t]) for t in TaskKind]
    req += [(TaskKind.KEYSTROKE, m) for m in background]
    return req


def validate_subject(sessions, background=BACKGROUND_MODALITIES):
    """True iff the subject has exactly five sessions and no required stream
    is missing, empty, or all zeros."""
    if len(sessions) != N_SESSIONS:
        return False
    if sorted(s.session_index for s in sessions) != list(range(1, N_SESSIONS + 1)):
        return False
    for s in sessions:
        for task, modality in required_streams(background):
            if _bad_stream(s.get(task, modality)):
                return False
    return True


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------

def _read_stream(path, modality):
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        cols = tuple(c.strip() for c in header.split(","))
        expected = HEADERS[modality]
        if cols != expected:
            raise MalformedFile(f"{path}: header {cols}, expected {expected}")
        body = fh.read()
    if not body.strip():
        return RawSeries(np.zeros(0, np.int64), np.zeros((0, len(expected) - 1)))
    try:
        arr = np.loadtxt(body.splitlines(), delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise MalformedFile(f"{path}: {exc}") from None
    if arr.shape[1] != len(expected):
        raise MalformedFile(f"{path}: {arr.shape[1]} columns, expected {len(expected)}")
    if not np.all(np.isfinite(arr)):
        raise MalformedFile(f"{path}: non-finite values")
    ts = arr[:, 0]
    if np.any(ts != np.round(ts)):
        raise MalformedFile(f"{path}: non-integer timestamps")
    if np.any(np.diff(ts) < 0):
        raise MalformedFile(f"{path}: timestamps not sorted")
    return RawSeries(ts.astype(np.int64), arr[:, 1:])


def _read_device(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or tuple(c.strip() for c in rows[0]) != DEVICE_HEADER:
        raise MalformedFile(f"{path}: bad device header")
    row = rows[1]
    try:
        w, h = int(row[0]), int(row[1])
    except (ValueError, IndexError):
        raise MalformedFile(f"{path}: bad screen size") from None
    if w <= 0 or h <= 0:
        raise MalformedFile(f"{path}: non-positive screen size")
    return DeviceMeta(w, h, ",".join(row[2:]))


def read_session(session_dir, subject_id, session_index):
    session_dir = Path(session_dir)
    device = _read_device(session_dir / "device.csv")
    streams = {}
    for task in TaskKind:
        tdir = session_dir / task.value
        if not tdir.is_dir():
            continue
        per = {}
        for modality in task_modalities(task):
            p = tdir / f"{modality.value}.csv"
            if p.exists():
                series = _read_stream(p, modality)
                if modality.is_touch and modality is not ModalityKind.TOUCH_KEYSTROKE and len(series):
                    x, y = series.values[:, 0], series.values[:, 1]
                    if (x.min() < 0 or x.max() > device.screen_width
                            or y.min() < 0 or y.max() > device.screen_height):
                        raise MalformedFile(f"{p}: touch coordinates outside the screen")
                per[modality] = series
        streams[task] = per
    return SessionRecord(subject_id, session_index, device, streams)


def _session_dirs(subject_dir):
    out = []
    for d in subject_dir.iterdir():
        if d.is_dir() and d.name.startswith("session_"):
            try:
                out.append((int(d.name[len("session_"):]), d))
            except ValueError:
                continue
    return sorted(out)


def _read_manifest(path):
    with open(path) as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]


def load_dataset_report(root, manifest=None, threads=1):
    """Load and validate a dataset; returns ``(sessions, IngestReport)``."""
    root = Path(root)
    if not root.is_dir():
        raise BiofuseError(f"dataset root {root} is not a readable directory")
    report = IngestReport()
    if manifest is not None:
        subjects = _read_manifest(manifest)
    else:
        subjects = sorted(d.name for d in root.iterdir() if d.is_dir())

    jobs = []
    for sid in subjects:
        sdir = root / sid
        if not sdir.is_dir():
            report.rejected_subjects.append((sid, "missing directory"))
            continue
        # extra sessions beyond 5 are ignored, lowest indices first
        for k, d in _session_dirs(sdir)[:N_SESSIONS]:
            jobs.append((sid, k, d))

    def _load(job):
        sid, k, d = job
        try:
            return read_session(d, sid, k), None
        except (MalformedFile, OSError, ValueError) as exc:
            return None, (str(d), str(exc))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(_load, jobs))
    else:
        results = [_load(j) for j in jobs]

    by_subject = {}
    for (sid, _, _), (rec, err) in zip(jobs, results):
        report.n_sessions_read += 1
        if err is not None:
            log.warning("invalid session %s: %s", *err)
            report.invalid_sessions.append(err)
            continue
        by_subject.setdefault(sid, []).append(rec)

    present = {
        m for recs in by_subject.values() for r in recs
        for per in r.streams.values() for m in per if m.is_background
    }
    background = tuple(m for m in BACKGROUND_MODALITIES if m in present)

    out = []
    for sid in subjects:
        recs = by_subject.get(sid, [])
        if not recs:
            continue
        if validate_subject(recs, background):
            out.extend(sorted(recs, key=lambda r: r.session_index))
        else:
            log.warning("subject %s rejected", sid)
            report.rejected_subjects.append((sid, "failed validation"))
    return out, report


def load_dataset(root, manifest=None, threads=1):
    return load_dataset_report(root, manifest, threads)[0]


def group_by_subject(sessions):
    out = {}
    for s in sessions:
        out.setdefault(s.subject_id, {})[s.session_index] = s
    return out


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def write_stream(path, modality, series):
    header = ",".join(HEADERS[modality])
    lines = [header]
    for t, row in zip(series.timestamps.tolist(), series.values.tolist()):
        lines.append(",".join([str(int(t))] + [_fmt(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_session(root, rec):
    sdir = Path(root) / rec.subject_id / f"session_{rec.session_index}"
    sdir.mkdir(parents=True, exist_ok=True)
    with open(sdir / "device.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEVICE_HEADER)
        w.writerow([rec.device.screen_width, rec.device.screen_height, rec.device.device_model])
    for task, per in rec.streams.items():
        tdir = sdir / TaskKind(task).value
        tdir.mkdir(exist_ok=True)
        for modality, series in per.items():
            write_stream(tdir / f"{ModalityKind(modality).value}.csv", ModalityKind(modality), series)


def write_dataset(sessions, root):
    os.makedirs(root, exist_ok=True)
    for rec in sessions:
        write_session(root, rec)
