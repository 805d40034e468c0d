"""Fixed-length window extraction.

Every window has exactly ``M`` rows: a contiguous slice of the source
feature matrix followed by zero rows when the source is short. FFT channels
are recomputed on the (padded) window so the spectrum length equals ``M``,
and scaled by ``1/sqrt(M)`` (unitary DFT) so spectral channels stay on the
same scale as the z-normalised time channels instead of growing with ``M``.
"""

from dataclasses import dataclass

import numpy as np

from .data import ModalityKind, TaskKind, TOUCH_TO_TASK
from .errors import EmptySequence
from .preprocessing import fft_magnitude, fft_pairs


@dataclass(frozen=True)
class WindowSpec:
    M: int
    overlap: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("window length must be positive")
        if not 0 <= self.overlap < self.M:
            raise ValueError(f"overlap {self.overlap} outside [0, {self.M})")

    @property
    def stride(self):
        return self.M - self.overlap


@dataclass(frozen=True)
class FeatureWindow:
    modality: ModalityKind
    data: np.ndarray  # [M, C]
    subject_id: str = ""
    session_index: int = 0
    task: TaskKind = None
    n_valid: int = 0  # rows taken from the source; the rest is padding
    start: int = 0


@dataclass(frozen=True)
class WindowStats:
    task: TaskKind
    mean_windows: float
    std_windows: float


DEFAULT_M = {
    "background": 150,
    TaskKind.SCROLL_UP: 100,
    TaskKind.SCROLL_DOWN: 100,
    TaskKind.TAP: 15,
    TaskKind.DRAW8: 100,
    TaskKind.KEYSTROKE: 60,
}
BACKGROUND_OVERLAP = 50


def window_spec_for(modality, task=None, overrides=None):
    """Window length/overlap for a modality.

    ``overrides`` maps modality values (e.g. ``"keystroke"``) to ``M`` or to
    ``{"M": .., "overlap": ..}``.
    """
    modality = ModalityKind(modality)
    if modality.is_background:
        spec = WindowSpec(DEFAULT_M["background"], BACKGROUND_OVERLAP)
    else:
        spec = WindowSpec(DEFAULT_M[TOUCH_TO_TASK[modality]], 0)
    if overrides and modality.value in overrides:
        o = overrides[modality.value]
        if isinstance(o, dict):
            spec = WindowSpec(int(o.get("M", spec.M)), int(o.get("overlap", spec.overlap)))
        else:
            overlap = spec.overlap if spec.overlap < int(o) else 0
            spec = WindowSpec(int(o), overlap)
    return spec


def _cut(fm, start, M):
    rows = fm.data[start:start + M]
    n = rows.shape[0]
    out = np.zeros((M, fm.data.shape[1]))
    out[:n] = rows
    for dst, src in fft_pairs(fm.channels):
        out[:, dst] = fft_magnitude(out[:, src]) / np.sqrt(M)
    return out, n


def make_window(fm, spec, start, subject_id="", session_index=0, task=None):
    if len(fm) == 0:
        raise EmptySequence(f"empty {fm.modality.value} feature matrix")
    data, n = _cut(fm, start, spec.M)
    return FeatureWindow(fm.modality, data, subject_id, session_index,
                         None if task is None else TaskKind(task), n, start)


def random_start(n_rows, M, rng):
    if n_rows <= M:
        return 0
    return int(rng.integers(0, n_rows - M + 1))


def extract_random_window(fm, spec, rng, subject_id="", session_index=0, task=None):
    """Window starting at a uniform random row that still leaves M rows.

    Short sequences are taken whole and zero-padded.
    """
    if len(fm) == 0:
        raise EmptySequence(f"empty {fm.modality.value} feature matrix")
    start = random_start(len(fm), spec.M, rng)
    return make_window(fm, spec, start, subject_id, session_index, task)


def enrollment_starts(n_rows, spec, single=False):
    if n_rows == 0:
        raise EmptySequence("no rows to window")
    if single or n_rows <= spec.M:
        return [0]
    stride = spec.stride
    starts = list(range(0, n_rows - spec.M + 1, stride))
    # trailing rows not covered by a full window get one padded window
    if starts[-1] + spec.M < n_rows:
        starts.append(starts[-1] + stride)
    return starts


def extract_enrollment_windows(fm, spec, subject_id="", session_index=0, task=None, single=None):
    """All enrollment windows of one session.

    Background sensors: start at 0 with stride ``M - overlap``; touch tasks
    (or ``single=True``): one window at 0.
    """
    if single is None:
        single = not fm.modality.is_background
    return [
        make_window(fm, spec, s, subject_id, session_index, task)
        for s in enrollment_starts(len(fm), spec, single)
    ]


def enrollment_count(n_rows, spec, single=False):
    return len(enrollment_starts(n_rows, spec, single))


def window_stats(store, task, subjects=None, sessions=(1, 2, 3), overrides=None):
    """Mean/std over subjects of enrollment window counts, averaged over the
    task's modalities (touch + background sensors)."""
    from .data import task_modalities
    from .evaluation import enrollment_matrix

    task = TaskKind(task)
    if subjects is None:
        subjects = store.subjects()
    means, stds = [], []
    for modality in task_modalities(task):
        spec = window_spec_for(modality, task, overrides)
        counts = []
        for sid in subjects:
            total = 0
            for k in sessions:
                fm = enrollment_matrix(store, sid, k, task, modality)
                if fm is not None and len(fm):
                    total += enrollment_count(len(fm), spec, single=not modality.is_background)
            if total:
                counts.append(total)
        if counts:
            means.append(float(np.mean(counts)))
            stds.append(float(np.std(counts)))
    if not means:
        return WindowStats(task, 0.0, 0.0)
    return WindowStats(task, float(np.mean(means)), float(np.mean(stds)))
