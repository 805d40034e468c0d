"""Per-timestamp feature extraction for sensor, touch and keystroke streams."""

from dataclasses import dataclass

import numpy as np

from .data import ModalityKind, TaskKind, estimate_sampling_frequency
from .errors import BiofuseError, InvalidDevice, InvalidKeycode

EPS_STD = 1e-8
MAX_INTER_PRESS_S = 5.0
KEYCODE_SCALE = 255.0

TRIAXIAL_CHANNELS = ("x", "y", "z", "x'", "y'", "z'", "x''", "y''", "z''",
                     "fft(x)", "fft(y)", "fft(z)")
TOUCH_CHANNELS = ("x", "y", "p", "x'", "y'", "p'", "x''", "y''", "p''",
                  "fft(x)", "fft(y)", "fft(p)")
GRAVITY_CHANNELS = ("v", "v'", "v''", "fft(v)")
KEYSTROKE_CHANNELS = ("inter_press_time", "normalized_keycode")


def channels_for(modality):
    modality = ModalityKind(modality)
    if modality is ModalityKind.GRAVITY:
        return GRAVITY_CHANNELS
    if modality is ModalityKind.TOUCH_KEYSTROKE:
        return KEYSTROKE_CHANNELS
    if modality.is_touch:
        return TOUCH_CHANNELS
    return TRIAXIAL_CHANNELS


def fft_pairs(channels):
    """``(fft_column, source_column)`` index pairs for a channel layout."""
    idx = {c: i for i, c in enumerate(channels)}
    return tuple(
        (i, idx[c[4:-1]]) for i, c in enumerate(channels) if c.startswith("fft(")
    )


@dataclass(frozen=True)
class FeatureMatrix:
    modality: ModalityKind
    channels: tuple
    data: np.ndarray  # [T', C]
    timestamps: np.ndarray  # [T'] milliseconds

    def __len__(self):
        return self.data.shape[0]

    def restrict(self, t_start, t_end):
        """Rows with ``t_start <= timestamp <= t_end``."""
        keep = (self.timestamps >= t_start) & (self.timestamps <= t_end)
        return FeatureMatrix(self.modality, self.channels, self.data[keep], self.timestamps[keep])


def downsample_ratio(info):
    f_s = info.f_s if hasattr(info, "f_s") else float(info)
    if f_s < 75.0:
        return 1
    if f_s < 150.0:
        return 2
    return 4


def downsample(series, D):
    """Keep the first value of every block of ``D`` samples."""
    if D not in (1, 2, 4):
        raise ValueError(f"down-sampling ratio must be 1, 2 or 4, got {D}")
    if D == 1:
        return series
    return type(series)(series.timestamps[::D], series.values[::D])


def znorm(signal):
    s = np.asarray(signal, dtype=np.float64)
    std = s.std()
    if std <= EPS_STD:
        return np.zeros_like(s)
    return (s - s.mean()) / std


def derivative(signal, order=1):
    """Backward difference, zero at t=0, same length as the input."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    d = np.zeros_like(np.asarray(signal, dtype=np.float64))
    d[1:] = np.diff(signal, axis=0)
    if order == 2:
        return derivative(d, 1)
    return d


def fft_magnitude(signal):
    return np.abs(np.fft.fft(np.asarray(signal, dtype=np.float64), axis=0))


def _assemble(base):
    """[x, y, z] columns -> [base, d1, d2, fft] (12 or 4 columns)."""
    d1 = derivative(base, 1)
    d2 = derivative(base, 2)
    return np.concatenate([base, d1, d2, fft_magnitude(base)], axis=1)


def build_background_features(series, info=None, modality=ModalityKind.ACCELEROMETER):
    modality = ModalityKind(modality)
    if info is None:
        info = estimate_sampling_frequency(series)
    ds = downsample(series, downsample_ratio(info))
    vals = ds.values
    expected = 1 if modality is ModalityKind.GRAVITY else 3
    if vals.shape[1] != expected:
        raise ValueError(f"{modality.value} needs {expected} value columns, got {vals.shape[1]}")
    base = np.column_stack([znorm(vals[:, k]) for k in range(vals.shape[1])])
    return FeatureMatrix(modality, channels_for(modality), _assemble(base), ds.timestamps.copy())


def build_touch_features(series, device, modality=ModalityKind.TOUCH_SCROLL_UP):
    modality = ModalityKind(modality)
    if device.screen_width <= 0 or device.screen_height <= 0:
        raise InvalidDevice(f"screen {device.screen_width}x{device.screen_height}")
    vals = series.values
    base = np.column_stack([
        vals[:, 0] / device.screen_width,
        vals[:, 1] / device.screen_height,
        znorm(vals[:, 2]),
    ])
    return FeatureMatrix(modality, TOUCH_CHANNELS, _assemble(base), series.timestamps.copy())


def build_keystroke_features(series):
    codes = series.values[:, 0]
    if codes.size and (codes.min() < 0 or codes.max() > 255):
        raise InvalidKeycode(f"keycodes must lie in [0, 255], got [{codes.min()}, {codes.max()}]")
    gaps = np.zeros(len(series))
    gaps[1:] = np.diff(series.timestamps) / 1000.0
    gaps = np.clip(gaps, 0.0, MAX_INTER_PRESS_S)
    data = np.column_stack([gaps, codes / KEYCODE_SCALE])
    return FeatureMatrix(ModalityKind.TOUCH_KEYSTROKE, KEYSTROKE_CHANNELS, data,
                         series.timestamps.copy())


def build_features(series, modality, device=None, info=None):
    """Dispatch on modality kind."""
    modality = ModalityKind(modality)
    if modality is ModalityKind.TOUCH_KEYSTROKE:
        return build_keystroke_features(series)
    if modality.is_touch:
        return build_touch_features(series, device, modality)
    return build_background_features(series, info, modality)


class FeatureStore:
    """Feature matrices of a whole dataset keyed by (subject, session, task, modality)."""

    def __init__(self):
        self._fm = {}
        self._touch_range = {}
        self._sessions = {}  # (subject, task, modality) -> sorted session indices

    @classmethod
    def from_sessions(cls, sessions):
        from .data import TASK_TO_TOUCH

        store = cls()
        for rec in sessions:
            for task, per in rec.streams.items():
                touch = per.get(TASK_TO_TOUCH[task])
                if touch is not None and len(touch):
                    store._touch_range[(rec.subject_id, rec.session_index, task)] = (
                        int(touch.timestamps[0]), int(touch.timestamps[-1]))
                for modality, series in per.items():
                    if len(series) == 0:
                        continue
                    try:
                        fm = build_features(series, modality, rec.device)
                    except (BiofuseError, ValueError):
                        continue
                    store.add(rec.subject_id, rec.session_index, task, fm)
        return store

    def add(self, subject_id, session_index, task, fm):
        task = TaskKind(task)
        self._fm[(subject_id, session_index, task, fm.modality)] = fm
        idx = self._sessions.setdefault((subject_id, task, fm.modality), [])
        if session_index not in idx:
            idx.append(session_index)
            idx.sort()

    def get(self, subject_id, session_index, task, modality):
        return self._fm.get((subject_id, session_index, TaskKind(task), ModalityKind(modality)))

    def touch_range(self, subject_id, session_index, task):
        return self._touch_range.get((subject_id, session_index, TaskKind(task)))

    def set_touch_range(self, subject_id, session_index, task, t0, t1):
        self._touch_range[(subject_id, session_index, TaskKind(task))] = (int(t0), int(t1))

    def keys(self):
        return self._fm.keys()

    def subjects(self):
        return sorted({k[0] for k in self._fm})

    def sessions(self, subject_id, task, modality):
        return list(self._sessions.get((subject_id, TaskKind(task), ModalityKind(modality)), ()))

    def modalities(self):
        return {k[3] for k in self._fm}
