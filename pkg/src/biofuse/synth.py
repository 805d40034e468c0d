"""Synthetic multimodal datasets with controllable subject separability.

Each subject gets a generative profile ``base + separability * deviation``
where ``base`` is shared by the whole population. With separability 0 all
subjects are draws from the same process; with 1 their parameters are
spread by one deviation unit per dimension. Sessions add small jitter on
top of the subject profile.

Sensor axes are sums of two sinusoids plus white noise; keystrokes type a
fixed sentence with a subject-specific rhythm; touch tasks are parametric
gestures (vertical swipes, a figure-eight, taps on fixed buttons).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import (BACKGROUND_MODALITIES, TASK_TO_TOUCH, DeviceMeta, ModalityKind,
                   RawSeries, SessionRecord, TaskKind, write_dataset)

SENTENCE = "En un lugar de la Mancha, de cuyo nombre no quiero acordarme"
KEYCODES = np.array([ord(ch) for ch in SENTENCE], dtype=np.float64)
TAP_BUTTONS = np.array([[0.2, 0.3], [0.5, 0.3], [0.8, 0.3], [0.2, 0.5], [0.5, 0.5],
                        [0.8, 0.5], [0.2, 0.7], [0.5, 0.7], [0.8, 0.7], [0.5, 0.9]])
SCREENS = ((1080, 2340), (1080, 1920), (720, 1520), (1440, 3040))
TOUCH_RATE_HZ = 60.0
MARGIN_S = 0.6  # sensor data recorded before/after the touch task


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 20
    sessions_per_subject: int = 5
    session_duration_s: float = 4.0
    sensor_rate_hz: float = None  # None: per-subject device draw from {50, 100, 200}
    separability: float = 0.8
    seed: int = 0
    noise: float = 0.35
    session_jitter: float = 0.04
    modality_separability: dict = field(default_factory=dict)  # modality value -> separability
    background: tuple = tuple(m.value for m in BACKGROUND_MODALITIES)

    def __post_init__(self):
        if not 0.0 <= self.separability <= 1.0:
            raise ValueError("separability must lie in [0, 1]")
        if self.n_subjects < 1 or self.sessions_per_subject < 1:
            raise ValueError("need at least one subject and one session")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")

    def separability_of(self, modality):
        return float(self.modality_separability.get(ModalityKind(modality).value, self.separability))


# Per-dimension deviation scales; also the normalisers of oracle_distance.
_SENSOR_SCALE = {"freq": 0.6, "amp": 0.35}
_TEMPO_SCALE = 0.6  # log-scale spread of a subject's motion tempo
_RATIO_SCALE = 0.7  # log-scale spread of the second-harmonic weight per axis
_RHYTHM_SCALE = 0.7  # spread of the keystroke rhythm coefficients
_KEY_TEMPO_SCALE = 0.08  # spread of the mean inter-press time, s


def _key_features():
    """Per-key rhythm regressors: word start, after punctuation, position drift, vowel."""
    prev = " " + SENTENCE[:-1]
    word_start = np.array([p == " " for p in prev], dtype=np.float64)
    after_punct = np.array([p in ",." for p in prev], dtype=np.float64)
    drift = np.linspace(-0.5, 0.5, len(SENTENCE))
    vowel = np.array([c.lower() in "aeiou" for c in SENTENCE], dtype=np.float64)
    return np.column_stack([word_start, after_punct, drift, vowel])


KEY_FEATURES = _key_features()


@dataclass
class SubjectProfile:
    sensors: dict  # modality value -> {"freq": [3, 2], "amp": [3, 2]}
    key_tempo: float  # mean inter-press time, s
    key_offsets: np.ndarray  # relative per-key deviation [len(SENTENCE)]
    key_jitter: float  # relative std of inter-press time
    tap_cadence: float  # s between taps
    tap_offset: np.ndarray  # [2] screen fraction
    scroll_speed: float  # screen heights per second
    scroll_x: float  # screen fraction
    scroll_curve: float
    pressure: float
    pressure_var: float
    draw_aspect: float
    draw_period: float  # s per figure
    noise: float = 0.35

    def vector(self, modality=None):
        """Flat, scale-normalised parameter vector, optionally of one modality."""
        if modality is not None:
            return self._modality_vector(ModalityKind(modality))
        parts = []
        for m in sorted(self.sensors):
            parts.append(self.sensors[m]["freq"].ravel() / _SENSOR_SCALE["freq"])
            parts.append(self.sensors[m]["amp"].ravel() / _SENSOR_SCALE["amp"])
        parts.append(np.array([self.key_tempo / _KEY_TEMPO_SCALE, self.key_jitter / 0.05,
                               self.tap_cadence / 0.15, self.scroll_speed / 0.4,
                               self.scroll_x / 0.1, self.scroll_curve / 0.1,
                               self.pressure / 0.15, self.pressure_var / 0.05,
                               self.draw_aspect / 0.2, self.draw_period / 0.3]))
        parts.append(self.key_offsets / 0.2)
        parts.append(self.tap_offset / 0.03)
        return np.concatenate(parts)

    def _modality_vector(self, m):
        if m.is_background:
            p = self.sensors[m.value]
            return np.concatenate([p["freq"].ravel() / _SENSOR_SCALE["freq"],
                                   p["amp"].ravel() / _SENSOR_SCALE["amp"]])
        press = [self.pressure / 0.15, self.pressure_var / 0.05]
        if m is ModalityKind.TOUCH_KEYSTROKE:
            return np.concatenate([[self.key_tempo / _KEY_TEMPO_SCALE, self.key_jitter / 0.05],
                                   self.key_offsets / 0.2])
        if m is ModalityKind.TOUCH_TAP:
            return np.concatenate([[self.tap_cadence / 0.15], self.tap_offset / 0.03, press])
        if m is ModalityKind.TOUCH_DRAW8:
            return np.array([self.draw_aspect / 0.2, self.draw_period / 0.3] + press)
        return np.array([self.scroll_speed / 0.4, self.scroll_x / 0.1,
                         self.scroll_curve / 0.1] + press)


def oracle_distance(profile_a, profile_b, modality=None):
    """RMS difference of the normalised generative parameters."""
    a, b = profile_a.vector(modality), profile_b.vector(modality)
    return float(np.linalg.norm(a - b) / math.sqrt(a.size))


def _base_profile(rng, cfg):
    sensors = {}
    for m in cfg.background:
        sensors[m] = {
            "freq": rng.uniform(1.0, 2.5, size=(3, 2)) * np.array([1.0, 2.2]),
            "amp": np.column_stack([np.ones(3), rng.uniform(0.4, 0.8, size=3)]),
        }
    return SubjectProfile(
        sensors=sensors, key_tempo=0.25, key_offsets=np.zeros(len(SENTENCE)), key_jitter=0.12,
        tap_cadence=0.45, tap_offset=np.zeros(2), scroll_speed=1.2, scroll_x=0.5,
        scroll_curve=0.0, pressure=0.5, pressure_var=0.1, draw_aspect=0.7, draw_period=1.6,
        noise=cfg.noise,
    )


def _subject_profile(base, rng, cfg):
    def sep(m):
        return cfg.separability_of(m)

    # Few shared factors per modality: one tempo multiplier scales every
    # frequency, and each axis gets its own second-harmonic weight.
    sensors = {}
    for m, p in base.sensors.items():
        s = sep(m)
        tempo = math.exp(s * rng.normal(0, _TEMPO_SCALE))
        amp = p["amp"].copy()
        amp[:, 1] *= np.exp(s * rng.normal(0, _RATIO_SCALE, size=3))
        sensors[m] = {"freq": np.clip(p["freq"] * tempo, 0.3, 8.0),
                      "amp": np.clip(amp, 0.05, 3.0)}
    sk = sep(ModalityKind.TOUCH_KEYSTROKE)
    st = sep(ModalityKind.TOUCH_TAP)
    ss = 0.5 * (sep(ModalityKind.TOUCH_SCROLL_UP) + sep(ModalityKind.TOUCH_SCROLL_DOWN))
    sd = sep(ModalityKind.TOUCH_DRAW8)
    return SubjectProfile(
        sensors=sensors,
        key_tempo=max(0.08, base.key_tempo + sk * rng.normal(0, _KEY_TEMPO_SCALE)),
        key_offsets=np.clip(base.key_offsets + sk * KEY_FEATURES @ rng.normal(0, _RHYTHM_SCALE, 4),
                            -0.6, 2.0),
        key_jitter=max(0.02, base.key_jitter + sk * rng.normal(0, 0.05)),
        tap_cadence=max(0.15, base.tap_cadence + st * rng.normal(0, 0.15)),
        tap_offset=base.tap_offset + st * rng.normal(0, 0.03, 2),
        scroll_speed=max(0.3, base.scroll_speed + ss * rng.normal(0, 0.4)),
        scroll_x=float(np.clip(base.scroll_x + ss * rng.normal(0, 0.1), 0.15, 0.85)),
        scroll_curve=base.scroll_curve + ss * rng.normal(0, 0.1),
        pressure=float(np.clip(base.pressure + np.mean([st, ss, sd]) * rng.normal(0, 0.15), 0.1, 0.9)),
        pressure_var=max(0.02, base.pressure_var + np.mean([st, ss, sd]) * rng.normal(0, 0.05)),
        draw_aspect=float(np.clip(base.draw_aspect + sd * rng.normal(0, 0.2), 0.3, 1.2)),
        draw_period=max(0.6, base.draw_period + sd * rng.normal(0, 0.3)),
        noise=cfg.noise,
    )


def session_profile(profile, rng, jitter):
    """Subject profile perturbed by multiplicative session jitter."""
    def j(x):
        return x * (1.0 + jitter * rng.standard_normal(np.shape(x)))

    sensors = {m: {"freq": j(p["freq"]), "amp": j(p["amp"])} for m, p in profile.sensors.items()}
    return SubjectProfile(
        sensors=sensors, key_tempo=j(profile.key_tempo),
        key_offsets=profile.key_offsets + jitter * rng.standard_normal(profile.key_offsets.shape),
        key_jitter=profile.key_jitter, tap_cadence=j(profile.tap_cadence),
        tap_offset=profile.tap_offset + 0.2 * jitter * rng.standard_normal(2),
        scroll_speed=j(profile.scroll_speed), scroll_x=profile.scroll_x,
        scroll_curve=profile.scroll_curve, pressure=j(profile.pressure),
        pressure_var=profile.pressure_var, draw_aspect=j(profile.draw_aspect),
        draw_period=j(profile.draw_period), noise=profile.noise,
    )


def make_profiles(cfg):
    rng = np.random.default_rng([cfg.seed, 1])
    base = _base_profile(rng, cfg)
    return [_subject_profile(base, rng, cfg) for _ in range(cfg.n_subjects)]


# ---------------------------------------------------------------------------
# stream generators
# ---------------------------------------------------------------------------

def _keystroke(prof, rng):
    gaps = prof.key_tempo * (1.0 + prof.key_offsets) * (
        1.0 + prof.key_jitter * rng.standard_normal(len(SENTENCE)))
    gaps = np.clip(gaps, 0.03, 4.0)
    gaps[0] = 0.0
    ts = np.round(1000.0 * np.cumsum(gaps)).astype(np.int64)
    return RawSeries(ts, KEYCODES.copy())


def _pressure(prof, rng, n):
    p = prof.pressure + prof.pressure_var * np.sin(np.linspace(0, np.pi, n))
    return np.clip(p + 0.02 * rng.standard_normal(n), 0.01, 1.0)


def _scroll(prof, rng, duration, screen, up):
    w, h = screen
    dt = 1.0 / TOUCH_RATE_HZ
    t, ts, rows = 0.0, [], []
    while t < duration:
        length = float(np.clip(0.55 / prof.scroll_speed, 0.15, 1.2))
        n = max(3, int(length / dt))
        u = np.linspace(0.0, 1.0, n)
        y = 0.75 - 0.5 * u ** (1.0 + float(np.clip(2.0 * prof.scroll_curve, -0.5, 1.5)))
        if not up:
            y = 1.0 - y
        x = prof.scroll_x + prof.scroll_curve * 0.3 * u ** 2 + 0.005 * rng.standard_normal(n)
        p = _pressure(prof, rng, n)
        for k in range(n):
            ts.append(t + k * dt)
            rows.append((np.clip(x[k], 0, 1) * w, np.clip(y[k], 0, 1) * h, p[k]))
        t += n * dt + 0.25 + 0.05 * rng.random()
    return RawSeries(np.round(np.array(ts) * 1000).astype(np.int64), np.array(rows))


def _draw8(prof, rng, screen):
    w, h = screen
    n = max(20, int(prof.draw_period * TOUCH_RATE_HZ))
    u = np.linspace(0.0, 2 * np.pi, n)
    x = 0.5 + 0.3 * prof.draw_aspect * np.sin(u) * 0.8
    y = 0.5 + 0.3 * np.sin(2 * u) * 0.5 + 0.25 * np.cos(u)
    x = x + 0.004 * rng.standard_normal(n)
    y = y + 0.004 * rng.standard_normal(n)
    p = _pressure(prof, rng, n)
    ts = np.round(1000.0 * np.arange(n) / TOUCH_RATE_HZ).astype(np.int64)
    return RawSeries(ts, np.column_stack([np.clip(x, 0, 1) * w, np.clip(y, 0, 1) * h, p]))


def _tap(prof, rng, screen):
    w, h = screen
    ts, rows = [], []
    t = 0.0
    for bx, by in TAP_BUTTONS:
        n = 2
        for k in range(n):
            ts.append(t + k / TOUCH_RATE_HZ)
            x = np.clip(bx + prof.tap_offset[0] + 0.01 * rng.standard_normal(), 0, 1)
            y = np.clip(by + prof.tap_offset[1] + 0.01 * rng.standard_normal(), 0, 1)
            rows.append((x * w, y * h, prof.pressure + 0.03 * rng.standard_normal()))
        t += prof.tap_cadence * (1.0 + 0.1 * rng.standard_normal())
    rows = np.array(rows)
    rows[:, 2] = np.clip(rows[:, 2], 0.01, 1.0)
    return RawSeries(np.round(np.array(ts) * 1000).astype(np.int64), rows)


def _sensor(params, rng, t0, t1, rate, noise, modality):
    n = int((t1 - t0) * rate) + 1
    ts = np.round(1000.0 * (t0 + np.arange(n) / rate)).astype(np.int64)
    t = ts / 1000.0
    n_axes = 1 if modality == ModalityKind.GRAVITY.value else 3
    cols = []
    for a in range(n_axes):
        phase = rng.uniform(0, 2 * np.pi, 2)
        s = (params["amp"][a, 0] * np.sin(2 * np.pi * params["freq"][a, 0] * t + phase[0])
             + params["amp"][a, 1] * np.sin(2 * np.pi * params["freq"][a, 1] * t + phase[1]))
        s = s + noise * rng.standard_normal(n) + 0.5 * (a + 1)
        cols.append(s)
    return RawSeries(ts, np.column_stack(cols))


def generate_session(profile, subject_id, session_index, cfg, rng, rate, screen):
    prof = session_profile(profile, rng, cfg.session_jitter)
    streams = {}
    for task in TaskKind:
        if task is TaskKind.KEYSTROKE:
            touch = _keystroke(prof, rng)
        elif task is TaskKind.SCROLL_UP:
            touch = _scroll(prof, rng, cfg.session_duration_s, screen, True)
        elif task is TaskKind.SCROLL_DOWN:
            touch = _scroll(prof, rng, cfg.session_duration_s, screen, False)
        elif task is TaskKind.DRAW8:
            touch = _draw8(prof, rng, screen)
        else:
            touch = _tap(prof, rng, screen)
        t_start = touch.timestamps[0] / 1000.0 - MARGIN_S
        t_end = touch.timestamps[-1] / 1000.0 + MARGIN_S
        # short gestures still get a few seconds of sensor data
        t_end = max(t_end, t_start + cfg.session_duration_s)
        shift = int(round(1000 * t_start))  # session clock starts at 0
        per = {TASK_TO_TOUCH[task]: RawSeries(touch.timestamps - shift, touch.values)}
        for m in cfg.background:
            s = _sensor(prof.sensors[m], rng, t_start, t_end, rate, prof.noise, m)
            per[ModalityKind(m)] = RawSeries(s.timestamps - shift, s.values)
        streams[task] = per
    w, h = screen
    return SessionRecord(subject_id, session_index, DeviceMeta(w, h, "synthetic"), streams)


def subject_ids(n):
    width = max(3, len(str(n)))
    return [f"user{i:0{width}d}" for i in range(n)]


def generate_sessions(cfg):
    """All SessionRecords of a synthetic dataset (in memory)."""
    profiles = make_profiles(cfg)
    out = []
    for idx, (sid, prof) in enumerate(zip(subject_ids(cfg.n_subjects), profiles)):
        rng = np.random.default_rng([cfg.seed, 2, idx])
        rate = cfg.sensor_rate_hz or float(rng.choice([50.0, 100.0, 200.0]))
        screen = SCREENS[int(rng.integers(len(SCREENS)))]
        for k in range(1, cfg.sessions_per_subject + 1):
            out.append(generate_session(prof, sid, k, cfg, rng, rate, screen))
    return out


def generate_dataset(cfg, root):
    """Write a synthetic dataset in the canonical on-disk layout; returns the profiles."""
    write_dataset(generate_sessions(cfg), root)
    return make_profiles(cfg)
