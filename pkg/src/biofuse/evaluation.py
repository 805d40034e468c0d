"""Enrollment/verification protocol and EER/DET metrics.

Sessions 1-3 enroll, sessions 4-5 verify. Each verification session gives one
probe window; its score against a template is the mean Euclidean distance to
all template embeddings (lower = more genuine). Every subject's probes are
scored against its own template (genuine) and every other subject's
template (impostor).
"""

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import ModalityKind, TaskKind
from .encoder import embed
from .errors import BiofuseError, InsufficientData
from .windowing import (extract_enrollment_windows, extract_random_window,
                        window_spec_for)

ENROLL_SESSIONS = (1, 2, 3)
VERIFY_SESSIONS = (4, 5)
SCORE_HEADER = ("modality", "kind", "claimed_id", "actual_id", "session", "score")


@dataclass
class EnrollmentTemplate:
    subject_id: str
    modality: ModalityKind
    embeddings: np.ndarray  # [n, E]
    sessions: tuple = ()

    def __post_init__(self):
        if len(self.embeddings) == 0:
            raise InsufficientData(f"empty template for {self.subject_id}")


@dataclass
class ScoreTable:
    modality: ModalityKind
    task: TaskKind = None
    genuine: list = field(default_factory=list)  # (subject_id, session, score)
    impostor: list = field(default_factory=list)  # (claimed_id, actual_id, session, score)
    skipped: list = field(default_factory=list)  # (subject_id, reason)

    def genuine_scores(self):
        return np.array([g[2] for g in self.genuine], dtype=np.float64)

    def impostor_scores(self):
        return np.array([i[3] for i in self.impostor], dtype=np.float64)

    def pairs(self):
        """``{(claimed_id, actual_id, session): score}`` over both kinds."""
        out = {(s, s, k): v for s, k, v in self.genuine}
        out.update({(c, a, k): v for c, a, k, v in self.impostor})
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_HEADER)
            m = ModalityKind(self.modality).value
            for s, k, v in self.genuine:
                w.writerow([m, "genuine", s, s, k, repr(float(v))])
            for c, a, k, v in self.impostor:
                w.writerow([m, "impostor", c, a, k, repr(float(v))])

    @classmethod
    def from_csv(cls, path, task=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != SCORE_HEADER:
            raise BiofuseError(f"{path}: not a score table")
        modality = None
        table = cls(None, None if task is None else TaskKind(task))
        for m, kind, c, a, k, v in rows[1:]:
            modality = ModalityKind(m)
            if kind == "genuine":
                table.genuine.append((c, int(k), float(v)))
            else:
                table.impostor.append((c, a, int(k), float(v)))
        table.modality = modality
        return table


# ---------------------------------------------------------------------------
# window preparation
# ---------------------------------------------------------------------------

def enrollment_matrix(store, subject_id, session_index, task, modality):
    """Feature matrix used for enrollment/verification.

    Background streams are cut to the span of the simultaneous touch data.
    """
    fm = store.get(subject_id, session_index, task, modality)
    if fm is None:
        return None
    if ModalityKind(modality).is_background:
        rng = store.touch_range(subject_id, session_index, task)
        if rng is not None:
            fm = fm.restrict(*rng)
    return fm


def probe_rng(seed, subject_id, session_index, task, modality):
    key = f"{subject_id}|{session_index}|{TaskKind(task).value}|{ModalityKind(modality).value}"
    return np.random.default_rng([int(seed), zlib.crc32(key.encode())])


@dataclass
class ProtocolWindows:
    """Enrollment and probe windows for a set of subjects, ready to embed."""
    modality: ModalityKind
    task: TaskKind
    subjects: list
    windows: list
    template_index: dict  # subject -> slice into windows
    probe_index: dict  # subject -> [(session, window position)]
    skipped: list


def prepare_protocol(store, subjects, task, modality, seed=0, enroll_windows="all",
                     overrides=None):
    modality = ModalityKind(modality)
    task = TaskKind(task)
    spec = window_spec_for(modality, task, overrides)
    single = enroll_windows == "one"
    windows, t_index, p_index, kept, skipped = [], {}, {}, [], []
    for sid in subjects:
        enroll = []
        for k in ENROLL_SESSIONS:
            fm = enrollment_matrix(store, sid, k, task, modality)
            if fm is None or len(fm) == 0:
                continue
            enroll.extend(extract_enrollment_windows(
                fm, spec, sid, k, task, single=True if single else None))
        probes = []
        for k in VERIFY_SESSIONS:
            fm = enrollment_matrix(store, sid, k, task, modality)
            if fm is None or len(fm) == 0:
                continue
            probes.append((k, extract_random_window(fm, spec, probe_rng(seed, sid, k, task, modality),
                                                    sid, k, task)))
        if not enroll or len(probes) != len(VERIFY_SESSIONS):
            skipped.append((sid, "no enrollment data" if not enroll else "missing verification session"))
            continue
        start = len(windows)
        windows.extend(enroll)
        t_index[sid] = slice(start, len(windows))
        p_index[sid] = []
        for k, w in probes:
            p_index[sid].append((k, len(windows)))
            windows.append(w)
        kept.append(sid)
    return ProtocolWindows(modality, task, kept, windows, t_index, p_index, skipped)


def enroll(model, windows, subject_id="", modality=None):
    """Template from a list of enrollment windows."""
    if not windows:
        raise InsufficientData(f"no enrollment windows for {subject_id}")
    emb = embed(model, windows)
    modality = modality if modality is not None else windows[0].modality
    return EnrollmentTemplate(subject_id, ModalityKind(modality), emb,
                              tuple(sorted({w.session_index for w in windows})))


def template_distance(template_emb, probe_emb):
    """Mean Euclidean distance from one probe embedding to each template row."""
    template_emb = np.atleast_2d(template_emb)
    if template_emb.shape[0] == 0:
        raise InsufficientData("empty template")
    return float(np.mean(np.sqrt(np.sum((template_emb - probe_emb) ** 2, axis=1))))


def verify_score(template, probe_window, model):
    if isinstance(template, EnrollmentTemplate):
        if template.modality is not ModalityKind(probe_window.modality):
            raise BiofuseError("probe modality differs from template modality")
        template = template.embeddings
    probe = embed(model, [probe_window])[0]
    return template_distance(template, probe)


def score_protocol(model, prep):
    """ScoreTable from prepared windows (one embedding pass)."""
    emb = embed(model, prep.windows)
    table = ScoreTable(prep.modality, prep.task, skipped=list(prep.skipped))
    templates = {sid: emb[prep.template_index[sid]] for sid in prep.subjects}
    for actual in prep.subjects:
        for k, pos in prep.probe_index[actual]:
            probe = emb[pos]
            for claimed in prep.subjects:
                s = template_distance(templates[claimed], probe)
                if claimed == actual:
                    table.genuine.append((actual, k, s))
                else:
                    table.impostor.append((claimed, actual, k, s))
    return table


def build_score_table(store, subjects, task, modality, model, seed=0, enroll_windows="all",
                      overrides=None):
    prep = prepare_protocol(store, subjects, task, modality, seed, enroll_windows, overrides)
    return score_protocol(model, prep)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _sweep(genuine, impostor):
    """Candidate thresholds and integer FAR/FRR counts (all ascending in t)."""
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    if g.size == 0 or i.size == 0:
        raise InsufficientData("EER needs non-empty genuine and impostor scores")
    u = np.unique(np.concatenate([g, i]))
    cands = np.empty(2 * u.size)
    cands[0::2] = u
    cands[1:-1:2] = 0.5 * (u[:-1] + u[1:])
    cands = np.concatenate([[-np.inf], cands[:-1]])
    fa = np.searchsorted(i, cands, side="right")  # impostors accepted (<= t)
    fr = g.size - np.searchsorted(g, cands, side="right")  # genuines rejected (> t)
    return cands, fa, fr, g.size, i.size


def compute_eer(genuine, impostor):
    """Equal error rate in percent and the threshold where it occurs.

    FAR(t) = share of impostor scores <= t, FRR(t) = share of genuine > t.
    Without an exact crossing the EER is linearly interpolated between the
    two operating points that bracket it.
    """
    cands, fa, fr, ng, ni = _sweep(genuine, impostor)
    diff = fa * ng - fr * ni  # sign of FAR - FRR, exact in integers
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0:
        last = k
        while last + 1 < diff.size and diff[last + 1] == 0:
            last += 1
        return 100.0 * fa[k] / ni, 0.5 * (cands[k] + cands[last])
    j = k - 1
    far0, frr0 = fa[j] / ni, fr[j] / ng
    far1, frr1 = fa[k] / ni, fr[k] / ng
    d0, d1 = far0 - frr0, far1 - frr1
    lam = -d0 / (d1 - d0)
    eer = far0 + lam * (far1 - far0)
    thr = cands[k] if np.isinf(cands[j]) else cands[j] + lam * (cands[k] - cands[j])
    return 100.0 * eer, float(thr)


def det_curve(genuine, impostor, n_points=None):
    """``[n, 2]`` array of (FAR, FRR) operating points with ascending thresholds."""
    _, fa, fr, ng, ni = _sweep(genuine, impostor)
    pts = np.column_stack([fa / ni, fr / ng])
    if n_points is not None and n_points < len(pts):
        idx = np.unique(np.round(np.linspace(0, len(pts) - 1, n_points)).astype(int))
        pts = pts[idx]
    return pts


def relative_error_reduction(eer_base, eer_new):
    if eer_base == 0:
        raise ValueError("baseline EER is zero")
    return 100.0 * (eer_base - eer_new) / eer_base


def table_eer(table):
    return compute_eer(table.genuine_scores(), table.impostor_scores())[0]


def write_det_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("far", "frr"))
        for far, frr in points:
            w.writerow((repr(float(far)), repr(float(frr))))
