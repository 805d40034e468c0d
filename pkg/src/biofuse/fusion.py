"""Score-level fusion over modality subsets.

For a task the touch modality and the five background sensors give 63
non-empty subsets. A subset's fused score for one comparison is the
weighted sum ``S = sum_n w_n * s_n`` of its modalities' distance scores,
with weights either uniform ("simple") or the normalised inverse validation
EER ("weighted").
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import ModalityKind, TaskKind, task_modalities
from .errors import InsufficientData
from .evaluation import ScoreTable, compute_eer

FUSION_MODES = ("simple", "weighted")
FUSION_HEADER = ("task", "mode", "subset_acronyms", "eer_percent", "coverage_percent")


@dataclass(frozen=True)
class FusionSubset:
    task: TaskKind
    modalities: tuple  # ModalityKind, in the task's canonical order
    mask: int = 0

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("a fusion subset needs at least one modality")

    @property
    def acronyms(self):
        return "+".join(m.acronym for m in self.modalities)

    def __len__(self):
        return len(self.modalities)


@dataclass(frozen=True)
class FusionWeights:
    weights: dict  # ModalityKind -> float

    def __post_init__(self):
        w = np.array(list(self.weights.values()), dtype=np.float64)
        if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"fusion weights must be non-negative and sum to 1, got {self.weights}")

    def __getitem__(self, modality):
        return self.weights[ModalityKind(modality)]


@dataclass(frozen=True)
class FusionResult:
    subset: FusionSubset
    mode: str
    eer: float
    coverage: float
    weights: FusionWeights
    n_pairs: int = 0


def enumerate_subsets(task, modalities=None):
    """Every non-empty subset of the task's modalities, bitmask ascending.

    Bit ``i`` selects the ``i``-th modality of ``task_modalities(task)``
    (touch first). ``modalities`` restricts the pool; with all six present
    there are 63 subsets.
    """
    task = TaskKind(task)
    pool = task_modalities(task)
    if modalities is not None:
        keep = {ModalityKind(m) for m in modalities}
        unknown = keep - set(pool)
        if unknown:
            raise ValueError(f"{sorted(m.value for m in unknown)} not recorded during {task.value}")
        pool = tuple(m for m in pool if m in keep)
    out = []
    for mask in range(1, 1 << len(pool)):
        mods = tuple(m for i, m in enumerate(pool) if mask >> i & 1)
        out.append(FusionSubset(task, mods, mask))
    return out


def compute_weights(subset, validation_eers=None, mode="weighted"):
    """Normalised weights for a subset.

    Weighted mode uses inverse validation EER; modalities with zero EER
    share all the weight evenly.
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    mods = subset.modalities
    if mode == "simple":
        return FusionWeights({m: 1.0 / len(mods) for m in mods})
    try:
        eers = np.array([float(validation_eers[m]) for m in mods])
    except (KeyError, TypeError) as exc:
        raise InsufficientData(f"missing validation EER for subset {subset.acronyms}") from exc
    if np.any(~np.isfinite(eers)) or np.any(eers < 0):
        raise InsufficientData(f"invalid validation EERs {eers.tolist()} for {subset.acronyms}")
    zero = eers == 0
    if zero.any():
        w = zero / zero.sum()
    else:
        inv = 1.0 / eers
        w = inv / inv.sum()
    return FusionWeights({m: float(x) for m, x in zip(mods, w)})


def fuse_scores(subset, weights, per_modality_scores):
    """Weighted sum of one comparison's scores; None when a modality is missing."""
    total = 0.0
    for m in subset.modalities:
        s = per_modality_scores.get(m)
        if s is None:
            return None
        total += weights[m] * s
    return total


def _zscore_pairs(pairs):
    v = np.array(list(pairs.values()))
    mu, sd = v.mean(), v.std()
    sd = sd if sd > 1e-12 else 1.0
    return {k: (s - mu) / sd for k, s in pairs.items()}


def fuse_tables(subset, weights, tables, zscore=False):
    """Fused ScoreTable and coverage percent.

    Comparisons are matched on ``(claimed_id, actual_id, session)``; a pair
    missing from any subset modality is dropped.
    """
    pair_maps = {}
    for m in subset.modalities:
        if m not in tables:
            raise InsufficientData(f"no score table for {m.value}")
        p = tables[m].pairs()
        pair_maps[m] = _zscore_pairs(p) if zscore and p else p
    union = set().union(*(p.keys() for p in pair_maps.values()))
    fused = ScoreTable(None, subset.task)
    for key in sorted(union):
        s = fuse_scores(subset, weights, {m: p.get(key) for m, p in pair_maps.items()})
        if s is None:
            continue
        claimed, actual, k = key
        if claimed == actual:
            fused.genuine.append((actual, k, s))
        else:
            fused.impostor.append((claimed, actual, k, s))
    kept = len(fused.genuine) + len(fused.impostor)
    coverage = 100.0 * kept / len(union) if union else 0.0
    return fused, coverage


def evaluate_subset(subset, tables, validation_eers=None, mode="weighted", zscore=False):
    weights = compute_weights(subset, validation_eers, mode)
    fused, coverage = fuse_tables(subset, weights, tables, zscore)
    if not fused.genuine or not fused.impostor:
        eer = math.nan
    else:
        eer = compute_eer(fused.genuine_scores(), fused.impostor_scores())[0]
    return FusionResult(subset, mode, eer, coverage, weights,
                        len(fused.genuine) + len(fused.impostor))


def rank_subsets(task, tables, validation_eers=None, mode="weighted", zscore=False, min_size=1):
    """Fused EER of every subset over the modalities that have tables, ascending.

    Ties (and NaN EERs, placed last) are broken by subset bitmask.
    """
    tables = {ModalityKind(m): t for m, t in tables.items()}
    if validation_eers is not None:
        validation_eers = {ModalityKind(m): v for m, v in validation_eers.items()}
    subsets = [s for s in enumerate_subsets(task, tables.keys()) if len(s) >= min_size]
    results = [evaluate_subset(s, tables, validation_eers, mode, zscore) for s in subsets]
    return sorted(results, key=lambda r: (math.isnan(r.eer), r.eer, r.subset.mask))


def best_result(results, min_size=1, max_size=None):
    pool = [r for r in results if len(r.subset) >= min_size
            and (max_size is None or len(r.subset) <= max_size) and not math.isnan(r.eer)]
    if not pool:
        raise InsufficientData("no fusion result in the requested size range")
    return min(pool, key=lambda r: (r.eer, r.subset.mask))


def write_fusion_csv(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUSION_HEADER)
        for r in results:
            w.writerow((r.subset.task.value, r.mode, r.subset.acronyms,
                        repr(float(r.eer)), repr(float(r.coverage))))


def read_fusion_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != FUSION_HEADER:
        raise InsufficientData(f"{path}: not a fusion report")
    return [(t, m, a, float(e), float(c)) for t, m, a, e, c in rows[1:]]
