"""Per-modality encoder training with random triplets and EER early stopping."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import TOUCH_TO_TASK, ModalityKind, TaskKind, BACKGROUND_MODALITIES, TOUCH_MODALITIES
from .encoder import (AdamState, EncoderConfig, OptimizerConfig, TripletLossConfig, adam_step,
                      batch_triplet_loss, embed, encoder_backward, encoder_forward, init_model,
                      save_model, update_running_stats)
from .errors import BiofuseError, InsufficientData, TrainingDiverged
from .evaluation import compute_eer, prepare_protocol, score_protocol
from .windowing import FeatureWindow, extract_random_window, window_spec_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triplet:
    anchor: FeatureWindow
    positive: FeatureWindow
    negative: FeatureWindow

    def __post_init__(self):
        a, p, n = self.anchor, self.positive, self.negative
        if a.subject_id != p.subject_id or a.subject_id == n.subject_id:
            raise ValueError("anchor/positive must share a subject that the negative lacks")
        if not a.modality == p.modality == n.modality:
            raise ValueError("triplet windows must share a modality")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 10
    triplets_per_epoch: int = 2048
    seed: int = 0
    optimizer: OptimizerConfig = OptimizerConfig()
    loss: TripletLossConfig = TripletLossConfig()
    hidden_units: int = 64
    num_layers: int = 2
    dropout_between: float = 0.5
    recurrent_dropout: float = 0.2
    mining: str = "random"  # or "semi_hard"
    eval_seed: int = 0
    enroll_windows: str = "all"
    window_overrides: dict = field(default_factory=dict)
    tasks: tuple = ()  # background sensors: restrict training/validation tasks; empty = all

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(TaskKind(t).value for t in self.tasks))
        if self.patience > self.max_epochs and self.max_epochs > 0:
            raise ValueError("patience exceeds max_epochs")
        if self.triplets_per_epoch < self.optimizer.batch_size:
            raise ValueError("triplets_per_epoch must be at least one batch")
        if self.mining not in ("random", "semi_hard"):
            raise ValueError(f"unknown mining mode {self.mining!r}")

    def encoder_config(self, input_dim):
        return EncoderConfig(input_dim, self.hidden_units, self.num_layers,
                             self.dropout_between, self.recurrent_dropout)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if "loss" in d:
            d["loss"] = TripletLossConfig(**d["loss"])
        return cls(**d)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # (epoch, mean_loss, val_eer)
    best_epoch: int = 0
    best_val_eer: float = math.nan

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "mean_loss", "val_eer"))
            for e, loss, eer in self.epochs:
                w.writerow((e, repr(float(loss)), repr(float(eer))))


def training_tasks(modality, restrict=()):
    """Tasks whose recordings train ``modality``'s encoder.

    Touch modalities have their own task; background sensors use every task,
    or only those in ``restrict`` when it is non-empty.
    """
    modality = ModalityKind(modality)
    if modality.is_background:
        if restrict:
            keep = {TaskKind(t) for t in restrict}
            return tuple(t for t in TaskKind if t in keep)
        return tuple(TaskKind)
    return (TOUCH_TO_TASK[modality],)


class TripletPool:
    """Training windows source: ``task -> subject -> [(session, FeatureMatrix)]``."""

    def __init__(self, store, subjects, modality, overrides=None, tasks=()):
        self.modality = ModalityKind(modality)
        self.spec = window_spec_for(self.modality, None, overrides)
        self.by_task = {}
        for task in training_tasks(self.modality, tasks):
            per = {}
            for sid in subjects:
                rows = []
                for k in store.sessions(sid, task, self.modality):
                    fm = store.get(sid, k, task, self.modality)
                    if fm is not None and len(fm) and np.any(fm.data):
                        rows.append((k, fm))
                if rows:
                    per[sid] = rows
            if len(per) >= 2:
                self.by_task[task] = per
        self.tasks = tuple(t for t in training_tasks(self.modality, tasks) if t in self.by_task)
        if not self.tasks:
            raise InsufficientData(f"fewer than 2 usable subjects for {self.modality.value}")

    @property
    def channels(self):
        per = self.by_task[self.tasks[0]]
        return next(iter(per.values()))[0][1].channels

    def subjects(self, task):
        return sorted(self.by_task[task])


def sample_triplet(pool, rng, task=None, anchor_subject=None):
    if task is None:
        task = pool.tasks[int(rng.integers(len(pool.tasks)))]
    task = TaskKind(task)
    per = pool.by_task.get(task)
    if per is None or len(per) < 2:
        raise InsufficientData(f"need at least 2 subjects with {pool.modality.value} data for {task.value}")
    subjects = sorted(per)
    a_sid = anchor_subject if anchor_subject is not None else subjects[int(rng.integers(len(subjects)))]
    sessions = per[a_sid]
    if len(sessions) >= 2:
        i, j = rng.choice(len(sessions), size=2, replace=False)
    else:
        i = j = 0
    others = [s for s in subjects if s != a_sid]
    n_sid = others[int(rng.integers(len(others)))]
    n_sessions = per[n_sid]
    n_k, n_fm = n_sessions[int(rng.integers(len(n_sessions)))]
    spec = pool.spec
    (a_k, a_fm), (p_k, p_fm) = sessions[int(i)], sessions[int(j)]
    return Triplet(
        extract_random_window(a_fm, spec, rng, a_sid, a_k, task),
        extract_random_window(p_fm, spec, rng, a_sid, p_k, task),
        extract_random_window(n_fm, spec, rng, n_sid, n_k, task),
    )


def sample_triplets(pool, n, rng):
    """``n`` triplets; tasks cycle round-robin so each contributes equally."""
    return [sample_triplet(pool, rng, pool.tasks[i % len(pool.tasks)]) for i in range(n)]


def _semi_hard(model, pool, triplets, rng, margin, candidates=4):
    """Replace each negative with a semi-hard candidate when one exists."""
    out = []
    a_emb = embed(model, [t.anchor for t in triplets])
    p_emb = embed(model, [t.positive for t in triplets])
    for idx, t in enumerate(triplets):
        cands = [t.negative] + [
            sample_triplet(pool, rng, t.anchor.task, t.anchor.subject_id).negative
            for _ in range(candidates - 1)
        ]
        n_emb = embed(model, cands)
        dap = np.sum((a_emb[idx] - p_emb[idx]) ** 2)
        dan = np.sum((n_emb - a_emb[idx]) ** 2, axis=1)
        ok = np.flatnonzero((dan > dap) & (dan < dap + margin))
        pick = int(ok[np.argmin(dan[ok])]) if ok.size else int(np.argmin(dan))
        out.append(Triplet(t.anchor, t.positive, cands[pick]))
    return out


class Validator:
    """Validation EER of a model with windows prepared once."""

    def __init__(self, store, subjects, modality, cfg):
        self.preps = []
        for task in training_tasks(modality, cfg.tasks):
            prep = prepare_protocol(store, subjects, task, modality, cfg.eval_seed,
                                    cfg.enroll_windows, cfg.window_overrides)
            if len(prep.subjects) >= 2:
                self.preps.append(prep)

    def __bool__(self):
        return bool(self.preps)

    def per_task(self, model):
        out = {}
        for prep in self.preps:
            table = score_protocol(model, prep)
            out[prep.task] = compute_eer(table.genuine_scores(), table.impostor_scores())[0]
        return out

    def __call__(self, model):
        eers = self.per_task(model)
        return float(np.mean(list(eers.values()))) if eers else math.nan


def train_step(model, triplets, state, cfg, rng):
    windows = ([t.anchor for t in triplets] + [t.positive for t in triplets]
               + [t.negative for t in triplets])
    emb, cache = encoder_forward(model, windows, "train", rng=rng)
    loss, d_emb = batch_triplet_loss(emb, cfg.loss.margin)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss is {loss}")
    grads = encoder_backward(model, cache, d_emb)
    adam_step(model.params, grads, state, cfg.optimizer)
    update_running_stats(model, cache)
    if not all(np.all(np.isfinite(v)) for v in model.params.values()):
        raise TrainingDiverged("non-finite parameters after update; lower the learning rate")
    return loss


def train_modality(modality, store, split, cfg, progress=None):
    """Train one encoder; returns ``(model, history)`` for the best validation EER."""
    modality = ModalityKind(modality)
    pool = TripletPool(store, split.train_subjects, modality, cfg.window_overrides, cfg.tasks)
    rng = np.random.default_rng([cfg.seed, list(ModalityKind).index(modality)])
    model = init_model(cfg.encoder_config(len(pool.channels)), rng, pool.channels, modality.value)
    validator = Validator(store, split.validation_subjects, modality, cfg)
    history = TrainHistory()
    best = model.copy()
    best_eer = validator(model) if validator else math.nan
    history.epochs.append((0, math.nan, best_eer))
    history.best_val_eer = best_eer
    state = AdamState()
    stale = 0
    bs = cfg.optimizer.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        triplets = sample_triplets(pool, cfg.triplets_per_epoch, rng)
        losses = []
        for start in range(0, len(triplets), bs):
            batch = triplets[start:start + bs]
            if cfg.mining == "semi_hard":
                batch = _semi_hard(model, pool, batch, rng, cfg.loss.margin)
            losses.append(train_step(model, batch, state, cfg, rng))
        mean_loss = float(np.mean(losses))
        eer = validator(model) if validator else math.nan
        history.epochs.append((epoch, mean_loss, eer))
        if progress:
            progress(f"{modality.value} epoch {epoch} loss {mean_loss:.4f} val_eer {eer:.2f}")
        if not math.isnan(eer) and (math.isnan(best_eer) or eer <= best_eer):
            best_eer, best, stale = eer, model.copy(), 0
            history.best_epoch, history.best_val_eer = epoch, eer
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if not validator:
        best = model
    return best, history


def train_all(store, split, cfg, out_dir=None, modalities=None, progress=None):
    """Train every modality independently; returns ``(models, failures)``."""
    if modalities is None:
        modalities = BACKGROUND_MODALITIES + TOUCH_MODALITIES
    models, failures = {}, {}
    for m in modalities:
        m = ModalityKind(m)
        try:
            model, hist = train_modality(m, store, split, cfg, progress)
        except BiofuseError as exc:
            log.error("training %s failed: %s", m.value, exc)
            failures[m] = str(exc)
            continue
        models[m] = (model, hist)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_model(model, out / f"{m.value}.bfm")
            hist.to_csv(out / f"{m.value}_history.csv")
    return models, failures
