"""Run configuration and the on-disk stages behind the ``biofuse`` commands.

Output layout under ``out``::

    config.json                      effective configuration
    split.json                       train/validation/test subject lists
    ingest.json                      ingest report
    models/<modality>.bfm            trained encoders (+ _history.csv)
    scores/<split>/<task>/<modality>.csv
    det/<task>/<modality>.csv        test DET points
    eer.csv                          split,task,modality,eer_percent
    fusion.csv                       ranked subsets per task and mode
    report.txt                       unimodal and fusion summary

Seeds: every stage draws from ``stage_seed(root_seed, stage)``, a 32-bit
word of ``SeedSequence([root_seed, crc32(stage)])``, so a stage can be rerun
alone and still reproduce its outputs.
"""

import csv
import dataclasses
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (BACKGROUND_MODALITIES, TASK_TO_TOUCH, TOUCH_MODALITIES, ModalityKind,
                   TaskKind, load_dataset_report, split_dataset, task_modalities)
from . import encoder
from .encoder import load_model
from .errors import ConfigError, InsufficientData
from .evaluation import (build_score_table, compute_eer, det_curve, relative_error_reduction,
                         ScoreTable, write_det_csv)
from .fusion import FUSION_MODES, rank_subsets, read_fusion_csv, write_fusion_csv
from .preprocessing import FeatureStore
from .synth import SynthConfig, generate_dataset
from .training import TrainConfig, train_all
from .windowing import window_stats

log = logging.getLogger(__name__)

SPLITS = ("validation", "test")
EER_HEADER = ("split", "task", "modality", "eer_percent")


def stage_seed(root_seed, stage):
    ss = np.random.SeedSequence([int(root_seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class SplitConfig:
    n_val: int = 65
    n_test: int = 65
    seed: int = None  # None: derived from the root seed


@dataclass
class RunConfig:
    dataset: str = None
    manifest: str = None
    out: str = "runs"
    seed: int = 0
    threads: int = 1
    split: SplitConfig = field(default_factory=SplitConfig)
    train: dict = field(default_factory=dict)  # TrainConfig fields
    modalities: list = None  # None: every modality present in the data
    tasks: list = None  # None: all five tasks
    window_overrides: dict = field(default_factory=dict)
    fusion_mode: str = "both"  # simple | weighted | both
    zscore: bool = False
    enroll_windows: str = "all"  # all | one
    synth: dict = field(default_factory=dict)  # SynthConfig fields

    def validate(self):
        if self.fusion_mode not in FUSION_MODES + ("both",):
            raise ConfigError(f"fusion_mode: expected simple, weighted or both, got {self.fusion_mode!r}")
        if self.enroll_windows not in ("all", "one"):
            raise ConfigError(f"enroll_windows: expected all or one, got {self.enroll_windows!r}")
        if self.threads < 1:
            raise ConfigError("threads: must be at least 1")
        for key, enum in (("modalities", ModalityKind), ("tasks", TaskKind)):
            for v in getattr(self, key) or ():
                try:
                    enum(v)
                except ValueError:
                    raise ConfigError(f"{key}: unknown value {v!r}") from None
        for m in self.window_overrides:
            try:
                ModalityKind(m)
            except ValueError:
                raise ConfigError(f"window_overrides: unknown modality {m!r}") from None
        _checked(TrainConfig.from_dict, self.train_dict(), "train")
        _checked(lambda d: SynthConfig(**d), self.synth, "synth")
        return self

    def train_dict(self):
        d = dict(self.train)
        d.setdefault("seed", stage_seed(self.seed, "train"))
        d.setdefault("eval_seed", stage_seed(self.seed, "eval"))
        d.setdefault("enroll_windows", self.enroll_windows)
        d.setdefault("window_overrides", dict(self.window_overrides))
        return d

    def train_config(self):
        return TrainConfig.from_dict(self.train_dict())

    @property
    def split_seed(self):
        return self.split.seed if self.split.seed is not None else stage_seed(self.seed, "split")

    @property
    def eval_seed(self):
        return self.train_config().eval_seed

    def selected_tasks(self):
        return [TaskKind(t) for t in self.tasks] if self.tasks else list(TaskKind)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["train"] = self.train_config().to_dict()
        d["split"]["seed"] = self.split_seed
        return d

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _checked(fn, d, where):
    try:
        return fn(d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _reject_unknown(d, cls, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(d, RunConfig, "")
    d = dict(d)
    if "split" in d:
        if not isinstance(d["split"], dict):
            raise ConfigError("split: expected an object")
        _reject_unknown(d["split"], SplitConfig, "split.")
        d["split"] = SplitConfig(**d["split"])
    for sub, cls in (("train", TrainConfig), ("synth", SynthConfig)):
        if sub in d:
            if not isinstance(d[sub], dict):
                raise ConfigError(f"{sub}: expected an object")
            _reject_unknown(d[sub], cls, sub + ".")
    for sub, cls in (("optimizer", "OptimizerConfig"), ("loss", "TripletLossConfig")):
        inner = d.get("train", {}).get(sub)
        if inner is not None:
            _reject_unknown(inner, getattr(encoder, cls), f"train.{sub}.")
    return RunConfig(**d).validate()


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(d)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def out_dir(cfg):
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def run_synth(cfg, n_subjects=None, separability=None):
    """Write a synthetic dataset to ``cfg.out``; returns the profiles."""
    d = dict(cfg.synth)
    d.setdefault("seed", stage_seed(cfg.seed, "synth"))
    if n_subjects is not None:
        d["n_subjects"] = n_subjects
    if separability is not None:
        d["separability"] = separability
    scfg = _checked(lambda x: SynthConfig(**x), d, "synth")
    root = out_dir(cfg)
    return generate_dataset(scfg, root)


def _require_dataset(cfg):
    if cfg.dataset is None:
        raise ConfigError("dataset: no dataset root given (use --dataset or the config key)")
    root = Path(cfg.dataset)
    if not root.is_dir():
        raise ConfigError(f"dataset: {root} is not a directory")
    if cfg.manifest is not None and not Path(cfg.manifest).is_file():
        raise ConfigError(f"manifest: {cfg.manifest} does not exist")
    return root


def ingest(cfg):
    """Load, validate and split the dataset; returns ``(store, split, report)``."""
    root = _require_dataset(cfg)
    sessions, report = load_dataset_report(root, cfg.manifest, cfg.threads)
    if not sessions:
        raise InsufficientData(f"no valid subjects under {root}")
    store = FeatureStore.from_sessions(sessions)
    split = split_dataset(store.subjects(), cfg.split_seed, cfg.split.n_val, cfg.split.n_test)
    return store, split, report


def run_ingest(cfg):
    store, split, report = ingest(cfg)
    out = out_dir(cfg)
    cfg.dump(out / "config.json")
    _write_json(out / "split.json", split.to_dict())
    _write_json(out / "ingest.json", {
        "subjects": store.subjects(),
        "sessions_read": report.n_sessions_read,
        "invalid_sessions": [list(x) for x in report.invalid_sessions],
        "rejected_subjects": [list(x) for x in report.rejected_subjects],
        "modalities": sorted(m.value for m in store.modalities()),
    })
    return store, split, report


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _modalities(cfg):
    if cfg.modalities:
        return [ModalityKind(m) for m in cfg.modalities]
    return list(BACKGROUND_MODALITIES + TOUCH_MODALITIES)


def model_path(cfg, modality):
    return Path(cfg.out) / "models" / f"{ModalityKind(modality).value}.bfm"


def run_train(cfg, progress=None):
    store, split, _ = run_ingest(cfg)
    models, failures = train_all(store, split, cfg.train_config(), Path(cfg.out) / "models",
                                 _modalities(cfg), progress)
    return models, failures


def score_path(cfg, split_name, task, modality):
    return Path(cfg.out) / "scores" / split_name / TaskKind(task).value / f"{ModalityKind(modality).value}.csv"


def run_eval(cfg):
    """Score tables, DET points and EERs for every trained modality and task."""
    models_dir = Path(cfg.out) / "models"
    if not models_dir.is_dir():
        raise ConfigError(f"missing model directory {models_dir}; run `biofuse train` first")
    if cfg.modalities:
        mods = _modalities(cfg)
        missing = [str(model_path(cfg, m)) for m in mods if not model_path(cfg, m).is_file()]
        if missing:
            raise ConfigError(f"missing model file(s): {', '.join(missing)}")
    else:
        mods = [m for m in _modalities(cfg) if model_path(cfg, m).is_file()]
        if not mods:
            raise ConfigError(f"no model files in {models_dir}; run `biofuse train` first")
    store, split, _ = run_ingest(cfg)
    subjects = {"validation": split.validation_subjects, "test": split.test_subjects}
    for m in mods:
        model = load_model(model_path(cfg, m))
        for task in cfg.selected_tasks():
            if m not in task_modalities(task) or (m.is_touch and TASK_TO_TOUCH[task] is not m):
                continue
            for split_name in SPLITS:
                table = build_score_table(store, subjects[split_name], task, m, model, cfg.eval_seed,
                                          cfg.enroll_windows, cfg.window_overrides)
                if not table.genuine:
                    log.warning("no %s scores for %s/%s", split_name, task.value, m.value)
                    continue
                p = score_path(cfg, split_name, task, m)
                p.parent.mkdir(parents=True, exist_ok=True)
                table.to_csv(p)
                if split_name == "test":
                    d = Path(cfg.out) / "det" / task.value / f"{m.value}.csv"
                    d.parent.mkdir(parents=True, exist_ok=True)
                    write_det_csv(d, det_curve(table.genuine_scores(), table.impostor_scores()))
    return write_eer_summary(cfg)


def load_tables(cfg, split_name, task):
    """``{modality: ScoreTable}`` for the score files of one split and task."""
    d = Path(cfg.out) / "scores" / split_name / TaskKind(task).value
    out = {}
    if d.is_dir():
        for p in sorted(d.glob("*.csv")):
            t = ScoreTable.from_csv(p, task)
            out[t.modality] = t
    return out


def write_eer_summary(cfg):
    rows = []
    for split_name in SPLITS:
        for task in TaskKind:
            for m, t in load_tables(cfg, split_name, task).items():
                rows.append((split_name, task.value, m.value,
                             compute_eer(t.genuine_scores(), t.impostor_scores())[0]))
    path = Path(cfg.out) / "eer.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EER_HEADER)
        for r in rows:
            w.writerow(r[:3] + (repr(float(r[3])),))
    return rows


def read_eer_summary(cfg):
    path = Path(cfg.out) / "eer.csv"
    if not path.is_file():
        raise ConfigError(f"missing {path}; run `biofuse eval` first")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return {(s, TaskKind(t), ModalityKind(m)): float(e) for s, t, m, e in rows}


def run_fuse(cfg):
    eers = read_eer_summary(cfg)
    modes = FUSION_MODES if cfg.fusion_mode == "both" else (cfg.fusion_mode,)
    results = []
    for task in cfg.selected_tasks():
        tables = load_tables(cfg, "test", task)
        if not tables:
            continue
        val = {m: eers.get(("validation", task, m), math.nan) for m in tables}
        for mode in modes:
            if mode == "weighted" and any(math.isnan(v) for v in val.values()):
                raise InsufficientData(f"weighted fusion for {task.value} needs validation EERs of "
                                       f"every modality")
            results.extend(rank_subsets(task, tables, val, mode, cfg.zscore))
    if not results:
        raise ConfigError(f"no test score tables under {Path(cfg.out) / 'scores'}; run `biofuse eval` first")
    write_fusion_csv(Path(cfg.out) / "fusion.csv", results)
    return results


def _fmt(x):
    return "  n/a" if x is None or math.isnan(x) else f"{x:5.2f}"


def run_report(cfg, top=3):
    """Plain-text summary: enrollment windows, unimodal EERs, best fused subsets."""
    eers = read_eer_summary(cfg)
    fusion_path = Path(cfg.out) / "fusion.csv"
    lines = ["biofuse report", ""]
    if cfg.dataset is not None and Path(cfg.dataset).is_dir():
        store, split, _ = ingest(cfg)
        lines.append("Enrollment windows per subject (sessions 1-3, test subjects): mean +- std")
        for task in cfg.selected_tasks():
            ws = window_stats(store, task, split.test_subjects, overrides=cfg.window_overrides)
            lines.append(f"  {task.value:12s} {ws.mean_windows:7.2f} +- {ws.std_windows:.2f}")
        lines.append("")
    lines.append("Unimodal test EER (%)")
    header = ["task", "touch"] + [m.acronym for m in BACKGROUND_MODALITIES]
    lines.append("  " + " ".join(f"{h:>12s}" for h in header))
    best_single = {}
    for task in cfg.selected_tasks():
        vals = [eers.get(("test", task, m)) for m in task_modalities(task)]
        present = [v for v in vals if v is not None]
        if present:
            best_single[task] = min(present)
        lines.append("  " + " ".join([f"{task.value:>12s}"] + [f"{_fmt(v):>12s}" for v in vals]))
    lines.append("")
    if fusion_path.is_file():
        rows = read_fusion_csv(fusion_path)
        for mode in FUSION_MODES:
            mrows = [r for r in rows if r[1] == mode]
            if not mrows:
                continue
            lines.append(f"Best {top} {mode} fusion subsets (test EER %, coverage %)")
            for task in cfg.selected_tasks():
                trows = [r for r in mrows if r[0] == task.value and "+" in r[2]]
                best = "; ".join(f"{r[2]} {_fmt(r[3]).strip()} ({r[4]:.0f})" for r in trows[:top])
                lines.append(f"  {task.value:12s} {best}")
                if trows and task in best_single and best_single[task] > 0:
                    rer = relative_error_reduction(best_single[task], trows[0][3])
                    lines.append(f"  {'':12s} relative error reduction vs best unimodal: {rer:.2f}%")
            lines.append("")
    text = "\n".join(lines).rstrip() + "\n"
    (out_dir(cfg) / "report.txt").write_text(text)
    return text
