import numpy as np
import pytest

from biofuse.data import (BACKGROUND_MODALITIES, TOUCH_MODALITIES, TASK_TO_TOUCH, DeviceMeta,
                          ModalityKind, RawSeries, SessionRecord, TaskKind,
                          estimate_sampling_frequency, load_dataset, load_dataset_report,
                          split_dataset, validate_subject, write_dataset)
from biofuse.errors import BiofuseError, InsufficientData, InvalidDevice, SamplingUndefined
from biofuse.synth import SynthConfig, generate_sessions


def series(ts, vals):
    return RawSeries(np.asarray(ts, dtype=np.int64), np.asarray(vals, dtype=np.float64).reshape(len(ts), -1))


def test_modality_kinds_partition():
    assert len(BACKGROUND_MODALITIES) == 5 and len(TOUCH_MODALITIES) == 5
    for m in ModalityKind:
        assert m.is_background != m.is_touch
    assert {TASK_TO_TOUCH[t] for t in TaskKind} == set(TOUCH_MODALITIES)


def test_sampling_frequency_examples():
    assert estimate_sampling_frequency(series(np.arange(0, 1001, 10), np.zeros(101))).f_s == pytest.approx(100.0)
    assert estimate_sampling_frequency(series([0, 20], [1, 2])).f_s == pytest.approx(50.0)
    with pytest.raises(SamplingUndefined):
        estimate_sampling_frequency(series([0, 0], [1, 2]))
    with pytest.raises(SamplingUndefined):
        estimate_sampling_frequency(series([0], [1]))


def test_raw_series_invariants():
    with pytest.raises(ValueError):
        series([10, 5], [1, 2])
    with pytest.raises(ValueError):
        series([0, 5], [1, np.nan])


def test_split_examples():
    subs = [f"s{i}" for i in range(10)]
    a = split_dataset(subs, 7, 2, 2)
    assert (len(a.train_subjects), len(a.validation_subjects), len(a.test_subjects)) == (6, 2, 2)
    assert a == split_dataset(subs, 7, 2, 2)
    assert set(a.train_subjects) | set(a.validation_subjects) | set(a.test_subjects) == set(subs)
    big = split_dataset([f"u{i}" for i in range(376)], 0, 65, 65)
    assert len(big.train_subjects) == 246
    with pytest.raises(InsufficientData):
        split_dataset(["a", "b", "c"], 0, 2, 2)


def test_split_seeds_differ():
    subs = [f"s{i}" for i in range(20)]
    splits = {split_dataset(subs, s, 4, 4).test_subjects for s in range(10)}
    assert len(splits) > 1


def _subject(sessions, sid):
    return [s for s in sessions if s.subject_id == sid]


@pytest.fixture(scope="module")
def two_subjects():
    return generate_sessions(SynthConfig(n_subjects=2, seed=5, session_duration_s=2.0))


def test_validate_subject(two_subjects):
    recs = _subject(two_subjects, "user000")
    assert validate_subject(recs)
    assert not validate_subject(recs[:4])
    bad = recs[0]
    acc = bad.get(TaskKind.KEYSTROKE, ModalityKind.ACCELEROMETER)
    zeroed = dict(bad.streams)
    zeroed[TaskKind.KEYSTROKE] = dict(zeroed[TaskKind.KEYSTROKE])
    zeroed[TaskKind.KEYSTROKE][ModalityKind.ACCELEROMETER] = RawSeries(acc.timestamps, np.zeros_like(acc.values))
    assert not validate_subject([SessionRecord(bad.subject_id, 1, bad.device, zeroed)] + recs[1:])


def test_round_trip(tmp_path, two_subjects):
    write_dataset(two_subjects, tmp_path)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == len(two_subjects)
    for a, b in zip(sorted(two_subjects, key=lambda r: (r.subject_id, r.session_index)), loaded):
        assert (a.subject_id, a.session_index, a.device) == (b.subject_id, b.session_index, b.device)
        for task, per in a.streams.items():
            for m, s in per.items():
                t = b.get(task, m)
                assert np.array_equal(s.timestamps, t.timestamps)
                np.testing.assert_allclose(t.values, s.values, rtol=0, atol=1e-9)


def test_empty_directory(tmp_path):
    sessions, report = load_dataset_report(tmp_path)
    assert sessions == [] and report.warning_count == 0


def test_unreadable_root(tmp_path):
    with pytest.raises(BiofuseError):
        load_dataset(tmp_path / "nope")


def test_one_subject_five_sessions(tmp_path, two_subjects):
    write_dataset(_subject(two_subjects, "user000"), tmp_path)
    assert len(load_dataset(tmp_path)) == 5


def test_nan_excludes_session(tmp_path, two_subjects):
    write_dataset(two_subjects, tmp_path)
    p = tmp_path / "user001" / "session_2" / "tap" / "gyroscope.csv"
    lines = p.read_text().splitlines()
    lines[3] = lines[3].split(",")[0] + ",NaN,0.0,0.0"
    p.write_text("\n".join(lines) + "\n")
    sessions, report = load_dataset_report(tmp_path)
    assert [s.subject_id for s in sessions] == ["user000"] * 5
    assert len(report.invalid_sessions) == 1 and "session_2" in report.invalid_sessions[0][0]
    assert report.rejected_subjects == [("user001", "failed validation")]


def test_three_column_gravity_rejected(tmp_path, two_subjects):
    write_dataset(two_subjects, tmp_path)
    p = tmp_path / "user000" / "session_1" / "draw8" / "gravity.csv"
    p.write_text("timestamp,x,y,z\n0,1.0,2.0,3.0\n")
    _, report = load_dataset_report(tmp_path)
    assert any("gravity" in path for path, _ in report.invalid_sessions)


def test_extra_sessions_ignored(tmp_path, two_subjects):
    recs = _subject(two_subjects, "user000")
    extra = SessionRecord("user000", 6, recs[0].device, recs[0].streams)
    write_dataset(recs + [extra], tmp_path)
    loaded = load_dataset(tmp_path)
    assert sorted(r.session_index for r in loaded) == [1, 2, 3, 4, 5]


def test_touch_outside_screen(tmp_path, two_subjects):
    write_dataset(two_subjects, tmp_path)
    p = tmp_path / "user000" / "session_3" / "tap" / "tap.csv"
    p.write_text("timestamp,x,y,p\n0,99999.0,10.0,0.5\n")
    _, report = load_dataset_report(tmp_path)
    assert any("outside the screen" in why for _, why in report.invalid_sessions)


def test_manifest(tmp_path, two_subjects):
    write_dataset(two_subjects, tmp_path / "d")
    (tmp_path / "m.txt").write_text("# subjects\nuser001\n")
    assert {r.subject_id for r in load_dataset(tmp_path / "d", tmp_path / "m.txt")} == {"user001"}


def test_threads_give_same_result(tmp_path, two_subjects):
    write_dataset(two_subjects, tmp_path)
    a = load_dataset(tmp_path, threads=1)
    b = load_dataset(tmp_path, threads=3)
    assert [(r.subject_id, r.session_index) for r in a] == [(r.subject_id, r.session_index) for r in b]


def test_dataset_without_gyroscope_is_valid(tmp_path):
    bg = tuple(m.value for m in BACKGROUND_MODALITIES if m is not ModalityKind.GYROSCOPE)
    recs = generate_sessions(SynthConfig(n_subjects=2, seed=1, session_duration_s=2.0, background=bg))
    write_dataset(recs, tmp_path)
    assert len(load_dataset(tmp_path)) == 10


def test_device_meta_invariant():
    with pytest.raises(InvalidDevice):
        DeviceMeta(0, 100, "x")
