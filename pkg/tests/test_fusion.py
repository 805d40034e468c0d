import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from biofuse.data import BACKGROUND_MODALITIES, ModalityKind, TaskKind, task_modalities
from biofuse.errors import InsufficientData
from biofuse.evaluation import ScoreTable, compute_eer
from biofuse.fusion import (FusionWeights, best_result, compute_weights, enumerate_subsets,
                            fuse_scores, fuse_tables, rank_subsets, read_fusion_csv,
                            write_fusion_csv)

K = ModalityKind.TOUCH_KEYSTROKE
A = ModalityKind.ACCELEROMETER
M = ModalityKind.MAGNETOMETER


def subset_of(*mods, task=TaskKind.KEYSTROKE):
    want = set(mods)
    return next(s for s in enumerate_subsets(task) if set(s.modalities) == want)


def random_table(modality, rng, n=6, shift=1.0):
    t = ScoreTable(modality, TaskKind.KEYSTROKE)
    ids = [f"u{i}" for i in range(n)]
    for a in ids:
        for k in (4, 5):
            for c in ids:
                s = float(rng.gamma(2.0) + (0 if c == a else shift))
                if c == a:
                    t.genuine.append((a, k, s))
                else:
                    t.impostor.append((c, a, k, s))
    return t


@pytest.mark.parametrize("task", list(TaskKind))
def test_enumerate_63(task):
    subs = enumerate_subsets(task)
    assert len(subs) == 63
    assert [s.mask for s in subs] == list(range(1, 64))
    assert len({frozenset(s.modalities) for s in subs}) == 63
    singles = [s for s in subs if len(s) == 1]
    assert {s.modalities[0] for s in singles} == set(task_modalities(task))
    assert sum(len(s) == 6 for s in subs) == 1
    assert subs[0].modalities[0].is_touch


def test_enumerate_restricted():
    subs = enumerate_subsets(TaskKind.KEYSTROKE, [K, A, M])
    assert len(subs) == 7 and subs[-1].acronyms == "K+A+M"
    with pytest.raises(ValueError):
        enumerate_subsets(TaskKind.KEYSTROKE, [ModalityKind.TOUCH_TAP])


def test_weight_examples():
    w = compute_weights(subset_of(K, A), {K: 10, A: 10})
    assert w[K] == w[A] == 0.5
    w = compute_weights(subset_of(K, A), {K: 10, A: 20})
    assert w[K] == pytest.approx(2 / 3) and w[A] == pytest.approx(1 / 3)
    assert compute_weights(subset_of(A), {A: 37.0})[A] == 1.0
    w = compute_weights(subset_of(K, A, M), {K: 0, A: 5, M: 0})
    assert (w[K], w[A], w[M]) == (0.5, 0.0, 0.5)
    w = compute_weights(subset_of(K, A, M), None, "simple")
    assert all(v == pytest.approx(1 / 3) for v in w.weights.values())


def test_weight_errors():
    with pytest.raises(InsufficientData):
        compute_weights(subset_of(K, A), {K: 10})
    with pytest.raises(InsufficientData):
        compute_weights(subset_of(K, A), {K: 10, A: math.nan})
    with pytest.raises(ValueError):
        compute_weights(subset_of(K), {K: 1}, "median")
    with pytest.raises(ValueError):
        FusionWeights({K: 0.6, A: 0.6})


@given(st.lists(st.floats(0.01, 60), min_size=6, max_size=6), st.integers(1, 63))
def test_weights_sum_to_one(eers, mask):
    s = enumerate_subsets(TaskKind.TAP)[mask - 1]
    w = compute_weights(s, dict(zip(task_modalities(TaskKind.TAP), eers)))
    assert abs(sum(w.weights.values()) - 1) <= 1e-12
    assert all(v >= 0 for v in w.weights.values())


def test_fuse_examples():
    s = subset_of(K, A)
    assert fuse_scores(s, FusionWeights({K: 0.5, A: 0.5}), {K: 0.2, A: 0.4}) == pytest.approx(0.3)
    assert fuse_scores(s, FusionWeights({K: 2 / 3, A: 1 / 3}), {K: 0.3, A: 0.6}) == pytest.approx(0.4)
    assert fuse_scores(subset_of(A), FusionWeights({A: 1.0}), {A: 0.77}) == 0.77
    assert fuse_scores(s, FusionWeights({K: 0.5, A: 0.5}), {K: 0.2}) is None


def test_linearity_copies():
    rng = np.random.default_rng(0)
    t = random_table(A, rng)
    tables = {m: t for m in BACKGROUND_MODALITIES}
    s = subset_of(*BACKGROUND_MODALITIES)
    fused, cov = fuse_tables(s, compute_weights(s, None, "simple"), tables)
    assert cov == 100.0
    np.testing.assert_allclose(sorted(fused.genuine_scores()), sorted(t.genuine_scores()), rtol=1e-15)
    assert compute_eer(fused.genuine_scores(), fused.impostor_scores())[0] == \
        compute_eer(t.genuine_scores(), t.impostor_scores())[0]


@given(st.integers(0, 1000), st.floats(0.1, 10))
def test_rescaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    tk, ta = random_table(K, rng), random_table(A, rng, shift=0.3)
    s = subset_of(K, A)
    w = FusionWeights({K: 0.25, A: 0.75})
    base, _ = fuse_tables(s, w, {K: tk, A: ta})
    scaled = ScoreTable(A, TaskKind.KEYSTROKE, [(a, k, v * c) for a, k, v in ta.genuine],
                        [(cl, a, k, v * c) for cl, a, k, v in ta.impostor])
    wa = 0.75 / c
    z = 0.25 + wa
    fused, _ = fuse_tables(s, FusionWeights({K: 0.25 / z, A: wa / z}), {K: tk, A: scaled})
    e0 = compute_eer(base.genuine_scores(), base.impostor_scores())[0]
    e1 = compute_eer(fused.genuine_scores(), fused.impostor_scores())[0]
    assert e1 == pytest.approx(e0, abs=1e-9)


def test_coverage_drops_missing_pairs():
    rng = np.random.default_rng(1)
    tk, ta = random_table(K, rng), random_table(A, rng)
    ta.impostor = ta.impostor[:-6]
    s = subset_of(K, A)
    fused, cov = fuse_tables(s, compute_weights(s, None, "simple"), {K: tk, A: ta})
    total = len(tk.genuine) + len(tk.impostor)
    assert len(fused.impostor) == len(tk.impostor) - 6
    assert cov == pytest.approx(100.0 * (total - 6) / total)


def test_rank_covers_all_subsets_and_prefers_signal():
    rng = np.random.default_rng(2)
    tables = {m: random_table(m, rng, shift=2.0) for m in task_modalities(TaskKind.KEYSTROKE)}
    tables[M] = random_table(M, rng, shift=0.0)
    val = {m: 10.0 for m in tables}
    val[M] = 50.0
    for mode in ("simple", "weighted"):
        res = rank_subsets(TaskKind.KEYSTROKE, tables, val, mode)
        assert len(res) == 63 and len({r.subset.mask for r in res}) == 63
        eers = [r.eer for r in res]
        assert eers == sorted(eers)
        best_single = best_result(res, max_size=1)
        assert res[0].eer <= best_single.eer
    assert len(rank_subsets(TaskKind.KEYSTROKE, tables, val, "simple", min_size=2)) == 57


def test_zscore_mode():
    rng = np.random.default_rng(3)
    tk, ta = random_table(K, rng), random_table(A, rng)
    s = subset_of(K, A)
    fused, _ = fuse_tables(s, compute_weights(s, None, "simple"), {K: tk, A: ta}, zscore=True)
    allv = np.concatenate([fused.genuine_scores(), fused.impostor_scores()])
    assert abs(allv.mean()) < 1e-12


def test_fusion_csv_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    tables = {m: random_table(m, rng) for m in (K, A, M)}
    res = rank_subsets(TaskKind.KEYSTROKE, tables, mode="simple")
    write_fusion_csv(tmp_path / "f.csv", res)
    rows = read_fusion_csv(tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == \
        "task,mode,subset_acronyms,eer_percent,coverage_percent"
    assert [(r[2], r[3]) for r in rows] == [(r.subset.acronyms, r.eer) for r in res]
    assert rows[0][0] == "keystroke" and rows[0][1] == "simple"
