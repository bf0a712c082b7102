import json

import numpy as np
import pytest

from bmtc import evaluate
from bmtc.dataio import DatasetSpec, generate_synthetic_dataset
from bmtc.errors import ContractError, CoverageError
from bmtc.evaluate import MatrixReport, asr, black_box_requests, is_white_box, run_matrix, select_eval_set
from bmtc.models import ModelHandle, build_model, train_classifier
from bmtc.pool import build_pool, finetune_surrogate
from bmtc.tensors import AttackConfig


def test_asr_examples():
    assert asr([1, 0, 2, 2], [0, 0, 0, 0]) == 75.0
    assert asr([1, 2], [1, 2]) == 0.0
    assert asr([0, 0], [1, 1]) == 100.0
    with pytest.raises(ContractError):
        asr([], [])
    p, y = np.array([0, 1, 2, 1, 0]), np.array([0, 2, 2, 1, 1])
    perm = np.random.default_rng(0).permutation(5)
    assert asr(p[perm], y[perm]) == asr(p, y)


class Oracle:
    """Stand-in target: right on every clip except the listed ids."""

    def __init__(self, wrong=()):
        self.wrong = set(wrong)

    def predict(self, clips, k=None):
        return np.array([(c.label + 1) % k if c.clip_id in self.wrong else c.label for c in clips])


@pytest.fixture(scope="module")
def small():
    spec = DatasetSpec(k_categories=3, clips_per_category=8, t_frames=4, height=16, width=16, seed=1)
    ds = generate_synthetic_dataset(spec)
    pool = build_pool(ds, seed=1)
    zoo = {}
    for n, (mid, arch, width) in enumerate([("c3d-a", "c3d", 8), ("tp2d-a", "tp2d", 8), ("c3d-b", "c3d", 4),
                                             ("tp2d-b", "tp2d", 4), ("r21d-x", "r21d", 4)]):
        model = build_model(arch, 3, width, act="elu", seed=n)
        train_classifier(model, ds.train, epochs=4, lr=3e-3)
        zoo[mid] = model
    surrogates = []
    for mid in ("c3d-a", "tp2d-a"):
        h = ModelHandle(f"{mid}-ft", finetune_surrogate(zoo[mid], ds, pool, epochs=2), "surrogate")
        h.source_id = mid
        surrogates.append(h)
    targets = [ModelHandle(m, zoo[m], "target") for m in ("c3d-b", "tp2d-b")]
    aux = [ModelHandle("r21d-x", zoo["r21d-x"], "auxiliary")]
    return ds, pool, surrogates, targets, aux


def test_select_eval_set_filters_and_is_seeded(small):
    ds = small[0]
    clips = select_eval_set(ds.test, [Oracle()], 3, seed=0)
    assert sorted(c.label for c in clips) == [0, 1, 2]
    wrong = [c.clip_id for c in ds.test if c.label == 0][:-1]
    picked = select_eval_set(ds.test, [Oracle(), Oracle(wrong)], 3, seed=4)
    assert not {c.clip_id for c in picked} & set(wrong)
    assert [c.clip_id for c in select_eval_set(ds.test, [Oracle()], 3, seed=9)] == \
           [c.clip_id for c in select_eval_set(ds.test, [Oracle()], 3, seed=9)]
    all_wrong = [c.clip_id for c in ds.test if c.label == 2]
    with pytest.raises(CoverageError, match=r"\[2\]"):
        select_eval_set(ds.test, [Oracle(all_wrong)], 3)


def test_white_box_flag_follows_family(small):
    _, _, surrogates, targets, _ = small
    assert is_white_box(surrogates[0], targets[0])
    assert not is_white_box(surrogates[0], targets[1])
    assert is_white_box(surrogates[1], surrogates[1])


def test_matrix_structure_and_discipline(small, tmp_path):
    ds, pool, surrogates, targets, aux = small
    clips = ds.test[:4]
    cfg = AttackConfig(n_iter=2)
    report = run_matrix(surrogates, targets, list(evaluate.DEFAULT_ATTACKS), clips, pool, cfg, aux,
                        cache_dir=tmp_path / "cache")
    assert len(report.rows) == 12
    assert all(0 <= r["asr"] <= 100 and r["n_clips"] == 4 for r in report.rows)
    assert black_box_requests(targets) == 0
    csv_text = report.to_csv()
    assert csv_text.splitlines()[0] == ",".join(evaluate.CSV_FIELDS)
    summary = json.loads(report.to_json())
    assert len(summary["config_hash"]) == 16 and set(summary["attacks"]) == set(evaluate.DEFAULT_ATTACKS)
    written = report.write(tmp_path / "out", ("json",))
    assert [p.name for p in written] == ["summary.json"]
    assert not (tmp_path / "out" / "matrix.csv").exists()


def test_cache_skips_recomputation(small, tmp_path, monkeypatch):
    ds, pool, surrogates, targets, aux = small
    cfg = AttackConfig(n_iter=1)
    first = run_matrix(surrogates[:1], targets, ["pgd_baseline"], ds.test[:3], pool, cfg, aux, cache_dir=tmp_path)

    def boom(*args, **kwargs):
        raise AssertionError("attack recomputed despite cache")

    monkeypatch.setitem(evaluate.ATTACKS, "pgd_baseline", boom)
    second = run_matrix(surrogates[:1], targets, ["pgd_baseline"], ds.test[:3], pool, cfg, aux, cache_dir=tmp_path)
    assert [r["asr"] for r in first.rows] == [r["asr"] for r in second.rows]


class Tamper:
    """Stand-in target: correct on untouched clips, wrong once any pixel moves by more than 1e-6."""

    model_id, arch, grad_requests = "tamper", "stub", 0

    def __init__(self, clips):
        self.clean = {c.clip_id: c.frames for c in clips}

    def predict(self, clips, k=None):
        moved = [np.abs(c.frames - self.clean[c.clip_id]).max() > 1e-6 for c in clips]
        return np.array([(c.label + 1) % k if m else c.label for c, m in zip(clips, moved)])


def test_zero_budget_gives_zero_asr(small):
    ds, pool, surrogates, targets, aux = small
    clips = ds.test[:4]
    stub = Tamper(clips)
    tiny = run_matrix(surrogates[:1], [stub], ["pgd_baseline"], clips, pool,
                      AttackConfig(epsilon=1e-9, eta=1e-9, n_iter=2), aux)
    assert [r["asr"] for r in tiny.rows] == [0.0]
    full = run_matrix(surrogates[:1], [stub], ["pgd_baseline"], clips, pool, AttackConfig(n_iter=2), aux)
    assert [r["asr"] for r in full.rows] == [100.0]


def test_failed_clip_is_excluded_and_counted(small, monkeypatch):
    ds, pool, surrogates, targets, aux = small
    real = evaluate.ATTACKS["pgd_baseline"]
    bad = ds.test[1].clip_id

    def flaky(clips, surrogate, ctx):
        if any(c.clip_id == bad for c in clips):
            from bmtc.errors import AttackAborted
            raise AttackAborted("nan", [])
        return real(clips, surrogate, ctx)

    monkeypatch.setitem(evaluate.ATTACKS, "flaky", flaky)
    report = run_matrix(surrogates[:1], targets, ["flaky"], ds.test[:3], pool, AttackConfig(n_iter=1), aux)
    assert report.warnings == 1
    assert all(r["n_clips"] == 2 for r in report.rows)


def test_matrix_rejects_bad_input(small):
    ds, pool, surrogates, targets, aux = small
    with pytest.raises(ContractError):
        run_matrix(surrogates, targets, ["nope"], ds.test, pool, AttackConfig(), aux)
    with pytest.raises(ContractError):
        run_matrix(surrogates, [], ["bmtc"], ds.test, pool, AttackConfig(), aux)


def test_parallel_jobs_match_serial(small):
    ds, pool, surrogates, targets, aux = small
    cfg = AttackConfig(n_iter=1)
    a = run_matrix(surrogates, targets, ["pgd_baseline", "bmtc"], ds.test[:3], pool, cfg, aux, jobs=1)
    b = run_matrix(surrogates, targets, ["pgd_baseline", "bmtc"], ds.test[:3], pool, cfg, aux, jobs=3)
    assert a.rows == b.rows


def test_report_means():
    rows = [dict(surrogate_id="s", target_id="t1", attack="a", asr=40.0, n_clips=5, seed=0, white_box_flag=True),
            dict(surrogate_id="s", target_id="t2", attack="a", asr=20.0, n_clips=5, seed=0, white_box_flag=False)]
    means = MatrixReport(rows, {}).attack_means()["a"]
    assert means["mean_grid_asr"] == 30.0 and means["mean_transfer_asr"] == 20.0
    assert means["mean_white_box_asr"] == 40.0
