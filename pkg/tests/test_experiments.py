import json
import time

import pytest

import distillseg.experiments as experiments
from distillseg.experiments import (
    BASELINE_LABEL,
    ConfigError,
    ResultRow,
    ResultTable,
    _run_unit,
    collect_seed_metrics,
    delta_pct,
    emit_defaults,
    emit_training_curves,
    ensure_teacher,
    load_datasets,
    parse_config,
    render_report,
    run_ablation,
    validate_config_dict,
)
from distillseg.metrics import one_way_anova
from distillseg.train import EpochRow, TrainingError, TrainingRecord


def tiny_config(tmp_path, **overrides) -> dict:
    cfg = {
        "name": "tiny",
        "output_dir": str(tmp_path / "runs"),
        "seeds": [0, 1],
        "plot_curves": False,
        "dataset": {"kind": "synthetic", "n_samples": 24, "image_size": 32, "seed": 5},
        "teacher": {"base_channels": 2, "epochs": 1, "batch_size": 16},
        "student": {"role": "student_s1", "base_channels": 4},
        "baseline": {"epochs": 1, "batch_size": 16},
        "plans": [
            {"name": "bn_pmd", "scales": ["bottleneck"], "pmd": True,
             "epochs": 1, "batch_size": 16, "embed_dim": 16},
        ],
    }
    cfg.update(overrides)
    return cfg


# ---------------------------------------------------------------------------
# Config validation and defaulting
# ---------------------------------------------------------------------------


def test_minimal_config_gets_defaults():
    cfg = validate_config_dict(
        {"name": "x", "dataset": {"kind": "synthetic"}, "plans": [{"name": "p"}]}
    )
    assert cfg.name == "x"
    assert cfg.seeds == [0]
    assert cfg.plot_curves is True
    assert str(cfg.output_dir) == str(experiments.Path("runs") / "x")
    assert cfg.dataset["n_samples"] == 200 and cfg.dataset["image_size"] == 64
    assert cfg.teacher["epochs"] == 200 and cfg.teacher["lr"] == 1e-4
    assert cfg.baseline["optimizer"] == "rmsprop" and cfg.baseline["lr"] == 1e-3
    plan = cfg.data["plans"][0]
    assert plan["scales"] == ["bottleneck"]
    assert plan["distill_loss"] == "contrastive"
    assert plan["pmd"] is False
    assert plan["weights"] == {"w_seg": 1.0, "w_enc": 0.1, "w_bn": 0.1, "w_dec": 0.1}
    assert plan["contrastive_temperature"] == 0.07
    assert plan["pmd_temperature"] == 4.0


def test_unknown_key_rejected_with_pointer():
    with pytest.raises(ConfigError, match="epohcs"):
        validate_config_dict(
            {"name": "x", "dataset": {}, "plans": [{"name": "p", "epohcs": 3}]}
        )
    with pytest.raises(ConfigError, match=r"^/plans/0"):
        validate_config_dict(
            {"name": "x", "dataset": {}, "plans": [{"name": "p", "epohcs": 3}]}
        )


def test_bad_enum_points_at_field():
    with pytest.raises(ConfigError, match=r"^/dataset/kind"):
        validate_config_dict({"name": "x", "dataset": {"kind": "hdf5"}, "plans": [{"name": "p"}]})


def test_png_requires_source_dir():
    with pytest.raises(ConfigError, match=r"^/dataset/source_dir"):
        validate_config_dict({"name": "x", "dataset": {"kind": "png"}, "plans": [{"name": "p"}]})


def test_duplicate_and_reserved_plan_names():
    with pytest.raises(ConfigError, match="duplicate plan name"):
        validate_config_dict(
            {"name": "x", "dataset": {}, "plans": [{"name": "a"}, {"name": "a"}]}
        )
    with pytest.raises(ConfigError, match="reserved"):
        validate_config_dict({"name": "x", "dataset": {}, "plans": [{"name": "baseline"}]})


def test_plan_without_scales_needs_pmd():
    with pytest.raises(ConfigError, match=r"^/plans/0"):
        validate_config_dict(
            {"name": "x", "dataset": {}, "plans": [{"name": "p", "scales": []}]}
        )
    cfg = validate_config_dict(
        {"name": "x", "dataset": {},
         "plans": [{"name": "p", "scales": [], "pmd": True}]}
    )
    assert cfg.data["plans"][0]["scales"] == []


def test_version_mismatch_rejected():
    with pytest.raises(ConfigError, match=r"^/version"):
        validate_config_dict(
            {"version": 2, "name": "x", "dataset": {}, "plans": [{"name": "p"}]}
        )


def test_parse_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="root"):
        parse_config(arr)


def test_emit_defaults_round_trips(tmp_path):
    cfg = validate_config_dict(tiny_config(tmp_path))
    defaults = emit_defaults(cfg)
    again = validate_config_dict(defaults)
    assert again.data == cfg.data
    # emit_defaults hands out a copy, not the live dict
    defaults["seeds"].append(99)
    assert cfg.seeds == [0, 1]


def test_build_plan_carries_seed_and_name(tmp_path):
    cfg = validate_config_dict(tiny_config(tmp_path))
    plan = cfg.build_plan("bn_pmd", teacher_ckpt="t.ckpt", seed=3)
    assert plan.name == "bn_pmd" and plan.seed == 3
    assert plan.scales == ("bottleneck",) and plan.pmd is True
    with pytest.raises(ConfigError, match="no plan named"):
        cfg.build_plan("missing", teacher_ckpt="t.ckpt", seed=0)


# ---------------------------------------------------------------------------
# Result table and deltas
# ---------------------------------------------------------------------------


def test_delta_pct_hand_case():
    assert delta_pct(0.629, 0.557) == pytest.approx(12.926, abs=1e-3)
    assert delta_pct(0.5, 0.625) == pytest.approx(-20.0, abs=1e-9)


def test_result_table_csv_round_trip(tmp_path):
    rows = [
        ResultRow(label="baseline", iou=0.5, dice=0.6, recall=0.7, precision=0.8,
                  params_m=0.05),
        ResultRow(label="kd", iou=0.55, dice=0.66, recall=0.7, precision=0.81,
                  params_m=0.05,
                  deltas={"iou": 10.0, "dice": 10.0, "recall": 0.0, "precision": 1.25}),
        ResultRow(label="broken", params_m=0.05, error="teacher exploded"),
    ]
    table = ResultTable(rows=rows)
    path = table.to_csv(tmp_path / "results.csv")
    header = path.read_text().splitlines()[0]
    assert header == ("method,iou,dice,recall,precision,params_m,delta_iou_pct,"
                      "delta_dice_pct,delta_recall_pct,delta_precision_pct,status")

    back = ResultTable.from_csv(path)
    assert [r.label for r in back.rows] == ["baseline", "kd", "broken"]
    assert back.rows[1].iou == pytest.approx(0.55)
    assert back.rows[1].deltas["iou"] == pytest.approx(10.0)
    assert back.rows[2].error == "teacher exploded"
    assert back.rows[2].iou is None


# ---------------------------------------------------------------------------
# Unit runner
# ---------------------------------------------------------------------------


def test_run_unit_publishes_atomically_and_resumes(tmp_path):
    final = tmp_path / "plan" / "0"
    calls = []

    def worker(work):
        calls.append(1)
        (work / "metrics.json").write_text(json.dumps({"iou": 0.5}))
        return {"iou": 0.5}

    out = _run_unit(final, worker)
    assert out == {"iou": 0.5}
    assert (final / "metrics.json").exists()
    assert not (final.parent / "0.tmp").exists()

    out2 = _run_unit(final, worker)
    assert out2 == {"iou": 0.5}
    assert calls == [1]  # second call reused the published unit


def test_run_unit_clears_stale_workdir(tmp_path):
    final = tmp_path / "plan" / "0"
    stale = final.parent / "0.tmp"
    stale.mkdir(parents=True)
    (stale / "leftover").write_text("junk")

    def worker(work):
        assert not (work / "leftover").exists()
        (work / "metrics.json").write_text("{}")
        return {}

    _run_unit(final, worker)
    assert (final / "metrics.json").exists()


def test_run_unit_failure_leaves_no_final_dir(tmp_path):
    final = tmp_path / "plan" / "0"

    def worker(work):
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        _run_unit(final, worker)
    assert not final.exists()

    def ok(work):
        (work / "metrics.json").write_text("{}")
        return {}

    _run_unit(final, ok)  # retry after the failure succeeds
    assert (final / "metrics.json").exists()


# ---------------------------------------------------------------------------
# Teacher reuse
# ---------------------------------------------------------------------------


def test_ensure_teacher_trains_once_then_reuses(tmp_path):
    cfg = validate_config_dict(tiny_config(tmp_path))
    train_set, val_set = load_datasets(cfg)
    path = ensure_teacher(cfg, train_set, val_set)
    assert path.exists()
    stamp = path.stat().st_mtime_ns
    time.sleep(0.01)
    again = ensure_teacher(cfg, train_set, val_set)
    assert again == path
    assert path.stat().st_mtime_ns == stamp


def test_ensure_teacher_rejects_missing_explicit_ckpt(tmp_path):
    cfg = validate_config_dict(
        tiny_config(tmp_path, teacher={"ckpt": str(tmp_path / "missing.ckpt")})
    )
    train_set, val_set = load_datasets(cfg)
    with pytest.raises(ConfigError, match="checkpoint not found"):
        ensure_teacher(cfg, train_set, val_set)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("grid")
    cfg = validate_config_dict(tiny_config(tmp))
    table = run_ablation(cfg)
    return cfg, table


def test_ablation_rows_and_layout(grid):
    cfg, table = grid
    assert [r.label for r in table.rows] == [BASELINE_LABEL, "bn_pmd"]
    for label in (BASELINE_LABEL, "bn_pmd"):
        for seed in cfg.seeds:
            unit = cfg.output_dir / label / str(seed)
            assert (unit / "metrics.json").exists()
            assert (unit / "per_image.csv").exists()
            assert (unit / "record.csv").exists()
            assert (unit / "student.ckpt").exists()
            assert not (unit / "record.png").exists()  # plot_curves off
    assert (cfg.output_dir / "results.csv").exists()
    assert (cfg.output_dir / "teacher" / "teacher.ckpt").exists()


def test_ablation_row_contents(grid):
    cfg, table = grid
    base, kd = table.rows
    for r in (base, kd):
        assert r.error is None
        assert 0.0 <= r.iou <= 1.0
        assert r.params_m == pytest.approx(0.004, abs=0.002)
    assert base.deltas == {}
    assert set(kd.deltas) == {"iou", "dice", "recall", "precision"}
    assert kd.deltas["iou"] == pytest.approx(delta_pct(kd.iou, base.iou), abs=1e-6)


def test_ablation_seed_average_matches_unit_files(grid):
    cfg, table = grid
    groups = collect_seed_metrics(cfg.output_dir, metric="iou")
    assert sorted(groups) == [BASELINE_LABEL, "bn_pmd"]
    for row in table.rows:
        vals = groups[row.label]
        assert len(vals) == len(cfg.seeds)
        assert row.iou == pytest.approx(sum(vals) / len(vals), abs=1e-9)


def test_ablation_resumes_to_identical_bytes(grid):
    cfg, _ = grid
    results = cfg.output_dir / "results.csv"
    first = results.read_bytes()
    unit_stamp = (cfg.output_dir / "bn_pmd" / "0" / "metrics.json").stat().st_mtime_ns
    run_ablation(cfg)
    assert results.read_bytes() == first
    assert (cfg.output_dir / "bn_pmd" / "0" / "metrics.json").stat().st_mtime_ns == unit_stamp


def test_ablation_failure_becomes_failed_row(tmp_path, monkeypatch):
    cfg = validate_config_dict(tiny_config(tmp_path))

    def explode(*a, **kw):
        raise TrainingError("distillation exploded\nwith details")

    monkeypatch.setattr(experiments, "distill", explode)
    table = run_ablation(cfg)
    base, kd = table.rows
    assert base.error is None
    assert kd.error == "distillation exploded"
    assert kd.iou is None and kd.deltas == {}
    back = ResultTable.from_csv(cfg.output_dir / "results.csv")
    assert back.rows[1].error == "distillation exploded"


# ---------------------------------------------------------------------------
# Curves and report
# ---------------------------------------------------------------------------


def make_record() -> TrainingRecord:
    rec = TrainingRecord(columns=["seg"])
    rec.rows.append(EpochRow(1, 1.0, float("nan"), {"seg": 1.0}, 0.1))
    rec.rows.append(EpochRow(2, 0.5, 0.6, {"seg": 0.5}, 0.1))
    return rec


def test_emit_curves_writes_csv_and_png(tmp_path):
    paths = emit_training_curves(make_record(), tmp_path, stem="abc", plot=True)
    assert [p.name for p in paths] == ["abc.csv", "abc.png"]
    assert all(p.exists() for p in paths)
    no_plot = emit_training_curves(make_record(), tmp_path, stem="xyz", plot=False)
    assert [p.name for p in no_plot] == ["xyz.csv"]


def test_emit_curves_rejects_empty_record(tmp_path):
    with pytest.raises(TrainingError, match="empty record"):
        emit_training_curves(TrainingRecord(columns=["seg"]), tmp_path)


def report_table() -> ResultTable:
    rows = [
        ResultRow(label="kd", iou=0.629, dice=0.75, recall=0.7, precision=0.8,
                  params_m=0.053,
                  deltas={"iou": 12.9, "dice": 5.0, "recall": 1.0, "precision": -2.0}),
        ResultRow(label="baseline", iou=0.557, dice=0.71, recall=0.69, precision=0.82,
                  params_m=0.053),
        ResultRow(label="broken", params_m=0.053, error="boom"),
    ]
    return ResultTable(rows=rows)


def test_report_orders_baseline_first_and_bolds_best(tmp_path):
    out = render_report([("exp", report_table())], tmp_path / "report.md")
    text = out.read_text()
    lines = text.splitlines()
    table_rows = [l for l in lines if l.startswith("| ") and "Method" not in l
                  and "---" not in l]
    assert table_rows[0].startswith("| baseline |")
    # the kd row wins on IoU, so every one of its cells is bold
    assert "| **kd** | **0.629 (+12.9%)**" in text
    assert "| broken | FAILED |" in text


def test_report_metric_cell_format(tmp_path):
    out = render_report([("exp", report_table())], tmp_path / "report.md")
    assert "0.557" in out.read_text()
    assert "(+12.9%)" in out.read_text()
    assert "(-2.0%)" in out.read_text()


def test_report_anova_block(tmp_path):
    anova = one_way_anova([(0.50, 0.52, 0.51), (0.60, 0.63, 0.61)])
    out = render_report(
        [("exp", report_table())], tmp_path / "report.md",
        anova=anova, anova_note="Groups: baseline vs pooled distilled.",
    )
    text = out.read_text()
    assert f"F = {anova.f_stat:.3f}" in text
    assert f"p = {anova.p_value:.3f}" in text
    assert "Groups: baseline vs pooled distilled." in text


def test_report_without_anova_states_why(tmp_path):
    out = render_report([("exp", report_table())], tmp_path / "report.md", anova=None)
    assert "Not enough runs" in out.read_text()


def test_report_embeds_curve_images_relatively(tmp_path):
    curves = tmp_path / "curves"
    curves.mkdir()
    img = curves / "baseline_0.png"
    img.write_bytes(b"\x89PNG\r\n\x1a\n")
    out = render_report([("exp", report_table())], tmp_path / "report.md",
                        curve_images=[img])
    assert "![baseline_0](curves/baseline_0.png)" in out.read_text()
