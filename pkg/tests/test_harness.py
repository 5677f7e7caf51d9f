import json

import pytest

from datagen.dataset import DatasetManifest
from harness import (
    EvalReport,
    ExperimentPlan,
    GainRow,
    ReportRow,
    OrderingError,
    SettingError,
    check_orderings,
    comparison_markdown,
    emit_report,
    evaluate_checkpoint,
    fmt_gain,
    gain_pct,
    gains_markdown,
    height_orderings,
    median_rows,
    model_label,
    parse_setting,
    plot_summary,
    run_hparam_search,
    run_model_bench,
    run_transfer_comparison,
    sda_orderings,
    stratified_eval,
    stratified_report,
    to_csv,
    unique_pairs,
)
from harness.experiments import best_row, compute_gains, mark_top3, pick_winner, strata_f1
from metrics import ConfusionCounts, TileConfusion
from models import build_model, save_checkpoint

from tests.conftest import TILE, tiny_spec

TINY = {"family": "inverted_residual", "width_multiplier": 0.5, "decoder_channels": [32, 24, 16, 16, 8]}
QUICK = {"epochs": 1, "batch_size": 4}


def row(method="baseline", network="student_mbconv", setting="S-S", seed=0, **kw):
    return ReportRow(network=network, setting=setting, method=method, seed=seed, **kw)


# ---- Plans ------------------------------------------------------------------


def test_parse_setting():
    assert parse_setting("T-Ev") == ("T", "Ev")
    with pytest.raises(SettingError):
        parse_setting("Ev-S")
    with pytest.raises(ValueError):
        parse_setting("S-T")
    with pytest.raises(ValueError):
        parse_setting("SS")


def test_plan_validation():
    with pytest.raises(SettingError):
        ExperimentPlan(settings=("Ev-Ev",))
    with pytest.raises(ValueError):
        ExperimentPlan(methods=("baseline", "pruning"))
    with pytest.raises(ValueError):
        ExperimentPlan(seeds=())
    with pytest.raises(ValueError):
        ExperimentPlan(tile_size=100)
    plan = ExperimentPlan.from_dict({"seeds": [1, 2], "unknown_key": True})
    assert plan.to_dict()["seeds"] == [1, 2]


def test_dataset_roots(tmp_path):
    plan = ExperimentPlan(datasets={"T": "T", "S": str(tmp_path / "s_abs"), "Ev": "Ev"})
    assert plan.dataset_root("T", tmp_path / "data") == tmp_path / "data" / "T"
    assert plan.dataset_root("S", tmp_path / "data") == tmp_path / "s_abs"
    assert plan.setting_roots("S-Ev", tmp_path) == (tmp_path / "s_abs", tmp_path / "Ev")
    with pytest.raises(ValueError):
        ExperimentPlan(datasets={"S": "S"}).dataset_root("T")


def test_labels_and_pairs():
    assert model_label("student_ir") == "student_ir"
    assert model_label({"name": "tiny", **TINY}) == "tiny"
    assert model_label({"family": "mbconv", "width_multiplier": 0.5}) == "mbconv_w0.5"
    assert unique_pairs(["a", "b", "c"]) == ((0, 1), (0, 2), (1, 2))
    assert unique_pairs(["a"]) == ()


# ---- Selection and ranking --------------------------------------------------


def test_pick_winner_tie_breaks():
    rows = [
        row(optimizer="adam", f1=0.8, loss=0.3, best_epoch=9),
        row(optimizer="sgd", f1=0.8, loss=0.2, best_epoch=12),
        row(optimizer="nadam", f1=0.8, loss=0.2, best_epoch=4),
        row(optimizer="rmsprop", f1=0.7, loss=0.1, best_epoch=1),
    ]
    assert pick_winner(rows).optimizer == "nadam"


def test_mark_top3_directions():
    rows = [
        row(network=n, params_M=p, loss=l, f1=f, iou=f, precision=f, recall=f, ms_per_iter=ms)
        for n, p, l, f, ms in [
            ("a", 4.0, 0.40, 0.70, 30.0),
            ("b", 1.0, 0.20, 0.80, 10.0),
            ("c", 2.0, 0.30, 0.90, 20.0),
            ("d", 3.0, 0.10, 0.60, 40.0),
        ]
    ]
    mark_top3(rows)
    ranks = {r.network: r.ranks for r in rows}
    assert ranks["b"]["params_M"] == 1 and ranks["c"]["params_M"] == 2
    assert "params_M" not in ranks["a"]
    assert ranks["d"]["loss"] == 1
    assert ranks["c"]["f1"] == 1 and ranks["a"]["f1"] == 3 and "f1" not in ranks["d"]
    assert ranks["b"]["ms_per_iter"] == 1


def test_best_row_prefers_fewer_params_on_ties():
    rows = [row(network="big", f1=0.8, iou=0.7, params_M=9.0), row(network="small", f1=0.8, iou=0.7, params_M=1.0)]
    assert best_row(rows).network == "small"


# ---- Gains and markdown -----------------------------------------------------


def test_fmt_gain():
    assert fmt_gain(0.827, 4.2) == "0.827 (+4.2%)"
    assert fmt_gain(0.4, -3.04) == "0.400 (-3.0%)"
    assert fmt_gain(0.5, None) == "0.500 (n/a)"
    assert gain_pct(0.0, 0.5) is None
    assert gain_pct(0.5, 0.55) == pytest.approx(10.0)


def _seed_rows(method, values, network="net", setting="S-Ev"):
    return [
        row(method, network, setting, seed=s, precision=v, recall=v, iou=v, f1=v) for s, v in enumerate(values)
    ]


def test_gains_use_seed_medians():
    rows = _seed_rows("baseline", [0.6, 0.7, 0.8]) + _seed_rows("sda", [0.77, 0.70, 0.80])
    gains = compute_gains(rows, ["S-S", "S-Ev"])
    assert [g.metric for g in gains] == ["precision", "recall", "iou", "f1"]
    assert all(g.baseline == pytest.approx(0.7) and g.sda == pytest.approx(0.77) for g in gains)
    assert gains[0].gain_pct == pytest.approx(10.0)

    report = EvalReport("Comparison", "compare", rows=rows, gains=gains)
    assert gains_markdown(report) == (
        "| Network | Setting | P | R | IoU | F1 |\n"
        "|---|---|---|---|---|---|\n"
        "| net | S-Ev | 0.770 (+10.0%) | 0.770 (+10.0%) | 0.770 (+10.0%) | 0.770 (+10.0%) |\n"
    )


def test_gains_need_both_methods():
    rows = _seed_rows("sda", [0.5])
    assert compute_gains(rows, ["S-Ev"]) == []


def test_median_rows_collapse_seeds():
    rows = _seed_rows("baseline", [0.6, 0.9, 0.7])
    for r, ep in zip(rows, (3, 8, 5)):
        r.best_epoch = ep
    (m,) = median_rows(rows)
    assert m.seed is None
    assert m.f1 == pytest.approx(0.7)
    assert m.best_epoch == 5


# ---- Orderings ----------------------------------------------------------------


def _ordering_report(sda_f1s=(0.72, 0.75, 0.60), low=0.8, sky=0.5):
    rows = []
    for seed, sda in enumerate(sda_f1s):
        rows += [
            row("baseline", "student_mbconv", "S-Ev", seed, f1=0.70, strata_f1={"low": low, "sky": sky}),
            row("sda", "student_mbconv", "S-Ev", seed, f1=sda, strata_f1={"low": low, "sky": sky}),
            row("pretrain", "student_mbconv", "T-Ev", seed, f1=0.40, strata_f1={"low": low, "sky": sky}),
            row("baseline", "student_mbconv", "S-S", seed, f1=0.90),
        ]
    return EvalReport("Comparison", "compare", rows=rows)


def test_orderings_use_seed_medians():
    report = _ordering_report()
    sda = sda_orderings(report)
    assert [(c.name, c.left, c.right) for c in sda] == [
        ("sda_over_baseline", pytest.approx(0.72), pytest.approx(0.70)),
        ("sda_over_pretrain", pytest.approx(0.72), pytest.approx(0.40)),
    ]
    assert all(c.passed for c in sda)
    heights = height_orderings(report)
    assert {c.setting for c in heights} == {"S-Ev", "T-Ev"}
    assert len(check_orderings(report, networks=("student_mbconv",))) == 5


def test_orderings_fail_below_margin_or_on_sky_ties():
    with pytest.raises(OrderingError, match="sda_over_baseline"):
        check_orderings(_ordering_report(sda_f1s=(0.705, 0.705, 0.9)))
    with pytest.raises(OrderingError, match="low_over_sky"):
        check_orderings(_ordering_report(low=0.5, sky=0.5))
    with pytest.raises(OrderingError, match="teacher_vgg"):
        check_orderings(_ordering_report(), networks=("teacher_vgg",))
    with pytest.raises(ValueError, match="compare report"):
        check_orderings(EvalReport("Bench", "bench"))


def test_strata_f1_pools_tiles_per_stratum():
    tiles = [
        TileConfusion("a", ConfusionCounts(tp=3, fp=1, fn=0, tn=4), "sky", 30),
        TileConfusion("b", ConfusionCounts(tp=4, fp=0, fn=0, tn=4), "low", 30),
        TileConfusion("c", ConfusionCounts(tp=0, fp=0, fn=2, tn=6), "sky", 60),
    ]
    assert strata_f1(tiles) == {"low": 1.0, "sky": pytest.approx(6 / 9)}
    assert strata_f1([TileConfusion("d", ConfusionCounts(tn=8))]) is None
    (m,) = median_rows(_ordering_report().rows[:1])
    assert m.strata_f1 == {"low": 0.8, "sky": 0.5}
    assert "strata_f1" not in to_csv(EvalReport("C", "compare", rows=[m])).splitlines()[0]


def test_comparison_markdown_golden():
    report = EvalReport(
        "Comparison",
        "compare",
        rows=[
            row("kd", params_M=1.234, loss=0.3, precision=0.8, recall=0.7, iou=0.6, f1=0.75, ms_per_iter=12.34,
                best_epoch=7, par_red_pct=85.02),
            row("baseline", params_M=1.234, loss=0.35, precision=0.7, recall=0.6, iou=0.5, f1=0.646,
                ms_per_iter=11.0, best_epoch=5),
            row("baseline", setting="S-Ev", params_M=1.234, loss=0.4, precision=0.9, recall=0.5, iou=0.45,
                f1=0.643, ms_per_iter=11.0, best_epoch=6),
            row("kd", setting="S-Ev", params_M=1.234, loss=0.32, precision=0.85, recall=0.6, iou=0.5, f1=0.7,
                ms_per_iter=12.34, best_epoch=8, par_red_pct=85.02),
        ],
    )
    # maxima are bolded within each setting
    assert comparison_markdown(report) == (
        "| Method | Network | Setting | Par.(M) | Loss | P | R | IoU | F1 | ms/it | Ep | Par. Red.(%) |\n"
        "|---|---|---|---|---|---|---|---|---|---|---|---|\n"
        "| baseline | student_mbconv | S-S | 1.234 | 0.350 | 0.700 | 0.600 | 0.500 | 0.646 | 11.0 | 5 | - |\n"
        "| baseline | student_mbconv | S-Ev | 1.234 | 0.400 | **0.900** | 0.500 | 0.450 | 0.643 | 11.0 | 6 | - |\n"
        "| kd | student_mbconv | S-S | 1.234 | 0.300 | **0.800** | **0.700** | **0.600** | **0.750** | 12.3 | 7 | 85.0 |\n"
        "| kd | student_mbconv | S-Ev | 1.234 | 0.320 | 0.850 | **0.600** | **0.500** | **0.700** | 12.3 | 8 | 85.0 |\n"
    )


def test_bench_markdown_marks_best_and_ranks():
    rows = [row("bench", "a", f1=0.9, iou=0.8), row("bench", "b", f1=0.5, iou=0.4)]
    mark_top3(rows, ("f1",))
    from harness import to_markdown

    text = to_markdown(EvalReport("Bench", "bench", rows=rows))
    assert "**0.900**<sup>1</sup>" in text
    assert "| 0.500<sup>2</sup> |" in text


# ---- Emit -------------------------------------------------------------------


def _small_report():
    r = row(precision=0.5, recall=0.25, iou=0.2, f1=1 / 3, counts={"tp": 1, "fp": 1, "fn": 3, "tn": 11})
    r.ranks = {"iou": 2, "f1": 1}
    return EvalReport("Eval", "eval", rows=[r], provenance={"checkpoint": "x.pt"})


def test_csv_layout():
    text = to_csv(_small_report())
    lines = text.split("\r\n")
    assert lines[0].startswith("network,setting,method,seed,params_M")
    assert lines[0].endswith(",tp,fp,fn,tn,ranks")
    assert lines[1].startswith("student_mbconv,S-S,baseline,0,,")
    assert lines[1].endswith(",1,1,3,11,f1=1;iou=2")
    assert lines[-1] == ""


def test_emit_is_deterministic(tmp_path):
    report = _small_report()
    for fmt in ("md", "csv", "json"):
        a = emit_report(report, tmp_path / f"a.{fmt}", fmt)
        b = emit_report(report, tmp_path / f"b.{fmt}", fmt)
        assert a.read_bytes() == b.read_bytes()
    assert EvalReport.load(tmp_path / "a.json") == report
    with pytest.raises(ValueError):
        emit_report(report, tmp_path / "a.html", "html")


def test_plots_written(tmp_path):
    paths = plot_summary(_small_report(), tmp_path)
    assert [p.name for p in paths] == ["summary_bar.png", "summary_spider.png"]
    assert all(p.stat().st_size > 0 for p in paths)
    assert plot_summary(EvalReport("Empty", "eval"), tmp_path / "empty") == []


# ---- Stratified evaluation --------------------------------------------------


def _tiles():
    return [
        TileConfusion("t0", ConfusionCounts(5, 1, 2, 56), "low", 30),
        TileConfusion("t1", ConfusionCounts(3, 0, 1, 60), "low", 60),
        TileConfusion("t2", ConfusionCounts(1, 4, 6, 53), "high", 30),
        TileConfusion("t3", ConfusionCounts(0, 2, 7, 55), "high", 30),
        TileConfusion("t4", ConfusionCounts(2, 2, 2, 58), None, 60),
    ]


def test_stratified_rows_are_additive():
    report = stratified_report(_tiles(), "net")
    rows = {(r.stratum, r.gsd_cm): r for r in report.rows}
    assert ("mid", None) not in rows and ("sky", None) not in rows
    assert rows[("unknown", None)].tiles == 1

    total = rows[("all", None)]
    assert total.tiles == 5
    assert total.counts == {"tp": 11, "fp": 9, "fn": 18, "tn": 282}
    for stratum in ("low", "high", "unknown"):
        cells = [r for (s, g), r in rows.items() if s == stratum and g is not None]
        marginal = rows[(stratum, None)]
        assert marginal.counts["tp"] == sum(c.counts["tp"] for c in cells)
        assert marginal.tiles == sum(c.tiles for c in cells)
    assert rows[("all", 30)].tiles == 3
    assert rows[("high", 30)].iou == pytest.approx(1 / 20)
    assert [r.stratum for r in report.rows][:3] == ["low", "low", "low"]


def test_stratified_eval_on_ev(data_root, tmp_path):
    model = build_model(tiny_spec(), seed=0)
    ckpt = save_checkpoint(tmp_path / "net" / "best.pt", model, seed=0)
    report = stratified_eval(ckpt, data_root / "Ev", out_dir=tmp_path / "out", device="cpu")
    manifest = DatasetManifest.load(data_root / "Ev")
    total = next(r for r in report.rows if r.stratum == "all" and r.gsd_cm is None)
    assert total.tiles == len(manifest.split_tiles("val"))
    assert sum(total.counts.values()) == total.tiles * TILE * TILE
    assert report.rows[0].network == "net"
    assert report.provenance["checkpoint_sha256"]
    assert (tmp_path / "out" / "confusion.csv").exists()


def test_evaluate_checkpoint_single_row(data_root, tmp_path):
    ckpt = save_checkpoint(tmp_path / "net" / "best.pt", build_model(tiny_spec(), seed=0), seed=0)
    report = evaluate_checkpoint(ckpt, data_root / "S", device="cpu")
    (r,) = report.rows
    assert r.setting == "S:val"
    assert r.tiles == 4
    assert r.record_hash is None


# ---- Drivers ----------------------------------------------------------------


def test_hparam_search_reuses_total_row(data_root, tmp_path):
    plan = ExperimentPlan(
        settings=("S-S",), model={"name": "tiny", **TINY}, optimizers=("adam", "sgd"),
        losses=("Dice", "Total loss"), tile_size=TILE, train=QUICK,
    )
    report = run_hparam_search(plan, tmp_path / "search", data_root)
    assert [(r.optimizer, r.loss_name) for r in report.rows[:2]] == [("adam", "total"), ("sgd", "total")]
    winner = report.provenance["winner_optimizer"]
    assert [r.optimizer for r in report.rows[2:]] == [winner, winner]
    assert [r.loss_name for r in report.rows[2:]] == ["dice", "total"]
    reused = report.rows[3]
    assert reused.record_hash == report.provenance["reused_row"]["record_hash"]
    assert (tmp_path / "search" / "hparam" / "adam" / "total" / "record.json").exists()


def test_model_bench_ranks_roster(data_root, tmp_path):
    plan = ExperimentPlan(
        settings=("S-S",), tile_size=TILE, train=QUICK,
        roster=({"name": "ir", **TINY}, {"name": "mb", **TINY, "family": "mbconv"}),
    )
    report = run_model_bench(plan, tmp_path / "bench", data_root)
    assert [r.network for r in report.rows] == ["ir", "mb"]
    assert all(r.ranks["f1"] in (1, 2) for r in report.rows)
    assert report.provenance["best"] in ("ir", "mb")


@pytest.mark.slow
def test_transfer_comparison_blocks(data_root, tmp_path):
    plan = ExperimentPlan(
        settings=("S-S", "S-Ev"),
        teacher={"name": "vgg", **TINY, "family": "vgg_like"},
        students=({"name": "ir", **TINY}, {"name": "mb", **TINY, "family": "mbconv"}),
        tile_size=TILE, train=QUICK, teacher_train=QUICK,
        dml={"weights": [1.0, 0.5, 0.5], "mode": "alternating"},
    )
    report = run_transfer_comparison(plan, tmp_path / "cmp", data_root)
    by_method = {}
    for r in report.rows:
        by_method.setdefault(r.method, []).append(r)
    assert len(by_method["pretrain"]) == 3 * 3
    assert {r.setting for r in by_method["pretrain"]} == {"T-T", "T-S", "T-Ev"}
    assert len(by_method["baseline"]) == 3 * 2
    assert len(by_method["sda"]) == 3 * 2
    assert len(by_method["kd"]) == 2 * 2
    assert {r.network for r in by_method["dml"]} == {"ir (+mb)", "mb (+ir)"}
    assert all(r.par_red_pct is None for r in by_method["baseline"])
    assert all(r.par_red_pct is not None for r in by_method["kd"])
    assert len(report.gains) == 3 * 2 * 4
    assert "## Knowledge transfer comparison" in emit_report(report, tmp_path / "r.md").read_text()
    assert json.loads((tmp_path / "cmp" / "seed0" / "ir" / "kd" / "record.json").read_text())["kind"] == "kd"
    ev_rows = [r for r in report.rows if r.setting.endswith("-Ev")]
    assert ev_rows and all(r.strata_f1 for r in ev_rows)
    assert all(set(r.strata_f1) == {"low", "mid", "high", "sky"} for r in ev_rows)
