import json
import math

import pytest
import torch

from losses import DistillConfig
from models import build_model, count_params, load_checkpoint, roster_spec, save_checkpoint
from models.roster import DEFAULT_ROSTER
from state import RunRecord
from trainers import (
    DataBundle,
    DivergenceError,
    DMLWeights,
    TrainConfig,
    adapt_model,
    dml_train,
    evaluate,
    kd_distill,
    par_reduction_pct,
    sda_adapt,
    train,
)
from trainers.loop import fit, new_record

from tests.conftest import TILE, tiny_spec


def quick_cfg(**kw) -> TrainConfig:
    values = dict(epochs=2, batch_size=4, max_steps=None, seed=0, device="cpu", timing_warmup=0)
    values.update(kw)
    return TrainConfig(**values)


@pytest.fixture
def s_bundle(data_root):
    return DataBundle.from_dirs(data_root / "S")


@pytest.fixture
def teacher_ckpt(tmp_path):
    teacher = build_model(tiny_spec("vgg_like", width_multiplier=1.0), seed=11)
    return save_checkpoint(tmp_path / "teacher" / "best.pt", teacher, seed=11, config_hash="t")


def _same_weights(a, b) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# ---- Config -----------------------------------------------------------------


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.optimizer, cfg.lr, cfg.loss.name) == ("rmsprop", 1e-4, "dice")
    assert TrainConfig.for_role("teacher").epochs == 50
    assert TrainConfig.for_role("student", lr=1e-3).epochs == 200
    assert TrainConfig.from_dict({"loss": "BCE + Dice", "bogus": 1}).loss.name == "bce_dice"
    assert "device" not in cfg.to_dict()
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(plateau={"metric": "val_loss"})


def test_dml_weights_parsing():
    assert DMLWeights.from_value([1, 0.5, 0]) == DMLWeights(1.0, 0.5, 0.0)
    assert DMLWeights.from_value({"mut": 0.0}).mut == 0.0
    with pytest.raises(ValueError):
        DMLWeights(sup=-1)
    with pytest.raises(ValueError):
        DMLWeights.from_value("1,2,3")


def test_par_reduction():
    assert par_reduction_pct(20, 100) == pytest.approx(80.0)


# ---- Supervised training ----------------------------------------------------


def test_evaluate_reports_every_tile(s_bundle):
    model = build_model(tiny_spec())
    ev = evaluate(model, s_bundle.val, device="cpu")
    assert len(ev.tiles) == len(s_bundle.val)
    assert ev.counts.total == len(s_bundle.val) * TILE * TILE
    assert all(t.stratum is not None for t in ev.tiles)
    assert math.isfinite(ev.loss)


def test_train_writes_record_and_checkpoint(s_bundle, tmp_path):
    model = build_model(tiny_spec(), seed=1)
    record = train(model, s_bundle, quick_cfg(), name="baseline", run_dir=tmp_path / "run")

    assert [e.epoch for e in record.epochs] == [0, 1, 2]
    assert record.epochs[0].train_loss is None
    assert record.status == "ok"
    assert record.optimizer["name"] == "rmsprop"
    assert record.params == count_params(model)

    on_disk = json.loads((tmp_path / "run" / "record.json").read_text())
    assert on_disk["record_hash"] == record.record_hash()
    assert RunRecord.load(tmp_path / "run" / "record.json") == record

    loaded, meta = load_checkpoint(tmp_path / "run" / "best.pt", "cpu")
    assert meta["extra"]["epoch"] == record.best_epoch
    assert _same_weights(loaded, model)


def test_reloaded_best_checkpoint_reproduces_best_scores(s_bundle, tmp_path):
    cfg = quick_cfg(epochs=3)
    record = train(build_model(tiny_spec(), seed=1), s_bundle, cfg, run_dir=tmp_path / "run")
    loaded, _ = load_checkpoint(tmp_path / "run" / "best.pt", "cpu")
    ev = evaluate(loaded, s_bundle.val, cfg.loss, cfg.batch_size, cfg.threshold, "cpu")
    assert ev.scores.iou == record.best.iou
    assert ev.scores.f1 == record.best.f1
    assert ev.loss == record.best.val_loss


def test_training_is_reproducible(s_bundle):
    records = []
    for _ in range(2):
        model = build_model(tiny_spec(), seed=2)
        records.append(train(model, s_bundle, quick_cfg(seed=4)))
    assert records[0].record_hash() == records[1].record_hash()


def test_max_steps_caps_updates(s_bundle):
    model = build_model(tiny_spec(), seed=1)
    record = train(model, s_bundle, quick_cfg(epochs=5, max_steps=1))
    # the second epoch has no steps left and training stops there
    assert [e.epoch for e in record.epochs] == [0, 1]


def test_training_needs_a_train_split(data_root):
    bundle = DataBundle(train=None, val=DataBundle.from_dirs(data_root / "S").val)
    with pytest.raises(ValueError):
        train(build_model(tiny_spec()), bundle, quick_cfg())


def test_non_finite_loss_raises_divergence(s_bundle, tmp_path):
    model = build_model(tiny_spec())
    cfg = quick_cfg()
    record = new_record("nan", "train", model, cfg, s_bundle)

    def loss_fn(images, masks):
        return model(images).mean() * float("nan")

    with pytest.raises(DivergenceError) as info:
        fit(model, s_bundle, cfg, record, loss_fn, run_dir=tmp_path / "nan")
    assert info.value.record.status == "diverged"
    assert info.value.record.provenance["divergence"]["epoch"] == 1
    assert RunRecord.load(tmp_path / "nan" / "record.json").status == "diverged"


# ---- Transfer ----------------------------------------------------------------


def test_sda_with_zero_epochs_keeps_weights(s_bundle, data_root, tmp_path):
    source = build_model(tiny_spec(), seed=5)
    ckpt = save_checkpoint(tmp_path / "src.pt", source, seed=5)
    adapted, record = adapt_model(ckpt, DataBundle(train=None, val=s_bundle.val), quick_cfg(epochs=0))
    assert _same_weights(adapted, source)
    assert len(record.epochs) == 1
    assert record.kind == "sda"
    assert record.provenance["source"]["path"] == str(ckpt)


def test_sda_adapt_returns_the_adapted_record(s_bundle, tmp_path):
    ckpt = save_checkpoint(tmp_path / "src.pt", build_model(tiny_spec(), seed=5), seed=5)
    data = DataBundle(train=None, val=s_bundle.val)
    record = sda_adapt(ckpt, data, quick_cfg(epochs=0))
    _, expected = adapt_model(ckpt, data, quick_cfg(epochs=0))
    assert isinstance(record, RunRecord)
    assert record.record_hash() == expected.record_hash()


def test_sda_on_the_source_data_is_resumed_training(s_bundle, tmp_path):
    train(build_model(tiny_spec(), seed=5), s_bundle, quick_cfg(epochs=1), run_dir=tmp_path / "src")
    ckpt = tmp_path / "src" / "best.pt"

    adapted, r_sda = adapt_model(ckpt, s_bundle, quick_cfg())
    resumed, _ = load_checkpoint(ckpt, "cpu")
    r_train = train(resumed, s_bundle, quick_cfg())

    def trajectory(record):
        return [(e.train_loss, e.val_loss, e.iou, e.lr) for e in record.epochs]

    assert trajectory(r_sda) == trajectory(r_train)
    assert r_sda.best_epoch == r_train.best_epoch
    assert _same_weights(adapted, resumed)


def test_sda_keeps_the_architecture(s_bundle, tmp_path):
    ckpt = save_checkpoint(tmp_path / "src.pt", build_model(tiny_spec(), seed=5), seed=5)
    with pytest.raises(ValueError, match="architecture"):
        adapt_model(ckpt, s_bundle, quick_cfg(epochs=0), expected_spec=tiny_spec("mbconv"))


def test_sda_unfreezes_and_trains(s_bundle, tmp_path):
    source = build_model(tiny_spec(), seed=5)
    ckpt = save_checkpoint(tmp_path / "src.pt", source, seed=5)
    adapted, record = adapt_model(ckpt, s_bundle, quick_cfg(epochs=1), run_dir=tmp_path / "sda")
    assert count_params(adapted) == count_params(source)
    assert (tmp_path / "sda" / "record.json").exists()
    assert len(record.epochs) == 2


def test_kd_with_alpha_one_is_plain_training(s_bundle, teacher_ckpt):
    cfg = quick_cfg()
    baseline = build_model(tiny_spec(), seed=6)
    distilled = build_model(tiny_spec(), seed=6)
    r_train = train(baseline, s_bundle, cfg)
    r_kd = kd_distill(teacher_ckpt, distilled, s_bundle, cfg, DistillConfig(alpha=1.0))
    assert _same_weights(baseline, distilled)
    assert [e.iou for e in r_train.epochs] == [e.iou for e in r_kd.epochs]
    assert "initial_distillation" not in r_kd.provenance


def test_kd_records_parameter_reduction(s_bundle, teacher_ckpt, tmp_path):
    student = build_model(tiny_spec(), seed=6)
    record = kd_distill(teacher_ckpt, student, s_bundle, quick_cfg(epochs=1), DistillConfig(alpha=0.5),
                        run_dir=tmp_path / "kd")
    teacher, _ = load_checkpoint(teacher_ckpt, "cpu")
    assert record.provenance["par_red_pct"] == pytest.approx(
        100.0 * (1 - count_params(student) / count_params(teacher))
    )
    assert record.provenance["par_red_pct"] > 0
    assert math.isfinite(record.provenance["initial_distillation"])
    assert record.provenance["teacher"]["sha256"]


def test_kd_can_start_from_baseline(s_bundle, teacher_ckpt, tmp_path):
    base = build_model(tiny_spec(), seed=8)
    init = save_checkpoint(tmp_path / "base.pt", base, seed=8)
    student = build_model(tiny_spec(), seed=9)
    record = kd_distill(teacher_ckpt, student, s_bundle, quick_cfg(epochs=0), init_checkpoint=init)
    assert _same_weights(student, base)
    assert record.provenance["init_checkpoint"] == str(init)


def test_dml_without_coupling_matches_independent_training(s_bundle):
    cfg = quick_cfg()
    a, b = build_model(tiny_spec(), seed=1), build_model(tiny_spec("mbconv"), seed=2)
    ra, rb = dml_train([a, b], s_bundle, cfg, DMLWeights(sup=1.0, mut=0.0, kd=0.0))

    a_alone, b_alone = build_model(tiny_spec(), seed=1), build_model(tiny_spec("mbconv"), seed=2)
    ta = train(a_alone, s_bundle, cfg)
    tb = train(b_alone, s_bundle, cfg)
    assert _same_weights(a, a_alone)
    assert _same_weights(b, b_alone)
    assert [e.iou for e in ra.epochs] == [e.iou for e in ta.epochs]
    assert [e.iou for e in rb.epochs] == [e.iou for e in tb.epochs]


@pytest.mark.parametrize("mode", ["simultaneous", "alternating"])
def test_dml_with_teacher_writes_both_records(s_bundle, teacher_ckpt, tmp_path, mode):
    a, b = build_model(tiny_spec(), seed=1), build_model(tiny_spec("mbconv"), seed=2)
    ra, rb = dml_train(
        [a, b], s_bundle, quick_cfg(epochs=1), DMLWeights(), teacher_ckpt=teacher_ckpt, mode=mode,
        names=("ir", "mb"), run_dirs=(tmp_path / "ir", tmp_path / "mb"),
    )
    assert ra.provenance["peer"] == "mb" and rb.provenance["peer"] == "ir"
    assert ra.provenance["mode"] == mode
    assert ra.provenance["par_red_pct"] > 0
    for name in ("ir", "mb"):
        assert (tmp_path / name / "record.json").exists()
        assert (tmp_path / name / "best.pt").exists()


def test_dml_twins_follow_identical_trajectories(s_bundle):
    a = build_model(tiny_spec(), seed=3)
    b = build_model(tiny_spec(), seed=3)
    ra, rb = dml_train([a, b], s_bundle, quick_cfg(), DMLWeights(sup=1.0, mut=0.5, kd=0.0))
    assert [e.train_loss for e in ra.epochs] == [e.train_loss for e in rb.epochs]
    assert [e.iou for e in ra.epochs] == [e.iou for e in rb.epochs]
    assert _same_weights(a, b)


def test_dml_argument_checks(s_bundle):
    models = [build_model(tiny_spec(), seed=k) for k in range(3)]
    with pytest.raises(ValueError):
        dml_train(models, s_bundle, quick_cfg())
    with pytest.raises(ValueError):
        dml_train(models[:2], s_bundle, quick_cfg(), mode="round_robin")


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(DEFAULT_ROSTER))
def test_every_shipped_model_overfits_four_tiles(data_root, name):
    bundle = DataBundle.from_dirs(data_root / "S", limit=4)
    bundle.val = bundle.train
    model = build_model(roster_spec(name, TILE), seed=0)
    # one batch of 4 tiles: one gradient step per epoch, at a fixed lr
    cfg = quick_cfg(epochs=200, lr=1e-4, loss="dice", plateau={"enabled": False})
    record = train(model, bundle, cfg)
    losses = [e.train_loss for e in record.epochs[1:]]
    assert len(losses) == 200
    assert min(losses) < 0.05
