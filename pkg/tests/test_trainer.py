import numpy as np
import pytest
import torch
import torch.nn as nn

import damagelab.trainer as trainer_mod
from damagelab.errors import DivergenceDetected, EmptyEvalSet
from damagelab.ingest import DamageClass, DisasterType
from damagelab.losses import LossKind
from damagelab.model import DamageClassifier, InputModality, ModelConfig, build_model, load_checkpoint
from damagelab.preprocess import BuildingRecord, SplitManifest, balanced_split
from damagelab.trainer import (
    GRID_COLS,
    GRID_ROWS,
    ComparisonGrid,
    EpochStats,
    HyperParams,
    TrainRunReport,
    compare_grid,
    confusion_matrix,
    evaluate,
    format_config_text,
    parse_config_text,
    render_grid,
    train,
)

SIDE = 32


def constant_model(loss: LossKind, cls: int) -> DamageClassifier:
    model = build_model(ModelConfig("post_only", loss, crop_side=SIDE), seed=0)
    with torch.no_grad():
        model.fc.weight.zero_()
        if loss is LossKind.CROSS_ENTROPY:
            model.fc.bias.copy_(torch.nn.functional.one_hot(torch.tensor(cls), 4).float())
        elif loss is LossKind.MSE:
            model.fc.bias.fill_(float(cls))
        else:
            model.fc.bias.copy_(torch.tensor([5.0 if k < cls else -5.0 for k in range(3)]))
    return model


class _IntensityToClass(nn.Module):
    """Reads the class back out of crops whose brightness encodes it."""

    out_features = 4

    def forward(self, x):
        raw = x[:, 0].mean(dim=(1, 2)) * 0.229 + 0.485  # undo standardization
        cls = torch.round(raw * 255.0 / 60.0).long().clamp(0, 3)
        return torch.nn.functional.one_hot(cls, 4).float()


def label_reading_model():
    model = DamageClassifier(ModelConfig("post_only", "ce", crop_side=SIDE), _IntensityToClass())
    with torch.no_grad():
        model.fc.weight.copy_(torch.eye(4))
        model.fc.bias.zero_()
    return model


def brightness_records(per_class=5):
    recs = []
    for c in range(4):
        for i in range(per_class):
            px = np.full((SIDE, SIDE, 3), 60 * c, dtype=np.uint8)
            recs.append(BuildingRecord(px, px, DamageClass(c), DisasterType.FIRE, 2000, "s", f"{c}-{i}"))
    return recs


@pytest.mark.parametrize("loss", list(LossKind))
@pytest.mark.parametrize("cls", range(4))
def test_constant_predictor_scores_quarter(loss, cls):
    recs = brightness_records()
    acc, cm = evaluate(constant_model(loss, cls), recs)
    assert acc == 0.25
    assert cm[:, cls].sum() == len(recs)


def test_label_reading_model_is_perfect():
    recs = brightness_records()
    acc, cm = evaluate(label_reading_model(), recs)
    assert acc == 1.0
    np.testing.assert_array_equal(cm, np.diag([5, 5, 5, 5]))


def test_confusion_counts():
    truth = [0, 0, 1, 2, 3, 3, 3]
    preds = [0, 1, 1, 3, 3, 0, 3]
    cm = confusion_matrix(truth, preds)
    assert cm.sum() == 7
    assert cm.sum(axis=1).tolist() == [2, 1, 1, 3]
    assert cm[2, 3] == 1 and cm[3, 0] == 1


def test_evaluate_empty():
    with pytest.raises(EmptyEvalSet):
        evaluate(constant_model(LossKind.CROSS_ENTROPY, 0), [])


# --- training -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def split_and_records(small_records):
    return balanced_split(small_records, 0.8, seed=0), small_records


def test_single_full_batch_epoch(split_and_records):
    split, recs = split_and_records
    hp = HyperParams(epochs=1, batch_size=len(split.train), seed=0)
    report = train(ModelConfig("post_only", "ce", crop_side=SIDE), hp, split, recs)
    assert len(report.per_epoch) == 1
    assert report.best_epoch == 1


def test_training_is_deterministic_and_consistent(split_and_records, tmp_path):
    split, recs = split_and_records
    hp = HyperParams(epochs=3, batch_size=8, seed=4)
    config = ModelConfig("pre_post_type", "ordinal", crop_side=SIDE)
    a = train(config, hp, split, recs, out_dir=tmp_path / "a")
    b = train(config, hp, split, recs, out_dir=tmp_path / "b")
    assert a == b
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    assert a.best_val_accuracy == max(e.val_accuracy for e in a.per_epoch)
    assert a.per_epoch[a.best_epoch - 1].val_accuracy == a.best_val_accuracy
    cm = np.array(a.confusion)
    val_labels = [int(r.label) for r in split.resolve(recs, "val")]
    assert cm.sum() == len(split.val)
    assert cm.sum(axis=1).tolist() == np.bincount(val_labels, minlength=4).tolist()
    assert all(0.0 <= e.val_accuracy <= 1.0 for e in a.per_epoch)

    reloaded = load_checkpoint(tmp_path / "a" / "best.ckpt", expect=config)
    acc, _ = evaluate(reloaded, split.resolve(recs, "val"))
    assert acc == a.best_val_accuracy

    assert TrainRunReport.from_dict(a.to_dict()) == a


def test_divergence_aborts(split_and_records, monkeypatch):
    split, recs = split_and_records
    monkeypatch.setattr(trainer_mod, "torch_criterion", lambda kind: (lambda out, t: out.sum() * float("nan")))
    with pytest.raises(DivergenceDetected) as info:
        train(ModelConfig("post_only", "ce", crop_side=SIDE), HyperParams(epochs=2, seed=0), split, recs)
    assert info.value.epoch == 1


@pytest.mark.parametrize("loss", list(LossKind))
def test_memorizes_small_set(small_records, loss):
    per_class = {c: [r for r in small_records if r.label == c][:8] for c in DamageClass}
    recs = [r for rs in per_class.values() for r in rs]
    assert len(recs) == 32
    split = SplitManifest(tuple(r.uid for r in recs), tuple(r.uid for r in recs[::4]), seed=0)
    report = train(ModelConfig("post_only", loss, crop_side=SIDE), HyperParams(epochs=200, seed=0), split, recs)
    assert min(e.train_loss for e in report.per_epoch) < 0.05


# --- grid ----------------------------------------------------------------------------------

def _fake_report(acc):
    return TrainRunReport({}, {"epochs": 1, "batch_size": 32, "learning_rate": 0.001}, [EpochStats(1.0, acc)],
                          acc, 1, acc, [[0] * 4] * 4, "h", 0, "abc", "sha")


def test_render_layout_and_reference():
    grid = ComparisonGrid({(m, l): _fake_report(0.5) for m in GRID_ROWS for l in GRID_COLS})
    text = render_grid(grid, show_paper_ref=True)
    rows = [line for line in text.splitlines() if line.startswith("| ")]
    assert rows[0].startswith("| Model Input | Mean Squared Error | Mean Squared Error (ref) | Cross-Entropy Loss")
    post = next(r for r in rows if r.startswith("| Post-Disaster Image Only"))
    assert post.split(" | ")[1:] == ["50.0%", "45.3%", "50.0%", "59.5%", "50.0%", "64.2% |"]
    full = next(r for r in rows if r.startswith("| Pre-Disaster, Post-Disaster Images, Disaster Type"))
    assert full.rstrip(" |").endswith("74.6%")
    assert "(ref)" not in render_grid(grid)


def test_compare_grid_small(split_and_records, tmp_path):
    split, recs = split_and_records
    grid = compare_grid(HyperParams(epochs=1, seed=0), split, recs, out_dir=tmp_path, show_paper_ref=True)
    assert set(grid.cells) == {(m, l) for m in GRID_ROWS for l in GRID_COLS}
    assert grid.split_checksums() == {split.checksum()}
    text = (tmp_path / "grid.md").read_text()
    assert "n/a" not in text and "59.5%" in text
    assert (tmp_path / "pre_post_type__ordinal" / "best.ckpt").exists()


# --- config files -----------------------------------------------------------------------------

def test_config_round_trip():
    config = ModelConfig("pre_post_type", "ordinal", crop_side=64)
    hp = HyperParams(learning_rate=0.01, batch_size=16, epochs=7, seed=3)
    assert parse_config_text(format_config_text(config, hp)) == (config, hp)


def test_config_defaults_and_errors():
    config, hp = parse_config_text("# comment\nmodality = post_only\nloss = ce\n")
    assert config.modality is InputModality.POST_ONLY and hp == HyperParams()
    with pytest.raises(ValueError):
        parse_config_text("modality = post_only\nloss = ce\nmomentum = 0.9\n")
    with pytest.raises(ValueError):
        parse_config_text("modality = post_only\n")


def test_hyperparam_validation():
    for bad in ({"batch_size": 0}, {"epochs": 0}, {"learning_rate": 0.0}, {"optimizer": "sgd"}):
        with pytest.raises(ValueError):
            HyperParams(**bad)
