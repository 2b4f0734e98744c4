"""Seeded training, evaluation and the 3 x 3 (input x loss) comparison grid."""
from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigMismatch, DivergenceDetected, EmptyEvalSet, IoFailure
from .ingest import NUM_CLASSES
from .losses import LossKind, decode_scores, torch_criterion
from .model import (
    Backbone,
    DamageClassifier,
    InputModality,
    ModelConfig,
    build_model,
    checkpoint_bytes,
    encode_batch,
    load_checkpoint,
)
from .preprocess import SplitManifest

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "best.ckpt"
REPORT_NAME = "report.json"
EVAL_BATCH = 256

# published layout: rows are inputs, columns are losses
GRID_ROWS = (InputModality.POST_ONLY, InputModality.PRE_POST, InputModality.PRE_POST_TYPE)
GRID_COLS = (LossKind.MSE, LossKind.CROSS_ENTROPY, LossKind.ORDINAL)
ROW_TITLES = {
    InputModality.POST_ONLY: "Post-Disaster Image Only",
    InputModality.PRE_POST: "Pre-Disaster, Post-Disaster Images",
    InputModality.PRE_POST_TYPE: "Pre-Disaster, Post-Disaster Images, Disaster Type",
}
COL_TITLES = {
    LossKind.MSE: "Mean Squared Error",
    LossKind.CROSS_ENTROPY: "Cross-Entropy Loss",
    LossKind.ORDINAL: "Ordinal Cross-Entropy Loss",
}
# published validation accuracies (%), full xBD, 100 epochs
REFERENCE_ACCURACY = {
    (InputModality.POST_ONLY, LossKind.MSE): 45.3,
    (InputModality.POST_ONLY, LossKind.CROSS_ENTROPY): 59.5,
    (InputModality.POST_ONLY, LossKind.ORDINAL): 64.2,
    (InputModality.PRE_POST, LossKind.MSE): 50.2,
    (InputModality.PRE_POST, LossKind.CROSS_ENTROPY): 68.3,
    (InputModality.PRE_POST, LossKind.ORDINAL): 71.2,
    (InputModality.PRE_POST_TYPE, LossKind.MSE): 49.7,
    (InputModality.PRE_POST_TYPE, LossKind.CROSS_ENTROPY): 72.7,
    (InputModality.PRE_POST_TYPE, LossKind.ORDINAL): 74.6,
}


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    train_loss: float
    val_accuracy: float


@dataclass
class TrainRunReport:
    config: dict
    hyperparams: dict
    per_epoch: list[EpochStats]
    best_val_accuracy: float
    best_epoch: int
    final_val_accuracy: float
    confusion: list[list[int]]
    config_hash: str
    seed: int
    split_checksum: str
    checkpoint_sha256: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunReport":
        d = dict(d)
        d["per_epoch"] = [EpochStats(**e) for e in d["per_epoch"]]
        return cls(**d)


@dataclass
class ComparisonGrid:
    cells: dict[tuple[InputModality, LossKind], TrainRunReport] = field(default_factory=dict)

    def accuracy(self, modality, loss) -> float:
        return self.cells[(InputModality(modality), LossKind(loss))].best_val_accuracy

    def split_checksums(self) -> set[str]:
        return {r.split_checksum for r in self.cells.values()}


@contextlib.contextmanager
def deterministic_torch(threads: int = 1):
    """Single-threaded, deterministic kernels for the duration of the block."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def confusion_matrix(truth, preds) -> np.ndarray:
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def _scores(model: DamageClassifier, x: torch.Tensor, aux: torch.Tensor | None) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(x), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            out.append(model(x[sl], None if aux is None else aux[sl]).double().numpy())
    return np.concatenate(out)


def _evaluate_tensors(model, x, aux, y, ordinal_rule="scan"):
    was_training = model.training
    model.eval()
    preds = decode_scores(model.config.loss, _scores(model, x, aux), ordinal_rule)
    model.train(was_training)
    cm = confusion_matrix(y, preds)
    return float(np.trace(cm) / cm.sum()), cm


def predict(model: DamageClassifier, records, ordinal_rule: str = "scan") -> np.ndarray:
    if not records:
        raise EmptyEvalSet("no records to predict")
    x, aux = encode_batch(records, model.config.modality, model.config.crop_side)
    model.eval()
    return decode_scores(model.config.loss, _scores(model, x, aux), ordinal_rule)


def evaluate(model: DamageClassifier, records, ordinal_rule: str = "scan") -> tuple[float, np.ndarray]:
    """Accuracy and confusion (rows truth, columns prediction) over ``records``."""
    if not records:
        raise EmptyEvalSet("evaluation set is empty")
    preds = predict(model, records, ordinal_rule)
    cm = confusion_matrix([int(r.label) for r in records], preds)
    return float(np.trace(cm) / cm.sum()), cm


def _labels(records) -> torch.Tensor:
    return torch.tensor([int(r.label) for r in records], dtype=torch.int64)


def train(
    config: ModelConfig,
    hp: HyperParams,
    split: SplitManifest,
    records,
    out_dir=None,
    weights=None,
    init_checkpoint=None,
) -> TrainRunReport:
    """Mini-batch Adam over the train side, validating after every epoch.

    The best-validation weights are kept (ties go to the earlier epoch) and,
    with ``out_dir``, written as ``best.ckpt`` next to ``report.json``.
    """
    train_recs = split.resolve(records, "train")
    val_recs = split.resolve(records, "val")
    if not train_recs:
        raise ValueError("training side of the split is empty")
    if not val_recs:
        raise EmptyEvalSet("validation side of the split is empty")

    with deterministic_torch():
        if init_checkpoint is not None:
            model = load_checkpoint(init_checkpoint, expect=config)
        else:
            model = build_model(config, weights=weights, seed=hp.seed)
        x_tr, aux_tr = encode_batch(train_recs, config.modality, config.crop_side)
        y_tr = _labels(train_recs)
        x_va, aux_va = encode_batch(val_recs, config.modality, config.crop_side)
        y_va = _labels(val_recs).numpy()

        criterion = torch_criterion(config.loss)
        opt = torch.optim.Adam(model.parameters(), lr=hp.learning_rate, betas=(hp.beta1, hp.beta2), eps=hp.eps)
        gen = torch.Generator().manual_seed(hp.seed)
        n = len(train_recs)

        per_epoch: list[EpochStats] = []
        best_acc, best_epoch, best_state, best_cm = -1.0, 0, None, None
        for epoch in range(1, hp.epochs + 1):
            model.train()
            order = torch.randperm(n, generator=gen)
            total = 0.0
            for start in range(0, n, hp.batch_size):
                idx = order[start:start + hp.batch_size]
                out = model(x_tr[idx], None if aux_tr is None else aux_tr[idx])
                loss = criterion(out, y_tr[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceDetected(epoch, value)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += value * len(idx)
            acc, cm = _evaluate_tensors(model, x_va, aux_va, y_va)
            per_epoch.append(EpochStats(total / n, acc))
            log.info("%s/%s epoch %d loss %.4f val %.4f",
                     config.modality.value, config.loss.short, epoch, total / n, acc)
            if acc > best_acc:
                best_acc, best_epoch, best_cm = acc, epoch, cm
                best_state = copy.deepcopy(model.state_dict())

        blob = checkpoint_bytes(model, best_state)
        if out_dir is not None:
            out_dir = Path(out_dir)
            try:
                out_dir.mkdir(parents=True, exist_ok=True)
                (out_dir / CHECKPOINT_NAME).write_bytes(blob)
            except OSError as exc:
                raise IoFailure(f"cannot write checkpoint in {out_dir}: {exc}") from exc

    report = TrainRunReport(
        config=config.to_dict(),
        hyperparams=asdict(hp),
        per_epoch=per_epoch,
        best_val_accuracy=best_acc,
        best_epoch=best_epoch,
        final_val_accuracy=per_epoch[-1].val_accuracy,
        confusion=best_cm.tolist(),
        config_hash=config.hash(),
        seed=hp.seed,
        split_checksum=split.checksum(),
        checkpoint_sha256=hashlib.sha256(blob).hexdigest(),
    )
    if out_dir is not None:
        write_report(report, out_dir / REPORT_NAME)
    return report


def write_report(report: TrainRunReport, path) -> None:
    try:
        Path(path).write_text(report.to_json() + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- comparison grid -----------------------------------------------------------------

def _cell_dir(out_dir, modality: InputModality, loss: LossKind):
    return None if out_dir is None else Path(out_dir) / f"{modality.value}__{loss.short}"


def _run_cell(args):
    config, hp, split, records, cell_dir = args
    return train(config, hp, split, records, out_dir=cell_dir)


def compare_grid(
    hp: HyperParams,
    split: SplitManifest,
    records,
    backbone: Backbone = Backbone.TINY_RESNET,
    crop_side: int | None = None,
    out_dir=None,
    show_paper_ref: bool = False,
    jobs: int = 1,
    weights=None,
) -> ComparisonGrid:
    """Train all nine input/loss combinations on one split with one seed."""
    if crop_side is None:
        first = split.resolve(records, "train")[0]
        crop_side = first.crop_side
    if weights is not None and Backbone(backbone) is not Backbone.RESNET18_PRETRAINED:
        raise ConfigMismatch("weights only apply to the pretrained backbone")
    keys = [(m, l) for m in GRID_ROWS for l in GRID_COLS]
    configs = {k: ModelConfig(k[0], k[1], backbone, crop_side) for k in keys}

    grid = ComparisonGrid()
    if jobs > 1 and weights is None:
        jobs_args = [(configs[k], hp, split, records, _cell_dir(out_dir, *k)) for k in keys]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for k, report in zip(keys, pool.map(_run_cell, jobs_args)):
                grid.cells[k] = report
    else:
        for k in keys:
            grid.cells[k] = train(configs[k], hp, split, records, out_dir=_cell_dir(out_dir, *k), weights=weights)

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "grid.md").write_text(render_grid(grid, show_paper_ref), encoding="utf-8")
        (out_dir / "grid.json").write_text(json.dumps(grid_to_dict(grid), indent=1, sort_keys=True) + "\n")
    return grid


def grid_to_dict(grid: ComparisonGrid) -> dict:
    return {f"{m.value}/{l.short}": r.to_dict() for (m, l), r in grid.cells.items()}


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}%"


def render_grid(grid: ComparisonGrid, show_paper_ref: bool = False, metric: str = "best") -> str:
    """Markdown table, rows = inputs and columns = losses, in the published layout."""
    pick = {
        "best": lambda r: r.best_val_accuracy,
        "final": lambda r: r.final_val_accuracy,
    }[metric]
    header = ["Model Input"]
    for loss in GRID_COLS:
        header.append(COL_TITLES[loss])
        if show_paper_ref:
            header.append(f"{COL_TITLES[loss]} (ref)")
    lines = [
        f"Validation accuracy ({metric} epoch)",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    for modality in GRID_ROWS:
        row = [ROW_TITLES[modality]]
        for loss in GRID_COLS:
            report = grid.cells.get((modality, loss))
            row.append(_pct(pick(report)) if report is not None else "n/a")
            if show_paper_ref:
                row.append(f"{REFERENCE_ACCURACY[(modality, loss)]:.1f}%")
        lines.append("| " + " | ".join(row) + " |")
    checksums = sorted(grid.split_checksums())
    lines += ["", f"split checksum: {', '.join(checksums)}"]
    if grid.cells:
        r = next(iter(grid.cells.values()))
        lines.append(f"seed: {r.seed}, epochs: {r.hyperparams['epochs']}, batch: {r.hyperparams['batch_size']}, "
                     f"lr: {r.hyperparams['learning_rate']}")
    return "\n".join(lines) + "\n"


# --- config files ----------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_HP_KEYS = {f.name for f in fields(HyperParams)}


def parse_config_text(text: str) -> tuple[ModelConfig, HyperParams]:
    """``key = value`` lines (``#`` comments) holding model and training settings."""
    model_kw, hp_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _MODEL_KEYS:
            model_kw[key] = int(value) if key in ("crop_side", "head_width") else value
        elif key in _HP_KEYS:
            hp_kw[key] = _coerce(HyperParams, key, value)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if "modality" not in model_kw or "loss" not in model_kw:
        raise ValueError("config needs at least modality and loss")
    return ModelConfig(**model_kw), HyperParams(**hp_kw)


def _coerce(cls, key, value):
    default = getattr(cls(), key) if cls is HyperParams else None
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def format_config_text(config: ModelConfig, hp: HyperParams) -> str:
    lines = [f"{k} = {v}" for k, v in config.to_dict().items()]
    lines += [f"{k} = {v}" for k, v in asdict(hp).items()]
    return "\n".join(lines) + "\n"
