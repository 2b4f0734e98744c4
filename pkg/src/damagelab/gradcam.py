"""Gradient-weighted class activation maps for building crops.

For a feature map ``A`` (K channels) and a scalar class score ``y``::

    weight_k = mean over positions of dy/dA_k
    map      = relu(sum_k weight_k * A_k)

The map is then upsampled to the crop size and divided by its maximum.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
from matplotlib import colormaps
from PIL import Image

from .errors import EmptyEvalSet, IoFailure, NonScalarTarget, ShapeMismatch, UnknownLayer
from .ingest import DamageClass
from .losses import LossKind, decode_scores
from .model import DamageClassifier, EncodedInput, encode_input

DEFAULT_COLORMAP = "viridis"


@dataclass
class CamMap:
    map: np.ndarray        # h x w, at the resolution of the chosen layer
    upsampled: np.ndarray  # S x S in [0, 1]
    target_class: DamageClass
    layer_name: str


def target_score(outputs: torch.Tensor, target: int, loss: LossKind | None) -> torch.Tensor:
    """Scalar to differentiate for ``target``, given the head type.

    ce: the target logit. ordinal: the sum of the first ``target`` threshold
    logits (the bits set in the target's cumulative code), zero for class 0.
    mse: the scalar output itself, whatever the target.
    """
    row = outputs[0]
    if loss is LossKind.CROSS_ENTROPY or (loss is None and row.numel() > 1):
        if not 0 <= target < row.numel():
            raise NonScalarTarget(f"target {target} outside a {row.numel()}-wide head")
        return row[target]
    if loss is LossKind.ORDINAL:
        return row[:target].sum()
    if row.numel() != 1:
        raise NonScalarTarget(f"cannot score a {row.numel()}-wide output without a loss kind")
    return row[0]


def bilinear_upsample(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array.

    Interpolates as ``a + t * (b - a)`` so a constant input stays exactly constant.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, ty = axis(h, out_h)
    x0, x1, tx = axis(w, out_w)
    top = values[y0][:, x0] + tx * (values[y0][:, x1] - values[y0][:, x0])
    bot = values[y1][:, x0] + tx * (values[y1][:, x1] - values[y1][:, x0])
    return top + ty[:, None] * (bot - top)


def _as_batch(inp):
    if isinstance(inp, EncodedInput):
        x = torch.from_numpy(np.asarray(inp.tensor, dtype=np.float32))[None]
        aux = None if inp.aux is None else torch.from_numpy(np.asarray(inp.aux, dtype=np.float32))[None]
        return x, aux
    x = torch.as_tensor(inp, dtype=torch.float32)
    return (x[None] if x.ndim == 3 else x), None


def default_layer(model: nn.Module) -> str:
    """Last convolutional stage before global pooling."""
    if isinstance(model, DamageClassifier):
        return model.feature_layers[-1]
    convs = [name for name, m in model.named_modules() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise UnknownLayer("model has no convolutional layer")
    return convs[-1]


def grad_cam(
    model: nn.Module,
    inp,
    target: int,
    layer: str | None = None,
    score_fn: Callable[[torch.Tensor, int], torch.Tensor] | None = None,
) -> CamMap:
    """Grad-CAM of ``target`` for one input.

    ``inp`` is an :class:`EncodedInput` or a C x H x W tensor. ``score_fn`` picks
    the scalar to explain from the model output; by default it follows the
    head type of a :class:`DamageClassifier`.
    """
    layer = layer or default_layer(model)
    try:
        module = model.get_submodule(layer)
    except AttributeError:
        raise UnknownLayer(f"no layer named {layer!r}") from None

    x, aux = _as_batch(inp)
    # input grad keeps the graph alive even when no parameter precedes the layer
    x = x.detach().clone().requires_grad_(True)
    loss_kind = model.config.loss if isinstance(model, DamageClassifier) else None
    if score_fn is None:
        score_fn = lambda out, t: target_score(out, t, loss_kind)

    captured = {}

    def hook(_module, _inputs, output):
        output.retain_grad()
        captured["act"] = output

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            out = model(x, aux) if aux is not None else model(x)
            score = score_fn(out, int(target))
            if score.numel() != 1:
                raise NonScalarTarget("target score must be a scalar")
            model.zero_grad(set_to_none=True)
            act = captured["act"]
            score.backward()
            grad = act.grad if act.grad is not None else torch.zeros_like(act)
    finally:
        handle.remove()
        model.train(was_training)

    if act.ndim != 4:
        raise UnknownLayer(f"layer {layer!r} does not produce a spatial feature map")
    a = act.detach()[0].double().numpy()
    g = grad.detach()[0].double().numpy()
    weights = g.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, a, axes=1), 0.0)

    side_h, side_w = x.shape[-2:]
    up = np.maximum(bilinear_upsample(raw, side_h, side_w), 0.0)
    peak = up.max()
    up = up / peak if peak > 0 else np.zeros_like(up)
    return CamMap(raw, up, DamageClass(int(target)), layer)


def colorize(values: np.ndarray, colormap: str = DEFAULT_COLORMAP) -> np.ndarray:
    """[0, 1] map -> float RGB in [0, 255]."""
    return colormaps[colormap](np.clip(values, 0.0, 1.0))[..., :3] * 255.0


def overlay(cam: CamMap, crop: np.ndarray, alpha: float = 0.5, colormap: str = DEFAULT_COLORMAP) -> np.ndarray:
    if cam.upsampled.shape != crop.shape[:2]:
        raise ShapeMismatch(f"map {cam.upsampled.shape} does not match crop {crop.shape[:2]}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    blended = (1.0 - alpha) * crop.astype(np.float64) + alpha * colorize(cam.upsampled, colormap)
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def _save(path: Path, pixels: np.ndarray) -> None:
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def cam_batch(
    model: DamageClassifier,
    manifest,
    records,
    out_dir,
    layer: str | None = None,
    alpha: float = 0.5,
    class_from: str = "prediction",
    side: str = "val",
    colormap: str = DEFAULT_COLORMAP,
) -> list[Path]:
    """Render a crop-over-overlay panel per record plus a one-per-class contact sheet.

    Panels show the post crop; the contact sheet lays out the first record of
    each class from no damage to destroyed, left to right.
    """
    recs = manifest.resolve(records, side)
    if not recs:
        raise EmptyEvalSet(f"{side} side of the manifest is empty")
    if class_from not in ("label", "prediction"):
        raise ValueError("class_from must be 'label' or 'prediction'")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc

    written, first_per_class = [], {}
    for rec in recs:
        enc = encode_input(rec, model.config.modality, model.config.crop_side)
        if class_from == "label":
            target = int(rec.label)
        else:
            x, aux = _as_batch(enc)
            model.eval()
            with torch.no_grad():
                scores = model(x, aux).double().numpy()
            target = int(decode_scores(model.config.loss, scores)[0])
        cam = grad_cam(model, enc, target, layer)
        panel = np.concatenate([rec.crop_post, overlay(cam, rec.crop_post, alpha, colormap)], axis=0)
        path = out_dir / f"{rec.uid}_cam.png"
        _save(path, panel)
        written.append(path)
        first_per_class.setdefault(rec.label, panel)

    blank = np.zeros_like(next(iter(first_per_class.values())))
    sheet = np.concatenate([first_per_class.get(c, blank) for c in DamageClass], axis=1)
    sheet_path = out_dir / "contact_sheet.png"
    _save(sheet_path, sheet)
    written.append(sheet_path)
    return written


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
