"""Patch-based scoring of images and whole manifests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .alignment import softmax
from .datamodel import Manifest, Split
from .images import ImageReadError, ensure_min_side, load_image
from .metrics import MetricReport, evaluate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchPlan:
    crop_side: int
    stride: int
    crops: tuple[tuple[int, int], ...]  # (x, y) offsets
    aggregation: str = "mean"


def _offsets(length: int, side: int, stride: int) -> list[int]:
    offs = list(range(0, length - side + 1, stride))
    if offs[-1] != length - side:
        offs.append(length - side)  # edge-aligned final crop
    return offs


def plan_patches(height: int, width: int, crop_side: int, stride: int | None = None) -> PatchPlan:
    """Tile an image with ``crop_side`` squares; every pixel is covered."""
    stride = crop_side if stride is None else stride
    if not 0 < stride <= crop_side:
        raise ValueError(f"stride must be in (0, {crop_side}], got {stride}")
    if height < crop_side or width < crop_side:
        raise ValueError(f"image {height}x{width} smaller than crop side {crop_side}; upscale first")
    crops = tuple((x, y) for y in _offsets(height, crop_side, stride) for x in _offsets(width, crop_side, stride))
    return PatchPlan(crop_side, stride, crops)


def extract_crops(image: np.ndarray, plan: PatchPlan) -> np.ndarray:
    s = plan.crop_side
    return np.stack([image[y : y + s, x : x + s] for x, y in plan.crops])


def score_image(model, image: np.ndarray, stride: int | None = None, scene_text: str | None = None) -> float:
    """Mean crop score of one image.

    ``model`` needs ``input_side`` and ``crop_scores(crops, scene_text)``.
    Images smaller than the crop are bilinearly upscaled first.
    """
    side = model.input_side
    h, w = image.shape[:2]
    if h < side or w < side:
        log.info("upscaling %dx%d image to crop side %d", h, w, side)
        image = ensure_min_side(image, side)
    plan = plan_patches(image.shape[0], image.shape[1], side, stride)
    crops = extract_crops(image, plan)
    if scene_text is None:
        scores = model.crop_scores(crops)
    else:
        scores = model.crop_scores(crops, scene_text)
    scores = torch.as_tensor(scores, dtype=torch.float64).reshape(-1)
    # fixed-order reduction
    return float(scores.sum() / scores.numel())


@dataclass
class ScoreResult:
    ids: list[str]
    scores: list[float]
    gt: list[float]
    missing: list[str] = field(default_factory=list)
    report: MetricReport | None = None

    @property
    def partial(self) -> bool:
        return bool(self.missing)

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.gt, self.scores))


def score_manifest(model, manifest: Manifest, split: Split | None = None, stride: int | None = None,
                   rmae_root: bool = True) -> ScoreResult:
    """Score the test ids of ``split`` (all records when ``split`` is None) in manifest order.

    Unreadable images are listed in ``missing`` and left out of the metrics.
    For a scene-text baseline model (``mode == "direct"``) the per-image
    similarities are softmax-normalized across the scored set.
    """
    keep = None if split is None else set(split.test_ids)
    direct = getattr(model, "mode", "levels") == "direct"
    ids, scores, gt, missing = [], [], [], []
    for rec in manifest.records:
        if keep is not None and rec.image_id not in keep:
            continue
        try:
            image = load_image(rec.image_path)
        except ImageReadError as exc:
            log.warning("%s", exc)
            missing.append(rec.image_id)
            continue
        ids.append(rec.image_id)
        scores.append(score_image(model, image, stride, rec.scene_text if direct else None))
        gt.append(rec.mos)
    if direct and scores:
        scores = softmax(torch.tensor(scores, dtype=torch.float64)).tolist()
    report = evaluate(scores, gt, rmae_root=rmae_root) if len(scores) >= 2 else None
    return ScoreResult(ids, scores, gt, missing, report)


def format_scores(result: ScoreResult) -> str:
    lines = [f"{i}\t{s!r}" for i, s in zip(result.ids, result.scores)]
    for i in result.missing:
        lines.append(f"# missing {i}")
    if result.report is not None:
        lines += [f"# {line}" for line in result.report.as_text().splitlines()]
    return "\n".join(lines) + "\n"


def write_scores(result: ScoreResult, path: str | Path) -> None:
    Path(path).write_text(format_scores(result), encoding="utf-8")


def read_scores(path: str | Path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            image_id, score = line.split("\t")
            out[image_id] = float(score)
    return out
