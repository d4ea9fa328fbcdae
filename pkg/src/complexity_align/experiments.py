"""Ablation grids, cross-dataset evaluation and score scatter plots."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from . import __version__
from .datamodel import Manifest, Split
from .inference import ScoreResult, score_manifest, write_scores
from .pipeline import TrainConfig, prepare_manifest, save_model, train

log = logging.getLogger(__name__)

BRANCHES = ("C", "A", "C+A")
WEIGHT_GRID = ((0.1, 0.9), (0.3, 0.7), (0.5, 0.5), (0.7, 0.3), (0.9, 0.1))
CAPTION_LENGTHS = ("short", "medium", "long")
METRIC_COLUMNS = ("srcc", "plcc", "rmse", "rmae", "n", "flags", "error")


def apply_branch(config: TrainConfig, branch: str) -> TrainConfig:
    """``A`` alone is the scene-text baseline regressed straight onto the MOS."""
    if branch == "C":
        return replace(config, branch_c_enabled=True, branch_a_enabled=False)
    if branch == "A":
        return replace(config, branch_c_enabled=False, branch_a_enabled=True, align_target="complexity")
    if branch == "C+A":
        return replace(config, branch_c_enabled=True, branch_a_enabled=True, align_target="ones")
    raise ValueError(f"unknown branch configuration {branch!r}")


@dataclass(frozen=True)
class Cell:
    coords: dict
    config: TrainConfig
    caption: tuple[str, str] | None


@dataclass(frozen=True)
class ExperimentGrid:
    base: TrainConfig
    branch_axis: tuple[str, ...] = ()
    level_axis: tuple[int, ...] = ()
    weight_axis: tuple[tuple[float, float], ...] = ()
    caption_source_axis: tuple[str, ...] = ()
    caption_length_axis: tuple[str, ...] = ()

    def axes(self) -> list[tuple[str, tuple]]:
        named = [
            ("branch", self.branch_axis),
            ("prompt_levels", self.level_axis),
            ("alpha_beta", self.weight_axis),
            ("caption_source", self.caption_source_axis),
            ("caption_length", self.caption_length_axis),
        ]
        return [(k, tuple(v)) for k, v in named if v]

    def cells(self) -> list[Cell]:
        axes = self.axes()
        names = [k for k, _ in axes]
        out = []
        for combo in itertools.product(*(v for _, v in axes)):
            coords = dict(zip(names, combo))
            cfg = self.base
            if "branch" in coords:
                cfg = apply_branch(cfg, coords["branch"])
            if "prompt_levels" in coords:
                cfg = replace(cfg, prompt_levels=int(coords["prompt_levels"]))
            if "alpha_beta" in coords:
                a, b = coords["alpha_beta"]
                cfg = replace(cfg, alpha=float(a), beta=float(b))
            caption = None
            if "caption_source" in coords or "caption_length" in coords:
                caption = (coords.get("caption_source", ""), coords.get("caption_length", ""))
            out.append(Cell(coords, cfg, caption))
        return out


def train_and_score(config: TrainConfig, manifest: Manifest, split: Split, sidecar=None,
                    scores_path=None, model_path=None) -> ScoreResult:
    """One complete run: attach descriptions if needed, train, score the test split."""
    prepared = prepare_manifest(manifest, sidecar, config)
    result = train(config, prepared, split)
    scored = score_manifest(result.model, prepared, split)
    if scores_path is not None:
        write_scores(scored, scores_path)
    if model_path is not None:
        save_model(result, model_path)
    return scored


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def provenance_lines(base: TrainConfig, extra: Mapping[str, str] | None = None) -> list[str]:
    lines = [
        f"# complexity_align {__version__}; torch {torch.__version__}; numpy {np.__version__}",
        f"# base_config_hash = {config_hash(base)}",
        f"# seed = {base.seed}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}")
    return lines


def _fmt_coord(value) -> str:
    if isinstance(value, tuple):
        return ":".join(repr(float(v)) for v in value)
    return str(value)


class ResultsTable:
    """Tab-separated results written row by row through one appender."""

    def __init__(self, path: str | Path | None, columns: Iterable[str], provenance: Iterable[str] = ()):
        self.path = None if path is None else Path(path)
        self.columns = list(columns)
        self.rows: list[dict] = []
        if self.path is not None:
            with open(self.path, "w", encoding="utf-8") as fh:
                for line in provenance:
                    fh.write(line + "\n")
                fh.write("\t".join(self.columns) + "\n")

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write("\t".join(str(row.get(c, "")) for c in self.columns) + "\n")


def read_results(path: str | Path) -> list[dict]:
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l and not l.startswith("#")]
    header = lines[0].split("\t")
    return [dict(zip(header, l.split("\t"))) for l in lines[1:]]


def run_experiment(grid: ExperimentGrid, manifest: Manifest, split: Split,
                   sidecars: Mapping[tuple[str, str], str | Path] | str | Path | None = None,
                   out_path: str | Path | None = None) -> list[dict]:
    """Train and score every grid cell; one row per cell, written as it finishes.

    ``sidecars`` is either a single description file or a mapping from
    ``(caption_source, caption_length)`` to a file. A failing cell records
    its error in the row and the grid continues.
    """
    cells = grid.cells()
    axis_names = [k for k, _ in grid.axes()]
    table = ResultsTable(out_path, [*axis_names, *METRIC_COLUMNS],
                         provenance_lines(grid.base, {"cells": str(len(cells))}))
    for cell in cells:
        row = {k: _fmt_coord(cell.coords[k]) for k in axis_names}
        try:
            if isinstance(sidecars, Mapping):
                key = cell.caption or next(iter(sidecars), None)
                sidecar = sidecars.get(key) if key is not None else None
                if cell.config.branch_a_enabled and sidecar is None:
                    raise ValueError(f"no scene sidecar for caption cell {key}")
            else:
                sidecar = sidecars
            scored = train_and_score(cell.config, manifest, split, sidecar)
            if scored.report is None:
                raise ValueError("fewer than two scored test images")
            row.update(scored.report.as_row(), error="-")
        except Exception as exc:  # noqa: BLE001 - cell failures are data
            log.warning("cell %s failed: %s", row, exc)
            row.update({c: "nan" for c in ("srcc", "plcc", "rmse", "rmae")}, n="0", flags="-",
                       error=f"{type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " "))
        table.append(row)
    return table.rows


def cross_dataset_eval(model, train_name: str, tests: Mapping[str, tuple[Manifest | None, Split | None]],
                       out_path: str | Path | None = None) -> list[dict]:
    """SRCC/PLCC of one trained model on each test manifest.

    ``tests`` maps a dataset name to ``(manifest, split)``; ``split=None``
    scores the whole manifest, a missing manifest yields a skipped row.
    """
    table = ResultsTable(out_path, ["train", "test", "srcc", "plcc", "n", "note"],
                         [f"# complexity_align {__version__}", f"# train = {train_name}"])
    for name, (manifest, split) in tests.items():
        if manifest is None:
            table.append({"train": train_name, "test": name, "srcc": "nan", "plcc": "nan", "n": "0",
                          "note": "skipped: manifest missing"})
            continue
        scored = score_manifest(model, manifest, split)
        rep = scored.report
        if rep is None:
            table.append({"train": train_name, "test": name, "srcc": "nan", "plcc": "nan", "n": str(len(scored.ids)),
                          "note": "skipped: fewer than two scored images"})
            continue
        note = "partial" if scored.partial else "-"
        table.append({"train": train_name, "test": name, "srcc": f"{rep.srcc:.6f}", "plcc": f"{rep.plcc:.6f}",
                      "n": str(rep.n), "note": note})
    return table.rows


def emit_scatter(pairs, path: str | Path, title: str | None = None) -> Path:
    """Scatter of predicted vs. ground-truth scores with the identity line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("need at least one (gt, pred) pair")
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"cannot write {path}: directory does not exist")
    lo = float(min(0.0, pts.min()))
    hi = float(max(1.0, pts.max()))
    with matplotlib.rc_context({"svg.hashsalt": "complexity_align", "path.simplify": False}):
        fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
        ax.plot([lo, hi], [lo, hi], color="0.4", lw=1, zorder=1)
        ax.scatter(pts[:, 0], pts[:, 1], s=8, alpha=0.7, zorder=2)
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_xlabel("ground truth")
        ax.set_ylabel("prediction")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        metadata = {"Date": None} if path.suffix.lower() in (".svg", ".pdf") else {"Software": None}
        fig.savefig(path, metadata=metadata)
        plt.close(fig)
    return path
