"""Dataset records, manifests, scene-description sidecars and train/test splits.

Manifest files are line oriented UTF-8::

    #range 0 100
    img_0001	images/img_0001.png	42.5	outdoor
    img_0002	images/img_0002.png	77.0

Raw scores are min-max normalized into ``[0, 1]`` using the declared range,
so the normalized score can be compared directly against a softmax output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np


class ManifestError(ValueError):
    """Raised for malformed manifest, sidecar or split files."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class DatasetRecord:
    image_id: str
    image_path: Path
    mos: float
    raw_score: float
    scene_text: str = ""
    category: str | None = None


@dataclass(frozen=True)
class Manifest:
    records: tuple[DatasetRecord, ...]
    raw_score_min: float
    raw_score_max: float
    name: str = ""
    flagged: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.raw_score_min < self.raw_score_max:
            raise ManifestError(
                f"empty score range [{self.raw_score_min}, {self.raw_score_max}]"
            )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def by_id(self) -> dict[str, DatasetRecord]:
        return {r.image_id: r for r in self.records}

    def subset(self, ids: Iterable[str]) -> "Manifest":
        """Records whose id is in ``ids``, in manifest order."""
        keep = set(ids)
        return replace(self, records=tuple(r for r in self.records if r.image_id in keep))


@dataclass(frozen=True)
class Split:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int
    ratio: float = 0.8

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ManifestError("train and test ids overlap")


@dataclass(frozen=True)
class SidecarResult:
    manifest: Manifest
    warnings: tuple[str, ...]

    @property
    def flagged(self) -> frozenset[str]:
        return self.manifest.flagged


def normalize_score(raw: float, lo: float, hi: float) -> float:
    return (raw - lo) / (hi - lo)


def _parse_float(token: str, path, lineno: int, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ManifestError(f"{what} is not a number: {token!r}", path, lineno) from None
    if not math.isfinite(value):
        raise ManifestError(f"{what} is not finite: {token!r}", path, lineno)
    return value


def parse_manifest(text: str, base_dir: Path | None = None, name: str = "", path=None) -> Manifest:
    """Parse manifest text. Relative image paths are resolved against ``base_dir``."""
    lo = hi = None
    records = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "range":
                if len(parts) != 3:
                    raise ManifestError("range header needs exactly two values", path, lineno)
                if lo is not None:
                    raise ManifestError("duplicate range header", path, lineno)
                lo = _parse_float(parts[1], path, lineno, "range min")
                hi = _parse_float(parts[2], path, lineno, "range max")
                if not lo < hi:
                    raise ManifestError(f"range min {lo} must be below max {hi}", path, lineno)
            continue
        if lo is None:
            raise ManifestError("record before '#range' header", path, lineno)
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise ManifestError(f"expected 3 or 4 tab-separated fields, got {len(fields)}", path, lineno)
        image_id, rel_path, raw = fields[0], fields[1], fields[2]
        if not image_id:
            raise ManifestError("empty image_id", path, lineno)
        if image_id in seen:
            raise ManifestError(
                f"duplicate image_id {image_id!r} (first seen on line {seen[image_id]})", path, lineno
            )
        seen[image_id] = lineno
        score = _parse_float(raw, path, lineno, "score")
        if not lo <= score <= hi:
            raise ManifestError(f"score {score} outside declared range [{lo}, {hi}]", path, lineno)
        image_path = Path(rel_path)
        if base_dir is not None and not image_path.is_absolute():
            image_path = base_dir / image_path
        category = fields[3] if len(fields) == 4 and fields[3] else None
        records.append(
            DatasetRecord(
                image_id=image_id,
                image_path=image_path,
                mos=normalize_score(score, lo, hi),
                raw_score=score,
                category=category,
            )
        )
    if lo is None:
        raise ManifestError("missing '#range <min> <max>' header", path)
    return Manifest(records=tuple(records), raw_score_min=lo, raw_score_max=hi, name=name)


def load_manifest(path: str | Path, name: str | None = None) -> Manifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, base_dir=path.parent, name=name if name is not None else path.stem, path=path)


def format_manifest(manifest: Manifest, base_dir: Path | None = None) -> str:
    lines = [f"#range {manifest.raw_score_min!r} {manifest.raw_score_max!r}"]
    for r in manifest.records:
        p = r.image_path
        if base_dir is not None:
            try:
                p = p.relative_to(base_dir)
            except ValueError:
                pass
        row = [r.image_id, p.as_posix(), repr(r.raw_score)]
        if r.category:
            row.append(r.category)
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.write_text(format_manifest(manifest, base_dir=path.parent), encoding="utf-8")


def read_sidecar(path: str | Path) -> dict[str, str]:
    """Read an ``image_id<TAB>description`` file. Later duplicates win."""
    path = Path(path)
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" not in line:
            raise ManifestError("expected image_id<TAB>description", path, lineno)
        image_id, text = line.split("\t", 1)
        if "\t" in text:
            raise ManifestError("description contains a tab", path, lineno)
        out[image_id] = text.strip()
    return out


def write_sidecar(texts: dict[str, str], path: str | Path, header: Iterable[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    for image_id, text in texts.items():
        clean = " ".join(text.split())
        lines.append(f"{image_id}\t{clean}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def attach_scene_texts(manifest: Manifest, sidecar: str | Path | dict[str, str]) -> SidecarResult:
    """Attach descriptions to records.

    Records missing from the sidecar keep an empty ``scene_text`` and are
    listed in ``manifest.flagged``. Sidecar ids that the manifest does not
    know produce warnings instead of errors.
    """
    texts = sidecar if isinstance(sidecar, dict) else read_sidecar(sidecar)
    known = set(manifest.ids)
    warnings = tuple(f"sidecar id {i!r} not in manifest" for i in texts if i not in known)
    records = []
    flagged = set()
    for r in manifest.records:
        if r.image_id in texts:
            records.append(replace(r, scene_text=texts[r.image_id]))
        else:
            records.append(replace(r, scene_text=""))
            flagged.add(r.image_id)
    return SidecarResult(replace(manifest, records=tuple(records), flagged=frozenset(flagged)), warnings)


def make_split(manifest: Manifest | Iterable[str], seed: int, ratio: float = 0.8) -> Split:
    """Seeded random train/test partition with ``round(ratio * N)`` training ids.

    The permutation is taken over the sorted id set so the split depends only
    on (ids, seed, ratio), not on manifest order.
    """
    ids = manifest.ids if isinstance(manifest, Manifest) else list(manifest)
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if len(ids) < 2:
        raise ValueError(f"need at least 2 records to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids are not unique")
    ordered = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train = int(round(ratio * len(ordered)))
    train = tuple(ordered[i] for i in perm[:n_train])
    test = tuple(ordered[i] for i in perm[n_train:])
    return Split(train_ids=train, test_ids=test, seed=seed, ratio=ratio)


def format_split(split: Split) -> str:
    lines = [f"seed {split.seed}", f"ratio {split.ratio!r}", "[train]", *split.train_ids, "[test]", *split.test_ids]
    return "\n".join(lines) + "\n"


def save_split(split: Split, path: str | Path) -> None:
    Path(path).write_text(format_split(split), encoding="utf-8")


def parse_split(text: str, path=None) -> Split:
    seed = ratio = None
    section = None
    train, test = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line in ("[train]", "[test]"):
            section = line[1:-1]
            continue
        if section is None:
            key, _, value = line.partition(" ")
            if key == "seed":
                seed = int(value)
            elif key == "ratio":
                ratio = float(value)
            else:
                raise ManifestError(f"unknown split header {key!r}", path, lineno)
        else:
            (train if section == "train" else test).append(line)
    if seed is None or ratio is None:
        raise ManifestError("split file needs 'seed' and 'ratio' headers", path)
    return Split(tuple(train), tuple(test), seed, ratio)


def load_split(path: str | Path) -> Split:
    path = Path(path)
    return parse_split(path.read_text(encoding="utf-8"), path=path)
