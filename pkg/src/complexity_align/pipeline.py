"""Dual-branch training loop, training logs and resumable checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from . import __version__
from .alignment import (
    LossWeights,
    NonFiniteError,
    alignment_loss,
    alignment_scores,
    combined_loss,
    complexity_loss,
    complexity_scores,
    direct_scene_scores,
)
from .datamodel import Manifest, Split, attach_scene_texts
from .encoders import (
    CheckpointError,
    DualEncoder,
    EncoderConfig,
    PromptBank,
    export_encoders,
    import_encoders,
    init_prompt_bank,
    init_toy_params,
)
from .images import ensure_min_side, load_image
from .model import ComplexityModel

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message if checkpoint is None else f"{message}; last good checkpoint: {checkpoint}")
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    epochs: int = 50
    alpha: float = 0.1
    beta: float = 0.9
    branch_c_enabled: bool = True
    branch_a_enabled: bool = True
    # "ones" trains the alignment branch against the all-ones target;
    # "complexity" regresses the batch-softmax scene score onto the MOS
    # (the single-branch scene-text baseline).
    align_target: str = "ones"
    anchor: int = -1
    prompt_levels: int = 5
    seed: int = 0
    trainable_scope: str = "all"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if not (self.branch_c_enabled or self.branch_a_enabled):
            raise ValueError("at least one branch must be enabled")
        if self.trainable_scope not in ("all", "prompts_only"):
            raise ValueError(f"trainable_scope must be 'all' or 'prompts_only', got {self.trainable_scope!r}")
        if self.align_target not in ("ones", "complexity"):
            raise ValueError(f"align_target must be 'ones' or 'complexity', got {self.align_target!r}")
        if self.prompt_levels not in (3, 5, 7):
            raise ValueError(f"prompt_levels must be 3, 5 or 7, got {self.prompt_levels}")
        if self.batch_size < 1 or self.epochs < 0 or not self.learning_rate > 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and learning_rate > 0 required")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @property
    def scoring_mode(self) -> str:
        if not self.branch_c_enabled and self.align_target == "complexity":
            return "direct"
        return "levels"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return cls(**d)

    def resume_hash(self) -> str:
        """Hash of everything that fixes the trajectory except the epoch budget."""
        d = self.to_dict()
        d.pop("epochs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# Desk-scale profile for the synthetic fixture; TrainConfig() keeps the
# full-scale defaults (batch 64, lr 1e-4, 50 epochs).
DESK_PROFILE = dict(batch_size=16, epochs=20)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_PROFILE, **overrides})


@dataclass(frozen=True)
class LogRow:
    epoch: int
    step: int
    loss: float
    loss_a: float
    loss_c: float

    def format(self) -> str:
        return f"{self.epoch}\t{self.step}\t{self.loss!r}\t{self.loss_a!r}\t{self.loss_c!r}"


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    step: int = 0
    running: dict = field(default_factory=dict)


@dataclass
class TrainingData:
    ids: list[str]
    images: list[np.ndarray]
    mos: np.ndarray
    scene_texts: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def load_training_data(manifest: Manifest, ids: Sequence[str], side: int,
                       need_scene: bool) -> TrainingData:
    by_id = manifest.by_id()
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise TrainingError(f"{len(missing)} split ids not in manifest, e.g. {missing[:3]}")
    recs = [by_id[i] for i in ids]
    if need_scene:
        empty = [r.image_id for r in recs if not r.scene_text]
        if empty:
            raise TrainingError(
                f"alignment branch enabled but {len(empty)} training records lack a scene description, "
                f"e.g. {empty[:3]}"
            )
    images = [ensure_min_side(load_image(r.image_path), side) for r in recs]
    return TrainingData(
        ids=list(ids),
        images=images,
        mos=np.array([r.mos for r in recs], dtype=np.float64),
        scene_texts=[r.scene_text for r in recs],
    )


def prepare_manifest(manifest: Manifest, sidecar: str | Path | None, config: TrainConfig) -> Manifest:
    """Attach scene descriptions only when the alignment branch will use them."""
    if not config.branch_a_enabled or sidecar is None:
        return manifest
    result = attach_scene_texts(manifest, sidecar)
    for w in result.warnings:
        log.warning(w)
    return result.manifest


def _crop(img: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    if h == side and w == side:
        return img
    y = int(rng.integers(0, h - side + 1))
    x = int(rng.integers(0, w - side + 1))
    return img[y : y + side, x : x + side]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(data: TrainingData, config: TrainConfig, epoch: int) -> Iterator[tuple[np.ndarray, ...]]:
    side = config.encoder.input_side
    order = epoch_order(len(data), config.seed, epoch)
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        idx = order[start : start + config.batch_size]
        rng = np.random.default_rng([config.seed, epoch, b])
        crops = np.stack([_crop(data.images[i], side, rng) for i in idx])
        yield idx, crops


@contextmanager
def single_threaded():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def batch_losses(encoder: DualEncoder, bank: PromptBank, config: TrainConfig, crops, mos, texts) -> dict:
    """Forward pass of both branches on one batch.

    Returns tensors ``loss``, ``loss_a``, ``loss_c`` (``None`` for a disabled
    branch) and the branch predictions ``q_c`` / ``q_a``.
    """
    img = encoder.encode_images(crops)
    g = torch.as_tensor(mos, dtype=torch.float64)
    out = {"q_c": None, "q_a": None, "loss_a": None, "loss_c": None, "g": g}
    if config.branch_c_enabled:
        levels = encoder.encode_levels(bank)
        q_c = complexity_scores(img, levels, config.anchor).predictions
        out["q_c"] = q_c
        out["loss_c"] = complexity_loss(q_c, g)
    if config.branch_a_enabled:
        scene = encoder.encode_texts(texts)
        if config.align_target == "complexity":
            q_a = direct_scene_scores(img, scene).predictions
            out["loss_a"] = alignment_loss(q_a, g)
        else:
            q_a = alignment_scores(img, scene).predictions
            out["loss_a"] = alignment_loss(q_a)
        out["q_a"] = q_a
    zero = torch.zeros((), dtype=torch.float64)
    l_a = out["loss_a"] if out["loss_a"] is not None else zero
    l_c = out["loss_c"] if out["loss_c"] is not None else zero
    out["loss"] = combined_loss(l_a, l_c, config.weights)
    return out


def trainable_parameters(encoder: DualEncoder, bank: PromptBank, scope: str) -> list[torch.nn.Parameter]:
    if scope == "prompts_only":
        for p in encoder.parameters():
            p.requires_grad_(False)
        return list(bank.parameters())
    return [*encoder.parameters(), *bank.parameters()]


def make_optimizer(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


@dataclass
class TrainResult:
    model: ComplexityModel
    log: list[LogRow]
    state: TrainState
    config: TrainConfig
    initial_loss: float | None = None
    final_loss: float | None = None
    train_ids: tuple[str, ...] = ()
    optimizer: torch.optim.Adam | None = field(default=None, repr=False)
    params: list = field(default_factory=list, repr=False)


def dataset_loss(encoder: DualEncoder, bank: PromptBank, config: TrainConfig, data: TrainingData) -> float:
    """Mean combined loss over the training set in fixed (epoch 0) batches, no update."""
    total = 0.0
    count = 0
    with torch.no_grad():
        for idx, crops in iter_batches(data, config, 0):
            out = batch_losses(encoder, bank, config, crops, data.mos[idx], [data.scene_texts[i] for i in idx])
            total += float(out["loss"]) * len(idx)
            count += len(idx)
    return total / count


def format_log_header(config: TrainConfig) -> list[str]:
    lines = [f"# complexity_align {__version__}"]
    lines += [f"# {k} = {json.dumps(v, sort_keys=True)}" for k, v in config.to_dict().items()]
    lines.append("epoch\tstep\tL\tL_A\tL_C")
    return lines


def train(
    config: TrainConfig,
    manifest: Manifest,
    split: Split,
    encoder: DualEncoder | None = None,
    bank: PromptBank | None = None,
    *,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    measure_loss: bool = False,
    on_step: Callable[[dict], None] | None = None,
    data: TrainingData | None = None,
) -> TrainResult:
    """Train both branches on ``split.train_ids`` for ``config.epochs`` epochs.

    When ``checkpoint_dir`` is given, a checkpoint is written after every
    epoch (``epoch_XXX.ckpt``); ``resume_from`` continues such a checkpoint
    up to ``config.epochs``. A non-finite loss aborts the run.
    """
    with single_threaded():
        if data is None:
            data = load_training_data(manifest, split.train_ids, config.encoder.input_side, config.branch_a_enabled)
        state = TrainState()
        history: list[LogRow] = []
        optimizer_state = None
        if resume_from is not None:
            encoder, bank, state, optimizer_state, history = load_checkpoint(resume_from, config, data.ids)
        if encoder is None:
            encoder = init_toy_params(config.encoder, config.seed)
        if bank is None:
            bank = init_prompt_bank(config.encoder, config.prompt_levels, config.seed)
        if len(bank) != config.prompt_levels:
            raise TrainingError(f"prompt bank has {len(bank)} levels, config asks for {config.prompt_levels}")
        params = trainable_parameters(encoder, bank, config.trainable_scope)
        opt = make_optimizer(params, config)
        if optimizer_state is not None:
            _restore_optimizer(opt, params, optimizer_state)

        initial = dataset_loss(encoder, bank, config, data) if measure_loss and resume_from is None else None
        log_fh = None
        if log_path is not None:
            log_fh = open(log_path, "a" if resume_from is not None else "w", encoding="utf-8")
            if resume_from is None:
                log_fh.write("\n".join(format_log_header(config)) + "\n")
        last_good = Path(resume_from) if resume_from is not None else None
        try:
            for epoch in range(state.epoch, config.epochs):
                for idx, crops in iter_batches(data, config, epoch):
                    texts = [data.scene_texts[i] for i in idx]
                    where = f"epoch {epoch + 1} step {state.step + 1}"
                    try:
                        out = batch_losses(encoder, bank, config, crops, data.mos[idx], texts)
                    except NonFiniteError as exc:
                        raise TrainingDiverged(f"non-finite scores at {where}", last_good) from exc
                    loss = out["loss"]
                    if not torch.isfinite(loss):
                        raise TrainingDiverged(f"non-finite loss at {where}", last_good)
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
                    state.step += 1
                    row = LogRow(
                        epoch + 1,
                        state.step,
                        float(loss.detach()),
                        float("nan") if out["loss_a"] is None else float(out["loss_a"].detach()),
                        float("nan") if out["loss_c"] is None else float(out["loss_c"].detach()),
                    )
                    history.append(row)
                    if log_fh is not None:
                        log_fh.write(row.format() + "\n")
                    if on_step is not None:
                        on_step({**out, "row": row, "idx": idx})
                state.epoch = epoch + 1
                state.running = {"L": history[-1].loss, "L_A": history[-1].loss_a, "L_C": history[-1].loss_c} if history else {}
                if checkpoint_dir is not None:
                    last_good = Path(checkpoint_dir) / f"epoch_{state.epoch:03d}.ckpt"
                    save_checkpoint(last_good, state, encoder, bank, config, opt, params, data.ids, history)
        finally:
            if log_fh is not None:
                log_fh.close()
        final = dataset_loss(encoder, bank, config, data) if measure_loss else None

    model = ComplexityModel(encoder, bank, anchor=config.anchor, mode=config.scoring_mode)
    return TrainResult(model, history, state, config, initial, final, tuple(data.ids), opt, params)


# --------------------------------------------------------------------------
# checkpoints: the encoder container plus Adam moments and counters
# --------------------------------------------------------------------------

def _ids_hash(ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()[:16]


def save_checkpoint(path, state: TrainState, encoder: DualEncoder, bank: PromptBank, config: TrainConfig,
                    optimizer: torch.optim.Adam, params: list, train_ids: Sequence[str],
                    history: Sequence[LogRow] = ()) -> None:
    extra = {}
    steps = []
    for i, p in enumerate(params):
        st = optimizer.state.get(p, {})
        if st:
            extra[f"adam.{i}.exp_avg"] = st["exp_avg"].detach().numpy()
            extra[f"adam.{i}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
            steps.append(float(st["step"]))
        else:
            steps.append(None)
    extra["log"] = np.array([[r.epoch, r.step, r.loss, r.loss_a, r.loss_c] for r in history], dtype=np.float64).reshape(-1, 5)
    header = {
        "kind": "training",
        "train_config": config.to_dict(),
        "config_hash": config.resume_hash(),
        "data_hash": _ids_hash(train_ids),
        "epoch": state.epoch,
        "step": state.step,
        "running": state.running,
        "adam_steps": steps,
        "n_params": len(params),
    }
    export_encoders(path, encoder, bank, extra_header=header, extra_arrays=extra)


def load_checkpoint(path, config: TrainConfig | None = None, train_ids: Sequence[str] | None = None):
    """Returns ``(encoder, bank, state, optimizer_state, history)``.

    With ``config``/``train_ids`` given, the checkpoint must have been
    produced by the same configuration (epoch budget aside) and data.
    """
    encoder, bank, head, arrays = import_encoders(path)
    if head.get("kind") != "training":
        raise CheckpointError(f"{path}: not a training checkpoint")
    if bank is None:
        raise CheckpointError(f"{path}: training checkpoint without prompt bank")
    if config is not None and head["config_hash"] != config.resume_hash():
        raise CheckpointError(
            f"{path}: config hash {head['config_hash']} does not match current config {config.resume_hash()}"
        )
    if train_ids is not None and head["data_hash"] != _ids_hash(train_ids):
        raise CheckpointError(f"{path}: checkpoint was trained on a different training split")
    state = TrainState(epoch=head["epoch"], step=head["step"], running=head.get("running", {}))
    opt_state = {"steps": head["adam_steps"], "arrays": arrays}
    history = [LogRow(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in arrays["log"]]
    return encoder, bank, state, opt_state, history


def _restore_optimizer(opt: torch.optim.Adam, params: list, saved: dict) -> None:
    if len(saved["steps"]) != len(params):
        raise CheckpointError(f"optimizer state for {len(saved['steps'])} tensors, model has {len(params)}")
    arrays = saved["arrays"]
    for i, p in enumerate(params):
        step = saved["steps"][i]
        if step is None:
            continue
        opt.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(arrays[f"adam.{i}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.{i}.exp_avg_sq"].copy()),
        }


def load_model(path) -> ComplexityModel:
    """Scoring model from a training checkpoint."""
    encoder, bank, head, _ = import_encoders(path)
    cfg = TrainConfig.from_dict(head["train_config"]) if "train_config" in head else TrainConfig()
    if bank is None:
        bank = init_prompt_bank(encoder.cfg, cfg.prompt_levels, cfg.seed)
    return ComplexityModel(encoder, bank, anchor=cfg.anchor, mode=cfg.scoring_mode)


def save_model(result: TrainResult, path) -> None:
    """Final checkpoint of a finished run (resumable, also loadable by :func:`load_model`)."""
    model = result.model
    save_checkpoint(path, result.state, model.encoder, model.bank, result.config, result.optimizer,
                    result.params, result.train_ids, result.log)


def copy_model(model: ComplexityModel) -> ComplexityModel:
    return copy.deepcopy(model)
