"""Image/text encoders sharing one embedding space, plus learnable prompt context.

The toy encoder pair is a desk-scale vision/text transformer: images are cut
into ``M`` square patches, a class token is prepended, ``K`` pre-norm blocks
are applied and the final class token is projected to ``D`` dimensions.
Texts are hashed into a fixed vocabulary, wrapped in begin/end sentinels and
the final (end) token is projected into the same space.

Everything runs in float64 so the finite-difference checks are meaningful.
"""

from __future__ import annotations

import json
import math
import re
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64

CONTEXT_LENGTH = 8

# fixed input standardization applied before patch embedding
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

LEVEL_PROMPTS = {
    3: ("Simple Complexity", "Moderate Complexity", "High Complexity"),
    5: (
        "Simple Complexity",
        "Little Complexity",
        "Moderate Complexity",
        "Very Complexity",
        "High Complexity",
    ),
    7: (
        "Very Low Complexity",
        "Fairly Low Complexity",
        "Slightly Low Complexity",
        "Moderate Level Complexity",
        "Slightly High Complexity",
        "Fairly High Complexity",
        "Very High Complexity",
    ),
}


class TextTruncationWarning(UserWarning):
    pass


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    patch_count: int = 16
    patch_dim: int = 32
    token_dim: int = 32
    max_text_len: int = 32
    shared_dim: int = 64
    input_side: int = 64
    channels: int = 3
    vocab_buckets: int = 4096
    ffn_mult: int = 2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        grid = math.isqrt(self.patch_count)
        if grid * grid != self.patch_count:
            raise ValueError(f"patch_count must be a perfect square, got {self.patch_count}")
        if self.input_side % grid:
            raise ValueError(f"input_side {self.input_side} not divisible by patch grid {grid}")
        if self.max_text_len < 2:
            raise ValueError("max_text_len must leave room for the two sentinels")

    @property
    def grid(self) -> int:
        return math.isqrt(self.patch_count)

    @property
    def patch_side(self) -> int:
        return self.input_side // self.grid

    @property
    def bos_id(self) -> int:
        return self.vocab_buckets

    @property
    def eos_id(self) -> int:
        return self.vocab_buckets + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in d.items() if k in known})


_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str, buckets: int = 4096) -> list[int]:
    """Lowercase, split on whitespace/punctuation, hash words into ``buckets``."""
    return [zlib.crc32(w.encode("utf-8")) % buckets for w in _TOKEN_RE.findall(text.lower())]


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2.0 - 1.0) * bound)


class Block(nn.Module):
    """Pre-norm single-head self-attention followed by a two-layer MLP."""

    def __init__(self, dim: int, ffn_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.out = nn.Linear(dim, dim, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.fc1 = nn.Linear(dim, ffn_mult * dim, dtype=DTYPE)
        self.fc2 = nn.Linear(ffn_mult * dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, key_pad: torch.Tensor | None = None) -> torch.Tensor:
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        att = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_pad is not None:
            att = att.masked_fill(key_pad[:, None, :], float("-inf"))
        x = x + self.out(att.softmax(dim=-1) @ v)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        pix = cfg.patch_side * cfg.patch_side * cfg.channels
        self.patch_embed = nn.Linear(pix, cfg.patch_dim, dtype=DTYPE)
        self.class_token = nn.Parameter(torch.zeros(cfg.patch_dim, dtype=DTYPE))
        self.pos = nn.Parameter(torch.zeros(cfg.patch_count + 1, cfg.patch_dim, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(cfg.patch_dim, cfg.ffn_mult) for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(cfg.patch_dim, dtype=DTYPE)
        self.proj = nn.Linear(cfg.patch_dim, cfg.shared_dim, bias=False, dtype=DTYPE)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(N, H, W, C) -> (N, M, p*p*C), patches in row-major grid order."""
        n = images.shape[0]
        g, p, c = self.cfg.grid, self.cfg.patch_side, self.cfg.channels
        x = images.reshape(n, g, p, g, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(n, g * g, p * p * c)

    def tokens(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Per-block sequences ``[c_i, P_i]`` for i = 0..K."""
        patches = self.patch_embed(self.patchify((images - PIXEL_MEAN) / PIXEL_STD))
        cls = self.class_token.expand(patches.shape[0], 1, -1)
        x = torch.cat([cls, patches], dim=1) + self.pos
        states = [x]
        for block in self.blocks:
            x = block(x)
            states.append(x)
        return states

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        last = self.tokens(images)[-1]
        return self.proj(self.ln_post(last[:, 0]))


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.vocab_buckets + 2, cfg.token_dim, dtype=DTYPE)
        self.pos = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.token_dim, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(cfg.token_dim, cfg.ffn_mult) for _ in range(cfg.depth))
        self.ln_final = nn.LayerNorm(cfg.token_dim, dtype=DTYPE)
        self.proj = nn.Linear(cfg.token_dim, cfg.shared_dim, bias=False, dtype=DTYPE)

    def token_ids(self, text: str, n_context: int = 0) -> list[int]:
        cfg = self.cfg
        words = tokenize(text, cfg.vocab_buckets)
        room = cfg.max_text_len - 2 - n_context
        if room < 0:
            raise ShapeError(f"context of {n_context} tokens does not fit max_text_len={cfg.max_text_len}")
        if len(words) > room:
            warnings.warn(
                f"text of {len(words)} tokens truncated to {room}: {text[:40]!r}...",
                TextTruncationWarning,
                stacklevel=3,
            )
            words = words[:room]
        return [cfg.bos_id, *words, cfg.eos_id]

    def forward(self, texts: Sequence[str], context: torch.Tensor | None = None) -> torch.Tensor:
        """Encode a list of texts to (N, D).

        ``context`` (n_ctx, d_l) is inserted right after the begin sentinel,
        ahead of the word embeddings, for every text in the batch.
        """
        n_ctx = 0 if context is None else context.shape[0]
        ids = [self.token_ids(t, n_ctx) for t in texts]
        lengths = [len(i) + n_ctx for i in ids]
        width = max(lengths)
        seqs = []
        for tok in ids:
            emb = self.token_embed(torch.tensor(tok, dtype=torch.long))
            parts = [emb[:1]]
            if context is not None:
                parts.append(context)
            parts.append(emb[1:])
            seq = torch.cat(parts, dim=0)
            pad = width - seq.shape[0]
            if pad:
                seq = torch.cat([seq, seq.new_zeros(pad, seq.shape[1])], dim=0)
            seqs.append(seq)
        x = torch.stack(seqs) + self.pos[:width]
        lengths_t = torch.tensor(lengths)
        key_pad = torch.arange(width)[None, :] >= lengths_t[:, None]
        for block in self.blocks:
            x = block(x, key_pad if pad_any(lengths) else None)
        last = x[torch.arange(len(texts)), lengths_t - 1]
        return self.proj(self.ln_final(last))


def pad_any(lengths: Sequence[int]) -> bool:
    return min(lengths) != max(lengths)


class PromptBank(nn.Module):
    """Learnable context vectors plus the ordered complexity-level prompts."""

    def __init__(self, cfg: EncoderConfig, levels: int | Sequence[str] = 5, context_length: int = CONTEXT_LENGTH):
        super().__init__()
        if isinstance(levels, int):
            if levels not in LEVEL_PROMPTS:
                raise ValueError(f"levels must be one of {sorted(LEVEL_PROMPTS)}, got {levels}")
            levels = LEVEL_PROMPTS[levels]
        self.level_prompts = tuple(levels)
        self.context = nn.Parameter(torch.zeros(context_length, cfg.token_dim, dtype=DTYPE))

    def __len__(self) -> int:
        return len(self.level_prompts)


class DualEncoder(nn.Module):
    """Image and text towers with a shared output dimension."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image = ImageEncoder(cfg)
        self.text = TextEncoder(cfg)

    def encode_images(self, images) -> torch.Tensor:
        return self.image(as_image_batch(images, self.cfg))

    def encode_texts(self, texts: Sequence[str], bank: PromptBank | None = None) -> torch.Tensor:
        return self.text(list(texts), None if bank is None else bank.context)

    def encode_levels(self, bank: PromptBank) -> torch.Tensor:
        return self.encode_texts(bank.level_prompts, bank)


def as_image_batch(images, cfg: EncoderConfig) -> torch.Tensor:
    """Accept (H, W, C) or (N, H, W, C) arrays/tensors and validate the size."""
    x = torch.as_tensor(images, dtype=DTYPE) if not torch.is_tensor(images) else images.to(DTYPE)
    if x.ndim == 3:
        x = x[None]
    expected = (cfg.input_side, cfg.input_side, cfg.channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"expected image shape (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
    return x


def init_toy_params(config: EncoderConfig, seed: int) -> DualEncoder:
    """Fresh toy encoders; every tensor drawn from U(-1/sqrt(dim), 1/sqrt(dim))
    except LayerNorm gains (1) and offsets (0)."""
    model = DualEncoder(config)
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        if ".ln" in name or name.startswith("ln") or "ln_" in name:
            with torch.no_grad():
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            continue
        fan_in = p.shape[-1] if p.ndim > 1 else p.shape[0]
        _uniform_(p, fan_in, gen)
    return model


def init_prompt_bank(config: EncoderConfig, levels: int | Sequence[str] = 5, seed: int = 0) -> PromptBank:
    bank = PromptBank(config, levels)
    gen = torch.Generator().manual_seed(seed + 7919)
    _uniform_(bank.context, config.token_dim, gen)
    return bank


def encode_image(config: EncoderConfig, params: DualEncoder, image) -> torch.Tensor:
    if params.cfg != config:
        raise ShapeError(f"parameters built for {params.cfg}, called with {config}")
    return params.encode_images(image)[0]


def encode_text(config: EncoderConfig, params: DualEncoder, text: str, bank: PromptBank | None = None) -> torch.Tensor:
    if params.cfg != config:
        raise ShapeError(f"parameters built for {params.cfg}, called with {config}")
    return params.encode_texts([text], bank)[0]


# --------------------------------------------------------------------------
# checkpoint container
#
#   magic "CXAL" | u16 version | u32 header_len | header JSON
#   then per array, in header order: u64 byte length | raw little-endian bytes
# --------------------------------------------------------------------------

MAGIC = b"CXAL"
FORMAT_VERSION = 1
ARCH = "toy-vit-1"

_DTYPES = {"float64": np.dtype("<f8"), "float32": np.dtype("<f4"), "int64": np.dtype("<i8")}


def write_container(path: str | Path, arrays: dict[str, np.ndarray], header: dict, float_width: int = 64) -> None:
    table = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            dt = "float64" if float_width == 64 else "float32"
        elif arr.dtype.kind in "iu":
            dt = "int64"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape), "nbytes": len(data)})
        blobs.append(data)
    head = dict(header, format_version=FORMAT_VERSION, arrays=table)
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        for data in blobs:
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    if len(raw) < 10:
        raise CheckpointError(f"{path}: truncated preamble at offset 4")
    version, head_len = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    off = 10
    if off + head_len > len(raw):
        raise CheckpointError(f"{path}: header length {head_len} at offset 6 exceeds file size {len(raw)}")
    try:
        head = json.loads(raw[off : off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header at offset {off}: {exc}") from None
    off += head_len
    arrays = {}
    for entry in head["arrays"]:
        if off + 8 > len(raw):
            raise CheckpointError(f"{path}: truncated before array {entry['name']!r} at offset {off}")
        (n,) = struct.unpack_from("<Q", raw, off)
        if n != entry["nbytes"] or off + 8 + n > len(raw):
            raise CheckpointError(
                f"{path}: corrupted length field {n} for array {entry['name']!r} at offset {off} "
                f"(header says {entry['nbytes']}, {len(raw) - off - 8} bytes remain)"
            )
        off += 8
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != n:
            raise CheckpointError(f"{path}: array {entry['name']!r} shape {shape} does not match {n} bytes")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=off).reshape(shape).copy()
        off += n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    return head, arrays


def state_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    own = module.state_dict()
    state = {}
    for key, ref in own.items():
        name = prefix + key
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing array {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"array {name!r} has shape {arr.shape}, model expects {tuple(ref.shape)}")
        state[key] = torch.from_numpy(np.asarray(arr, dtype=np.float64)).to(ref.dtype)
    module.load_state_dict(state)


def export_encoders(path: str | Path, params: DualEncoder, bank: PromptBank | None = None,
                    float_width: int = 64, extra_header: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays = state_arrays(params, "encoder.")
    header = {"arch": ARCH, "config": params.cfg.to_dict()}
    if bank is not None:
        arrays.update(state_arrays(bank, "bank."))
        header["level_prompts"] = list(bank.level_prompts)
    if extra_arrays:
        arrays.update(extra_arrays)
    if extra_header:
        header.update(extra_header)
    write_container(path, arrays, header, float_width=float_width)


def import_encoders(path: str | Path) -> tuple[DualEncoder, PromptBank | None, dict, dict[str, np.ndarray]]:
    head, arrays = read_container(path)
    if head.get("arch") != ARCH:
        raise CheckpointError(f"{path}: unknown architecture tag {head.get('arch')!r}")
    cfg = EncoderConfig.from_dict(head["config"])
    img_proj = arrays.get("encoder.image.proj.weight")
    txt_proj = arrays.get("encoder.text.proj.weight")
    if img_proj is None or txt_proj is None:
        raise CheckpointError(f"{path}: missing projection heads")
    if img_proj.shape[0] != txt_proj.shape[0] or img_proj.shape[0] != cfg.shared_dim:
        raise CheckpointError(
            f"{path}: embedding dimension mismatch: image head {img_proj.shape[0]}, "
            f"text head {txt_proj.shape[0]}, config {cfg.shared_dim}"
        )
    model = DualEncoder(cfg)
    load_state_arrays(model, arrays, "encoder.")
    bank = None
    if "level_prompts" in head:
        bank = PromptBank(cfg, head["level_prompts"], context_length=arrays["bank.context"].shape[0])
        load_state_arrays(bank, arrays, "bank.")
    return model, bank, head, arrays


def backbone_adapter(export: str | Path) -> tuple[Callable, Callable]:
    """Load an exported encoder container and return ``(encode_image, encode_text)``.

    Both callables have the same contract as the toy functions with config
    and parameters already bound; ``encode_text(text, bank=None)`` uses the
    stored prompt bank only when ``bank="stored"`` is passed.
    """
    model, stored_bank, _, _ = import_encoders(export)
    model.eval()
    cfg = model.cfg

    def _image(image) -> torch.Tensor:
        return encode_image(cfg, model, image)

    def _text(text: str, bank: PromptBank | str | None = None) -> torch.Tensor:
        if bank == "stored":
            bank = stored_bank
        return encode_text(cfg, model, text, bank)

    _image.config = _text.config = cfg
    return _image, _text
