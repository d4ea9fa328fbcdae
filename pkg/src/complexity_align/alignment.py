"""Similarity scoring and losses for the two training branches.

Complexity branch: each image is compared with every complexity-level prompt,
a softmax over levels is taken and the probability of the anchor level is the
predicted complexity, regressed onto the MOS with an MSE loss.

Alignment branch: each image is compared with its own scene description,
a softmax is taken over the batch and the result is regressed onto an
all-ones target.

All functions accept array-likes and return float64 tensors so gradients can
flow back into the encoders. No temperature is applied anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DTYPE = torch.float64


def _t(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


class NonFiniteError(ValueError):
    """Raised when scores reaching a softmax are NaN or infinite."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1  # alignment branch
    beta: float = 0.9  # complexity branch

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = float(getattr(self, name))
            if not v >= 0 or v == float("inf"):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class BatchScores:
    similarities: torch.Tensor
    predictions: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.predictions.shape[0]


def align_target(n: int) -> torch.Tensor:
    return torch.ones(n, dtype=DTYPE)


def _check_nonzero(norms: torch.Tensor, what: str) -> None:
    if bool((norms == 0).any()):
        raise ValueError(f"zero-norm {what} embedding")


def cosine_similarity(a, b) -> torch.Tensor:
    """Cosine of the angle between two vectors (or row-wise for matrices)."""
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    _check_nonzero(na, "first")
    _check_nonzero(nb, "second")
    return ((a * b).sum(dim=-1) / (na * nb)).clamp(-1.0, 1.0)


def cosine_matrix(a, b) -> torch.Tensor:
    """(N, D) x (K, D) -> (N, K) cosine similarities."""
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na, nb = a.norm(dim=-1, keepdim=True), b.norm(dim=-1, keepdim=True)
    _check_nonzero(na, "image")
    _check_nonzero(nb, "text")
    return ((a / na) @ (b / nb).T).clamp(-1.0, 1.0)


def softmax(scores, dim: int = -1) -> torch.Tensor:
    s = _t(scores)
    if s.numel() == 0:
        raise ValueError("softmax of an empty vector")
    if not bool(torch.isfinite(s).all()):
        raise NonFiniteError("softmax input contains NaN or inf")
    e = torch.exp(s - s.max(dim=dim, keepdim=True).values.detach())
    return e / e.sum(dim=dim, keepdim=True)


def complexity_scores(img_embeds, level_embeds, anchor: int = -1) -> BatchScores:
    """Softmax over complexity levels; the anchor level's probability is the score.

    ``anchor`` is 1-based (1 = first/simplest prompt). The default ``-1``
    selects the last, most complex prompt.
    """
    levels = _t(level_embeds)
    k = levels.shape[0]
    if k not in (3, 5, 7):
        raise ValueError(f"expected 3, 5 or 7 level prompts, got {k}")
    idx = k - 1 if anchor == -1 else anchor - 1
    if not 0 <= idx < k:
        raise ValueError(f"anchor {anchor} outside 1..{k}")
    sims = cosine_matrix(img_embeds, levels)
    return BatchScores(sims, softmax(sims, dim=1)[:, idx])


def resolve_anchor(anchor: int, n_levels: int) -> int:
    """1-based anchor with ``-1`` meaning the last level."""
    return n_levels if anchor == -1 else anchor


def mse(q, g) -> torch.Tensor:
    q, g = _t(q), _t(g)
    if q.shape != g.shape:
        raise ValueError(f"length mismatch: {tuple(q.shape)} vs {tuple(g.shape)}")
    if q.numel() == 0:
        raise ValueError("empty batch")
    return ((q - g) ** 2).mean()


def complexity_loss(q, g) -> torch.Tensor:
    return mse(q, g)


def alignment_scores(img_embeds, scene_embeds) -> BatchScores:
    """Diagonal image/description similarity, softmax-normalized over the batch."""
    img, scene = _t(img_embeds), _t(scene_embeds)
    if img.ndim == 1:
        img, scene = img[None], scene[None]
    if img.shape[0] == 0:
        raise ValueError("empty batch")
    if img.shape[0] != scene.shape[0]:
        raise ValueError(f"{img.shape[0]} images paired with {scene.shape[0]} descriptions")
    sims = cosine_similarity(img, scene)
    return BatchScores(sims, softmax(sims, dim=0))


def alignment_loss(q_align, target=None) -> torch.Tensor:
    q = _t(q_align)
    return mse(q, align_target(q.shape[0]) if target is None else target)


def combined_loss(l_a, l_c, w: LossWeights = LossWeights()) -> torch.Tensor:
    l_a, l_c = _t(l_a), _t(l_c)
    if bool(l_a < 0) or bool(l_c < 0):
        raise ValueError(f"negative loss input: l_a={float(l_a)}, l_c={float(l_c)}")
    return w.alpha * l_a + w.beta * l_c


def direct_scene_scores(img_embeds, scene_embeds) -> BatchScores:
    """Single-branch baseline: the batch-softmax scene score read as complexity."""
    return alignment_scores(img_embeds, scene_embeds)
