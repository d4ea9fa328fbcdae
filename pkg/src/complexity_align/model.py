from __future__ import annotations

from dataclasses import dataclass

import torch

from .alignment import complexity_scores, cosine_similarity
from .encoders import DualEncoder, PromptBank


@dataclass
class ComplexityModel:
    """Trained encoders plus prompts, able to score image crops.

    ``mode="levels"`` scores each crop by the anchor-level probability over
    the complexity prompts. ``mode="direct"`` is the scene-text baseline: a
    crop's raw score is its cosine similarity to the image's description,
    normalized later across the evaluated set.
    """

    encoder: DualEncoder
    bank: PromptBank
    anchor: int = -1
    mode: str = "levels"

    @property
    def input_side(self) -> int:
        return self.encoder.cfg.input_side

    @torch.no_grad()
    def crop_scores(self, crops, scene_text: str | None = None) -> torch.Tensor:
        img = self.encoder.encode_images(crops)
        if self.mode == "direct":
            if not scene_text:
                raise ValueError("direct scoring needs the image's scene description")
            scene = self.encoder.encode_texts([scene_text])
            return cosine_similarity(img, scene.expand_as(img))
        levels = self.encoder.encode_levels(self.bank)
        return complexity_scores(img, levels, self.anchor).predictions
