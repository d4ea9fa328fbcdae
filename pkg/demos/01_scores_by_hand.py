"""
Complexity scores by hand
=========================

Walks through how one image embedding becomes a complexity score, and how
the two training signals are formed, using tiny hand-made vectors.
"""

import numpy as np
import torch

from complexity_align.alignment import (
    LossWeights,
    alignment_loss,
    alignment_scores,
    combined_loss,
    complexity_loss,
    complexity_scores,
)
from complexity_align.encoders import LEVEL_PROMPTS
from complexity_align.metrics import evaluate

# five level prompts, from simplest to most complex
print(LEVEL_PROMPTS[5])

# Pretend the text encoder mapped the five prompts onto orthogonal axes and
# that three images sit somewhere between them.
levels = torch.eye(5, dtype=torch.float64)
images = torch.tensor([
    [0.9, 0.4, 0.1, 0.0, 0.0],   # mostly "simple"
    [0.1, 0.3, 0.9, 0.3, 0.1],   # "moderate"
    [0.0, 0.0, 0.2, 0.5, 0.9],   # mostly "high"
], dtype=torch.float64)

# The score is the softmax probability of the most complex prompt.
scores = complexity_scores(images, levels)
print("cosine to each level:\n", scores.similarities.numpy().round(3))
print("complexity score:", scores.predictions.numpy().round(4))

# The regression signal compares those scores with subjective ratings.
mos = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
l_c = complexity_loss(scores.predictions, mos)

# The alignment signal pairs each image with its own description and pushes
# every paired similarity up; the batch softmax caps what it can reach.
descriptions = images + 0.05 * torch.randn(3, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
a = alignment_scores(images, descriptions)
l_a = alignment_loss(a.predictions)
print("paired cosines:", a.similarities.numpy().round(4), "-> batch softmax", a.predictions.numpy().round(4))
print(f"alignment loss {float(l_a):.4f} (floor for 3 items: {(1 - 1 / 3) ** 2:.4f})")

w = LossWeights()
print(f"L = {w.alpha}*{float(l_a):.4f} + {w.beta}*{float(l_c):.4f} = {float(combined_loss(l_a, l_c, w)):.4f}")

# Finally, the evaluation metrics on the three predictions.
print(evaluate(scores.predictions.numpy(), mos.numpy()).as_text())

# Raw scores are squeezed toward 1/5 by the softmax, which is why training
# (not the formula) has to stretch them over the rating range.
print("spread of raw scores:", np.ptp(scores.predictions.numpy()).round(4))
