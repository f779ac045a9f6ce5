"""Training losses: smooth-L1 fidelity, multi-scale perceptual, feature
distillation over the top-scale fusion taps, and their weighted sum.

The perceptual term compares features from a frozen three-stage
convolutional extractor (widths 64/128/256 at full, half, and quarter
resolution). Its weights are fixed-random by default and never trained;
externally trained weights can be loaded from the shared checkpoint
archive format for higher-fidelity runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError


@dataclass
class LossWeights:
    """Coefficients for the perceptual and distillation terms."""

    lambda_perceptual: float = 0.04
    lambda_distill: float = 0.01

    def __post_init__(self):
        if self.lambda_perceptual < 0 or self.lambda_distill < 0:
            raise ConfigError("loss weights must be non-negative")


def fidelity_loss(pred, target):
    """Smooth L1 over all pixel-channel errors: 0.5*e^2 below |e|=1, |e|-0.5 above."""
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.smooth_l1_loss(pred, target, beta=1.0, reduction="mean")


class PerceptualExtractor(nn.Module):
    """Frozen three-stage feature pyramid for the perceptual loss.

    Stage widths are (64, 128, 256) at downsampling factors (1, 2, 4),
    mirroring the early stages of common classification backbones: two
    convs, pool, two convs, pool, three convs, with features tapped after
    the last activation of each stage.
    """

    STAGE_WIDTHS = (64, 128, 256)

    def __init__(self, seed=0):
        super().__init__()
        w1, w2, w3 = self.STAGE_WIDTHS
        self.stage1 = nn.Sequential(
            nn.Conv2d(3, w1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w1, w1, 3, padding=1), nn.ReLU(),
        )
        self.stage2 = nn.Sequential(
            nn.MaxPool2d(2),
            nn.Conv2d(w1, w2, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w2, w2, 3, padding=1), nn.ReLU(),
        )
        self.stage3 = nn.Sequential(
            nn.MaxPool2d(2),
            nn.Conv2d(w2, w3, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w3, w3, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w3, w3, 3, padding=1), nn.ReLU(),
        )
        self._seed_weights(seed)
        for p in self.parameters():
            p.requires_grad_(False)

    def _seed_weights(self, seed):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
                    bound = 1.0 / np.sqrt(fan_in)
                    m.weight.copy_(
                        torch.from_numpy(
                            rng.uniform(-bound, bound, size=tuple(m.weight.shape))
                        ).to(m.weight.dtype)
                    )
                    m.bias.zero_()

    def forward(self, x):
        """Return the three stage features for a (B, 3, H, W) input."""
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return [f1, f2, f3]

    def save(self, path):
        from .checkpoint import save_archive

        arrays = {name: p.detach().cpu().numpy() for name, p in self.named_parameters()}
        save_archive(path, {"kind": "perceptual_extractor"}, arrays)

    @classmethod
    def load(cls, path):
        from .checkpoint import load_archive

        meta, arrays = load_archive(path)
        if meta.get("kind") != "perceptual_extractor":
            raise ConfigError(f"{path!r} is not a perceptual extractor archive")
        ext = cls(seed=0)
        with torch.no_grad():
            for name, p in ext.named_parameters():
                p.copy_(torch.from_numpy(arrays[name]).to(p.dtype))
        return ext


def perceptual_loss(pred, target, extractor):
    """Mean over stages of the size-normalized squared feature distance."""
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    feats_p = extractor(pred)
    feats_t = extractor(target)
    total = 0.0
    for fp, ft in zip(feats_p, feats_t):
        c, h, w = fp.shape[1:]
        per_image = ((fp - ft) ** 2).sum(dim=(1, 2, 3)) / (c * h * w)
        total = total + per_image.mean()
    return total / len(feats_p)


def distill_loss(student_taps, teacher_taps):
    """Mean over taps of the summed absolute feature difference.

    Taps must align pairwise by grid position. The L1 norm is an element
    sum per tap (per image, averaged over the batch), then averaged over
    the taps.
    """
    if len(student_taps) != len(teacher_taps) or not student_taps:
        raise InputError(
            f"tap count mismatch: {len(student_taps)} student vs {len(teacher_taps)} teacher"
        )
    total = 0.0
    for s, t in zip(student_taps, teacher_taps):
        if s.position != t.position:
            raise InputError(f"tap position mismatch: {s.position} vs {t.position}")
        if s.tensor.shape != t.tensor.shape:
            raise InputError(
                f"tap shape mismatch at {s.position}: "
                f"{tuple(s.tensor.shape)} vs {tuple(t.tensor.shape)}"
            )
        total = total + (s.tensor - t.tensor).abs().sum(dim=(1, 2, 3)).mean()
    return total / len(student_taps)


def total_loss(fid, perc, distill, weights):
    """fid + lambda_perceptual * perc + lambda_distill * distill."""
    return fid + weights.lambda_perceptual * perc + weights.lambda_distill * distill
