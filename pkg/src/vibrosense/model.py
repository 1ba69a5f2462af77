"""The Vibration Transformer.

Per point, a 2 x 4800 magnitude feature is cut into 48 bands of 2 x 100
coefficients, each projected to a token and tagged with a learned band
embedding. A shared PointTransformer summarizes the bands into a prepended
[pnt] token. The ShapeTransformer then attends across the points' [pnt]
summaries (plus a learned grid-position embedding each) into a [cls] token,
which feeds a container-class head and a fill-level head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ordinal import L_STANDARD, expect_estimate, map_estimate

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers_point: int = 2
    n_layers_shape: int = 2
    n_heads: int = 4
    token_bins: int = 100
    n_tokens: int = 48
    n_points: int = 3
    k_cont: int = 8
    n_levels: int = 6
    head_hidden: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_levels != len(L_STANDARD):
            raise ValueError(f"n_levels must be {len(L_STANDARD)}")

    @property
    def grid_size(self) -> int:
        return self.token_bins * self.n_tokens

    @classmethod
    def full_scale(cls, k_cont: int) -> "ModelConfig":
        return cls(d_model=512, n_layers_point=8, n_layers_shape=8, n_heads=4, k_cont=k_cont)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PredictionResult:
    class_logits: np.ndarray
    level_probs: np.ndarray
    l_map: float
    l_exp: float


class EncoderLayer(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x)) with GELU."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, 4 * d_model)
        self.ff2 = nn.Linear(4 * d_model, d_model)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.norm1(x)).split(d, dim=-1)
        q = q.view(b, n, h, d // h).transpose(1, 2)
        k = k.view(b, n, h, d // h).transpose(1, 2)
        v = v.view(b, n, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if key_mask is not None:
            # True = drop; masked keys get exactly zero weight
            scores = scores.masked_fill(key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


def _head(d_model: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_model, hidden), nn.GELU(), nn.Linear(hidden, out))


class VibrationTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        d = c.d_model
        self.tokenizer = nn.Linear(2 * c.token_bins, d)
        self.freq_pos = nn.Parameter(torch.empty(c.n_tokens, d))
        self.pnt_token = nn.Parameter(torch.empty(d))
        self.point_layers = nn.ModuleList(
            EncoderLayer(d, c.n_heads) for _ in range(c.n_layers_point)
        )
        self.point_norm = nn.LayerNorm(d)
        self.grid_pos = nn.Parameter(torch.empty(c.n_points, d))
        self.cls_token = nn.Parameter(torch.empty(d))
        self.shape_layers = nn.ModuleList(
            EncoderLayer(d, c.n_heads) for _ in range(c.n_layers_shape)
        )
        self.shape_norm = nn.LayerNorm(d)
        self.class_head = _head(d, c.head_hidden, c.k_cont)
        self.level_head = _head(d, c.head_hidden, c.n_levels)
        self.to(DTYPE)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                elif ".norm" in name or name.startswith(("point_norm", "shape_norm")):
                    p.fill_(1.0)
                else:
                    std = 0.02
                    if name.endswith(("proj.weight", "ff2.weight")):
                        layers = self.config.n_layers_point if name.startswith("point") else self.config.n_layers_shape
                        std *= 1.0 / math.sqrt(2 * max(layers, 1))
                    p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) * std)

    # -------------------------------------------------------------- stages

    def tokenize(self, feats: torch.Tensor) -> torch.Tensor:
        """``(..., 2, n_tokens*token_bins)`` -> ``(..., n_tokens, d_model)``."""
        c = self.config
        if feats.shape[-2:] != (2, c.grid_size):
            raise ValueError(f"feature shape {tuple(feats.shape[-2:])} != (2, {c.grid_size})")
        lead = feats.shape[:-2]
        bands = feats.reshape(*lead, 2, c.n_tokens, c.token_bins).transpose(-3, -2)
        bands = bands.reshape(*lead, c.n_tokens, 2 * c.token_bins)
        return self.tokenizer(bands) + self.freq_pos

    def point_forward(self, tokens: torch.Tensor, token_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``(B, n_tokens, d)`` -> [pnt] embedding ``(B, d)``; ``token_mask`` True drops a token."""
        b = tokens.shape[0]
        x = torch.cat([self.pnt_token.expand(b, 1, -1), tokens], dim=1)
        mask = None
        if token_mask is not None:
            mask = torch.cat([torch.zeros(b, 1, dtype=torch.bool), token_mask], dim=1)
        for layer in self.point_layers:
            x = layer(x, mask)
        return self.point_norm(x[:, 0])

    def shape_forward(self, pnt: torch.Tensor, point_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``(B, n_points, d)`` -> [cls] embedding ``(B, d)``; ``point_mask`` True drops a point."""
        b, n, _ = pnt.shape
        if n != self.config.n_points:
            raise ValueError(f"expected {self.config.n_points} points, got {n}")
        x = torch.cat([self.cls_token.expand(b, 1, -1), pnt + self.grid_pos], dim=1)
        mask = None
        if point_mask is not None:
            mask = torch.cat([torch.zeros(b, 1, dtype=torch.bool), point_mask], dim=1)
        for layer in self.shape_layers:
            x = layer(x, mask)
        return self.shape_norm(x[:, 0])

    def embed(self, feats, token_mask=None, point_mask=None) -> torch.Tensor:
        """``feats`` ``(B, n_points, 2, F)`` -> [cls] ``(B, d)``."""
        b, n = feats.shape[:2]
        tokens = self.tokenize(feats).reshape(b * n, self.config.n_tokens, -1)
        tm = None if token_mask is None else token_mask.reshape(b * n, -1)
        pnt = self.point_forward(tokens, tm).reshape(b, n, -1)
        return self.shape_forward(pnt, point_mask)

    def forward(self, feats, token_mask=None, point_mask=None):
        cls = self.embed(feats, token_mask, point_mask)
        return self.class_head(cls), self.level_head(cls)

    def n_parameters(self) -> dict[str, int]:
        point = sum(p.numel() for n, p in self.named_parameters() if n.startswith(("point_", "pnt_")))
        shape = sum(
            p.numel() for n, p in self.named_parameters() if n.startswith(("shape_", "cls_", "grid_pos"))
        )
        total = sum(p.numel() for p in self.parameters())
        return {"point_transformer": point, "shape_transformer": shape, "total": total}


def build_model(config: ModelConfig, seed: int = 0) -> VibrationTransformer:
    m = VibrationTransformer(config)
    m.reset_parameters(seed)
    return m


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


@torch.no_grad()
def predict(model: VibrationTransformer, feats, point_mask=None) -> list[PredictionResult]:
    """Evaluation-mode forward over preprocessed features ``(B, n_points, 2, F)``."""
    model.eval()
    x = as_tensor(feats)
    if x.ndim == 3:
        x = x[None]
    cl, ll = model(x, point_mask=point_mask)
    probs = torch.softmax(ll, dim=-1).numpy()
    return [
        PredictionResult(
            class_logits=cl[i].numpy().copy(),
            level_probs=probs[i].copy(),
            l_map=map_estimate(probs[i]),
            l_exp=expect_estimate(probs[i]),
        )
        for i in range(x.shape[0])
    ]
