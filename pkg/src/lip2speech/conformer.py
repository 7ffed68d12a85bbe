"""Stride-free conformer encoder shared by the lip encoder and the ASR."""
import math

import torch
from torch import nn


def lengths_to_mask(lengths, max_len):
    """Boolean (B, max_len) mask, True on valid frames."""
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def sinusoidal_positions(length, dim, dtype=torch.float32):
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    inv = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)[:, : dim // 2]
    return pe.to(dtype)


class FeedForward(nn.Module):
    def __init__(self, dim, mult=4, dropout=0.1):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim * mult),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(dim * mult, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    # LayerNorm replaces the usual BatchNorm so padded frames never leak into statistics
    def __init__(self, dim, kernel_size, dropout=0.1):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        y = self.norm(x).transpose(1, 2)
        y = nn.functional.glu(self.pointwise_in(y), dim=1)
        y = y * mask[:, None, :]
        y = self.depthwise(y)
        y = nn.functional.silu(self.mid_norm(y.transpose(1, 2))).transpose(1, 2)
        y = self.pointwise_out(y).transpose(1, 2)
        return self.dropout(y)


class ConformerBlock(nn.Module):
    """Half-step FFN, self-attention, convolution, half-step FFN, LayerNorm."""

    def __init__(self, dim, heads, kernel_size, ff_mult=4, dropout=0.1):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("conformer kernel size must be odd")
        self.ff1 = FeedForward(dim, ff_mult, dropout)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.attn_dropout = nn.Dropout(dropout)
        self.conv = ConvModule(dim, kernel_size, dropout)
        self.ff2 = FeedForward(dim, ff_mult, dropout)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x, mask):
        x = x + 0.5 * self.ff1(x)
        y = self.attn_norm(x)
        y, _ = self.attn(y, y, y, key_padding_mask=~mask, need_weights=False)
        x = x + self.attn_dropout(y)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class Conformer(nn.Module):
    def __init__(self, in_dim, dim, layers, heads, kernel_size, ff_mult=4, dropout=0.1):
        super().__init__()
        self.in_norm = nn.LayerNorm(in_dim)
        self.proj = nn.Linear(in_dim, dim)
        self.dim = dim
        self.xscale = math.sqrt(dim)
        self.blocks = nn.ModuleList(
            ConformerBlock(dim, heads, kernel_size, ff_mult, dropout) for _ in range(layers)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, lengths):
        """(B, T, in_dim) -> (B, T, dim); padded frames are zeroed on output."""
        B, T, _ = x.shape
        mask = lengths_to_mask(lengths, T)
        x = self.proj(self.in_norm(x)) * self.xscale + sinusoidal_positions(T, self.dim, x.dtype)[None]
        x = self.dropout(x)
        for block in self.blocks:
            x = block(x, mask)
        return x * mask[..., None]
