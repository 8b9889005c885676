"""Convolutional character encoder and attention decoder.

Gated-linear conv blocks with sqrt(0.5) residual scaling, dot-product
attention with sinusoidal position encodings on queries and keys, and ``r``
mel frames emitted per decoder step.
"""

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from msclarinet.speaker import SpeakerBias

SQRT_HALF = math.sqrt(0.5)


class ConvBlock(nn.Module):
    """Dropout -> conv -> GLU with the speaker bias on the value half -> residual."""

    def __init__(self, channels, width, speaker_dim, dropout=0.0, causal=False):
        super().__init__()
        self.width = width
        self.causal = causal
        self.dropout = dropout
        self.conv = nn.Conv1d(channels, 2 * channels, width)
        std = math.sqrt(4.0 * (1.0 - dropout) / (width * channels))
        nn.init.normal_(self.conv.weight, 0.0, std)
        nn.init.zeros_(self.conv.bias)
        self.speaker = SpeakerBias(speaker_dim, channels)

    def padding(self):
        k = self.width - 1
        return (k, 0) if self.causal else (k // 2, k - k // 2)

    def forward(self, x, speaker_embed):
        # x: [B, C, T]; speaker_embed: [B, D]
        residual = x
        x = F.dropout(x, self.dropout, self.training)
        a, b = self.conv(F.pad(x, self.padding())).chunk(2, dim=1)
        a = a + self.speaker(speaker_embed).unsqueeze(-1)
        return (residual + a * torch.sigmoid(b)) * SQRT_HALF


def sinusoid_encoding(positions, dim, rate):
    """``positions``: float tensor [..., T]; ``rate`` scales the position."""
    i = torch.arange(dim, device=positions.device)
    inv = torch.pow(10000.0, -(2 * (i // 2)).to(positions.dtype) / dim)
    angles = rate * positions.unsqueeze(-1) * inv
    return torch.where(i % 2 == 0, torch.sin(angles), torch.cos(angles))


def lengths_to_mask(lengths, max_len):
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


@dataclass
class EncoderOutput:
    keys: torch.Tensor  # [B, T_char, A]
    values: torch.Tensor  # [B, T_char, A]
    lengths: torch.Tensor  # [B]

    @property
    def mask(self):
        return lengths_to_mask(self.lengths, self.keys.shape[1])


class Encoder(nn.Module):
    def __init__(self, n_vocab, hp):
        super().__init__()
        dropout = hp.dropout
        self.dropout = dropout
        self.embed = nn.Embedding(n_vocab, hp.char_embedding_dim, padding_idx=0)
        nn.init.normal_(self.embed.weight, 0.0, 0.1)
        with torch.no_grad():
            self.embed.weight[0].zero_()
        self.in_proj = nn.Linear(hp.char_embedding_dim, hp.encoder_channels)
        self.blocks = nn.ModuleList([
            ConvBlock(hp.encoder_channels, hp.encoder_conv_width, hp.speaker_embedding_dim, dropout, causal=False)
            for _ in range(hp.encoder_layers)
        ])
        self.key_proj = nn.Linear(hp.encoder_channels, hp.attention_channels)
        self.embed_proj = nn.Linear(hp.char_embedding_dim, hp.attention_channels)

    def forward(self, chars, lengths, speaker_embed):
        mask = lengths_to_mask(lengths, chars.shape[1]).unsqueeze(1).to(self.in_proj.weight.dtype)
        emb = self.embed(chars)
        x = self.in_proj(F.dropout(emb, self.dropout, self.training)).transpose(1, 2) * mask
        for block in self.blocks:
            # keep padded positions at zero so results do not depend on batch padding
            x = block(x, speaker_embed) * mask
        keys = self.key_proj(x.transpose(1, 2))
        values = (keys + self.embed_proj(emb)) * SQRT_HALF
        return EncoderOutput(keys, values, lengths)


class Attention(nn.Module):
    def __init__(self, query_dim, att_dim):
        super().__init__()
        self.att_dim = att_dim
        self.query_proj = nn.Linear(query_dim, att_dim)
        self.key_proj = nn.Linear(att_dim, att_dim)
        self.value_proj = nn.Linear(att_dim, att_dim)
        self.out_proj = nn.Linear(att_dim, query_dim)

    def logits(self, query, keys):
        q = self.query_proj(query)
        k = self.key_proj(keys)
        return q @ k.transpose(1, 2) / math.sqrt(self.att_dim)

    def attend(self, logits, enc, values):
        logits = logits.masked_fill(~enc.mask.unsqueeze(1), float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        context = weights @ self.value_proj(values)
        context = context / torch.sqrt(enc.lengths.to(context.dtype)).view(-1, 1, 1)
        return self.out_proj(context), weights


def monotonic_inference_constraint(logits, prev_argmax, window=3):
    """Mask logits outside ``[prev_argmax, prev_argmax + window]`` to -inf.

    Works on the last axis; the result still normalises under softmax because
    ``prev_argmax`` itself is always kept.
    """
    n = logits.shape[-1]
    pos = torch.arange(n, device=logits.device)
    keep = (pos >= prev_argmax) & (pos <= prev_argmax + window)
    return logits.masked_fill(~keep, float("-inf"))


@dataclass
class AttentionState:
    rows: List[np.ndarray] = field(default_factory=list)
    argmaxes: List[int] = field(default_factory=list)

    def append(self, row):
        row = np.asarray(row, dtype=np.float64)
        self.rows.append(row)
        self.argmaxes.append(int(np.argmax(row)))

    @property
    def last_argmax(self):
        return self.argmaxes[-1] if self.argmaxes else 0

    @property
    def weights(self):
        return np.stack(self.rows) if self.rows else np.zeros((0, 0))


def stop_decision(att, last_char_index, patience_steps=2, max_steps=None):
    """True once the attention argmax sat on the final character for
    ``patience_steps`` consecutive steps, or ``max_steps`` rows exist."""
    if not att.argmaxes:
        raise ValueError("no attention rows yet")
    if max_steps is not None and len(att.argmaxes) >= max_steps:
        return True
    tail = att.argmaxes[-patience_steps:]
    return len(tail) == patience_steps and all(a == last_char_index for a in tail)


@dataclass
class DecoderOutput:
    mel_pred: torch.Tensor  # [B, T_dec, r * n_bands]
    hidden: torch.Tensor  # [B, T_dec, C]
    attention: torch.Tensor  # [B, T_dec, T_char]


@dataclass
class DecoderState:
    inputs: List[torch.Tensor] = field(default_factory=list)  # each [B, r * n_bands]
    attention: AttentionState = field(default_factory=AttentionState)


class Decoder(nn.Module):
    def __init__(self, hp):
        super().__init__()
        self.r = hp.reduction_factor
        self.n_bands = hp.n_mel_bands
        self.dropout = hp.dropout
        self.positional_weight = hp.positional_weight
        self.query_rate = hp.query_position_rate
        self.key_rate = nn.Parameter(torch.tensor(float(hp.positional_initial_rate)))
        dims = [self.r * self.n_bands] + list(hp.decoder_prenet_channels)
        self.prenet = nn.ModuleList([nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:])])
        if dims[-1] != hp.decoder_channels:
            self.prenet_out = nn.Linear(dims[-1], hp.decoder_channels)
        else:
            self.prenet_out = nn.Identity()
        self.blocks = nn.ModuleList([
            ConvBlock(hp.decoder_channels, hp.decoder_conv_width, hp.speaker_embedding_dim, hp.dropout, causal=True)
            for _ in range(hp.decoder_layers)
        ])
        self.attention = Attention(hp.decoder_channels, hp.attention_channels)
        self.mel_head = nn.Linear(hp.decoder_channels, self.r * self.n_bands)

    def _queries(self, inputs, speaker_embed):
        x = inputs
        for layer in self.prenet:
            x = F.dropout(F.relu(layer(x)), self.dropout, self.training)
        x = self.prenet_out(x).transpose(1, 2)
        for block in self.blocks:
            x = block(x, speaker_embed)
        return x.transpose(1, 2)  # [B, T_dec, C]

    def _positional_keys(self, enc):
        t_char = enc.keys.shape[1]
        pos = torch.arange(1, t_char + 1, dtype=enc.keys.dtype, device=enc.keys.device)
        pe = sinusoid_encoding(pos, enc.keys.shape[-1], self.key_rate)
        return enc.keys + self.positional_weight * pe

    def _positional_query(self, h, first_position=1):
        pos = torch.arange(first_position, first_position + h.shape[1], dtype=h.dtype, device=h.device)
        return h + self.positional_weight * sinusoid_encoding(pos, h.shape[-1], self.query_rate)

    def forward(self, enc, inputs, speaker_embed):
        """Teacher-forced pass; ``inputs[:, t]`` is the mel group preceding step t."""
        h = self._queries(inputs, speaker_embed)
        logits = self.attention.logits(self._positional_query(h), self._positional_keys(enc))
        ctx, weights = self.attention.attend(logits, enc, enc.values)
        hidden = (h + ctx) * SQRT_HALF
        return DecoderOutput(self.mel_head(hidden), hidden, weights)

    def step(self, prev_mel_group, enc, state, speaker_embed, step_index, window=None):
        """One autoregressive step; returns ``(mel_group, hidden, state)``.

        With ``window`` set, the attention row is restricted to
        ``[last_argmax, last_argmax + window]``.
        """
        state.inputs.append(prev_mel_group)
        inputs = torch.stack(state.inputs, dim=1)
        h = self._queries(inputs, speaker_embed)[:, -1:]
        logits = self.attention.logits(self._positional_query(h, step_index + 1), self._positional_keys(enc))
        if window is not None:
            logits = monotonic_inference_constraint(logits, state.attention.last_argmax, window)
        ctx, weights = self.attention.attend(logits, enc, enc.values)
        hidden = (h + ctx) * SQRT_HALF
        state.attention.append(weights[0, 0].detach().cpu().numpy())
        return self.mel_head(hidden)[:, 0], hidden[:, 0], state


def shift_mel_groups(mels, r):
    """[B, F, n] target -> [B, F / r, r * n] decoder inputs (zero group first)."""
    B, n_frames, n = mels.shape
    groups = mels.reshape(B, n_frames // r, r * n)
    return torch.cat([torch.zeros_like(groups[:, :1]), groups[:, :-1]], dim=1)


def masked_l1(pred, target, mask):
    """Mean absolute error over frames where ``mask`` is set ([B, F] mask)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    m = mask.unsqueeze(-1).expand_as(pred)
    count = m.sum()
    if count == 0:
        raise ValueError("fully masked batch")
    return ((pred - target).abs() * m).sum() / count


decoder_l1_loss = masked_l1
