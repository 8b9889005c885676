"""Gaussian autoregressive WaveNet with per-layer speaker bias."""

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from msclarinet.config import dilation_schedule
from msclarinet.speaker import SpeakerBias

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianFrameParams:
    mu: torch.Tensor  # [B, T]
    log_sigma: torch.Tensor  # [B, T], already floored


class ResidualLayer(nn.Module):
    """Width-2 dilated causal conv + GAU, computed time-major as two matmuls."""

    def __init__(self, residual_channels, skip_channels, cond_channels, dilation, speaker_dim):
        super().__init__()
        self.dilation = dilation
        R = residual_channels
        self.tap_past = nn.Linear(R, 2 * R, bias=False)  # weight on x[t - dilation]
        self.tap_now = nn.Linear(R, 2 * R)  # weight on x[t]
        self.cond = nn.Linear(cond_channels, 2 * R, bias=False)
        # one projector covers both the filter and the gate half
        self.speaker = SpeakerBias(speaker_dim, 2 * R)
        self.res = nn.Linear(R, R)
        self.skip = nn.Linear(R, skip_channels)

    def forward(self, x, cond, speaker_embed):
        # x: [B, T, R]; cond: [B, T, C]
        past = F.pad(x, (0, 0, self.dilation, 0))[:, :x.shape[1]]
        z = self.tap_past(past) + self.tap_now(x) + self.cond(cond)
        z = z + self.speaker(speaker_embed).unsqueeze(1)
        f, g = z.chunk(2, dim=-1)
        h = torch.tanh(f) * torch.sigmoid(g)
        return (x + self.res(h)) * math.sqrt(0.5), self.skip(h)


class WaveNet(nn.Module):
    def __init__(self, hp):
        super().__init__()
        R, S = hp.vocoder_residual_channels, hp.vocoder_skip_channels
        D = hp.speaker_embedding_dim
        self.log_sigma_floor = hp.log_sigma_floor
        self.dilations = dilation_schedule(hp.vocoder_layers, hp.vocoder_cycle_length)
        self.input_conv = nn.Linear(1, R)
        self.layers = nn.ModuleList([
            ResidualLayer(R, S, hp.conditioner_channels, d, D) for d in self.dilations
        ])
        self.head_speaker1 = SpeakerBias(D, S)
        self.head1 = nn.Linear(S, S)
        self.head_speaker2 = SpeakerBias(D, S)
        self.head2 = nn.Linear(S, 2)

    @property
    def receptive_field(self):
        return sum(self.dilations) + 1

    def _head(self, skip, speaker_embed):
        # skip: [B, T, S] -> mu, raw log sigma [B, T]
        z = F.relu(skip)
        z = self.head1(z + self.head_speaker1(speaker_embed).unsqueeze(1))
        z = F.relu(z)
        out = self.head2(z + self.head_speaker2(speaker_embed).unsqueeze(1))
        return out[..., 0], out[..., 1]

    def forward_raw(self, x_shifted, cond, speaker_embed):
        """Returns ``(mu, raw_log_sigma)`` without the floor."""
        if x_shifted.shape[-1] != cond.shape[-1]:
            raise ValueError(f"input length {x_shifted.shape[-1]} != conditioner length {cond.shape[-1]}")
        x = self.input_conv(x_shifted.unsqueeze(-1))
        cond = cond.transpose(1, 2)
        skip = 0
        for layer in self.layers:
            x, s = layer(x, cond, speaker_embed)
            skip = skip + s
        skip = skip * math.sqrt(1.0 / len(self.layers))
        return self._head(skip, speaker_embed)

    def forward(self, x_shifted, cond, speaker_embed):
        mu, raw = self.forward_raw(x_shifted, cond, speaker_embed)
        return GaussianFrameParams(mu, clamp_log_sigma(raw, self.log_sigma_floor))

    @torch.no_grad()
    def sample_incremental(self, cond, speaker_embed, temperature=1.0, seed=0, return_params=False):
        """Sample one waveform per batch row with per-layer ring-buffer caches.

        ``cond``: [B, C, N]. Each step costs O(layers) regardless of N.
        """
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        B, _, N = cond.shape
        dtype, device = cond.dtype, cond.device
        gen = torch.Generator(device="cpu").manual_seed(int(seed))
        noise = torch.randn(N, B, generator=gen, dtype=torch.float64).to(dtype)

        caches = []
        cond_terms = []
        cond_t = cond.transpose(1, 2)
        for layer in self.layers:
            R = layer.res.in_features
            caches.append(torch.zeros(layer.dilation, B, R, dtype=dtype, device=device))
            bias = layer.speaker(speaker_embed).unsqueeze(1)
            cond_terms.append((layer.cond(cond_t) + bias).transpose(0, 1).contiguous())  # [N, B, 2R]
        head_b1 = self.head_speaker1(speaker_embed)
        head_b2 = self.head_speaker2(speaker_embed)
        scale = math.sqrt(1.0 / len(self.layers))
        half = math.sqrt(0.5)

        out = torch.zeros(B, N, dtype=dtype, device=device)
        mus = torch.zeros(B, N, dtype=dtype, device=device)
        log_sigmas = torch.zeros(B, N, dtype=dtype, device=device)
        prev = torch.zeros(B, dtype=dtype, device=device)
        for t in range(N):
            x = self.input_conv(prev.unsqueeze(1))  # [B, R]
            skip = 0
            for i, layer in enumerate(self.layers):
                buf = caches[i]
                slot = t % layer.dilation
                # ring buffer slot holds the layer input from t - dilation
                z = layer.tap_past(buf[slot]) + layer.tap_now(x) + cond_terms[i][t]
                buf[slot] = x
                f, g = z.chunk(2, dim=1)
                h = torch.tanh(f) * torch.sigmoid(g)
                skip = skip + layer.skip(h)
                x = (x + layer.res(h)) * half
            z = F.relu(skip * scale)
            z = F.relu(self.head1(z + head_b1))
            o = self.head2(z + head_b2)
            mu = o[:, 0]
            log_sigma = clamp_log_sigma(o[:, 1], self.log_sigma_floor)
            sample = torch.clamp(mu + temperature * torch.exp(log_sigma) * noise[t], -1.0, 1.0)
            out[:, t] = sample
            mus[:, t] = mu
            log_sigmas[:, t] = log_sigma
            prev = sample
        if return_params:
            return out, GaussianFrameParams(mus, log_sigmas)
        return out


def clamp_log_sigma(raw, floor=-7.0):
    # hard clamp: zero gradient wherever the floor is active
    return torch.clamp(raw, min=floor)


def shift_right(x):
    """Delay a [B, T] waveform by one sample (first input 0)."""
    return F.pad(x, (1, 0))[:, :-1]


def gaussian_nll(params, target, mask=None):
    """Mean over masked samples of ``0.5 ln 2pi + log s + (x - mu)^2 / (2 s^2)``."""
    if params.mu.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(params.mu.shape)} vs {tuple(target.shape)}")
    ls = params.log_sigma
    nll = HALF_LOG_2PI + ls + 0.5 * ((target - params.mu) * torch.exp(-ls)) ** 2
    if mask is None:
        return nll.mean()
    count = mask.sum()
    if count == 0:
        raise ValueError("empty mask")
    return (nll * mask).sum() / count


def dilation_receptive_field(dilations):
    return sum(dilations) + 1
