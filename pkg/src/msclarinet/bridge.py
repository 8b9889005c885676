"""Bridge-net: non-causal frame-level convs plus transposed-conv upsampling."""

import torch
from torch import nn
from torch.nn import functional as F

from msclarinet.seq2seq import ConvBlock
from msclarinet.speaker import SpeakerBias


class UpsampleBlock(nn.Module):
    """Gated transposed convolution, kernel ``2 * stride``, exact ``x stride`` length.

    Inputs are replicate-padded by one frame on each side so every output
    sample is covered by exactly two kernel taps, then the result is cropped
    to ``T * stride`` samples.
    """

    def __init__(self, in_channels, out_channels, stride, speaker_dim):
        super().__init__()
        self.stride = stride
        self.out_channels = out_channels
        self.deconv = nn.ConvTranspose1d(in_channels, 2 * out_channels, 2 * stride, stride=stride)
        self.speaker = SpeakerBias(speaker_dim, out_channels)

    def forward(self, x, speaker_embed):
        T = x.shape[-1]
        s = self.stride
        y = self.deconv(F.pad(x, (1, 1), mode="replicate"))
        start = s + s // 2
        y = y[..., start:start + T * s]
        a, b = y.chunk(2, dim=1)
        a = a + self.speaker(speaker_embed).unsqueeze(-1)
        return a * torch.sigmoid(b)


class BridgeNet(nn.Module):
    def __init__(self, hp):
        super().__init__()
        self.r = hp.reduction_factor
        frame_dim = hp.decoder_channels // hp.reduction_factor
        self.in_proj = nn.Linear(frame_dim, hp.bridge_channels)
        self.blocks = nn.ModuleList([
            ConvBlock(hp.bridge_channels, hp.bridge_conv_width, hp.speaker_embedding_dim, hp.dropout, causal=False)
            for _ in range(hp.bridge_layers)
        ])
        self.mel_head = nn.Linear(hp.bridge_channels, hp.n_mel_bands)
        ups = []
        ch = hp.bridge_channels
        for s in hp.upsample_strides:
            ups.append(UpsampleBlock(ch, hp.conditioner_channels, s, hp.speaker_embedding_dim))
            ch = hp.conditioner_channels
        self.upsample_blocks = nn.ModuleList(ups)

    def frames_from_decoder(self, decoder_hidden):
        """[B, T_dec, C] -> [B, T_dec * r, C / r]."""
        B, T, C = decoder_hidden.shape
        return decoder_hidden.reshape(B, T * self.r, C // self.r)

    def conv_forward(self, decoder_hidden, speaker_embed, frame_mask=None):
        """Decoder hidden states -> frame hidden [B, F, bridge_channels]."""
        x = self.in_proj(self.frames_from_decoder(decoder_hidden)).transpose(1, 2)
        m = None if frame_mask is None else frame_mask.unsqueeze(1).to(x.dtype)
        if m is not None:
            x = x * m
        for block in self.blocks:
            x = block(x, speaker_embed)
            if m is not None:
                x = x * m
        return x.transpose(1, 2)

    def aux_mel(self, frame_hidden):
        return self.mel_head(frame_hidden)

    def upsample(self, frame_hidden, speaker_embed):
        """[B, F, C] -> sample-level conditioner [B, cond_channels, F * hop]."""
        x = frame_hidden.transpose(1, 2)
        for block in self.upsample_blocks:
            x = block(x, speaker_embed)
        return x

    def forward(self, decoder_hidden, speaker_embed, frame_mask=None):
        fh = self.conv_forward(decoder_hidden, speaker_embed, frame_mask)
        return fh, self.aux_mel(fh), self.upsample(fh, speaker_embed)
