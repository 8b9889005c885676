"""Speaker embedding table and per-site softsign bias projectors."""

import torch
from torch import nn
from torch.nn import functional as F


class SpeakerEmbeddingTable(nn.Module):
    def __init__(self, n_speakers, dim=32, init_range=0.1):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_speakers, dim).uniform_(-init_range, init_range))

    @property
    def n_speakers(self):
        return self.weight.shape[0]

    def forward(self, speaker_idx):
        idx = torch.as_tensor(speaker_idx, dtype=torch.long, device=self.weight.device)
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.n_speakers):
            raise IndexError(f"speaker index out of range [0, {self.n_speakers})")
        # F.embedding only produces gradient rows for the looked-up indices.
        return F.embedding(idx, self.weight)

    lookup = forward


class SpeakerBias(nn.Module):
    """``softsign(W e + b)``: one instance per injection site, never shared."""

    def __init__(self, embed_dim, channels):
        super().__init__()
        self.proj = nn.Linear(embed_dim, channels)

    def forward(self, embedding):
        return F.softsign(self.proj(embedding))


def speaker_bias(embedding, site):
    return site(embedding)


def speaker_sites(module):
    return [m for m in module.modules() if isinstance(m, SpeakerBias)]


@torch.no_grad()
def zero_speaker_projectors(module):
    """Zero every projector in ``module`` so the speaker has no influence."""
    for site in speaker_sites(module):
        site.proj.weight.zero_()
        site.proj.bias.zero_()
