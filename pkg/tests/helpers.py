"""Shared test helpers."""

import numpy as np
import torch

from msclarinet.config import Hyperparameters, SpeakerRegistry, UtteranceRecord
from msclarinet.dsp import ProcessedUtterance, make_batch
from msclarinet.text import DEFAULT_CHARSET


def tiny_hparams(**overrides):
    """2 layers, 8 channels everywhere; dropout off so losses are deterministic."""
    base = dict(
        speaker_embedding_dim=4, char_embedding_dim=8, encoder_layers=2, encoder_channels=8,
        decoder_prenet_channels=(8, 8), decoder_layers=2, decoder_channels=8, attention_channels=8,
        bridge_layers=2, bridge_channels=8, conditioner_channels=8,
        vocoder_layers=2, vocoder_cycle_length=2, vocoder_residual_channels=8, vocoder_skip_channels=8,
        dropout_keep_prob=1.0,
    )
    base.update(overrides)
    return Hyperparameters(**base)


def random_items(hp, frames=(5, 7), texts=("ab cd.", "hello."), speakers=("s0", "s1"), seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for i, (n, text, spk) in enumerate(zip(frames, texts, speakers)):
        mel = rng.normal(-4.0, 1.0, size=(n, hp.n_mel_bands)).astype(np.float32)
        audio = (0.3 * rng.standard_normal(n * hp.hop_length_samples)).astype(np.float32)
        items.append(ProcessedUtterance(UtteranceRecord(f"u{i}", spk, text, ""), mel, audio))
    return items


def random_batch(hp, dtype=torch.float64, **kw):
    items = random_items(hp, **kw)
    registry = SpeakerRegistry.from_ids(it.record.speaker_id for it in items)
    return make_batch(items, registry, DEFAULT_CHARSET, hp).to(dtype)


def central_difference(f, tensor, index, h=1e-6):
    """Central finite difference of scalar ``f()`` w.r.t. ``tensor[index]`` (in place)."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        fp = float(f())
        tensor[index] = orig - h
        fm = float(f())
        tensor[index] = orig
    return (fp - fm) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)
