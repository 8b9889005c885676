"""Synthetic multi-speaker corpus for smoke tests and overfitting runs.

Each character maps to a fixed-length harmonic segment whose pitch depends on
the character and whose fundamental and timbre depend on the speaker. A
short leading silence exercises trimming.
"""

import os

import numpy as np

from msclarinet.config import Hyperparameters
from msclarinet.dsp import write_wav

TOY_TEXTS = ["abc.", "bad.", "cab.", "dace.", "bead."]
TOY_SPEAKERS = {"spk_a": (140.0, 1.0), "spk_b": (260.0, 2.5)}  # f0, harmonic tilt
CHAR_PITCH = {"a": 1.0, "b": 1.25, "c": 1.5, "d": 0.8, "e": 1.12, " ": 0.0, ".": 0.0}


def toy_hparams(**overrides):
    """Reduced configuration used for desk-scale overfitting."""
    base = dict(
        char_embedding_dim=24, encoder_layers=2, encoder_channels=24,
        decoder_prenet_channels=(24, 24), decoder_layers=2, decoder_channels=24,
        attention_channels=24, bridge_layers=2, bridge_channels=24, conditioner_channels=24,
        vocoder_layers=10, vocoder_residual_channels=24, vocoder_skip_channels=24,
        batch_size=4, checkpoint_every=500, log_every=10,
    )
    base.update(overrides)
    return Hyperparameters(**base)


def render(text, f0, tilt, sample_rate=24000, frames_per_char=3, hop=300, lead_silence_s=0.1, amplitude=0.3):
    seg = frames_per_char * hop
    t = np.arange(seg) / sample_rate
    ramp = np.minimum(1.0, np.minimum(np.arange(seg), np.arange(seg)[::-1]) / 60.0)
    parts = [np.zeros(int(lead_silence_s * sample_rate))]
    for ch in text:
        ratio = CHAR_PITCH.get(ch, 1.0)
        if ratio == 0.0:
            parts.append(np.zeros(seg if ch == " " else 4 * hop))
            continue
        f = f0 * ratio
        y = sum(np.sin(2 * np.pi * k * f * t) / k ** (1.0 / tilt) for k in range(1, 6))
        parts.append(amplitude * ramp * y / np.max(np.abs(y)))
    return np.concatenate(parts)


def write_toy_corpus(root, texts=TOY_TEXTS, speakers=TOY_SPEAKERS, sample_rate=24000):
    for spk, (f0, tilt) in speakers.items():
        d = os.path.join(root, spk)
        os.makedirs(d, exist_ok=True)
        for i, text in enumerate(texts):
            write_wav(os.path.join(d, f"{i:03d}.wav"), render(text, f0, tilt, sample_rate), sample_rate)
            with open(os.path.join(d, f"{i:03d}.txt"), "w", encoding="utf-8") as f:
                f.write(text + "\n")
    return root
