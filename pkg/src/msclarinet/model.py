"""The full text-to-wave model."""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from msclarinet.bridge import BridgeNet
from msclarinet.seq2seq import Decoder, DecoderState, Encoder, masked_l1, shift_mel_groups, stop_decision
from msclarinet.speaker import SpeakerEmbeddingTable
from msclarinet.text import DEFAULT_CHARSET, normalize_and_encode_text
from msclarinet.vocoder import WaveNet, gaussian_nll, shift_right

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component, value):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


@dataclass
class LossBreakdown:
    decoder_l1: torch.Tensor
    bridge_l1: torch.Tensor
    vocoder_nll: torch.Tensor

    @property
    def total(self):
        return self.decoder_l1 + self.bridge_l1 + self.vocoder_nll

    def as_floats(self):
        out = {k: float(getattr(self, k).detach()) for k in ("decoder_l1", "bridge_l1", "vocoder_nll")}
        out["total"] = float(self.total.detach())
        return out


@dataclass
class SynthesisResult:
    audio: np.ndarray
    decoder_steps: int
    final_argmax: int
    stopped: bool  # False when the step cap ended decoding
    attention: np.ndarray
    normalized_text: str


class MultiSpeakerClariNet(nn.Module):
    def __init__(self, hp, n_speakers, charset=DEFAULT_CHARSET):
        super().__init__()
        self.hp = hp
        self.charset = list(charset)
        self.speaker_table = SpeakerEmbeddingTable(n_speakers, hp.speaker_embedding_dim)
        self.encoder = Encoder(len(self.charset), hp)
        self.decoder = Decoder(hp)
        self.bridge = BridgeNet(hp)
        self.vocoder = WaveNet(hp)

    @property
    def n_speakers(self):
        return self.speaker_table.n_speakers

    def parameter_groups(self):
        """Parameter names grouped by component; speaker projectors in their own group."""
        groups = {"embeddings": [], "projectors": [], "encoder": [], "decoder": [], "bridge": [], "vocoder": []}
        for name, _ in self.named_parameters():
            if name.startswith("speaker_table"):
                groups["embeddings"].append(name)
            elif "speaker" in name:
                groups["projectors"].append(name)
            else:
                groups[name.split(".", 1)[0]].append(name)
        return groups

    def forward(self, batch):
        """Teacher-forced pass over every component.

        Returns a dict with decoder/bridge mel predictions ([B, F, n_bands]),
        attention weights and the vocoder Gaussian parameters.
        """
        hp = self.hp
        spk = self.speaker_table(batch.speakers)
        enc = self.encoder(batch.chars, batch.char_lengths, spk)
        dec = self.decoder(enc, shift_mel_groups(batch.mels, hp.reduction_factor), spk)
        B, T_dec, _ = dec.mel_pred.shape
        mel_pred = dec.mel_pred.reshape(B, T_dec * hp.reduction_factor, hp.n_mel_bands)
        fh, bridge_mel, cond = self.bridge(dec.hidden, spk, batch.mel_mask)
        params = self.vocoder(shift_right(batch.audio), cond, spk)
        return {"mel_pred": mel_pred, "bridge_mel": bridge_mel, "attention": dec.attention,
                "frame_hidden": fh, "conditioner": cond, "params": params}

    def joint_loss(self, batch, return_outputs=False):
        out = self.forward(batch)
        losses = LossBreakdown(
            decoder_l1=masked_l1(out["mel_pred"], batch.mels, batch.mel_mask),
            bridge_l1=masked_l1(out["bridge_mel"], batch.mels, batch.mel_mask),
            vocoder_nll=gaussian_nll(out["params"], batch.audio, batch.audio_mask),
        )
        check_finite(losses)
        return (losses, out) if return_outputs else losses

    @torch.no_grad()
    def decode(self, char_ids, speaker_idx, max_steps=None):
        """Autoregressive mel decoding with the windowed monotonic constraint.

        Stops once the attention argmax has rested on the final character
        (the period) for ``stop_patience`` steps.
        """
        hp = self.hp
        dtype = self.decoder.mel_head.weight.dtype
        chars = torch.as_tensor([char_ids], dtype=torch.long)
        lengths = torch.tensor([len(char_ids)])
        spk = self.speaker_table(torch.tensor([speaker_idx]))
        enc = self.encoder(chars, lengths, spk)
        if max_steps is None:
            max_steps = hp.max_decoder_steps_per_char * len(char_ids)
        last = len(char_ids) - 1
        state = DecoderState()
        prev = torch.zeros(1, hp.reduction_factor * hp.n_mel_bands, dtype=dtype)
        mels, hiddens = [], []
        stopped = False
        for t in range(max_steps):
            prev, hidden, state = self.decoder.step(prev, enc, state, spk, t, window=hp.attention_window)
            mels.append(prev)
            hiddens.append(hidden)
            if stop_decision(state.attention, last, hp.stop_patience):
                stopped = True
                break
        return torch.stack(mels, dim=1), torch.stack(hiddens, dim=1), state, stopped

    @torch.no_grad()
    def synthesize(self, text, speaker_idx, seed=0, temperature=None):
        if not 0 <= speaker_idx < self.n_speakers:
            raise IndexError(f"speaker index {speaker_idx} out of range")
        was_training = self.training
        self.eval()
        try:
            seq = normalize_and_encode_text(text, self.charset)
            mels, hidden, state, stopped = self.decode(seq.ids, speaker_idx)
            if not stopped:
                logger.warning("decoder hit the step cap without reaching the final character")
            spk = self.speaker_table(torch.tensor([speaker_idx]))
            fh = self.bridge.conv_forward(hidden, spk)
            cond = self.bridge.upsample(fh, spk)
            if temperature is None:
                temperature = self.hp.sampling_temperature
            audio = self.vocoder.sample_incremental(cond, spk, temperature=temperature, seed=seed)
        finally:
            self.train(was_training)
        steps = hidden.shape[1]
        assert audio.shape[1] == steps * self.hp.reduction_factor * self.hp.hop_length_samples
        return SynthesisResult(audio[0].cpu().numpy(), steps, state.attention.last_argmax, stopped,
                               state.attention.weights, seq.normalized_text)


def check_finite(losses):
    for name in ("decoder_l1", "bridge_l1", "vocoder_nll"):
        value = getattr(losses, name)
        if not math.isfinite(float(value.detach())):
            raise NonFiniteLossError(name, float(value.detach()))


def joint_loss(batch, model):
    return model.joint_loss(batch)
