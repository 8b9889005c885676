"""Hyperparameters, config files and the dataset manifest."""

import dataclasses
import logging
import os
from dataclasses import dataclass, field, fields
from typing import List, Tuple

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    # audio / features
    sample_rate_hz: int = 24000
    fft_size: int = 2048
    win_length_samples: int = 1200
    hop_length_samples: int = 300
    n_mel_bands: int = 80
    mel_fmin_hz: float = 0.0
    mel_fmax_hz: float = 12000.0
    log_floor: float = 1e-5
    silence_threshold_db: float = -40.0
    silence_frame_ms: float = 20.0

    # text / seq2seq
    reduction_factor: int = 4
    speaker_embedding_dim: int = 32
    char_embedding_dim: int = 256
    encoder_layers: int = 7
    encoder_conv_width: int = 5
    encoder_channels: int = 128
    decoder_prenet_channels: Tuple[int, ...] = (128, 256)
    decoder_layers: int = 6
    decoder_conv_width: int = 5
    decoder_channels: int = 256
    attention_channels: int = 256
    positional_weight: float = 0.1
    positional_initial_rate: float = 7.6
    query_position_rate: float = 1.0
    attention_window: int = 3
    stop_patience: int = 2
    max_decoder_steps_per_char: int = 20

    # bridge-net
    bridge_layers: int = 6
    bridge_conv_width: int = 5
    bridge_channels: int = 256
    upsample_strides: Tuple[int, ...] = (15, 20)
    conditioner_channels: int = 80

    dropout_keep_prob: float = 0.95

    # vocoder
    vocoder_layers: int = 20
    vocoder_cycle_length: int = 10
    vocoder_residual_channels: int = 64
    vocoder_skip_channels: int = 128
    log_sigma_floor: float = -7.0
    sampling_temperature: float = 1.0

    # optimisation
    batch_size: int = 16
    lr_initial: float = 0.001
    lr_anneal_start_step: int = 500000
    lr_anneal_period: int = 200000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 100.0
    grad_clip_value: float = 5.0
    checkpoint_every: int = 1000
    log_every: int = 10

    def __post_init__(self):
        for f in fields(self):
            if f.type in (Tuple[int, ...], "Tuple[int, ...]"):
                object.__setattr__(self, f.name, tuple(int(v) for v in getattr(self, f.name)))
        self.validate()

    def validate(self):
        def fail(name, constraint):
            raise ConfigError(f"{name}: {constraint} (got {getattr(self, name)!r})")

        if self.win_length_samples > self.fft_size:
            fail("win_length_samples", "must be <= fft_size")
        if self.hop_length_samples <= 0:
            fail("hop_length_samples", "must be positive")
        product = 1
        for s in self.upsample_strides:
            if s <= 0:
                fail("upsample_strides", "strides must be positive")
            product *= s
        if product != self.hop_length_samples:
            fail("upsample_strides", f"product must equal hop_length_samples={self.hop_length_samples}")
        if self.vocoder_cycle_length <= 0:
            fail("vocoder_cycle_length", "must be positive")
        if self.vocoder_layers <= 0 or self.vocoder_layers % self.vocoder_cycle_length:
            fail("vocoder_layers", f"must be a positive multiple of vocoder_cycle_length={self.vocoder_cycle_length}")
        if not 0.0 < self.dropout_keep_prob <= 1.0:
            fail("dropout_keep_prob", "must lie in (0, 1]")
        if self.speaker_embedding_dim <= 0:
            fail("speaker_embedding_dim", "must be positive")
        if self.reduction_factor <= 0:
            fail("reduction_factor", "must be positive")
        if self.decoder_channels % self.reduction_factor:
            fail("decoder_channels", "must be divisible by reduction_factor")
        if self.mel_fmax_hz > self.sample_rate_hz / 2 or self.mel_fmin_hz < 0:
            fail("mel_fmax_hz", "must lie within [mel_fmin_hz, Nyquist]")
        if self.silence_threshold_db >= 0:
            fail("silence_threshold_db", "must be negative")
        if self.log_floor <= 0:
            fail("log_floor", "must be positive")
        if len(self.decoder_prenet_channels) == 0:
            fail("decoder_prenet_channels", "needs at least one layer")
        for name in ("encoder_conv_width", "decoder_conv_width", "bridge_conv_width"):
            if getattr(self, name) % 2 == 0:
                fail(name, "must be odd")
        if self.attention_window < 0:
            fail("attention_window", "must be >= 0")
        if self.stop_patience < 1:
            fail("stop_patience", "must be >= 1")
        if self.sampling_temperature < 0:
            fail("sampling_temperature", "must be >= 0")

    @property
    def dropout(self):
        return 1.0 - self.dropout_keep_prob

    @property
    def dilations(self):
        return dilation_schedule(self.vocoder_layers, self.vocoder_cycle_length)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def dilation_schedule(n_layers, cycle_length=10):
    """Per-layer dilations: ``2 ** (i % cycle_length)``."""
    if cycle_length <= 0 or n_layers <= 0 or n_layers % cycle_length:
        raise ConfigError(f"n_layers={n_layers} is not a positive multiple of cycle length {cycle_length}")
    return [2 ** (i % cycle_length) for i in range(n_layers)]


def _parse_value(raw, ftype, name, lineno):
    try:
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
        if ftype in (Tuple[int, ...], "Tuple[int, ...]"):
            return tuple(int(p) for p in raw.replace("[", "").replace("]", "").split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {name} = {raw!r}") from None
    raise ConfigError(f"line {lineno}: unsupported field type for {name}")


def parse_config(text):
    types = {f.name: f.type for f in fields(Hyperparameters)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw, types[key], key, lineno)
    return Hyperparameters(**values)


def load_config(path=None):
    """Read a flat ``key = value`` file; missing keys keep their defaults."""
    if path is None:
        return Hyperparameters()
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def dump_config(hp):
    lines = []
    for k, v in hp.to_dict().items():
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        else:
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    transcript: str
    audio_path: str


@dataclass
class SpeakerRegistry:
    speakers: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.speakers)) != len(self.speakers):
            raise ValueError("duplicate speaker ids in registry")
        self._index = {s: i for i, s in enumerate(self.speakers)}

    @classmethod
    def from_ids(cls, ids):
        return cls(sorted(set(ids)))

    def index(self, speaker_id):
        try:
            return self._index[speaker_id]
        except KeyError:
            raise KeyError(f"unknown speaker id {speaker_id!r}") from None

    def __len__(self):
        return len(self.speakers)

    def __contains__(self, speaker_id):
        return speaker_id in self._index

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("".join(s + "\n" for s in self.speakers))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])


AUDIO_EXT = ".wav"
TEXT_EXT = ".txt"


def build_manifest(data_root):
    """Scan ``data_root/<speaker>/<utt>.{wav,txt}`` pairs.

    Returns ``(records, registry, n_warnings)``. Unpaired files are skipped
    and counted.
    """
    records = []
    warnings = 0
    for speaker in sorted(os.listdir(data_root)):
        spk_dir = os.path.join(data_root, speaker)
        if not os.path.isdir(spk_dir) or speaker.startswith("."):
            continue
        stems = {}
        for name in os.listdir(spk_dir):
            stem, ext = os.path.splitext(name)
            if ext.lower() in (AUDIO_EXT, TEXT_EXT):
                stems.setdefault(stem, {})[ext.lower()] = os.path.join(spk_dir, name)
        for stem in sorted(stems):
            pair = stems[stem]
            if AUDIO_EXT not in pair or TEXT_EXT not in pair:
                logger.warning("skipping unpaired file(s) for %s/%s", speaker, stem)
                warnings += 1
                continue
            with open(pair[TEXT_EXT], encoding="utf-8") as f:
                transcript = " ".join(f.read().split())
            if not transcript:
                logger.warning("skipping %s/%s: empty transcript", speaker, stem)
                warnings += 1
                continue
            records.append(UtteranceRecord(f"{speaker}_{stem}", speaker, transcript, pair[AUDIO_EXT]))
    if not records:
        raise ValueError(f"no usable (audio, transcript) pairs under {data_root}")
    registry = SpeakerRegistry.from_ids(r.speaker_id for r in records)
    return records, registry, warnings


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            for v in (r.utterance_id, r.speaker_id, r.audio_path, r.transcript):
                if "\t" in v or "\n" in v:
                    raise ValueError(f"manifest field contains tab/newline: {v!r}")
            f.write(f"{r.utterance_id}\t{r.speaker_id}\t{r.audio_path}\t{r.transcript}\n")


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            utt, spk, audio, text = parts
            records.append(UtteranceRecord(utt, spk, text, audio))
    return records
