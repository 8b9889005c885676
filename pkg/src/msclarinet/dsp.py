"""Audio loading, silence trimming, log-mel features and batching."""

import logging
import math
import os
import struct
import wave
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from scipy.signal import resample_poly

from msclarinet.config import UtteranceRecord

logger = logging.getLogger(__name__)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __len__(self):
        return len(self.samples)


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [n_frames, n_bands]
    hop_length_samples: int

    @property
    def n_frames(self):
        return self.values.shape[0]


_WAV_FORMATS = {1: "PCM", 3: "IEEE float", 6: "A-law", 7: "mu-law", 0xFFFE: "extensible"}


def _wav_format_tag(path):
    with open(path, "rb") as f:
        header = f.read(64)
    if header[:4] != b"RIFF" or header[8:12] != b"WAVE":
        return None
    pos = 12
    while pos + 8 <= len(header):
        cid, size = header[pos:pos + 4], struct.unpack("<I", header[pos + 4:pos + 8])[0]
        if cid == b"fmt ":
            return struct.unpack("<H", header[pos + 8:pos + 10])[0]
        pos += 8 + size
    return None


def read_wav(path):
    try:
        with wave.open(path, "rb") as w:
            width, channels, rate = w.getsampwidth(), w.getnchannels(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as e:
        tag = _wav_format_tag(path)
        name = _WAV_FORMATS.get(tag, f"format tag {tag}")
        raise ValueError(f"{path}: unsupported WAV encoding {name!r} (need 16-bit PCM)") from e
    if width != 2:
        raise ValueError(f"{path}: unsupported WAV encoding '{8 * width}-bit PCM' (need 16-bit PCM)")
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    return Waveform(x, rate)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def write_wav(path, samples, sample_rate_hz):
    """16-bit PCM with round-half-away-from-zero quantisation."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0
    q = round_half_away(x).astype("<i2")
    with wave.open(path, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate_hz))
        w.writeframes(q.tobytes())


def resample(w, target_rate):
    if w.sample_rate_hz == target_rate:
        return w
    ratio = Fraction(int(target_rate), int(w.sample_rate_hz))
    y = resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform(np.clip(y, -1.0, 1.0), int(target_rate))


def load_resample(path, target_rate):
    return resample(read_wav(path), target_rate)


def trim_leading_silence(w, threshold_db=-40.0, frame_ms=20.0):
    """Drop leading frames whose RMS is at or below ``threshold_db`` dBFS.

    The trailing part of the signal is never touched. An all-silent input is
    returned unchanged.
    """
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative")
    frame = max(1, int(round(w.sample_rate_hz * frame_ms / 1000.0)))
    x = w.samples
    n = len(x) // frame
    threshold = 10.0 ** (threshold_db / 20.0)
    for i in range(n + (1 if len(x) % frame else 0)):
        seg = x[i * frame:(i + 1) * frame]
        if np.sqrt(np.mean(seg ** 2)) > threshold:
            return Waveform(x[i * frame:], w.sample_rate_hz)
    logger.warning("all-silent waveform (%d samples); left untrimmed", len(x))
    return w


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax):
    """Triangular filters, peak 1, centres equally spaced on the mel scale."""
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FB_CACHE = {}


def _filterbank(hp):
    key = (hp.sample_rate_hz, hp.fft_size, hp.n_mel_bands, hp.mel_fmin_hz, hp.mel_fmax_hz)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


def stft_magnitude(x, hp):
    """|STFT| with centre reflection padding; ``len(x) // hop + 1`` frames."""
    x = np.asarray(x, dtype=np.float64)
    n_fft, hop, win = hp.fft_size, hp.hop_length_samples, hp.win_length_samples
    if len(x) < win:
        raise ValueError(f"waveform of {len(x)} samples is shorter than one window ({win})")
    padded = np.pad(x, n_fft // 2, mode="reflect")
    window = np.zeros(n_fft)
    left = (n_fft - win) // 2
    window[left:left + win] = np.hanning(win + 1)[:-1]  # periodic Hann
    n_frames = len(x) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return np.abs(np.fft.rfft(frames * window, axis=1))


def log_mel(w, hp):
    """Returns ``(MelSpectrogram, aligned Waveform)``.

    The aligned waveform is zero-padded or cut to ``n_frames * hop`` samples,
    which is the length the vocoder conditioner is upsampled to.
    """
    if w.sample_rate_hz != hp.sample_rate_hz:
        raise ValueError(f"expected {hp.sample_rate_hz} Hz audio, got {w.sample_rate_hz}")
    mag = stft_magnitude(w.samples, hp)
    mel = np.log(mag @ _filterbank(hp).T + hp.log_floor)
    n = mel.shape[0] * hp.hop_length_samples
    x = w.samples[:n]
    if len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    return MelSpectrogram(mel.astype(np.float32), hp.hop_length_samples), Waveform(x, w.sample_rate_hz)


@dataclass
class ProcessedUtterance:
    record: UtteranceRecord
    mel: np.ndarray  # [n_frames, n_bands], float32
    audio: np.ndarray  # [n_frames * hop], float32


def preprocess(record, hp):
    w = load_resample(record.audio_path, hp.sample_rate_hz)
    w = trim_leading_silence(w, hp.silence_threshold_db, hp.silence_frame_ms)
    mel, aligned = log_mel(w, hp)
    return ProcessedUtterance(record, mel.values, aligned.samples.astype(np.float32))


# Feature cache: little-endian header (magic, n_frames, n_bands, n_samples)
# followed by float32 mel (row-major) and float32 samples.
FEATURE_MAGIC = b"MSCF"
_FEATURE_HEADER = struct.Struct("<4sIII")


def write_features(path, mel, audio):
    mel = np.ascontiguousarray(mel, dtype="<f4")
    audio = np.ascontiguousarray(audio, dtype="<f4")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, mel.shape[0], mel.shape[1], audio.shape[0]))
        f.write(mel.tobytes())
        f.write(audio.tobytes())
    os.replace(tmp, path)


def read_features(path):
    with open(path, "rb") as f:
        data = f.read()
    magic, n_frames, n_bands, n_samples = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    off = _FEATURE_HEADER.size
    mel = np.frombuffer(data, "<f4", n_frames * n_bands, off).reshape(n_frames, n_bands)
    audio = np.frombuffer(data, "<f4", n_samples, off + 4 * n_frames * n_bands)
    return mel.astype(np.float32), audio.astype(np.float32)


@dataclass
class TrainingBatch:
    chars: torch.Tensor  # [B, T_char] long, 0-padded
    char_lengths: torch.Tensor  # [B]
    mels: torch.Tensor  # [B, F, n_bands], F multiple of r
    mel_lengths: torch.Tensor
    mel_mask: torch.Tensor  # [B, F] float
    audio: torch.Tensor  # [B, F * hop]
    audio_lengths: torch.Tensor
    audio_mask: torch.Tensor  # [B, F * hop] float
    speakers: torch.Tensor  # [B] long

    def to(self, dtype):
        kw = {}
        for k, v in self.__dict__.items():
            kw[k] = v.to(dtype) if v.is_floating_point() else v
        return TrainingBatch(**kw)


def make_batch(items, registry, charset, hp):
    """Pad a list of ``ProcessedUtterance`` into a ``TrainingBatch``."""
    from msclarinet.text import normalize_and_encode_text

    if not items:
        raise ValueError("empty batch")
    r, hop = hp.reduction_factor, hp.hop_length_samples
    ids = [normalize_and_encode_text(it.record.transcript, charset).ids for it in items]
    speakers = [registry.index(it.record.speaker_id) for it in items]
    for it in items:
        if len(it.audio) != it.mel.shape[0] * hop:
            raise ValueError(f"{it.record.utterance_id}: audio length is not n_frames * hop")
    t_char = max(len(x) for x in ids)
    n_frames = [it.mel.shape[0] for it in items]
    f_max = r * math.ceil(max(n_frames) / r)
    floor = math.log(hp.log_floor)
    B = len(items)
    chars = torch.zeros(B, t_char, dtype=torch.long)
    mels = torch.full((B, f_max, hp.n_mel_bands), floor, dtype=torch.float32)
    audio = torch.zeros(B, f_max * hop)
    mel_mask = torch.zeros(B, f_max)
    audio_mask = torch.zeros(B, f_max * hop)
    for b, it in enumerate(items):
        chars[b, :len(ids[b])] = torch.as_tensor(ids[b])
        mels[b, :n_frames[b]] = torch.from_numpy(np.asarray(it.mel, dtype=np.float32))
        audio[b, :len(it.audio)] = torch.from_numpy(np.asarray(it.audio, dtype=np.float32))
        mel_mask[b, :n_frames[b]] = 1.0
        audio_mask[b, :len(it.audio)] = 1.0
    return TrainingBatch(
        chars=chars,
        char_lengths=torch.tensor([len(x) for x in ids]),
        mels=mels,
        mel_lengths=torch.tensor(n_frames),
        mel_mask=mel_mask,
        audio=audio,
        audio_lengths=torch.tensor([len(it.audio) for it in items]),
        audio_mask=audio_mask,
        speakers=torch.tensor(speakers, dtype=torch.long),
    )


def preprocess_corpus(data_root, out_dir, hp, charset=None):
    """Scan a raw corpus and write manifest.tsv, speakers.txt, charset.txt and
    one feature file per utterance under ``out_dir``."""
    from msclarinet.config import build_manifest, write_manifest
    from msclarinet.text import DEFAULT_CHARSET, save_charset

    records, registry, n_warn = build_manifest(data_root)
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    for rec in records:
        item = preprocess(rec, hp)
        write_features(os.path.join(out_dir, "features", f"{rec.utterance_id}.feat"), item.mel, item.audio)
    write_manifest(records, os.path.join(out_dir, "manifest.tsv"))
    registry.save(os.path.join(out_dir, "speakers.txt"))
    save_charset(charset or DEFAULT_CHARSET, os.path.join(out_dir, "charset.txt"))
    return records, registry, n_warn
