"""Joint training: LR schedule, gradient clipping, checkpoints and the loop."""

import csv
import hashlib
import json
import logging
import os
import struct

import numpy as np
import torch

from msclarinet.config import Hyperparameters, SpeakerRegistry, read_manifest
from msclarinet.dsp import make_batch, ProcessedUtterance, read_features
from msclarinet.model import MultiSpeakerClariNet
from msclarinet.text import DEFAULT_CHARSET, load_charset

logger = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "lr", "decoder_l1", "bridge_l1", "vocoder_nll", "total"]


def lr_schedule(step, hp):
    """Constant until ``lr_anneal_start_step``, then halved every
    ``lr_anneal_period`` steps, the first halving right after the start."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= hp.lr_anneal_start_step:
        return hp.lr_initial
    k = (step - hp.lr_anneal_start_step) // hp.lr_anneal_period + 1
    return hp.lr_initial * 0.5 ** k


def clip_gradients(named_parameters, hp):
    """Rescale to global L2 norm <= max_grad_norm, then clamp elementwise.

    Operates in place on ``.grad`` and returns the pre-clipping global norm.
    """
    params = [(n, p) for n, p in named_parameters if p.grad is not None]
    for name, p in params:
        if not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    if not params:
        return 0.0
    total = torch.sqrt(sum((p.grad.double() ** 2).sum() for _, p in params))
    norm = float(total)
    if norm > hp.max_grad_norm:
        scale = hp.max_grad_norm / norm
        for _, p in params:
            p.grad.mul_(scale)
    for _, p in params:
        p.grad.clamp_(-hp.grad_clip_value, hp.grad_clip_value)
    return norm


# Checkpoint layout (little-endian):
#   magic "MSCK", u32 version, u64 step, u32 meta_len, meta (UTF-8 JSON),
#   u32 n_tensors, then per tensor:
#   u16 name_len, name, u8 dtype, u8 ndim, u64[ndim] shape, raw data.
CKPT_MAGIC = b"MSCK"
CKPT_VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_DTYPE_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


def _encode_tensors(tensors):
    out = [struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        code, np_dt = _DTYPES[t.dtype]
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", code, t.dim()) + struct.pack(f"<{t.dim()}Q", *t.shape))
        out.append(t.numpy().astype(np_dt, copy=False).tobytes())
    return b"".join(out)


def _decode_tensors(data, off):
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode("utf-8")
        off += ln
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        dtype, np_dt = _DTYPE_CODES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, np_dt, count, off).reshape(shape)
        off += arr.nbytes
        tensors[name] = torch.from_numpy(arr.copy()).to(dtype)
    return tensors, off


def _optimizer_tensors(model, optimizer):
    out = {}
    if optimizer is None:
        return out
    for name, p in model.named_parameters():
        st = optimizer.state.get(p)
        if not st:
            continue
        out[f"adam.{name}.exp_avg"] = st["exp_avg"]
        out[f"adam.{name}.exp_avg_sq"] = st["exp_avg_sq"]
        out[f"adam.{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1)
    return out


def save_checkpoint(path, model, optimizer, step, registry, extra=None):
    """Atomic write (temp file then rename)."""
    meta = {
        "hparams": model.hp.to_dict(),
        "speakers": registry.speakers,
        "charset": model.charset,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    if extra:
        meta.update(extra)
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    tensors.update(_optimizer_tensors(model, optimizer))
    blob = (CKPT_MAGIC + struct.pack("<IQI", CKPT_VERSION, step, len(meta_b)) + meta_b
            + _encode_tensors(tensors))
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, step, meta_len = struct.unpack_from("<IQI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IQI")
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    tensors, _ = _decode_tensors(data, off + meta_len)
    return step, meta, tensors


def load_checkpoint(path, optimizer_factory=None):
    """Returns ``(model, optimizer_or_None, step, registry)``."""
    step, meta, tensors = read_checkpoint(path)
    hp = Hyperparameters.from_dict(meta["hparams"])
    registry = SpeakerRegistry(meta["speakers"])
    model = MultiSpeakerClariNet(hp, len(registry), meta["charset"])
    model.to(getattr(torch, meta.get("dtype", "float32")))
    model.load_state_dict({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        for name, p in model.named_parameters():
            key = f"adam.{name}"
            if f"{key}.exp_avg" in tensors:
                optimizer.state[p] = {
                    "step": tensors[f"{key}.step"].reshape(()).to(torch.float32),
                    "exp_avg": tensors[f"{key}.exp_avg"],
                    "exp_avg_sq": tensors[f"{key}.exp_avg_sq"],
                }
    return model, optimizer, step, registry


def make_optimizer(model):
    hp = model.hp
    return torch.optim.Adam(model.parameters(), lr=hp.lr_initial, betas=(hp.adam_beta1, hp.adam_beta2),
                            eps=hp.adam_eps)


def export_embeddings_csv(model, registry, path):
    emb = model.speaker_table.weight.detach().cpu().numpy()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["speaker_id"] + [f"e{i}" for i in range(emb.shape[1])])
        for spk, row in zip(registry.speakers, emb):
            w.writerow([spk] + [repr(float(v)) for v in row])


class FeatureDataset:
    """A preprocessed corpus directory: manifest.tsv, speakers.txt, features/*.feat."""

    def __init__(self, root):
        self.root = root
        manifest = os.path.join(root, "manifest.tsv")
        if not os.path.exists(manifest):
            raise FileNotFoundError(f"{manifest} missing; run the preprocess command first")
        self.records = read_manifest(manifest)
        self.registry = SpeakerRegistry.load(os.path.join(root, "speakers.txt"))
        charset_path = os.path.join(root, "charset.txt")
        self.charset = load_charset(charset_path) if os.path.exists(charset_path) else list(DEFAULT_CHARSET)
        self._cache = {}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        if i not in self._cache:
            rec = self.records[i]
            mel, audio = read_features(feature_path(self.root, rec.utterance_id))
            self._cache[i] = ProcessedUtterance(rec, mel, audio)
        return self._cache[i]


def feature_path(root, utterance_id):
    return os.path.join(root, "features", f"{utterance_id}.feat")


def step_seed(seed, step):
    """Seed for dropout and batch sampling at ``step``; independent of history."""
    h = hashlib.sha256(f"{seed}:{step}".encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


def sample_batch_indices(n_items, batch_size, seed, step):
    rng = np.random.default_rng(step_seed(seed, step))
    if batch_size >= n_items:
        return list(range(n_items))
    return sorted(rng.choice(n_items, size=batch_size, replace=False).tolist())


def train_step(model, optimizer, batch, step, seed):
    """One optimisation step (``step`` counts from 1). Returns the LossBreakdown."""
    hp = model.hp
    model.train()
    torch.manual_seed(step_seed(seed, step) ^ 0x5DEECE66D)
    for group in optimizer.param_groups:
        group["lr"] = lr_schedule(step, hp)
    optimizer.zero_grad(set_to_none=True)
    losses = model.joint_loss(batch)
    losses.total.backward()
    clip_gradients(model.named_parameters(), hp)
    optimizer.step()
    return losses


def _hparams_mismatch(a, b):
    da, db = a.to_dict(), b.to_dict()
    return [k for k in da if da[k] != db[k]]


def train(hp, data_dir, steps, seed=0, out_dir="runs", resume=None, dtype=torch.float32, callback=None):
    """Train until global step ``steps``; writes checkpoints and metrics.csv to ``out_dir``.

    Returns the trained model.
    """
    os.makedirs(out_dir, exist_ok=True)
    dataset = FeatureDataset(data_dir)
    if resume:
        model, optimizer, start, registry = load_checkpoint(resume, make_optimizer)
        bad = _hparams_mismatch(model.hp, hp)
        if bad:
            raise ValueError(f"checkpoint hyperparameters differ from config: {', '.join(bad)}")
        if registry.speakers != dataset.registry.speakers:
            raise ValueError("checkpoint speaker registry differs from the dataset's")
    else:
        torch.manual_seed(seed)
        model = MultiSpeakerClariNet(hp, len(dataset.registry), dataset.charset).to(dtype)
        optimizer = make_optimizer(model)
        registry = dataset.registry
        start = 0

    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows = []
    if resume and os.path.exists(metrics_path):
        with open(metrics_path, newline="") as f:
            rows = [r for r in csv.DictReader(f) if int(r["step"]) <= start]
    with open(metrics_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
        for step in range(start + 1, steps + 1):
            idx = sample_batch_indices(len(dataset), hp.batch_size, seed, step)
            batch = make_batch([dataset[i] for i in idx], registry, model.charset, hp).to(dtype)
            losses = train_step(model, optimizer, batch, step, seed)
            values = losses.as_floats()
            if callback is not None:
                callback(step, values)
            if step % hp.log_every == 0 or step == steps:
                writer.writerow({"step": step, "lr": lr_schedule(step, hp), **values})
                f.flush()
                logger.info("step %d total %.4f", step, values["total"])
            if step % hp.checkpoint_every == 0 or step == steps:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{step:08d}.bin"), model, optimizer, step, registry)
    return model
