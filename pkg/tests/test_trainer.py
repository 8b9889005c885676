import csv
import os

import pytest
import torch

from msclarinet.config import SpeakerRegistry
from msclarinet.model import LossBreakdown, MultiSpeakerClariNet, NonFiniteLossError
from msclarinet.trainer import (
    clip_gradients,
    load_checkpoint,
    lr_schedule,
    make_optimizer,
    read_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

from helpers import random_batch, tiny_hparams


@pytest.mark.parametrize("step, lr", [
    (0, 0.001), (100000, 0.001), (500000, 0.001), (500001, 0.0005), (600000, 0.0005),
    (699999, 0.0005), (700000, 0.00025), (899999, 0.00025), (900000, 0.000125),
])
def test_lr_schedule_formula(step, lr):
    assert lr_schedule(step, tiny_hparams()) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_non_increasing_with_exact_breakpoints():
    hp = tiny_hparams()
    steps = range(0, 1_500_001, 50_000)
    values = [lr_schedule(s, hp) for s in steps]
    assert all(a >= b for a, b in zip(values, values[1:]))
    changes = [s for s in range(400_000, 1_400_001) if lr_schedule(s, hp) != lr_schedule(s - 1, hp)]
    # the first halving lands just after the start, later ones on the period grid
    assert changes == [500_001, 700_000, 900_000, 1_100_000, 1_300_000]
    with pytest.raises(ValueError):
        lr_schedule(-1, hp)


def _param(values):
    p = torch.nn.Parameter(torch.zeros(len(values), dtype=torch.float64))
    p.grad = torch.tensor(values, dtype=torch.float64)
    return p


def test_clip_halves_at_norm_200():
    hp = tiny_hparams()
    a, b = _param([120.0, 0.0]), _param([0.0, 160.0])
    clip_gradients([("a", a), ("b", b)], hp.replace(grad_clip_value=1e9))
    torch.testing.assert_close(a.grad, torch.tensor([60.0, 0.0], dtype=torch.float64))
    torch.testing.assert_close(b.grad, torch.tensor([0.0, 80.0], dtype=torch.float64))


def test_clip_value_after_rescale():
    hp = tiny_hparams()
    a = _param([7.0, -7.0, 3.0])
    norm = clip_gradients([("a", a)], hp)
    assert norm == pytest.approx((49 + 49 + 9) ** 0.5)
    assert a.grad.tolist() == [5.0, -5.0, 3.0]


def test_clip_identity_when_small():
    hp = tiny_hparams()
    a = _param([0.6, -0.8])
    clip_gradients([("a", a)], hp)
    assert a.grad.tolist() == [0.6, -0.8]


def test_clip_nan_names_parameter():
    with pytest.raises(FloatingPointError, match="decoder.w"):
        clip_gradients([("decoder.w", _param([float("nan")]))], tiny_hparams())


def test_loss_breakdown_sums():
    lb = LossBreakdown(torch.tensor(0.4), torch.tensor(0.3), torch.tensor(1.1))
    assert lb.total.item() == pytest.approx(1.8)
    assert lb.as_floats()["total"] == pytest.approx(1.8)


def _model(hp=None, seed=0):
    torch.manual_seed(seed)
    return MultiSpeakerClariNet(hp or tiny_hparams(), 2).double()


def test_joint_loss_is_sum_of_components():
    model = _model()
    batch = random_batch(model.hp)
    losses = model.joint_loss(batch)
    assert losses.total.item() == pytest.approx(
        losses.decoder_l1.item() + losses.bridge_l1.item() + losses.vocoder_nll.item(), abs=1e-12)


def test_all_masked_batch_errors():
    model = _model()
    batch = random_batch(model.hp)
    batch.mel_mask.zero_()
    batch.audio_mask.zero_()
    with pytest.raises(ValueError):
        model.joint_loss(batch)


def test_non_finite_loss_names_component():
    model = _model()
    batch = random_batch(model.hp)
    batch.audio[0, 0] = float("inf")
    with pytest.raises(NonFiniteLossError) as info:
        model.joint_loss(batch)
    assert info.value.component == "vocoder_nll"


def test_gradient_reaches_every_group():
    model = _model()
    batch = random_batch(model.hp)
    model.joint_loss(batch).total.backward()
    params = dict(model.named_parameters())
    for group, names in model.parameter_groups().items():
        assert names, group
        assert any(params[n].grad is not None and params[n].grad.abs().max() > 0 for n in names), group


def test_one_update_moves_every_group():
    model = _model()
    batch = random_batch(model.hp)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train_step(model, make_optimizer(model), batch, 1, seed=0)
    for group, names in model.parameter_groups().items():
        delta = max((dict(model.named_parameters())[n].detach() - before[n]).abs().max().item() for n in names)
        assert delta > 0, group


def test_checkpoint_bytes_stable(tmp_path):
    model = _model()
    opt = make_optimizer(model)
    train_step(model, opt, random_batch(model.hp), 1, seed=0)
    reg = SpeakerRegistry(["s0", "s1"])
    p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    save_checkpoint(p1, model, opt, 1, reg)
    m2, o2, step, reg2 = load_checkpoint(p1, make_optimizer)
    assert step == 1 and reg2.speakers == reg.speakers
    save_checkpoint(p2, m2, o2, step, reg2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    assert open(p1, "rb").read(4) == b"MSCK"
    _, meta, tensors = read_checkpoint(p1)
    from msclarinet.config import Hyperparameters

    assert Hyperparameters.from_dict(meta["hparams"]) == model.hp
    assert any(k.startswith("adam.") for k in tensors)


def test_loaded_checkpoint_continues_identically(tmp_path):
    model = _model()
    opt = make_optimizer(model)
    batch = random_batch(model.hp)
    train_step(model, opt, batch, 1, seed=0)
    path = str(tmp_path / "c.bin")
    save_checkpoint(path, model, opt, 1, SpeakerRegistry(["s0", "s1"]))
    m2, o2, _, _ = load_checkpoint(path, make_optimizer)
    a = train_step(model, opt, batch, 2, seed=0).total.item()
    b = train_step(m2, o2, batch, 2, seed=0).total.item()
    assert a == b
    for (n, p), (_, q) in zip(model.named_parameters(), m2.named_parameters()):
        assert torch.equal(p, q), n


def _read_metrics(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_train_resume_matches_uninterrupted(toy_features, tmp_path):
    hp = tiny_hparams(log_every=1, checkpoint_every=2, batch_size=3, dropout_keep_prob=0.9)
    seen_full, seen_resumed = {}, {}
    train(hp, toy_features, 4, seed=3, out_dir=str(tmp_path / "full"),
          callback=lambda s, v: seen_full.__setitem__(s, v["total"]))
    train(hp, toy_features, 2, seed=3, out_dir=str(tmp_path / "part"))
    ckpt = str(tmp_path / "part" / "ckpt_00000002.bin")
    assert os.path.exists(ckpt)
    train(hp, toy_features, 4, seed=3, out_dir=str(tmp_path / "part"), resume=ckpt,
          callback=lambda s, v: seen_resumed.__setitem__(s, v["total"]))
    assert sorted(seen_resumed) == [3, 4]
    for s in (3, 4):
        assert abs(seen_full[s] - seen_resumed[s]) <= 1e-6
    rows = _read_metrics(str(tmp_path / "part" / "metrics.csv"))
    steps = [int(r["step"]) for r in rows]
    assert steps == [1, 2, 3, 4]
    assert list(rows[0]) == ["step", "lr", "decoder_l1", "bridge_l1", "vocoder_nll", "total"]


def test_resume_with_different_hparams_fails(toy_features, tmp_path):
    hp = tiny_hparams(batch_size=2)
    train(hp, toy_features, 1, out_dir=str(tmp_path))
    with pytest.raises(ValueError, match="encoder_layers"):
        train(hp.replace(encoder_layers=3), toy_features, 2, out_dir=str(tmp_path),
              resume=str(tmp_path / "ckpt_00000001.bin"))


def test_missing_features_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(tiny_hparams(), str(tmp_path), 1, out_dir=str(tmp_path / "o"))
