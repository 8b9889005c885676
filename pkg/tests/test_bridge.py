import numpy as np
import pytest
import torch

from msclarinet.bridge import BridgeNet, UpsampleBlock
from msclarinet.config import Hyperparameters
from msclarinet.seq2seq import decoder_l1_loss
from msclarinet.speaker import SpeakerEmbeddingTable, zero_speaker_projectors

from helpers import central_difference, rel_err, tiny_hparams


def _bridge(hp, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return BridgeNet(hp).to(dtype).eval(), SpeakerEmbeddingTable(3, hp.speaker_embedding_dim).to(dtype)


def test_full_size_shapes():
    hp = Hyperparameters()
    bridge, table = _bridge(hp, dtype=torch.float32)
    hidden = torch.randn(1, 3, hp.decoder_channels)
    with torch.no_grad():
        fh, mel, cond = bridge(hidden, table(torch.tensor([0])))
    assert fh.shape == (1, 12, hp.bridge_channels)
    assert mel.shape == (1, 12, 80)
    assert cond.shape == (1, hp.conditioner_channels, 3600)


@pytest.mark.parametrize("frames", [1, 2, 12])
def test_upsampled_length_exact(frames):
    hp = tiny_hparams()
    bridge, table = _bridge(hp)
    fh = torch.randn(2, frames, hp.bridge_channels, dtype=torch.float64)
    cond = bridge.upsample(fh, table(torch.tensor([0, 1])))
    assert cond.shape == (2, hp.conditioner_channels, frames * 300)


def test_non_causal():
    hp = tiny_hparams()
    bridge, table = _bridge(hp)
    spk = table(torch.tensor([0]))
    hidden = torch.randn(1, 4, hp.decoder_channels, dtype=torch.float64)
    base, _, _ = bridge(hidden, spk)
    bumped = hidden.clone()
    bumped[:, -1] += 1.0
    moved, _, _ = bridge(bumped, spk)
    # a late decoder step changes earlier frames
    assert not torch.allclose(base[:, :12], moved[:, :12])


def test_speaker_ablation():
    hp = tiny_hparams()
    bridge, table = _bridge(hp)
    hidden = torch.randn(1, 3, hp.decoder_channels, dtype=torch.float64).repeat(2, 1, 1)
    spk = table(torch.tensor([0, 1]))
    _, _, cond = bridge(hidden, spk)
    assert not torch.allclose(cond[0], cond[1])
    zero_speaker_projectors(bridge)
    _, _, cond = bridge(hidden, spk)
    assert torch.equal(cond[0], cond[1])


def test_constant_propagates_through_upsampling():
    torch.manual_seed(0)
    C, s = 3, 5
    block = UpsampleBlock(C, C, s, 2).double()
    with torch.no_grad():
        w = torch.zeros_like(block.deconv.weight)  # [in, 2*out, 2s]
        for c in range(C):
            w[c, c, :] = 0.5
        block.deconv.weight.copy_(w)
        block.deconv.bias.zero_()
        block.deconv.bias[C:] = 40.0  # gate fully open
    zero_speaker_projectors(block)
    x = torch.full((1, C, 6), 0.7, dtype=torch.float64)
    y = block(x, torch.zeros(1, 2, dtype=torch.float64))
    assert y.shape == (1, C, 30)
    torch.testing.assert_close(y, torch.full_like(y, 0.7), atol=1e-12, rtol=0)


def test_aux_head_fits_single_utterance():
    hp = tiny_hparams()
    bridge, table = _bridge(hp, dtype=torch.float32)
    bridge.train()
    torch.manual_seed(1)
    hidden = torch.randn(1, 3, hp.decoder_channels)
    target = torch.randn(1, 12, 80) * 0.5 - 4
    mask = torch.ones(1, 12)
    opt = torch.optim.Adam(list(bridge.parameters()) + list(table.parameters()), lr=1e-2)
    spk_idx = torch.tensor([0])
    first = None
    for _ in range(300):
        opt.zero_grad()
        fh = bridge.conv_forward(hidden, table(spk_idx))
        loss = decoder_l1_loss(bridge.aux_mel(fh), target, mask)
        first = first if first is not None else loss.item()
        loss.backward()
        opt.step()
    assert loss.item() < 0.5 * first


def test_masked_frames_get_no_gradient():
    hp = tiny_hparams()
    bridge, table = _bridge(hp)
    spk = table(torch.tensor([0]))
    hidden = torch.randn(1, 3, hp.decoder_channels, dtype=torch.float64)
    target = torch.randn(1, 12, 80, dtype=torch.float64)
    mask = torch.ones(1, 12, dtype=torch.float64)
    mask[:, 8:] = 0
    mel = bridge.aux_mel(bridge.conv_forward(hidden, spk))
    mel.retain_grad()
    decoder_l1_loss(mel, target, mask).backward()
    assert mel.grad[:, 8:].abs().max() == 0
    assert mel.grad[:, :8].abs().min() > 0


def test_upsample_kernel_gradient_matches_finite_difference():
    hp = tiny_hparams()
    bridge, table = _bridge(hp)
    hidden = torch.randn(1, 2, hp.decoder_channels, dtype=torch.float64)
    target = torch.randn(1, hp.conditioner_channels, 8 * 300, dtype=torch.float64)

    def loss():
        _, _, cond = bridge(hidden, table(torch.tensor([0])))
        return ((cond - target) ** 2).mean()

    for block in bridge.upsample_blocks:
        w = block.deconv.weight
        bridge.zero_grad()
        loss().backward()
        g = w.grad.clone()
        for idx in torch.topk(g.abs().flatten(), 3).indices.tolist():
            index = np.unravel_index(idx, g.shape)
            fd = central_difference(loss, w, index)
            assert rel_err(fd, g[index].item()) < 1e-4
