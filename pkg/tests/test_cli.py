import json
import os

import pytest

from msclarinet.cli import main
from msclarinet.config import dump_config
from msclarinet.dsp import read_wav

from helpers import tiny_hparams


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_features):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(dump_config(tiny_hparams(batch_size=2, checkpoint_every=2, log_every=1)))
    main(["train", "--config", str(cfg), "--data", toy_features, "--steps", "2", "--out", str(root / "run")])
    return root, str(root / "run" / "ckpt_00000002.bin")


def test_make_toy_and_preprocess(tmp_path, capsys):
    main(["make-toy-corpus", "--out", str(tmp_path / "raw")])
    main(["preprocess", "--data", str(tmp_path / "raw"), "--out", str(tmp_path / "feat")])
    assert "10 utterances, 2 speakers" in capsys.readouterr().out
    assert len(os.listdir(tmp_path / "feat" / "features")) == 10


def test_synthesize_writes_wav_and_metadata(trained, capsys):
    root, ckpt = trained
    outs = []
    for name in ("a.wav", "b.wav"):
        main(["synthesize", "--text", "bad", "--speaker", "spk_b", "--ckpt", ckpt, "--seed", "4",
              "--out", str(root / name)])
        outs.append((root / name).read_bytes())
    assert outs[0] == outs[1]
    meta = json.loads((root / "a.json").read_text())
    assert meta["text"] == "bad."
    assert meta["stop"] in ("stop-rule", "no-stop")
    assert meta["n_samples"] == 300 * 4 * meta["decoder_steps"]
    assert len(read_wav(str(root / "a.wav")).samples) == meta["n_samples"]


def test_synthesize_unknown_speaker(trained):
    root, ckpt = trained
    with pytest.raises(SystemExit, match="unknown speaker"):
        main(["synthesize", "--text", "a", "--speaker", "nobody", "--ckpt", ckpt, "--out", str(root / "x.wav")])


def test_embed_pca_and_export(trained, capsys):
    root, ckpt = trained
    labels = root / "labels.csv"
    labels.write_text("speaker_id,gender\nspk_a,m\nspk_b,f\n")
    main(["embed-pca", "--ckpt", ckpt, "--labels", str(labels), "--out-prefix", str(root / "pca")])
    out = json.loads(capsys.readouterr().out)
    assert out["linear_separability"] == 1.0
    assert (root / "pca.png").stat().st_size > 0
    rows = (root / "pca.csv").read_text().splitlines()
    assert rows[0] == "speaker_id,pc1,pc2,gender" and len(rows) == 3
    main(["export-embeddings", "--ckpt", ckpt, "--out", str(root / "emb.csv")])
    assert (root / "emb.csv").read_text().splitlines()[0].startswith("speaker_id,e0,")


def test_eval_eer_calibration(capsys):
    main(["eval-eer", "--calibrate", "gaussian", "--trials", "40960", "--seed", "0"])
    out = json.loads(capsys.readouterr().out)
    assert abs(out["eer"] - out["expected"]) < 0.01


def test_eval_eer_and_classify_on_real_features(toy_features, capsys):
    main(["eval-classify", "--data", toy_features, "--epochs", "60"])
    out = json.loads(capsys.readouterr().out)
    assert out["held_out_real_accuracy"] == 1.0
    main(["eval-eer", "--data", toy_features, "--trials", "200", "--enroll", "1", "--epochs", "60"])
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["eer"] <= 0.5
