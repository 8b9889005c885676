"""Command-line entry point: ``msclarinet <command> ...``."""

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from msclarinet.config import load_config

logger = logging.getLogger("msclarinet")


def _hp(args):
    return load_config(args.config)


def cmd_preprocess(args):
    from msclarinet.dsp import preprocess_corpus

    records, registry, n_warn = preprocess_corpus(args.data, args.out, _hp(args))
    print(f"{len(records)} utterances, {len(registry)} speakers, {n_warn} warnings -> {args.out}")


def cmd_make_toy_corpus(args):
    from msclarinet.toy import write_toy_corpus

    write_toy_corpus(args.out)
    print(f"toy corpus written to {args.out}")


def cmd_train(args):
    from msclarinet.trainer import train

    dtype = torch.float64 if args.float64 else torch.float32
    train(_hp(args), args.data, args.steps, seed=args.seed, out_dir=args.out, resume=args.resume, dtype=dtype)
    print(f"trained to step {args.steps}; checkpoints in {args.out}")


def _speaker_index(registry, speaker):
    try:
        return registry.index(speaker)
    except KeyError:
        raise SystemExit(f"error: unknown speaker {speaker!r}; known: {', '.join(registry.speakers)}")


def cmd_synthesize(args):
    from msclarinet.dsp import write_wav
    from msclarinet.trainer import load_checkpoint

    model, _, step, registry = load_checkpoint(args.ckpt)
    idx = _speaker_index(registry, args.speaker)
    res = model.synthesize(args.text, idx, seed=args.seed, temperature=args.temperature)
    write_wav(args.out, res.audio, model.hp.sample_rate_hz)
    meta = {
        "text": res.normalized_text,
        "speaker": args.speaker,
        "seed": args.seed,
        "checkpoint_step": step,
        "decoder_steps": res.decoder_steps,
        "final_argmax": res.final_argmax,
        "n_samples": int(len(res.audio)),
        "stop": "stop-rule" if res.stopped else "no-stop",
    }
    with open(os.path.splitext(args.out)[0] + ".json", "w") as f:
        json.dump(meta, f, indent=2)
    print(json.dumps(meta))


def _real_mels(data_dir):
    from msclarinet.trainer import FeatureDataset

    ds = FeatureDataset(data_dir)
    mels = [ds[i].mel for i in range(len(ds))]
    labels = [ds.registry.index(r.speaker_id) for r in ds.records]
    return ds, mels, labels


def _synth_mels(model, records, registry, hp, seed):
    from msclarinet.dsp import Waveform, log_mel

    mels, labels = [], []
    for i, rec in enumerate(records):
        idx = registry.index(rec.speaker_id)
        res = model.synthesize(rec.transcript, idx, seed=seed + i)
        mels.append(log_mel(Waveform(res.audio.astype(np.float64), hp.sample_rate_hz), hp)[0].values)
        labels.append(idx)
    return mels, labels


def cmd_eval_classify(args):
    from msclarinet.evaluation import classifier_accuracy, train_speaker_classifier
    from msclarinet.trainer import load_checkpoint

    ds, mels, labels = _real_mels(args.data)
    res = train_speaker_classifier(mels, labels, n_speakers=len(ds.registry), epochs=args.epochs, seed=args.seed)
    out = {"held_out_real_accuracy": res.accuracy, "n_speakers": len(ds.registry)}
    if args.ckpt:
        model, _, _, registry = load_checkpoint(args.ckpt)
        if registry.speakers != ds.registry.speakers:
            raise SystemExit("error: checkpoint speakers differ from the dataset's")
        records = [ds.records[i] for i in res.test_idx]
        smels, slabels = _synth_mels(model, records, registry, model.hp, args.seed)
        out["synthesized_accuracy"] = classifier_accuracy(res.model, smels, slabels)
    print(json.dumps(out))


def _calibration_scores(kind, n, seed):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2 == 0
    if kind == "uniform":
        return rng.uniform(size=n), labels
    return np.where(labels, 1.0, -1.0) + rng.standard_normal(n), labels


def cmd_eval_eer(args):
    from msclarinet.evaluation import (
        classifier_embeddings, estimate_eer, gaussian_overlap_eer, make_trials, score_trials,
        train_speaker_classifier,
    )
    from msclarinet.trainer import load_checkpoint

    if args.calibrate:
        scores, labels = _calibration_scores(args.calibrate, args.trials, args.seed)
        eer = estimate_eer(scores=scores, labels=labels)
        expected = 0.5 if args.calibrate == "uniform" else gaussian_overlap_eer(2.0)
        print(json.dumps({"calibration": args.calibrate, "trials": args.trials, "eer": eer, "expected": expected}))
        return
    if not args.data:
        raise SystemExit("error: --data is required unless --calibrate is given")
    ds, mels, labels = _real_mels(args.data)
    res = train_speaker_classifier(mels, labels, n_speakers=len(ds.registry), epochs=args.epochs, seed=args.seed)
    enroll_emb = classifier_embeddings(res.model, mels)
    if args.ckpt:
        model, _, _, registry = load_checkpoint(args.ckpt)
        smels, slabels = _synth_mels(model, ds.records, registry, model.hp, args.seed)
        test_emb, test_labels, same_pool = classifier_embeddings(res.model, smels), slabels, False
    else:
        test_emb, test_labels, same_pool = enroll_emb, labels, True
    trials = make_trials(labels, test_labels, n_trials=args.trials, n_enroll=args.enroll, seed=args.seed,
                         same_pool=same_pool)
    score_trials(trials, enroll_emb, test_emb)
    print(json.dumps({"trials": args.trials, "enroll": args.enroll, "eer": estimate_eer(trials)}))


def cmd_embed_pca(args):
    from msclarinet.evaluation import embedding_pca, linear_separability, plot_pca, read_labels, write_pca_csv
    from msclarinet.trainer import load_checkpoint

    model, _, _, registry = load_checkpoint(args.ckpt)
    emb = model.speaker_table.weight.detach().double().numpy()
    proj = embedding_pca(emb)
    labels = read_labels(args.labels) if args.labels else None
    write_pca_csv(args.out_prefix + ".csv", registry.speakers, proj, labels)
    out = {"csv": args.out_prefix + ".csv", "explained_variance_ratio": proj.explained_variance_ratio.tolist()}
    column = None
    if labels:
        columns = sorted(next(iter(labels.values())).keys())
        column = args.label_column or columns[0]
        y = [labels.get(s, {}).get(column, "?") for s in registry.speakers]
        out["label_column"] = column
        out["linear_separability"] = linear_separability(proj.coords, y)
    plot_pca(args.out_prefix + ".png", registry.speakers, proj, labels, column)
    out["plot"] = args.out_prefix + ".png"
    print(json.dumps(out))


def cmd_export_embeddings(args):
    from msclarinet.trainer import export_embeddings_csv, load_checkpoint

    model, _, _, registry = load_checkpoint(args.ckpt)
    export_embeddings_csv(model, registry, args.out)
    print(f"{len(registry)} embeddings -> {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="msclarinet", description="Multi-speaker text-to-wave toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="key = value hyperparameter file (defaults if omitted)")
        sp.set_defaults(func=func)
        return sp

    sp = add("preprocess", cmd_preprocess, "scan a raw corpus and cache features")
    sp.add_argument("--data", required=True, help="root with <speaker>/<clip>.wav + .txt")
    sp.add_argument("--out", required=True)

    sp = add("make-toy-corpus", cmd_make_toy_corpus, "write the synthetic 2-speaker corpus")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "joint training")
    sp.add_argument("--data", required=True, help="preprocessed feature directory")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resume")
    sp.add_argument("--out", default="runs")
    sp.add_argument("--float64", action="store_true")

    sp = add("synthesize", cmd_synthesize, "text to WAV")
    sp.add_argument("--text", required=True)
    sp.add_argument("--speaker", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--out", required=True)

    sp = add("eval-classify", cmd_eval_classify, "speaker classification accuracy")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt")
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("eval-eer", cmd_eval_eer, "speaker verification EER")
    sp.add_argument("--data")
    sp.add_argument("--ckpt")
    sp.add_argument("--trials", type=int, default=40960)
    sp.add_argument("--enroll", type=int, choices=(1, 5), default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--calibrate", choices=("uniform", "gaussian"),
                    help="score synthetic trials with a known EER instead of real data")

    sp = add("embed-pca", cmd_embed_pca, "PCA of learned speaker embeddings")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--labels", help="CSV with speaker_id plus label columns")
    sp.add_argument("--label-column")
    sp.add_argument("--out-prefix", required=True)

    sp = add("export-embeddings", cmd_export_embeddings, "dump the speaker embedding table as CSV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
