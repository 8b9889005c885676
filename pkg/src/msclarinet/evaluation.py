"""Speaker-identity evaluation: toy classifier, EER harness, embedding PCA."""

import csv
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

logger = logging.getLogger(__name__)


class SpeakerClassifier(nn.Module):
    """Two conv layers over log-mel, masked mean pooling, embedding, logits."""

    def __init__(self, n_bands, n_speakers, channels=64, embed_dim=32):
        super().__init__()
        self.conv1 = nn.Conv1d(n_bands, channels, 5, padding=2)
        self.conv2 = nn.Conv1d(channels, channels, 5, padding=2)
        self.embed = nn.Linear(channels, embed_dim)
        self.out = nn.Linear(embed_dim, n_speakers)

    def embedding(self, mels, lengths):
        # mels: [B, F, n_bands]
        x = F.relu(self.conv1(mels.transpose(1, 2)))
        x = F.relu(self.conv2(x))
        mask = (torch.arange(x.shape[-1])[None, :] < lengths[:, None]).to(x.dtype).unsqueeze(1)
        pooled = (x * mask).sum(-1) / mask.sum(-1)
        return F.relu(self.embed(pooled))

    def forward(self, mels, lengths):
        return self.out(self.embedding(mels, lengths))


def _pad_mels(mels):
    lengths = torch.tensor([m.shape[0] for m in mels])
    out = torch.zeros(len(mels), int(lengths.max()), mels[0].shape[1])
    for i, m in enumerate(mels):
        out[i, :m.shape[0]] = torch.as_tensor(np.asarray(m, dtype=np.float32))
    return out, lengths


def split_per_speaker(labels, holdout_fraction=0.2):
    """Deterministic split: the last ``holdout_fraction`` of each speaker's items is held out."""
    labels = list(labels)
    by_spk = {}
    for i, lab in enumerate(labels):
        by_spk.setdefault(lab, []).append(i)
    train_idx, test_idx = [], []
    for lab, idx in sorted(by_spk.items()):
        if len(idx) < 2:
            raise ValueError(f"speaker {lab!r} needs at least 2 utterances")
        n_test = max(1, int(round(len(idx) * holdout_fraction)))
        train_idx += idx[:-n_test]
        test_idx += idx[-n_test:]
    return sorted(train_idx), sorted(test_idx)


@dataclass
class ClassifierResult:
    model: SpeakerClassifier
    accuracy: float
    train_idx: List[int]
    test_idx: List[int]


def train_speaker_classifier(mels, labels, n_speakers=None, epochs=200, lr=3e-3, seed=0, holdout_fraction=0.2):
    """Fit on a per-speaker training split and report held-out accuracy."""
    labels = np.asarray(labels, dtype=np.int64)
    if n_speakers is None:
        n_speakers = int(labels.max()) + 1
    if len(set(labels.tolist())) < 2:
        raise ValueError("speaker classification needs at least 2 speakers")
    train_idx, test_idx = split_per_speaker(labels, holdout_fraction)
    torch.manual_seed(seed)
    clf = SpeakerClassifier(mels[0].shape[1], n_speakers)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    x, lengths = _pad_mels([mels[i] for i in train_idx])
    y = torch.as_tensor(labels[train_idx])
    clf.train()
    for _ in range(epochs):
        opt.zero_grad()
        loss = F.cross_entropy(clf(x, lengths), y)
        loss.backward()
        opt.step()
    acc = classifier_accuracy(clf, [mels[i] for i in test_idx], labels[test_idx])
    return ClassifierResult(clf, acc, train_idx, test_idx)


@torch.no_grad()
def classifier_accuracy(clf, mels, labels):
    clf.eval()
    x, lengths = _pad_mels(mels)
    pred = clf(x, lengths).argmax(-1).numpy()
    return float(np.mean(pred == np.asarray(labels)))


@torch.no_grad()
def classifier_embeddings(clf, mels):
    clf.eval()
    x, lengths = _pad_mels(mels)
    return clf.embedding(x, lengths).numpy()


@dataclass
class VerificationTrial:
    enroll: Sequence[int]  # indices into the enrollment pool
    test: int  # index into the test pool
    same_speaker: bool
    score: float = float("nan")


def _draw_distinct(rng, candidates, k, exclude=None):
    cands = [c for c in candidates if c != exclude]
    if len(cands) < k:
        raise ValueError("not enough utterances for enrollment")
    return [cands[i] for i in rng.choice(len(cands), size=k, replace=False)]


def make_trials(enroll_speakers, test_speakers, n_trials=40960, n_enroll=1, seed=0, same_pool=False):
    """Random pairing: exactly half same-speaker, half different-speaker trials.

    Trial ``i`` is drawn from a generator seeded by ``(seed, i)``, so the set is
    identical however the work is partitioned. With ``same_pool`` the test
    utterance is excluded from its own enrollment set.
    """
    enroll_by_spk = {}
    for i, s in enumerate(enroll_speakers):
        enroll_by_spk.setdefault(s, []).append(i)
    test_by_spk = {}
    for i, s in enumerate(test_speakers):
        test_by_spk.setdefault(s, []).append(i)
    speakers = sorted(set(enroll_by_spk) & set(test_by_spk))
    if len(speakers) < 2:
        raise ValueError("need at least two speakers present in both pools")
    trials = []
    for i in range(n_trials):
        rng = np.random.default_rng([seed, i])
        same = i % 2 == 0
        s = speakers[rng.integers(len(speakers))]
        test = test_by_spk[s][rng.integers(len(test_by_spk[s]))]
        if same:
            target = s
        else:
            others = [o for o in speakers if o != s]
            target = others[rng.integers(len(others))]
        exclude = test if (same_pool and target == s) else None
        enroll = _draw_distinct(rng, enroll_by_spk[target], n_enroll, exclude)
        trials.append(VerificationTrial(enroll, test, same))
    return trials


def score_trials(trials, enroll_embeddings, test_embeddings):
    """Cosine similarity between the test embedding and the mean enrollment embedding."""
    for t in trials:
        e = np.mean(enroll_embeddings[list(t.enroll)], axis=0)
        x = test_embeddings[t.test]
        denom = np.linalg.norm(e) * np.linalg.norm(x)
        t.score = float(e @ x / denom) if denom > 0 else 0.0
    return trials


def estimate_eer(trials=None, scores=None, labels=None):
    """Equal error rate, interpolated linearly between the two operating points
    that bracket FAR = FRR. A trial is accepted when ``score >= threshold``.

    Pass either ``trials`` or parallel ``scores``/``labels`` arrays.
    """
    if trials is not None:
        scores = np.array([t.score for t in trials], dtype=np.float64)
        labels = np.array([t.same_speaker for t in trials], dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("EER needs both same-speaker and different-speaker trials")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite scores")
    thresholds = np.unique(scores)
    # accepted counts at each threshold (score >= t)
    order = np.sort(scores[labels])
    pos_below = np.searchsorted(order, thresholds, side="left")
    neg_sorted = np.sort(scores[~labels])
    neg_at_or_above = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    frr = np.concatenate([[0.0], pos_below / n_pos, [1.0]])
    far = np.concatenate([[1.0], neg_at_or_above / n_neg, [0.0]])
    diff = frr - far  # non-decreasing from -1 to 1
    j = int(np.argmax(diff >= 0))
    if diff[j] == 0:
        return float(far[j])
    i = j - 1
    a = -diff[i] / (diff[j] - diff[i])
    return float(far[i] + a * (far[j] - far[i]))


@dataclass
class EmbeddingProjection:
    coords: np.ndarray  # [S, 2]
    components: np.ndarray  # [2, D]
    explained_variance_ratio: np.ndarray  # [2]


def embedding_pca(embeddings, n_components=2):
    """Top principal components of the covariance, sign fixed so the first
    non-zero loading of each component is positive."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least 2 embeddings")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    comps = evecs[:, :n_components].T.copy()
    for c in comps:
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        if len(nz) and c[nz[0]] < 0:
            c *= -1.0
    total = evals.clip(min=0).sum()
    ratio = evals[:n_components].clip(min=0) / total if total > 0 else np.zeros(n_components)
    return EmbeddingProjection(xc @ comps.T, comps, ratio)


def linear_separability(coords, labels):
    """Training accuracy of a linear classifier on the 2-D coordinates."""
    from sklearn.linear_model import LogisticRegression

    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        return 1.0
    clf = LogisticRegression(C=1e4, max_iter=10000)
    clf.fit(coords, labels)
    return float(clf.score(coords, labels))


def read_labels(path):
    """CSV with a ``speaker_id`` column plus one column per label (e.g. gender, region)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows or "speaker_id" not in rows[0]:
        raise ValueError(f"{path}: expected a 'speaker_id' column")
    return {r["speaker_id"]: {k: v for k, v in r.items() if k != "speaker_id"} for r in rows}


def write_pca_csv(path, speakers, proj, labels=None):
    label_cols = sorted(next(iter(labels.values())).keys()) if labels else []
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["speaker_id", "pc1", "pc2"] + label_cols)
        for spk, (a, b) in zip(speakers, proj.coords):
            w.writerow([spk, repr(float(a)), repr(float(b))] + [labels.get(spk, {}).get(c, "") for c in label_cols])


def plot_pca(path, speakers, proj, labels=None, label_column=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    if labels and label_column:
        groups = {}
        for i, spk in enumerate(speakers):
            groups.setdefault(labels.get(spk, {}).get(label_column, "?"), []).append(i)
        for name, idx in sorted(groups.items()):
            ax.scatter(proj.coords[idx, 0], proj.coords[idx, 1], label=name, s=30)
        ax.legend(title=label_column)
    else:
        ax.scatter(proj.coords[:, 0], proj.coords[:, 1], s=30)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def gaussian_overlap_eer(separation):
    """Analytic EER of two unit-variance Gaussians whose means differ by ``separation``."""
    return 0.5 * (1.0 + math.erf(-separation / 2.0 / math.sqrt(2.0)))
