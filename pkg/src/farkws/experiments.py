"""Directional experiments on the synthetic corpus.

These helpers train small numbers of models on a fixed synthetic split and
measure the quantities the acceptance suite compares: FR at the FA budget per
test domain, penultimate-layer CORAL distance between domains, window
classification accuracy and domain-head accuracy.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .dataset import build_windows, featurize
from .detect import DetectorConfig
from .evaluation import evaluate_scores, score_utterances
from .ingest import DomainTag, synth_corpus
from .losses import LossConfig, coral_loss
from .train import TrainConfig, fit_keyword_classifier

log = logging.getLogger(__name__)


@dataclass
class SurrogateSplit:
    train_windows: object  # WindowSet
    test_utterances: object  # UtteranceSet
    test_windows: object  # WindowSet


def make_split(train_seed=11, test_seed=12, train_counts=(500, 300), test_counts=(100, 150),
               negatives_per_clip=2):
    """Featurized train windows plus held-out test utterances and windows."""
    train = featurize(synth_corpus(train_seed, train_counts))
    test = featurize(synth_corpus(test_seed, test_counts))
    return SurrogateSplit(build_windows(train, negatives_per_clip, seed=train_seed), test,
                          build_windows(test, negatives_per_clip, seed=test_seed))


def restrict(windows, domains):
    keep = np.flatnonzero(np.isin(windows.domains, [DomainTag.parse(d).index for d in domains]))
    return windows.subset(keep)


def train_model(windows, variant="baseline", loss=None, epochs=8, seed=0):
    cfg = TrainConfig(max_epochs=epochs, seed=seed)
    return fit_keyword_classifier(windows, variant, loss or LossConfig(), cfg)


def fr_by_domain(net, test_utterances, domains, detector=DetectorConfig()):
    """FR at 1 FA/hour for each requested test domain (scoring only those clips)."""
    utts = test_utterances.select(domains=domains)
    summary, _ = evaluate_scores(score_utterances(net, utts, detector), detector.window_frames)
    return {d: summary[DomainTag.parse(d).value]["fr_rate"] for d in domains}


def forward_windows(net, windows, batch=512):
    """Forward records of every window, concatenated field by field."""
    words, feats, doms = [], [], []
    for k in range(0, len(windows), batch):
        rec, _ = net.forward(windows.x[k:k + batch].astype(np.float64))
        words.append(rec.word_logits)
        feats.append(rec.feature_layer)
        if rec.domain_logits is not None:
            doms.append(rec.domain_logits)
    return (np.concatenate(words), np.concatenate(feats), np.concatenate(doms) if doms else None)


def window_accuracy(net, windows):
    words, _, _ = forward_windows(net, windows)
    return float(np.mean(words.argmax(axis=1) == windows.labels))


def domain_head_accuracy(net, windows):
    _, _, doms = forward_windows(net, windows)
    return float(np.mean(doms.argmax(axis=1) == windows.domains))


def coral_distance(net, windows, source="0.25m", target="1m"):
    """CORAL loss between the penultimate features of two domains' windows."""
    _, feats, _ = forward_windows(net, windows)
    src = feats[windows.domains == DomainTag.parse(source).index]
    tgt = feats[windows.domains == DomainTag.parse(target).index]
    return coral_loss(src, tgt)[0]
