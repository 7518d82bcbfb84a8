"""In-memory feature and window tables shared by training and scoring."""
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .dsp import FrontendConfig, compute_fbank
from .ingest import WINDOW, DomainTag, make_windows

DOMAINS = list(DomainTag)


@dataclass
class UtteranceSet:
    """Per-utterance feature matrices with their manifest entries."""

    entries: list
    features: list
    durations: list = None  # seconds of audio per utterance

    def __post_init__(self):
        if self.durations is None:
            self.durations = [((len(f) - 1) * 160 + 400) / 16000.0 for f in self.features]

    def __len__(self):
        return len(self.entries)

    @property
    def domain_index(self):
        return np.array([e.domain.index for e in self.entries], dtype=np.int64)

    def subset(self, keep):
        keep = list(keep)
        return UtteranceSet([self.entries[i] for i in keep], [self.features[i] for i in keep],
                            [self.durations[i] for i in keep])

    def select(self, domains=None, polarity=None):
        domains = None if domains is None else {DomainTag.parse(d) for d in domains}
        return self.subset(
            i for i, e in enumerate(self.entries)
            if (domains is None or e.domain in domains) and (polarity is None or e.polarity == polarity))

    def length_groups(self):
        """Indices of utterances grouped by frame count (for batched recurrent passes)."""
        groups = defaultdict(list)
        for i, f in enumerate(self.features):
            groups[len(f)].append(i)
        return [groups[k] for k in sorted(groups)]


def featurize(corpus, cfg=FrontendConfig(), features=None):
    """Compute (or adopt precomputed) log-Mel features for every clip of a corpus."""
    if features is None:
        features = [compute_fbank(clip, cfg) for clip in corpus.clips]
    return UtteranceSet(list(corpus.entries), list(features), [clip.duration for clip in corpus.clips])


@dataclass
class WindowSet:
    x: np.ndarray  # [N, 40, 40] float32
    labels: np.ndarray
    domains: np.ndarray  # DomainTag.index per window
    clip_index: np.ndarray  # row into ``utterances``
    utterances: UtteranceSet

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return WindowSet(self.x[idx], self.labels[idx], self.domains[idx], self.clip_index[idx],
                         self.utterances)


def build_windows(utts, negatives_per_clip=2, seed=0):
    """Cut training windows from every utterance; filler sampling is seeded per clip."""
    xs, labels, domains, clips = [], [], [], []
    children = np.random.SeedSequence(seed).spawn(len(utts))
    for i, (entry, feats) in enumerate(zip(utts.entries, utts.features)):
        for w in make_windows(feats, entry, negatives_per_clip, np.random.default_rng(children[i])):
            xs.append(w.features.astype(np.float32))
            labels.append(w.word_label)
            domains.append(w.domain.index)
            clips.append(i)
    x = np.stack(xs) if xs else np.zeros((0, WINDOW, WINDOW), dtype=np.float32)
    return WindowSet(x, np.array(labels, dtype=np.int64), np.array(domains, dtype=np.int64),
                     np.array(clips, dtype=np.int64), utts)
