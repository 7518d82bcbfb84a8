"""Posterior smoothing, ordered confidence scoring and streaming triggers."""
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, OracleRangeError, WindowTooShortError


@dataclass(frozen=True)
class KeywordSpec:
    word_classes: tuple = (1, 2, 3)

    def __post_init__(self):
        wc = tuple(int(w) for w in self.word_classes)
        if not wc or 0 in wc or len(set(wc)) != len(wc):
            raise ConfigError(f"keyword classes must be distinct and nonzero, got {wc}")
        object.__setattr__(self, "word_classes", wc)

    @property
    def num_words(self):
        return len(self.word_classes)

    @classmethod
    def for_words(cls, num_words):
        return cls(tuple(range(1, num_words + 1)))


@dataclass(frozen=True)
class DetectorConfig:
    smooth_frames: int = 30
    window_frames: int = 100
    threshold: float = 0.5

    def __post_init__(self):
        if self.smooth_frames < 1 or self.window_frames < 1:
            raise ConfigError("smoothing length and scoring window must be positive")


@dataclass(frozen=True)
class TriggerEvent:
    frame: int
    confidence: float


def smooth(posteriors, length):
    """Trailing mean over the last ``length`` frames, truncated at the stream start."""
    p = np.asarray(posteriors, dtype=np.float64)
    if length < 1:
        raise ConfigError("smoothing length must be >= 1")
    csum = np.cumsum(p, axis=0)
    out = csum.copy()
    out[length:] -= csum[:-length]
    counts = np.minimum(np.arange(1, len(p) + 1), length)
    return out / counts.reshape((-1,) + (1,) * (p.ndim - 1))


def confidence(smoothed, spec):
    """Best ordered product of per-word scores, as a geometric mean.

    ``smoothed`` is a [T_s, classes] window. Runs in O(M * T_s): ``best`` holds,
    for every frame t, the best product of the first i words with word i
    placed at t.
    """
    s = np.asarray(smoothed, dtype=np.float64)
    m = spec.num_words
    if len(s) < m:
        raise WindowTooShortError(f"window of {len(s)} frames cannot hold {m} ordered words")
    best = s[:, spec.word_classes[0]].copy()
    for w in spec.word_classes[1:]:
        prefix = np.maximum.accumulate(best)
        nxt = np.zeros_like(best)
        nxt[1:] = s[1:, w] * prefix[:-1]
        best = nxt
    return float(best.max() ** (1.0 / m))


def confidence_bruteforce(smoothed, spec, max_frames=16, max_words=4):
    """Exhaustive maximum over all strictly increasing frame tuples (test oracle)."""
    s = np.asarray(smoothed, dtype=np.float64)
    m = spec.num_words
    if len(s) > max_frames or m > max_words:
        raise OracleRangeError(f"brute force limited to T_s <= {max_frames}, M <= {max_words}")
    if len(s) < m:
        raise WindowTooShortError(f"window of {len(s)} frames cannot hold {m} ordered words")
    best = 0.0
    for frames in itertools.combinations(range(len(s)), m):
        prod = 1.0
        for t, w in zip(frames, spec.word_classes):
            prod *= s[t, w]
        best = max(best, prod)
    return best ** (1.0 / m)


def confidence_trace(smoothed, spec, window):
    """Confidence of every full scoring window; entry k covers frames [k, k + window)."""
    s = np.asarray(smoothed, dtype=np.float64)
    if len(s) < window:
        raise WindowTooShortError(f"sequence of {len(s)} frames is shorter than the {window}-frame window")
    return np.array([confidence(s[k:k + window], spec) for k in range(len(s) - window + 1)])


def triggers_from_trace(trace, threshold, window):
    """Greedy refractory triggering: fire at the first window reaching the
    threshold, then ignore the next ``window`` window positions."""
    events = []
    k = 0
    n = len(trace)
    while k < n:
        hits = np.flatnonzero(trace[k:] >= threshold)
        if not len(hits):
            break
        k += hits[0]
        events.append(TriggerEvent(int(k) + window - 1, float(trace[k])))
        k += window
    return events


def stream_detect(posteriors, config, spec):
    """Trigger events over a whole posterior stream.

    Event frames index the last frame of the triggering scoring window.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    if len(p) < config.window_frames:
        raise WindowTooShortError(
            f"stream of {len(p)} frames is shorter than the {config.window_frames}-frame window")
    trace = confidence_trace(smooth(p, config.smooth_frames), spec, config.window_frames)
    return triggers_from_trace(trace, config.threshold, config.window_frames)
