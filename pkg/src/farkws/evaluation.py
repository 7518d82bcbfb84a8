"""Clip scoring and the false-reject rate at a false-alarm-per-hour budget."""
import csv
import io
import json
import logging
from dataclasses import dataclass

import numpy as np

from .dataset import DOMAINS
from .detect import DetectorConfig, KeywordSpec, confidence_trace, smooth, triggers_from_trace
from .errors import ValidationError
from .ingest import WINDOW, DomainTag
from .netcore import softmax
from .train import utterance_embeddings

log = logging.getLogger(__name__)


def default_grid(points=1001):
    return np.linspace(0.0, 1.0, points)


def clip_posteriors(net, features, embedding=None, batch=256):
    """Word posteriors for every full 40-frame window of an utterance.

    Row j belongs to the window starting at frame j, i.e. centred on frame
    j + 20 (the alignment used for keyword training windows).
    """
    feats = np.asarray(features, dtype=np.float64)
    starts = np.arange(len(feats) - WINDOW + 1)
    if len(starts) == 0:
        return np.zeros((0, net.num_classes))
    idx = starts[:, None] + np.arange(WINDOW)
    out = []
    for k in range(0, len(starts), batch):
        x = feats[idx[k:k + batch]]
        emb = None if embedding is None else np.repeat(np.asarray(embedding)[None], len(x), axis=0)
        rec, _ = net.forward(x, emb)
        out.append(softmax(rec.word_logits))
    return np.concatenate(out)



@dataclass
class ClipScore:
    clip_id: str
    domain: DomainTag
    polarity: str
    duration: float
    trace: np.ndarray  # confidence per scoring-window position

    @property
    def max_confidence(self):
        return float(self.trace.max()) if len(self.trace) else 0.0


def score_utterances(net, utts, detector=DetectorConfig(), spec=None, domain_net=None):
    """Confidence traces for every utterance of ``utts``."""
    spec = spec or KeywordSpec.for_words(net.num_words)
    embs = utterance_embeddings(domain_net, utts) if domain_net is not None else None
    scores = []
    for i, (entry, feats) in enumerate(zip(utts.entries, utts.features)):
        post = clip_posteriors(net, feats, None if embs is None else embs[i])
        if len(post) >= detector.window_frames:
            trace = confidence_trace(smooth(post, detector.smooth_frames), spec, detector.window_frames)
        else:
            log.warning("%s: %d posterior frames < %d-frame window; scored as 0",
                        entry.clip_id, len(post), detector.window_frames)
            trace = np.zeros(1)
        scores.append(ClipScore(entry.clip_id, entry.domain, entry.polarity, utts.durations[i], trace))
    return scores


@dataclass
class ScoredSet:
    positives: list  # (clip_id, max confidence)
    negatives: list  # (clip_id, confidence trace)
    negative_audio_hours: float
    window_frames: int = 100


def scored_set(clip_scores, window_frames=100, domain=None):
    if domain is not None:
        domain = DomainTag.parse(domain)
        clip_scores = [c for c in clip_scores if c.domain is domain]
    pos = [(c.clip_id, c.max_confidence) for c in clip_scores if c.polarity == "positive"]
    neg = [(c.clip_id, c.trace) for c in clip_scores if c.polarity == "negative"]
    hours = sum(c.duration for c in clip_scores if c.polarity == "negative") / 3600.0
    return ScoredSet(pos, neg, hours, window_frames)


@dataclass
class OperatingPoint:
    threshold: float
    fa_per_hour: float
    fr_rate: float
    false_alarms: int = 0


def count_false_alarms(traces, threshold, window):
    """Refractory-deduplicated trigger count summed over negative traces."""
    return sum(len(triggers_from_trace(t, threshold, window)) for t in traces)


def sweep(scored, grid=None):
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if not scored.positives or not scored.negatives:
        raise ValidationError("sweep needs both positive and negative clips")
    if scored.negative_audio_hours <= 0:
        raise ValidationError("negative audio duration must be positive")
    if np.any(np.diff(grid) < 0):
        raise ValidationError("threshold grid must be sorted ascending")
    pos = np.sort([h for _, h in scored.positives])
    window = scored.window_frames
    short = [t for _, t in scored.negatives if len(t) <= window]
    long_ = [t for _, t in scored.negatives if len(t) > window]
    # a trace no longer than the refractory span fires at most once
    short_max = np.sort([t.max() for t in short]) if short else np.zeros(0)
    points = []
    for theta in grid:
        fa = len(short_max) - int(np.searchsorted(short_max, theta, side="left"))
        if long_:
            fa += count_false_alarms(long_, theta, window)
        fr = np.searchsorted(pos, theta, side="left") / len(pos)
        points.append(OperatingPoint(float(theta), fa / scored.negative_audio_hours, float(fr), int(fa)))
    return points


@dataclass
class FROperatingResult:
    point: OperatingPoint
    saturated: bool
    below: OperatingPoint = None  # next lower threshold (exceeds the FA budget)
    above: OperatingPoint = None


def fr_at_fa(points, target_fa=1.0):
    """Smallest-threshold operating point meeting the false-alarm budget."""
    if not points:
        raise ValidationError("empty sweep")
    for k, p in enumerate(points):
        if p.fa_per_hour <= target_fa:
            below = points[k - 1] if k > 0 else None
            above = points[k + 1] if k + 1 < len(points) else None
            log.debug("FR@%.2g FA/h: %s (neighbours %s / %s)", target_fa, p, below, above)
            return FROperatingResult(p, False, below, above)
    log.warning("no threshold reaches %.3g FA/h; reporting the largest threshold", target_fa)
    return FROperatingResult(points[-1], True, points[-2] if len(points) > 1 else None, None)


def det_points(points):
    """(fa_per_hour, fr_rate) rows ordered by threshold."""
    return [(p.fa_per_hour, p.fr_rate) for p in sorted(points, key=lambda p: p.threshold)]


def sweep_csv(points):
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["threshold", "fa_per_hour", "fr_rate"])
    for p in sorted(points, key=lambda p: p.threshold):
        out.writerow([repr(p.threshold), repr(p.fa_per_hour), repr(p.fr_rate)])
    return buf.getvalue()


def write_sweep_csv(path, points):
    with open(path, "w", newline="") as fh:
        fh.write(sweep_csv(points))


def evaluate_scores(clip_scores, window_frames=100, grid=None, target_fa=1.0):
    """Per-domain sweeps and chosen operating points.

    Returns ``(summary, sweeps)`` where ``summary`` maps domain value
    (``"0.25m"``, ...) to the operating-point record.
    """
    summary, sweeps = {}, {}
    for tag in DOMAINS:
        ss = scored_set(clip_scores, window_frames, tag)
        if not ss.positives or not ss.negatives:
            continue
        pts = sweep(ss, grid)
        res = fr_at_fa(pts, target_fa)
        sweeps[tag.value] = pts
        summary[tag.value] = {
            "threshold": res.point.threshold,
            "fa_per_hour": res.point.fa_per_hour,
            "fr_rate": res.point.fr_rate,
            "saturated": res.saturated,
            "positives": len(ss.positives),
            "negatives": len(ss.negatives),
            "negative_hours": ss.negative_audio_hours,
        }
    return summary, sweeps


def fr_at_one_fa(clip_scores, domain, window_frames=100, grid=None):
    ss = scored_set(clip_scores, window_frames, domain)
    return fr_at_fa(sweep(ss, grid)).point.fr_rate


def summary_json(summary):
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"

