"""Audio/manifest readers, training-window extraction and the synthetic corpus."""
import enum
import json
import os
import warnings
import wave
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .dsp import SAMPLE_RATE, num_frames
from .errors import FormatError, ParseError, UnsupportedFormatError, ValidationError

WINDOW = 40
WINDOW_BEFORE = 20  # keyword window is [end - 20, end + 19]
FILLER_EXCLUSION = 50
NUM_WORDS = 3


class DomainTag(enum.Enum):
    D025 = "0.25m"
    D1M = "1m"
    D3M = "3m"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower()
        for tag in cls:
            if key in (tag.value, tag.name.lower()):
                return tag
        raise ValueError(f"unknown domain {text!r} (expected 0.25m, 1m or 3m)")

    @property
    def index(self):
        return list(DomainTag).index(self)

    @property
    def is_source(self):
        return self is DomainTag.D025


POLARITIES = ("positive", "negative")


class ShortClipWarning(UserWarning):
    """A clip had fewer frames than one training window."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clip_id: str = ""
    domain: DomainTag = DomainTag.D025
    polarity: str = "negative"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedFormatError(f"sample rate {self.sample_rate} Hz (only 16000 supported)")
        if self.samples.ndim != 1 or len(self.samples) == 0:
            raise ValidationError("clip samples must be a nonempty mono array")
        if np.abs(self.samples).max() > 1.0:
            raise ValidationError("samples must lie in [-1, 1]")
        if self.polarity not in POLARITIES:
            raise ValidationError(f"polarity must be positive or negative, got {self.polarity!r}")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class ManifestEntry:
    path: str
    domain: DomainTag
    polarity: str
    word_end_frames: tuple = None

    def to_json(self):
        rec = {"path": self.path, "domain": self.domain.value, "polarity": self.polarity}
        if self.word_end_frames is not None:
            rec["ends"] = [int(e) for e in self.word_end_frames]
        return json.dumps(rec)

    @property
    def clip_id(self):
        return os.path.splitext(os.path.basename(self.path))[0]


@dataclass
class TrainingWindow:
    features: np.ndarray
    word_label: int
    domain: DomainTag
    clip_id: str = ""


# -- WAV --------------------------------------------------------------------

def read_wav(path, domain=DomainTag.D025, polarity="negative", clip_id=None):
    """Read a PCM16 mono 16 kHz WAV file into an :class:`AudioClip`."""
    try:
        with wave.open(os.fspath(path), "rb") as wf:
            channels, width, rate, count = (
                wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes())
            if channels != 1 or width != 2 or rate != SAMPLE_RATE:
                raise UnsupportedFormatError(
                    f"{path}: {channels} channel(s), {8 * width}-bit, {rate} Hz; "
                    "need mono PCM16 at 16 kHz")
            raw = wf.readframes(count)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    if clip_id is None:
        clip_id = os.path.splitext(os.path.basename(path))[0]
    return AudioClip(pcm / 32768.0, SAMPLE_RATE, clip_id, DomainTag.parse(domain), polarity)


def to_pcm16(samples):
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    with wave.open(os.fspath(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(to_pcm16(samples).tobytes())


# -- manifests --------------------------------------------------------------

def parse_manifest(path, num_words=NUM_WORDS):
    """Parse a JSON-lines manifest; blank lines are skipped."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            for key in ("path", "domain", "polarity"):
                if key not in rec:
                    raise ParseError(f"missing field {key!r}", lineno)
            try:
                domain = DomainTag.parse(rec["domain"])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            polarity = rec["polarity"]
            if polarity not in POLARITIES:
                raise ParseError(f"bad polarity {polarity!r}", lineno)
            ends = None
            if polarity == "positive":
                if "ends" not in rec:
                    raise ParseError("missing field 'ends' for positive entry", lineno)
                ends = tuple(int(e) for e in rec["ends"])
                if len(ends) != num_words:
                    raise ValidationError(f"line {lineno}: expected {num_words} end frames, got {len(ends)}")
                if any(b <= a for a, b in zip(ends, ends[1:])):
                    raise ValidationError(f"line {lineno}: end frames {list(ends)} are not strictly increasing")
            entries.append(ManifestEntry(rec["path"], domain, polarity, ends))
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(entry.to_json() + "\n")


# -- windows ----------------------------------------------------------------

def keyword_window_start(end_frame):
    return end_frame - WINDOW_BEFORE


def filler_starts(num_frames_, word_end_frames=()):
    """Start frames eligible for filler windows.

    A start must be at least 50 frames from every word end and the filler
    window may not intersect any keyword window.
    """
    starts = np.arange(num_frames_ - WINDOW + 1)
    ok = np.ones(len(starts), dtype=bool)
    for e in word_end_frames or ():
        lo = keyword_window_start(e)
        overlaps = (starts + WINDOW > lo) & (starts < lo + WINDOW)
        ok &= (np.abs(starts - e) >= FILLER_EXCLUSION) & ~overlaps
    return starts[ok]


def make_windows(features, entry, negatives_per_clip, rng=None):
    """Cut labeled 40x40 training windows from one utterance."""
    features = np.asarray(features)
    t = features.shape[0]
    if t < WINDOW:
        warnings.warn(f"{entry.path}: {t} frames is shorter than a {WINDOW}-frame window",
                      ShortClipWarning, stacklevel=2)
        return []
    rng = np.random.default_rng(rng)
    cid = entry.clip_id
    out = []
    ends = entry.word_end_frames if entry.polarity == "positive" else None
    for label, e in enumerate(ends or (), 1):
        s = keyword_window_start(e)
        if s >= 0 and s + WINDOW <= t:
            out.append(TrainingWindow(features[s:s + WINDOW], label, entry.domain, cid))
    starts = filler_starts(t, ends)
    k = min(negatives_per_clip, len(starts))
    if k > 0:
        for s in np.sort(rng.choice(starts, size=k, replace=False)):
            out.append(TrainingWindow(features[s:s + WINDOW], 0, entry.domain, cid))
    return out


# -- synthetic corpus -------------------------------------------------------

CLIP_SECONDS = 1.6
# (start Hz, end Hz) of the three keyword "words"
KEYWORD_CHIRPS = ((500.0, 900.0), (1400.0, 1000.0), (700.0, 1800.0))
WORD_SECONDS = 0.2
SELF_NOISE = 3e-4

# reverberation time (s), SNR (dB), attenuation (dB)
DOMAIN_ACOUSTICS = {
    DomainTag.D025: None,
    DomainTag.D1M: (0.2, 20.0, 0.0),
    DomainTag.D3M: (0.5, 10.0, 6.0),
}


@dataclass
class SynthSource:
    """A dry synthetic utterance together with its construction schedule."""

    samples: np.ndarray
    polarity: str
    word_end_samples: tuple = None

    @property
    def word_end_frames(self):
        if self.word_end_samples is None:
            return None
        return tuple(end_sample_to_frame(n) for n in self.word_end_samples)


@dataclass
class Corpus:
    clips: list = field(default_factory=list)
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.clips)

    def select(self, domains=None, polarity=None):
        keep = [i for i, e in enumerate(self.entries)
                if (domains is None or e.domain in domains)
                and (polarity is None or e.polarity == polarity)]
        return Corpus([self.clips[i] for i in keep], [self.entries[i] for i in keep])


def end_sample_to_frame(n, frame_length=400, frame_shift=160):
    """Frame whose center is nearest to sample ``n``."""
    return int(round((n - frame_length / 2) / frame_shift))


def _chirp(f0, f1, n, amp, rng):
    t = np.arange(n) / SAMPLE_RATE
    dur = n / SAMPLE_RATE
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / dur) + rng.uniform(0, 2 * np.pi)
    sig = np.sin(phase) + 0.4 * np.sin(2 * phase)
    ramp = min(n // 2, int(0.015 * SAMPLE_RATE))
    env = np.ones(n)
    env[:ramp] = np.hanning(2 * ramp)[:ramp]
    env[n - ramp:] = np.hanning(2 * ramp)[ramp:]
    return amp * env * sig / 1.4


def _is_keyword_like(words):
    """True if word ids 0, 1, 2 occur in order (not necessarily adjacent)."""
    want = 0
    for w in words:
        if w == want:
            want += 1
            if want == NUM_WORDS:
                return True
    return False


def synth_source(rng, polarity, seconds=CLIP_SECONDS):
    """Generate one dry utterance.

    Positives carry the three keyword chirps in order; negatives carry 2-4
    segments mixing random chirps with keyword words in non-keyword order.
    """
    n = int(round(seconds * SAMPLE_RATE))
    out = rng.normal(0.0, SELF_NOISE, n)
    scale = rng.uniform(0.92, 1.08)
    amp = rng.uniform(0.25, 0.5)
    seg_len = lambda: int(WORD_SECONDS * SAMPLE_RATE * rng.uniform(0.9, 1.1))  # noqa: E731
    gap_len = lambda: int(rng.uniform(0.04, 0.08) * SAMPLE_RATE)  # noqa: E731
    if polarity == "positive":
        lens = [seg_len() for _ in range(NUM_WORDS)]
        gaps = [gap_len() for _ in range(NUM_WORDS - 1)]
        span = sum(lens) + sum(gaps)
        # keep every keyword window inside the clip
        lo = (WINDOW_BEFORE + 2) * 160 + 200 - lens[0]
        hi = n - span - (WINDOW - WINDOW_BEFORE + 2) * 160 - 200
        pos = int(rng.integers(lo, max(lo, hi) + 1))
        ends = []
        for w, (ln, gap) in enumerate(zip(lens, gaps + [0])):
            f0, f1 = KEYWORD_CHIRPS[w]
            out[pos:pos + ln] += _chirp(f0 * scale, f1 * scale, ln, amp, rng)
            pos += ln
            ends.append(pos)
            pos += gap
        return SynthSource(np.clip(out, -1, 1), polarity, tuple(ends))
    if polarity != "negative":
        raise ValueError(f"bad polarity {polarity!r}")
    while True:
        count = int(rng.integers(2, 5))
        words = [int(rng.integers(0, NUM_WORDS)) if rng.random() < 0.35 else -1 for _ in range(count)]
        if not _is_keyword_like(words):
            break
    lens = [seg_len() for _ in words]
    gaps = [gap_len() for _ in words]
    pos = int(rng.integers(0, max(1, n - sum(lens) - sum(gaps))))
    for w, ln, gap in zip(words, lens, gaps):
        if pos + ln > n:
            break
        if w < 0:
            f0, f1 = rng.uniform(300.0, 3000.0, size=2)
        else:
            f0, f1 = KEYWORD_CHIRPS[w]
            f0, f1 = f0 * scale, f1 * scale
        out[pos:pos + ln] += _chirp(f0, f1, ln, amp, rng)
        pos += ln + gap
    return SynthSource(np.clip(out, -1, 1), polarity, None)


def impulse_response(rt60, rng):
    """Exponentially decaying noise tail after a unit direct path, unit energy."""
    n = int(rt60 * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    h = rng.normal(0.0, 1.0, n) * np.exp(-6.908 * t / rt60) * 0.3
    h[0] = 1.0
    return h / np.sqrt(np.sum(h * h))


def render_domain(samples, domain, rng):
    """Apply the far-field channel of ``domain`` to a dry waveform.

    The result is quantized to the PCM16 grid so it survives a WAV round trip
    unchanged.
    """
    x = np.asarray(samples, dtype=np.float64)
    acoustics = DOMAIN_ACOUSTICS[DomainTag.parse(domain)]
    if acoustics is not None:
        rt60, snr_db, atten_db = acoustics
        x = fftconvolve(x, impulse_response(rt60, rng))[:len(x)]
        noise_power = np.mean(x * x) / 10.0 ** (snr_db / 10.0)
        x = x + rng.normal(0.0, np.sqrt(noise_power), len(x))
        x = x * 10.0 ** (-atten_db / 20.0)
    return to_pcm16(np.clip(x, -1.0, 1.0)) / 32768.0


def _normalize_counts(per_domain_counts):
    if isinstance(per_domain_counts, dict):
        counts = {DomainTag.parse(k): tuple(v) for k, v in per_domain_counts.items()}
    else:
        pos, neg = per_domain_counts
        counts = {tag: (pos, neg) for tag in DomainTag}
    for tag, (pos, neg) in counts.items():
        if pos < 1 or neg < 1:
            raise ValidationError(f"domain {tag.value}: need at least one positive and one negative clip")
    return counts


def synth_corpus(seed, per_domain_counts):
    """Deterministic three-domain keyword corpus.

    ``per_domain_counts`` is either ``(positives, negatives)`` applied to every
    domain or a mapping from domain to such a pair. Each (domain, polarity)
    cell draws from its own child seed, so cells are independent of each
    other's sizes.
    """
    counts = _normalize_counts(per_domain_counts)
    children = np.random.SeedSequence(seed).spawn(len(DomainTag) * 2)
    corpus = Corpus()
    for d_idx, tag in enumerate(DomainTag):
        if tag not in counts:
            continue
        for p_idx, polarity in enumerate(POLARITIES):
            rng = np.random.default_rng(children[2 * d_idx + p_idx])
            for i in range(counts[tag][p_idx]):
                src = synth_source(rng, polarity)
                samples = render_domain(src.samples, tag, rng)
                cid = f"{tag.name.lower()}_{polarity[:3]}_{i:05d}"
                corpus.clips.append(AudioClip(samples, SAMPLE_RATE, cid, tag, polarity))
                corpus.entries.append(ManifestEntry(f"{cid}.wav", tag, polarity, src.word_end_frames))
    return corpus


def write_corpus(corpus, directory):
    """Write WAVs plus ``manifest.jsonl`` under ``directory``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    for clip, entry in zip(corpus.clips, corpus.entries):
        write_wav(os.path.join(directory, entry.path), clip.samples)
    manifest = os.path.join(directory, "manifest.jsonl")
    write_manifest(manifest, corpus.entries)
    return manifest


def load_corpus(manifest_path, num_words=NUM_WORDS):
    """Read every clip referenced by a manifest (paths relative to its directory)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    corpus = Corpus()
    for entry in parse_manifest(manifest_path, num_words):
        path = entry.path if os.path.isabs(entry.path) else os.path.join(base, entry.path)
        corpus.clips.append(read_wav(path, entry.domain, entry.polarity, entry.clip_id))
        corpus.entries.append(entry)
    return corpus


def clip_frames(clip):
    return num_frames(len(clip.samples))
