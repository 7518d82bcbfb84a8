"""Keyword CNN variants, the LSTM domain classifier and checkpoint I/O."""
import enum
import struct
from dataclasses import dataclass

import numpy as np

from . import netcore as nc
from .errors import ConfigError, FormatError, UsageError

INPUT_SIZE = 40
NUM_DOMAINS = 3

MODEL_MAGIC = b"FKWSMODL"
MODEL_VERSION = 1


class Variant(enum.Enum):
    BASELINE = 0
    EMB1 = 1
    EMB2 = 2
    MTL = 3

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        try:
            return cls[str(text).strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown variant {text!r} (baseline, emb1, emb2, mtl)") from None

    @property
    def uses_embedding(self):
        return self in (Variant.EMB1, Variant.EMB2)


DOMAIN_NET_TAG = 4  # checkpoint variant tag for the domain classifier


def shape_trace(input_size=INPUT_SIZE, num_stages=3):
    """Spatial sizes through the conv/pool stack, e.g. 40 -> 38 -> 19 -> ... -> 3."""
    sizes = [input_size]
    for _ in range(num_stages):
        sizes.append(sizes[-1] - 2)
        sizes.append(sizes[-1] // 2)
    return sizes


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ForwardRecord:
    word_logits: np.ndarray
    feature_layer: np.ndarray  # fc1 output after ReLU
    domain_logits: np.ndarray = None


class KeywordNet:
    """Three conv/pool stages, fc1 + ReLU, word output layer.

    EMB1 joins the domain embedding to the fc1 activations, EMB2 to the
    flattened conv output; MTL adds a domain head on the fc1 activations.
    """

    def __init__(self, variant, num_words, params, channels, fc1_width, embedding_dim):
        self.variant = Variant.parse(variant)
        self.num_words = num_words
        self.params = params
        self.channels = tuple(channels)
        self.fc1_width = fc1_width
        self.embedding_dim = embedding_dim if self.variant.uses_embedding else 0

    @property
    def num_classes(self):
        return self.num_words + 1

    @property
    def flat_width(self):
        return self.channels[-1] * shape_trace()[-1] ** 2

    def parameter_count(self):
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def forward(self, x, embedding=None):
        """Run a batch of [N, 40, 40] windows; returns ``(ForwardRecord, cache)``."""
        if self.variant.uses_embedding != (embedding is not None):
            need = "requires" if self.variant.uses_embedding else "does not take"
            raise ConfigError(f"variant {self.variant.name} {need} a domain embedding")
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        n = x.shape[0]
        caches = []
        h = x
        for k in range(1, 4):
            h, c_conv = nc.conv2d_forward(h, p[f"conv{k}.w"].value, p[f"conv{k}.b"].value)
            # relu and max commute; pooling first touches 4x fewer values
            h, c_pool = nc.maxpool2_forward(h)
            h, mask = nc.relu_forward(h)
            caches.append((c_conv, c_pool, mask))
        flat_shape = h.shape
        h = h.reshape(n, -1)
        if embedding is not None:
            embedding = np.asarray(embedding, dtype=np.float64).reshape(n, -1)
        if self.variant is Variant.EMB2:
            h, split2 = nc.concat_forward(h, embedding)
        h, c_fc1 = nc.linear_forward(h, p["fc1.w"].value, p["fc1.b"].value)
        feat, fmask = nc.relu_forward(h)
        head_in = feat
        if self.variant is Variant.EMB1:
            head_in, split1 = nc.concat_forward(feat, embedding)
        logits, c_out = nc.linear_forward(head_in, p["out.w"].value, p["out.b"].value)
        dlogits = None
        c_dom = None
        if self.variant is Variant.MTL:
            dlogits, c_dom = nc.linear_forward(feat, p["domain.w"].value, p["domain.b"].value)
        cache = {
            "convs": caches, "flat_shape": flat_shape, "fc1": c_fc1, "fmask": fmask,
            "out": c_out, "domain": c_dom,
            "split1": split1 if self.variant is Variant.EMB1 else None,
            "split2": split2 if self.variant is Variant.EMB2 else None,
        }
        return ForwardRecord(logits, feat, dlogits), cache

    def backward(self, cache, dword, ddomain=None, dfeature=None):
        """Accumulate parameter gradients given upstream gradients of the record."""
        p = self.params
        dhead, dw, db = nc.linear_backward(dword, cache["out"])
        p["out.w"].grad += dw
        p["out.b"].grad += db
        if self.variant is Variant.EMB1:
            dfeat, _ = nc.concat_backward(dhead, cache["split1"])
        else:
            dfeat = dhead
        if dfeature is not None:
            dfeat = dfeat + dfeature
        if ddomain is not None:
            if self.variant is not Variant.MTL:
                raise ConfigError("domain-logit gradient given to a network without a domain head")
            dd, dw, db = nc.linear_backward(ddomain, cache["domain"])
            p["domain.w"].grad += dw
            p["domain.b"].grad += db
            dfeat = dfeat + dd
        dh = nc.relu_backward(dfeat, cache["fmask"])
        dh, dw, db = nc.linear_backward(dh, cache["fc1"])
        p["fc1.w"].grad += dw
        p["fc1.b"].grad += db
        if self.variant is Variant.EMB2:
            dh, _ = nc.concat_backward(dh, cache["split2"])
        dh = dh.reshape(cache["flat_shape"])
        for k in (3, 2, 1):
            c_conv, c_pool, mask = cache["convs"][k - 1]
            dh = nc.relu_backward(dh, mask)
            dh = nc.maxpool2_backward(dh, c_pool)
            dh, dw, db = nc.conv2d_backward(dh, c_conv)
            p[f"conv{k}.w"].grad += dw
            p[f"conv{k}.b"].grad += db


def build_keyword_net(variant, num_words=3, seed=0, channels=(32, 32, 32), fc1_width=128,
                      embedding_dim=64):
    variant = Variant.parse(variant)
    if num_words < 1:
        raise ConfigError("need at least one keyword unit")
    trace = shape_trace()
    if trace[-1] < 1:
        raise ConfigError(f"conv stack collapses the input: {trace}")
    rng = np.random.default_rng(seed)
    params = {}
    c_in = 1
    for k, c_out in enumerate(channels, 1):
        params[f"conv{k}.w"] = nc.Parameter(_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        params[f"conv{k}.b"] = nc.Parameter(np.zeros(c_out))
        c_in = c_out
    flat = channels[-1] * trace[-1] ** 2
    emb = embedding_dim if variant.uses_embedding else 0
    fc1_in = flat + (emb if variant is Variant.EMB2 else 0)
    out_in = fc1_width + (emb if variant is Variant.EMB1 else 0)
    params["fc1.w"] = nc.Parameter(_uniform(rng, (fc1_width, fc1_in), fc1_in))
    params["fc1.b"] = nc.Parameter(np.zeros(fc1_width))
    params["out.w"] = nc.Parameter(_uniform(rng, (num_words + 1, out_in), out_in))
    params["out.b"] = nc.Parameter(np.zeros(num_words + 1))
    if variant is Variant.MTL:
        params["domain.w"] = nc.Parameter(_uniform(rng, (NUM_DOMAINS, fc1_width), fc1_width))
        params["domain.b"] = nc.Parameter(np.zeros(NUM_DOMAINS))
    return KeywordNet(variant, num_words, params, channels, fc1_width, embedding_dim)


def forward_keyword(net, window, embedding=None):
    """Single-window convenience wrapper returning an unbatched record."""
    emb = None if embedding is None else np.asarray(embedding)[None]
    rec, _ = net.forward(np.asarray(window)[None], emb)
    return ForwardRecord(rec.word_logits[0], rec.feature_layer[0],
                         None if rec.domain_logits is None else rec.domain_logits[0])


class DomainNet:
    """Two stacked LSTMs, mean pooling over time, linear domain classifier."""

    def __init__(self, params, hidden=64, frozen=False):
        self.params = params
        self.hidden = hidden
        self.frozen = frozen

    @property
    def embedding_dim(self):
        return self.hidden

    def parameter_count(self):
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def freeze(self):
        self.frozen = True
        return self

    def forward(self, feats):
        """feats: [N, T, 40] -> (class logits [N, 3], embeddings [N, H], cache)."""
        p = self.params
        h1, c1 = nc.lstm_forward(feats, p["lstm1.w_ih"].value, p["lstm1.w_hh"].value, p["lstm1.b"].value)
        h2, c2 = nc.lstm_forward(h1, p["lstm2.w_ih"].value, p["lstm2.w_hh"].value, p["lstm2.b"].value)
        emb, cp = nc.mean_pool_time_forward(h2)
        logits, cl = nc.linear_forward(emb, p["cls.w"].value, p["cls.b"].value)
        return logits, emb, (c1, c2, cp, cl)

    def backward(self, cache, dlogits, dembedding=None):
        if self.frozen:
            raise UsageError("domain classifier is frozen")
        p = self.params
        c1, c2, cp, cl = cache
        demb, dw, db = nc.linear_backward(dlogits, cl)
        p["cls.w"].grad += dw
        p["cls.b"].grad += db
        if dembedding is not None:
            demb = demb + dembedding
        dh2 = nc.mean_pool_time_backward(demb, cp)
        dh1, dwi, dwh, db, _, _ = nc.lstm_backward(dh2, c2)
        p["lstm2.w_ih"].grad += dwi
        p["lstm2.w_hh"].grad += dwh
        p["lstm2.b"].grad += db
        _, dwi, dwh, db, _, _ = nc.lstm_backward(dh1, c1)
        p["lstm1.w_ih"].grad += dwi
        p["lstm1.w_hh"].grad += dwh
        p["lstm1.b"].grad += db


def build_domain_net(seed=0, input_dim=40, hidden=64, num_domains=NUM_DOMAINS):
    rng = np.random.default_rng(seed)
    params = {}
    d_in = input_dim
    for k in (1, 2):
        params[f"lstm{k}.w_ih"] = nc.Parameter(_uniform(rng, (4 * hidden, d_in), d_in))
        params[f"lstm{k}.w_hh"] = nc.Parameter(_uniform(rng, (4 * hidden, hidden), hidden))
        params[f"lstm{k}.b"] = nc.Parameter(np.zeros(4 * hidden))
        d_in = hidden
    params["cls.w"] = nc.Parameter(_uniform(rng, (num_domains, hidden), hidden))
    params["cls.b"] = nc.Parameter(np.zeros(num_domains))
    return DomainNet(params, hidden)


def extract_domain_embedding(net, features):
    """Mean top-layer LSTM state of a frozen domain classifier.

    ``features`` is one [T, 40] matrix or a batch [N, T, 40] of equal-length
    utterances.
    """
    if not net.frozen:
        raise UsageError("embeddings must come from a pre-trained, frozen domain classifier")
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 2
    _, emb, _ = net.forward(feats[None] if single else feats)
    return emb[0] if single else emb


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, net):
    if isinstance(net, DomainNet):
        tag, m = DOMAIN_NET_TAG, net.params["cls.w"].shape[0]
    else:
        tag, m = net.variant.value, net.num_words
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IBI", MODEL_VERSION, tag, m))
        for name, prm in net.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", prm.value.ndim))
            fh.write(struct.pack(f"<{prm.value.ndim}I", *prm.value.shape))
            fh.write(np.ascontiguousarray(prm.value, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Load a keyword net or (frozen) domain net; widths come from the stored shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    try:
        version, tag, m = struct.unpack_from("<IBI", blob, 8)
        if version != MODEL_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 8 + struct.calcsize("<IBI")
        params = {}
        while off < len(blob):
            (ln,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if off + 4 * count > len(blob):
                raise FormatError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            params[name] = nc.Parameter(arr.astype(np.float64))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if tag == DOMAIN_NET_TAG:
        return DomainNet(params, hidden=params["lstm1.w_hh"].shape[1], frozen=True)
    variant = Variant(tag)
    channels = tuple(params[f"conv{k}.w"].shape[0] for k in (1, 2, 3))
    fc1_width = params["fc1.w"].shape[0]
    flat = channels[-1] * shape_trace()[-1] ** 2
    if variant is Variant.EMB2:
        emb = params["fc1.w"].shape[1] - flat
    elif variant is Variant.EMB1:
        emb = params["out.w"].shape[1] - fc1_width
    else:
        emb = 64
    return KeywordNet(variant, m, params, channels, fc1_width, emb)
