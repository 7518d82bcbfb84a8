"""Optimizer, plateau schedule, stratified batching and the two training stages."""
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import DOMAINS
from .errors import ConfigError, DegenerateBatchError, DivergenceError
from .ingest import DomainTag
from .losses import LossConfig, LossMode, cross_entropy, joint_coral_loss, mtl_loss
from .models import Variant, build_domain_net, build_keyword_net, extract_domain_embedding

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    batch: int = 128
    max_epochs: int = 100
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-4
    early_stop_patience: int = 8
    seed: int = 0

    def __post_init__(self):
        if min(self.lr0, self.batch, self.plateau_patience, self.early_stop_patience) <= 0:
            raise ConfigError("learning rate, batch size and patiences must be positive")
        if self.momentum < 0 or self.max_epochs < 0 or self.plateau_min_delta < 0:
            raise ConfigError("momentum, max_epochs and min_delta must be nonnegative")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau factor must lie in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    ce: float
    coral: float = float("nan")
    domain_ce: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def losses(self):
        return [r.loss for r in self.epochs]

    def to_csv(self, path, include_time=True):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "loss", "lr", "ce", "coral", "seconds"])
            for r in self.epochs:
                out.writerow([r.epoch, repr(r.loss), repr(r.lr), repr(r.ce), repr(r.coral),
                              f"{r.seconds:.3f}" if include_time else ""])


# -- optimizer and schedule -------------------------------------------------

def sgd_nesterov_step(params, lr, momentum):
    """Nesterov momentum update in look-ahead form; zeroes the gradients afterwards."""
    params = list(params.values()) if isinstance(params, dict) else list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError("non-finite gradient")
    for p in params:
        p.velocity *= momentum
        p.velocity -= lr * p.grad
        p.value += momentum * p.velocity - lr * p.grad
        p.zero_grad()


def _plateau_walk(history, min_delta, patience):
    """Replay the plateau rule; returns per-epoch decay flags."""
    best = np.inf
    wait = 0
    flags = []
    for loss in history:
        if best - loss >= min_delta or best == np.inf:
            best = loss
            wait = 0
        else:
            wait += 1
        if wait >= patience:
            flags.append(True)
            wait = 0
        else:
            flags.append(False)
    return flags


def lr_on_plateau(history, lr, config):
    """Learning rate to use after the last epoch in ``history``."""
    if not history:
        raise ValueError("empty loss history")
    flags = _plateau_walk(history, config.plateau_min_delta, config.plateau_patience)
    return lr * config.plateau_factor if flags[-1] else lr


def epochs_without_improvement(history, min_delta):
    best = np.inf
    wait = 0
    for loss in history:
        if best - loss >= min_delta or best == np.inf:
            best, wait = loss, 0
        else:
            wait += 1
    return wait


# -- batching ---------------------------------------------------------------

def _domain_array(windows):
    if hasattr(windows, "domains") and isinstance(windows.domains, np.ndarray):
        return windows.domains
    return np.array([(w.domain if hasattr(w, "domain") else DomainTag.parse(w)).index for w in windows])


def make_batches(windows, batch, needs_domains=(), seed=0):
    """Shuffled mini-batches of window indices.

    With ``needs_domains`` every batch holds at least two windows of each
    listed domain; domains are spread evenly over the batches so the batch
    count can shrink when a needed domain is scarce.
    """
    domains = _domain_array(windows)
    n = len(domains)
    rng = np.random.default_rng(seed)
    needs = sorted({DomainTag.parse(d).index for d in needs_domains})
    if not needs:
        order = rng.permutation(n)
        return [order[i:i + batch] for i in range(0, n, batch)]
    counts = {d: int(np.sum(domains == d)) for d in needs}
    for d, c in counts.items():
        if c < 2:
            raise ConfigError(f"domain {DOMAINS[d].value} has {c} window(s); stratified batches need 2")
    nb = max(1, int(round(n / batch)))
    nb = min(nb, min(c // 2 for c in counts.values()))
    parts = [[] for _ in range(nb)]
    for d in np.unique(domains):
        idx = rng.permutation(np.flatnonzero(domains == d))
        for k, chunk in enumerate(np.array_split(idx, nb)):
            parts[k].append(chunk)
    batches = [rng.permutation(np.concatenate(p)) for p in parts]
    order = rng.permutation(nb)
    batches = [batches[k] for k in order]
    for b in batches:
        for d in needs:
            if np.sum(domains[b] == d) < 2:
                raise ConfigError("stratified batching failed")
    return batches


# -- domain classifier ------------------------------------------------------

def domain_accuracy(net, utts):
    if len(utts) == 0:
        return float("nan")
    labels = utts.domain_index
    correct = 0
    for group in utts.length_groups():
        logits, _, _ = net.forward(np.stack([utts.features[i] for i in group]))
        correct += int(np.sum(logits.argmax(axis=1) == labels[group]))
    return correct / len(utts)


def fit_domain_classifier(utts, config, hidden=64, callback=None):
    """Train the LSTM domain classifier on full utterances and return it frozen.

    ``utts`` is an :class:`~farkws.dataset.UtteranceSet` (positives from every
    domain are used).
    """
    utts = utts.select(polarity="positive")
    present = {e.domain for e in utts.entries}
    missing = [d.value for d in DOMAINS if d not in present]
    if missing:
        raise ConfigError(f"domain classifier needs positive clips of every domain; missing {missing}")
    net = build_domain_net(config.seed, utts.features[0].shape[1], hidden)
    labels = utts.domain_index
    trainlog = TrainLog()
    lr = config.lr0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        batches = []
        for group in utts.length_groups():
            group = rng.permutation(group)
            batches += [group[i:i + config.batch] for i in range(0, len(group), config.batch)]
        batches = [batches[k] for k in rng.permutation(len(batches))]
        total = 0.0
        for b in batches:
            logits, _, cache = net.forward(np.stack([utts.features[i] for i in b]))
            loss, dlogits = cross_entropy(logits, labels[b])
            if not np.isfinite(loss):
                raise DivergenceError(f"domain classifier loss became {loss} in epoch {epoch + 1}")
            net.backward(cache, dlogits)
            sgd_nesterov_step(net.params, lr, config.momentum)
            total += loss * len(b)
        mean = total / len(utts)
        trainlog.epochs.append(EpochRecord(epoch + 1, mean, lr, mean, seconds=time.perf_counter() - t0))
        log.info("domain epoch %d loss %.4f lr %g", epoch + 1, mean, lr)
        if callback is not None:
            callback(epoch + 1, net)
        if _should_stop(trainlog, config):
            trainlog.stopped_early = True
            break
        lr = lr_on_plateau(trainlog.losses, lr, config)
    return net.freeze(), trainlog


def _should_stop(trainlog, config):
    return epochs_without_improvement(trainlog.losses, config.plateau_min_delta) >= config.early_stop_patience


# -- keyword classifier -----------------------------------------------------

def utterance_embeddings(domain_net, utts):
    """One frozen-classifier embedding per utterance, [len(utts), H]."""
    out = np.zeros((len(utts), domain_net.embedding_dim))
    for group in utts.length_groups():
        out[group] = extract_domain_embedding(domain_net, np.stack([utts.features[i] for i in group]))
    return out


def check_regime(variant, loss_config, domain_net):
    variant = Variant.parse(variant)
    if variant.uses_embedding != (domain_net is not None):
        raise ConfigError(f"variant {variant.name} {'needs' if variant.uses_embedding else 'takes no'} domain classifier")
    if (variant is Variant.MTL) != (loss_config.mode is LossMode.MTL):
        raise ConfigError(f"variant {variant.name} is incompatible with loss mode {loss_config.mode.value}")
    return variant


def fit_keyword_classifier(windows, variant, loss_config, config, domain_net=None, num_words=3,
                           widths=None, callback=None):
    """Train a keyword network on a :class:`~farkws.dataset.WindowSet`.

    ``widths`` optionally overrides ``channels``, ``fc1_width`` and
    ``embedding_dim`` of the network.
    """
    variant = check_regime(variant, loss_config, domain_net)
    widths = dict(widths or {})
    if domain_net is not None:
        if not domain_net.frozen:
            raise ConfigError("domain classifier must be frozen before keyword training")
        widths["embedding_dim"] = domain_net.embedding_dim
    net = build_keyword_net(variant, num_words, config.seed, **widths)
    emb_table = utterance_embeddings(domain_net, windows.utterances) if domain_net is not None else None
    needs = loss_config.strategy.domains if loss_config.mode is LossMode.CORAL else ()
    trainlog = TrainLog()
    lr = config.lr0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        batches = make_batches(windows, config.batch, needs, seed=[config.seed, epoch])
        sums = {"loss": 0.0, "ce": 0.0, "coral": 0.0}
        dom_ce = np.zeros(len(DOMAINS))
        dom_n = np.zeros(len(DOMAINS))
        for b in batches:
            loss, ce, coral, per_sample = train_step(net, windows, b, loss_config, lr, config.momentum, emb_table)
            sums["loss"] += loss * len(b)
            sums["ce"] += ce * len(b)
            sums["coral"] += coral * len(b)
            np.add.at(dom_ce, windows.domains[b], per_sample)
            np.add.at(dom_n, windows.domains[b], 1)
        n = sum(len(b) for b in batches)
        rec = EpochRecord(
            epoch + 1, sums["loss"] / n, lr, sums["ce"] / n,
            sums["coral"] / n if needs else float("nan"),
            {DOMAINS[d].value: dom_ce[d] / dom_n[d] for d in range(len(DOMAINS)) if dom_n[d]},
            time.perf_counter() - t0)
        trainlog.epochs.append(rec)
        log.info("kws epoch %d loss %.4f ce %.4f coral %.3g lr %g", rec.epoch, rec.loss, rec.ce, rec.coral, lr)
        if callback is not None:
            callback(epoch + 1, net)
        if _should_stop(trainlog, config):
            trainlog.stopped_early = True
            break
        lr = lr_on_plateau(trainlog.losses, lr, config)
    return net, trainlog


def train_step(net, windows, idx, loss_config, lr, momentum, emb_table=None):
    """One forward/backward/update on the windows ``idx``.

    Returns ``(loss, ce, coral_term, per_sample_ce)``.
    """
    x = windows.x[idx].astype(np.float64)
    y = windows.labels[idx]
    emb = emb_table[windows.clip_index[idx]] if emb_table is not None else None
    rec, cache = net.forward(x, emb)
    ce, dword = cross_entropy(rec.word_logits, y)
    logits = rec.word_logits - rec.word_logits.max(axis=1, keepdims=True)
    per_sample = np.log(np.exp(logits).sum(axis=1)) - logits[np.arange(len(y)), y]
    loss, coral, ddomain, dfeat = ce, 0.0, None, None
    if loss_config.mode is LossMode.CORAL:
        doms = windows.domains[idx]
        parts = {tag: rec.feature_layer[doms == tag.index] for tag in loss_config.strategy.domains}
        try:
            loss, grads, coral = joint_coral_loss(loss_config.strategy, parts, ce, loss_config.lam)
        except DegenerateBatchError as exc:
            raise ConfigError(f"batch lacks CORAL rows: {exc}") from exc
        dfeat = np.zeros_like(rec.feature_layer)
        for tag, g in grads.items():
            dfeat[doms == tag.index] = g
    elif loss_config.mode is LossMode.MTL:
        loss, dword, ddomain = mtl_loss(rec.word_logits, y, rec.domain_logits, windows.domains[idx],
                                        loss_config.lam)
    if not np.isfinite(loss):
        raise DivergenceError(f"training loss became {loss}")
    net.backward(cache, dword, ddomain, dfeat)
    sgd_nesterov_step(net.params, lr, momentum)
    return loss, ce, coral, per_sample
