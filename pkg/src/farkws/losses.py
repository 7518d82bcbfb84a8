"""Cross-entropy, CORAL alignment and the multi-task joint loss.

Every loss returns its value together with the gradients of its inputs so
that callers can push them back through the network.
"""
import enum
from dataclasses import dataclass

import numpy as np

from . import netcore as nc
from .errors import ConfigError, DegenerateBatchError, ShapeError
from .ingest import DomainTag

D025, D1M, D3M = DomainTag.D025, DomainTag.D1M, DomainTag.D3M


class CoralStrategy(enum.Enum):
    S1 = 1
    S2 = 2
    S3 = 3
    S4 = 4
    S5 = 5

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        try:
            return cls[str(text).strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown CORAL strategy {text!r} (s1..s5)") from None

    @property
    def domains(self):
        if self is CoralStrategy.S1:
            return frozenset({D025, D1M})
        if self is CoralStrategy.S2:
            return frozenset({D025, D3M})
        return frozenset({D025, D1M, D3M})


class LossMode(enum.Enum):
    CE = "ce"
    CORAL = "coral"
    MTL = "mtl"


@dataclass
class LossConfig:
    mode: LossMode = LossMode.CE
    strategy: CoralStrategy = None
    lam: float = None

    def __post_init__(self):
        self.mode = LossMode(self.mode) if not isinstance(self.mode, LossMode) else self.mode
        if self.strategy is not None:
            self.strategy = CoralStrategy.parse(self.strategy)
        if self.mode is LossMode.CORAL and self.strategy is None:
            raise ConfigError("CORAL training needs a strategy")
        if self.mode is not LossMode.CORAL and self.strategy is not None:
            raise ConfigError(f"a CORAL strategy makes no sense with loss mode {self.mode.value}")
        if self.lam is None:
            self.lam = {LossMode.CORAL: 0.8, LossMode.MTL: 0.2}.get(self.mode, 0.0)
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")


def cross_entropy(logits, labels):
    """Batch-mean cross-entropy; returns ``(loss, dlogits)``."""
    loss, _, cache = nc.softmax_ce_forward(logits, labels)
    return loss, nc.softmax_ce_backward(cache)


def covariance(d):
    """Unbiased feature covariance computed from raw sums (no explicit centering)."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeError(f"expected an n x d matrix, got shape {d.shape}")
    n = d.shape[0]
    if n < 2:
        raise DegenerateBatchError(f"covariance needs at least 2 rows, got {n}")
    s = d.sum(axis=0, keepdims=True)  # 1^T D
    return (d.T @ d - (s.T @ s) / n) / (n - 1)


def covariance_backward(d, dcov):
    n = d.shape[0]
    sym = dcov + dcov.T
    s = d.sum(axis=0, keepdims=True)
    return (d @ sym - np.ones((n, 1)) @ (s @ sym) / n) / (n - 1)


def coral_loss(ds, dt):
    """Squared Frobenius distance of covariances scaled by 1/(4 d^2).

    Returns ``(loss, grad_source, grad_target)``.
    """
    ds = np.asarray(ds, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if ds.ndim != 2 or dt.ndim != 2 or ds.shape[1] != dt.shape[1]:
        raise ShapeError(f"feature widths differ: {ds.shape} vs {dt.shape}")
    dim = ds.shape[1]
    diff = covariance(ds) - covariance(dt)
    scale = 1.0 / (4.0 * dim * dim)
    loss = scale * np.sum(diff * diff)
    dcov = 2.0 * scale * diff
    return loss, covariance_backward(ds, dcov), covariance_backward(dt, -dcov)


def _pairs(strategy):
    """CORAL terms of a strategy as (source group, target group) pairs."""
    far = (D1M, D3M)
    return {
        CoralStrategy.S1: [((D025,), (D1M,))],
        CoralStrategy.S2: [((D025,), (D3M,))],
        CoralStrategy.S3: [((D025,), far)],
        CoralStrategy.S4: [((D025,), (D1M,)), ((D025,), (D3M,))],
        CoralStrategy.S5: [((D025,), (D1M,)), ((D025,), (D3M,)), ((D1M,), (D3M,))],
    }[strategy]


def coral_term(strategy, batch):
    """Strategy combination of CORAL losses over per-domain feature matrices.

    ``batch`` maps DomainTag to an [n, d] matrix. Returns ``(term, grads)``
    with ``grads`` keyed like ``batch``.
    """
    strategy = CoralStrategy.parse(strategy)
    for tag in strategy.domains:
        rows = 0 if batch.get(tag) is None else len(batch[tag])
        if rows < 2:
            raise DegenerateBatchError(f"domain {tag.value} has {rows} row(s); CORAL needs at least 2")
    pairs = _pairs(strategy)
    grads = {tag: np.zeros_like(np.asarray(batch[tag], dtype=np.float64)) for tag in strategy.domains}
    total = 0.0
    for src, tgt in pairs:
        a = np.concatenate([batch[t] for t in src])
        b = np.concatenate([batch[t] for t in tgt])
        loss, ga, gb = coral_loss(a, b)
        total += loss
        for group, g in ((src, ga), (tgt, gb)):
            off = 0
            for t in group:
                k = len(batch[t])
                grads[t] += g[off:off + k] / len(pairs)
                off += k
    return total / len(pairs), grads


def joint_coral_loss(strategy, batch, ce, lam):
    """L = ce + lam * strategy term.

    Returns ``(loss, grads, term)`` where ``grads`` holds the gradients for the
    feature matrices; the gradient with respect to ``ce`` is 1.
    """
    term, grads = coral_term(strategy, batch)
    return ce + lam * term, {t: lam * g for t, g in grads.items()}, term


def mtl_loss(word_logits, word_labels, domain_logits, domain_labels, lam):
    """CE over words plus lam-weighted CE over domains.

    Returns ``(loss, dword_logits, ddomain_logits)``.
    """
    if len(word_logits) != len(domain_logits):
        raise ShapeError("word and domain batches differ in size")
    lw, dw = cross_entropy(word_logits, word_labels)
    ld, dd = cross_entropy(domain_logits, domain_labels)
    return lw + lam * ld, dw, lam * dd
