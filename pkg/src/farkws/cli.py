"""``farkws`` command line: corpus synthesis, features, training, scoring, evaluation.

Failures print one line to stderr of the form::

    farkws: error kind=<kind> exit=<code> message="<text>"

and exit with 2 (configuration), 3 (data) or 4 (numeric divergence). Files a
failing command had started to write are removed.
"""
import argparse
import csv
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__
from .config import dump_config, load_config, with_overrides
from .dataset import build_windows, featurize
from .detect import KeywordSpec
from .dsp import compute_fbank, read_features, write_features
from .errors import ConfigError, DataError, KWSError
from .evaluation import default_grid, evaluate_scores, score_utterances, summary_json, write_sweep_csv
from .ingest import load_corpus, synth_corpus, write_corpus
from .models import DomainNet, KeywordNet, load_checkpoint, save_checkpoint
from .train import fit_domain_classifier, fit_keyword_classifier

log = logging.getLogger("farkws")


class Outputs:
    """Tracks files and directories a command creates so a failure can undo them."""

    def __init__(self, root):
        self.root = root
        self.created = []

    def dir(self, *parts):
        path = os.path.join(self.root, *parts)
        missing = []
        probe = path
        while probe and not os.path.isdir(probe):
            missing.append(probe)
            probe = os.path.dirname(probe)
        os.makedirs(path, exist_ok=True)
        self.created.extend(reversed(missing))
        return path

    def file(self, *parts):
        path = os.path.join(self.root, *parts)
        self.dir(os.path.dirname(os.path.relpath(path, self.root)))
        self.created.append(path)
        return path

    def rollback(self):
        for path in reversed(self.created):
            if os.path.isdir(path):
                shutil.rmtree(path, ignore_errors=True)
            elif os.path.exists(path):
                os.remove(path)


# -- helpers ----------------------------------------------------------------

def _manifest(path, what):
    if not path:
        raise ConfigError(f"no {what} manifest given (use --manifest or the [paths] section)")
    if not os.path.exists(path):
        raise DataError(f"{what} manifest not found: {path}")
    return path


def load_utterances(manifest, cfg):
    """Featurize a manifest's clips, reusing cached features from ``paths.feature_dir`` when present."""
    corpus = load_corpus(manifest, cfg.model.num_words)
    cache = cfg.paths.feature_dir
    feats = []
    for clip in corpus.clips:
        cached = os.path.join(cache, clip.clip_id + ".feat") if cache else ""
        if cached and os.path.exists(cached):
            feats.append(read_features(cached).astype(np.float64))
        else:
            feats.append(compute_fbank(clip, cfg.frontend))
    return featurize(corpus, cfg.frontend, feats)


def _load(path, kind, what):
    if not path:
        raise ConfigError(f"no {what} checkpoint given")
    if not os.path.exists(path):
        raise DataError(f"{what} checkpoint not found: {path}")
    net = load_checkpoint(path)
    if not isinstance(net, kind):
        raise ConfigError(f"{path} does not hold a {what} network")
    return net


def _domain_net(cfg):
    return _load(cfg.paths.domain_net, DomainNet, "domain") if cfg.variant.uses_embedding else None


# -- subcommands ------------------------------------------------------------

def cmd_synth(cfg, args, out):
    d = cfg.data
    train = synth_corpus([cfg.seed, 0], (d.train_positives, d.train_negatives))
    test = synth_corpus([cfg.seed, 1], (d.test_positives, d.test_negatives))
    out.dir("train")
    out.dir("test")
    for name, corpus in (("train", train), ("test", test)):
        manifest = write_corpus(corpus, os.path.join(out.root, name))
        print(f"{name}: {len(corpus)} clips -> {manifest}")


def cmd_features(cfg, args, out):
    manifest = _manifest(cfg.paths.train_manifest, "input")
    corpus = load_corpus(manifest, cfg.model.num_words)
    target = out.dir("features")
    for clip in corpus.clips:
        write_features(out.file("features", clip.clip_id + ".feat"), compute_fbank(clip, cfg.frontend))
    print(f"{len(corpus)} feature files -> {target}")


def cmd_train_domain(cfg, args, out):
    utts = load_utterances(_manifest(cfg.paths.train_manifest, "training"), cfg)
    net, tlog = fit_domain_classifier(utts, cfg.train, hidden=cfg.model.domain_hidden)
    save_checkpoint(out.file("domain_net.ckpt"), net)
    tlog.to_csv(out.file("domain_log.csv"))
    print(f"domain classifier: {len(tlog.epochs)} epochs -> {os.path.join(out.root, 'domain_net.ckpt')}")


def cmd_train_kws(cfg, args, out):
    cfg.validate()
    domain_net = _domain_net(cfg)
    utts = load_utterances(_manifest(cfg.paths.train_manifest, "training"), cfg)
    windows = build_windows(utts, cfg.data.negatives_per_clip, seed=cfg.seed)
    net, tlog = fit_keyword_classifier(windows, cfg.variant, cfg.loss_config(), cfg.train, domain_net,
                                       cfg.model.num_words, cfg.widths())
    save_checkpoint(out.file("kws.ckpt"), net)
    tlog.to_csv(out.file("train_log.csv"))
    with open(out.file("config.ini"), "w") as fh:
        fh.write(dump_config(cfg))
    print(f"keyword network ({cfg.variant.name}): {len(tlog.epochs)} epochs -> "
          f"{os.path.join(out.root, 'kws.ckpt')}")


def _score(cfg, out, dump):
    net = _load(cfg.paths.checkpoint, KeywordNet, "keyword")
    if net.variant.uses_embedding and not cfg.paths.domain_net:
        raise ConfigError(f"checkpoint variant {net.variant.name} needs paths.domain_net")
    domain_net = _load(cfg.paths.domain_net, DomainNet, "domain") if net.variant.uses_embedding else None
    utts = load_utterances(_manifest(cfg.paths.test_manifest, "test"), cfg)
    scores = score_utterances(net, utts, cfg.detector, KeywordSpec.for_words(net.num_words), domain_net)
    with open(out.file("scores.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "domain", "polarity", "duration", "max_confidence"])
        for s in scores:
            writer.writerow([s.clip_id, s.domain.value, s.polarity, repr(s.duration), repr(s.max_confidence)])
    if dump:
        for s, entry in zip(scores, utts.entries):
            name = f"{entry.domain.value}_{s.clip_id}.csv"
            with open(out.file("scores", name), "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["frame", "h"])
                # frame: last posterior row of the scoring window; row j is the
                # 40-frame input window starting at feature frame j
                for k, h in enumerate(s.trace):
                    writer.writerow([k + cfg.detector.window_frames - 1, repr(float(h))])
    return scores


def cmd_score(cfg, args, out):
    scores = _score(cfg, out, args.dump_scores)
    print(f"scored {len(scores)} clips -> {os.path.join(out.root, 'scores.csv')}")


def cmd_evaluate(cfg, args, out):
    from .plotting import plot_det

    scores = _score(cfg, out, args.dump_scores)
    grid = default_grid(cfg.eval.grid_points)
    summary, sweeps = evaluate_scores(scores, cfg.detector.window_frames, grid, cfg.eval.target_fa)
    if not summary:
        raise DataError("no test domain has both positive and negative clips")
    for domain, points in sweeps.items():
        write_sweep_csv(out.file(f"sweep_{domain}.csv"), points)
    with open(out.file("summary.json"), "w") as fh:
        fh.write(summary_json(summary))
    plot_det(sweeps, out.file("det.png"), cfg.eval.target_fa)
    for domain, rec in summary.items():
        flag = " (saturated)" if rec["saturated"] else ""
        print(f"{domain}: FR {100 * rec['fr_rate']:.2f}% at {rec['fa_per_hour']:.3g} FA/h, "
              f"threshold {rec['threshold']:.3f}{flag}")


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic train/test corpora"),
    "features": (cmd_features, "compute and cache log-Mel features for a manifest"),
    "train-domain": (cmd_train_domain, "train and freeze the LSTM domain classifier"),
    "train-kws": (cmd_train_kws, "train a keyword network"),
    "score": (cmd_score, "score test clips with a keyword checkpoint"),
    "evaluate": (cmd_evaluate, "FR at the FA/hour budget per test domain, with DET curves"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI configuration file")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--variant", choices=["baseline", "emb1", "emb2", "mtl"])
    common.add_argument("--strategy", choices=[f"s{k}" for k in range(1, 6)], help="CORAL strategy")
    common.add_argument("--lambda", dest="lam", type=float, metavar="X", help="auxiliary loss weight")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--dump-scores", action="store_true", help="write per-clip (frame, h) CSVs")
    common.add_argument("--manifest", metavar="PATH", help="training/input manifest")
    common.add_argument("--test-manifest", metavar="PATH")
    common.add_argument("--domain-net", metavar="PATH", help="frozen domain classifier checkpoint")
    common.add_argument("--checkpoint", metavar="PATH", help="keyword network checkpoint")
    common.add_argument("--feature-dir", metavar="PATH", help="feature cache to read")
    common.add_argument("--max-epochs", type=int, metavar="N")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="farkws", description="Far-field keyword spotting pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def effective_config(args):
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, seed=args.seed, variant=args.variant, strategy=args.strategy, lam=args.lam,
                         out=args.out, train_manifest=args.manifest, test_manifest=args.test_manifest,
                         domain_net=args.domain_net, checkpoint=args.checkpoint,
                         feature_dir=args.feature_dir)
    if args.max_epochs is not None:
        if args.max_epochs < 0:
            raise ConfigError("--max-epochs must be nonnegative")
        cfg.train.max_epochs = args.max_epochs
    cfg.loss_config()  # surfaces inconsistent loss settings before any work
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; report bad usage as a configuration error
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg = effective_config(args)
        out = Outputs(cfg.paths.out)
        func, _ = COMMANDS[args.command]
        func(cfg, args, out)
        return 0
    except KWSError as exc:
        code, kind, message = exc.exit_code, exc.kind, str(exc)
    except OSError as exc:
        code, kind, message = 3, "io", f"{exc.strerror}: {exc.filename}" if exc.filename else str(exc)
    if out is not None:
        out.rollback()
    message = " ".join(message.split()).replace('"', "'")
    print(f'farkws: error kind={kind} exit={code} message="{message}"', file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
