"""``intenreg`` command-line front end.

Exit codes: 0 success, 1 usage or validation error, 2 I/O error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from . import __version__
from .amortized import AmortizedEngine, TrainConfig, init_params, save_checkpoint, train
from .biasfield import BiasSpec, bias_experiment
from .errors import DivergenceError, ParseError, RegistrationError, ValidationError
from .evalharness import (
    delta_matrix,
    pairwise_evaluation,
    region_report_from,
    write_matrix_csv,
    write_region_csv,
)
from .imgcore import (
    affine_prealign,
    affine_to_field,
    apply_affine,
    read_image,
    read_labels,
    warp_labels,
    write_image,
    write_labels,
)
from .losses import LossConfig
from .optdirect import AdamState, DirectEngine, IdentityEngine, StopRule, register_direct
from .phantom import PhantomConfig, load_split, write_corpus
from .render import render_barchart, render_heatmap

log = logging.getLogger("intenreg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3

DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_BASES = ("mse", "ncc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    loss: LossConfig = LossConfig()
    direct_lr: float = 0.05
    direct_stop: StopRule = StopRule()
    train: TrainConfig = TrainConfig()
    phantom: PhantomConfig = PhantomConfig()
    bias: BiasSpec = BiasSpec()
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS
    bases: Tuple[str, ...] = DEFAULT_BASES
    engine: str = "direct"
    bias_alphas: Tuple[float, ...] = (0.0, 0.75)
    pairs: int = 20
    threads: int = 1
    seed: int = 0


def _floats(text):
    return tuple(float(x) for x in str(text).replace(" ", "").split(",") if x)


def _typed(section, key, raw):
    """Coerce a config string according to the key it belongs to."""
    ints = {"window", "patience", "max_iters", "batch_size", "max_epochs", "seed",
            "height", "width", "n_regions", "pairs", "threads"}
    strs = {"base", "engine"}
    if key in ints:
        return int(raw)
    if key in strs:
        return str(raw).strip()
    if key in ("alphas", "center"):
        return _floats(raw)
    if key == "bases":
        return tuple(x.strip() for x in str(raw).split(",") if x.strip())
    return float(raw)


_SECTIONS = {
    "loss": {"alpha", "beta", "base", "window", "c1", "c2", "c3"},
    "direct": {"lr", "delta", "patience", "max_iters"},
    "train": {"lr", "batch_size", "max_epochs", "delta", "patience", "seed"},
    "phantom": {"height", "width", "n_regions", "intensity_jitter", "deform_amplitude",
                "deform_smoothness", "noise_sigma", "seed"},
    "bias": {"amplitude", "sigma", "center"},
    "sweep": {"alphas", "bases", "engine"},
    "experiment": {"pairs", "alphas"},
    "run": {"seed", "threads"},
}


def read_config_file(path):
    """Parse an INI file into ``{section: {key: value}}`` with typed values."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ValidationError(f"config {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValidationError(f"config {path}: unknown section [{section}]")
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ValidationError(f"config {path}: unknown key {key!r} in [{section}]")
            try:
                out[section][key] = _typed(section, key, raw)
            except ValueError as exc:
                raise ValidationError(f"config {path}: bad value for {section}.{key}: {raw!r}") from exc
    return out


def _flag_overrides(args):
    """CLI flags mapped onto config sections; only flags that were given."""
    table = {
        "alpha": ("loss", "alpha"), "beta": ("loss", "beta"), "base": ("loss", "base"),
        "window": ("loss", "window"),
        "lr": (None, "lr"), "patience": (None, "patience"), "delta": (None, "delta"),
        "max_iters": ("direct", "max_iters"),
        "batch_size": ("train", "batch_size"), "max_epochs": ("train", "max_epochs"),
        "height": ("phantom", "height"), "width": ("phantom", "width"),
        "regions": ("phantom", "n_regions"), "jitter": ("phantom", "intensity_jitter"),
        "deform_amplitude": ("phantom", "deform_amplitude"),
        "deform_smoothness": ("phantom", "deform_smoothness"), "noise": ("phantom", "noise_sigma"),
        "amplitude": ("bias", "amplitude"), "sigma": ("bias", "sigma"), "center": ("bias", "center"),
        "alphas": ("sweep", "alphas"), "bases": ("sweep", "bases"), "engine": ("sweep", "engine"),
        "pairs": ("experiment", "pairs"),
    }
    out = {}
    for attr, (section, key) in table.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        if attr == "alphas" and args.command == "bias-experiment":
            section = "experiment"
        if section is None:
            # optimizer flags apply to whichever optimizer the command runs
            section = "train" if args.command in ("train",) or getattr(args, "engine", None) == "train" else "direct"
        out.setdefault(section, {})[key] = val
    return out


def build_config(args):
    """Merge defaults, config file and flags; validate every field up front."""
    sections = read_config_file(args.config) if args.config else {}
    for section, kv in _flag_overrides(args).items():
        sections.setdefault(section, {}).update(kv)
    run = sections.get("run", {})
    seed = args.seed if args.seed is not None else run.get("seed", 0)
    threads = args.threads if args.threads is not None else run.get("threads", 1)
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    if threads < 1:
        raise ValidationError("threads must be >= 1")

    loss = LossConfig(**sections.get("loss", {}))
    d = sections.get("direct", {})
    direct_lr = float(d.get("lr", RunConfig.direct_lr))
    AdamState(lr=direct_lr)
    direct_stop = StopRule(**{k: d[k] for k in ("delta", "patience", "max_iters") if k in d})

    t = dict(sections.get("train", {}))
    train_stop = StopRule(**{k: t.pop(k) for k in ("delta", "patience") if k in t})
    t.setdefault("seed", seed)
    train_cfg = TrainConfig(stop=train_stop, loss=loss, **t)

    p = dict(sections.get("phantom", {}))
    p.setdefault("seed", seed)
    phantom = PhantomConfig(**p)

    b = dict(sections.get("bias", {}))
    if "center" in b:
        if len(b["center"]) != 2:
            raise ValidationError("bias center must be 'row,col'")
        b["center"] = tuple(b["center"])
    bias = BiasSpec(**b)

    sw = sections.get("sweep", {})
    alphas = tuple(sw.get("alphas", DEFAULT_ALPHAS))
    bases = tuple(x.lower() for x in sw.get("bases", DEFAULT_BASES))
    engine = sw.get("engine", "direct")
    if not alphas:
        raise ValidationError("alpha grid is empty")
    for a in alphas:
        LossConfig(alpha=a)
    for base in bases:
        LossConfig(base=base)
    if engine not in ("direct", "train"):
        raise ValidationError(f"engine must be 'direct' or 'train', got {engine!r}")
    ex = sections.get("experiment", {})
    pairs = int(ex.get("pairs", 20))
    if pairs < 1:
        raise ValidationError("pairs must be >= 1")
    bias_alphas = tuple(ex.get("alphas", RunConfig.bias_alphas))
    if not bias_alphas:
        raise ValidationError("bias experiment needs at least one engine alpha")
    for a in bias_alphas:
        LossConfig(alpha=a)
    return RunConfig(loss=loss, direct_lr=direct_lr, direct_stop=direct_stop, train=train_cfg,
                     phantom=phantom, bias=bias, alphas=alphas, bases=bases, engine=engine,
                     bias_alphas=bias_alphas, pairs=pairs, threads=threads, seed=seed)


def _direct_engine(cfg, loss):
    return DirectEngine(cfg=loss, lr=cfg.direct_lr, stop=cfg.direct_stop)


# --------------------------------------------------------------------------
# commands


def cmd_phantom_gen(cfg, args):
    n = args.subjects
    if n < 1:
        raise UsageError("--subjects must be >= 1")
    n_test = args.test_subjects if args.test_subjects is not None else n // 5
    if not 0 <= n_test <= n:
        raise UsageError("--test-subjects must lie in [0, --subjects]")
    counts = write_corpus(args.out, cfg.phantom, n - n_test, n_test)
    print(f"wrote {n} subjects ({counts['train']} train, {counts['test']} test) to {args.out}")
    return EXIT_OK


def _write_trace(trace, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("iteration,total,similarity,regularizer\n")
        for i, lv in enumerate(trace):
            fh.write(f"{i},{lv.total!r},{lv.similarity_term!r},{lv.regularizer_term!r}\n")


def cmd_register(cfg, args):
    target = read_image(args.target)
    source = read_image(args.source)
    if target.shape != source.shape:
        raise ValidationError(f"target {target.shape} and source {source.shape} differ in shape")
    labels = read_labels(args.source_labels) if args.source_labels else None
    prefix = args.out
    parent = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(parent, exist_ok=True)
    params = None
    moving = source
    if not args.no_affine:
        params = affine_prealign(target, source)
        moving = apply_affine(source, params)
    try:
        res = register_direct(target, moving, cfg.loss, AdamState(lr=cfg.direct_lr), cfg.direct_stop)
    except DivergenceError as exc:
        _write_trace(getattr(exc, "trace", []), prefix + "_trace.csv")
        raise
    write_image(res.warped, prefix + "_warped.pgm")
    np.save(prefix + "_field.npy", res.field)
    _write_trace(res.loss_trace, prefix + "_trace.csv")
    with open(prefix + "_affine.txt", "w", encoding="ascii") as fh:
        if params is None:
            fh.write("affine = disabled\n")
        else:
            fh.write(f"translation = {params.translation[0]!r},{params.translation[1]!r}\n")
            fh.write(f"rotation = {params.rotation!r}\nscale = {params.scale!r}\n")
    if labels is not None:
        if params is not None:
            labels = warp_labels(labels, affine_to_field(labels.shape, params))
        write_labels(warp_labels(labels, res.field), prefix + "_warped_seg.pgm")
    best = min(res.loss_trace, key=lambda lv: lv.total)
    print(f"iterations: {res.iterations} ({res.stopped_by})")
    print(f"initial loss: {res.initial_loss!r}")
    print(f"final loss: {best.total!r} (similarity {best.similarity_term!r}, regularizer {best.regularizer_term!r})")
    return EXIT_OK


def _load_corpus(corpus_dir, split):
    samples = load_split(corpus_dir, split)
    if not samples:
        raise ValidationError(f"corpus split {split!r} in {corpus_dir} is empty")
    return samples


def _write_report(report, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# epochs_run={report.epochs_run} stopped_by={report.stopped_by}\n")
        fh.write("epoch,loss\n")
        for i, v in enumerate(report.epoch_losses):
            fh.write(f"{i},{v!r}\n")


def cmd_train(cfg, args):
    samples = _load_corpus(args.corpus, "train")
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    params, report = train(init_params(cfg.train.seed), samples, cfg.train)
    save_checkpoint(params, args.out)
    _write_report(report, args.out + ".report.csv")
    print(f"trained {report.epochs_run} epochs ({report.stopped_by}); final epoch loss {report.epoch_losses[-1]!r}")
    return EXIT_OK


def _alpha_tag(alpha):
    return f"{alpha:g}"


def cmd_sweep(cfg, args):
    test = _load_corpus(args.corpus, "test")
    if args.limit:
        test = test[:args.limit]
    train_set = _load_corpus(args.corpus, "train") if cfg.engine == "train" else None
    os.makedirs(args.out, exist_ok=True)
    grid = list(cfg.alphas)
    alphas = grid if 0.0 in grid else [0.0] + grid
    failures = []
    summary = []

    ident, ident_pl = pairwise_evaluation(IdentityEngine(), test, cfg.threads)
    write_matrix_csv(ident, os.path.join(args.out, "dice_identity.csv"))
    render_heatmap(ident, os.path.join(args.out, "dice_identity.png"))

    for base in cfg.bases:
        mats = {}
        for alpha in alphas:
            loss = replace(cfg.loss, alpha=alpha, base=base)
            tag = f"{cfg.engine}_{base}_{_alpha_tag(alpha)}"
            if cfg.engine == "train":
                tcfg = replace(cfg.train, loss=loss)
                try:
                    params, _ = train(init_params(tcfg.seed), train_set, tcfg)
                except DivergenceError as exc:
                    failures.append(f"{tag}: training diverged: {exc}")
                    log.error("%s: training diverged: %s", tag, exc)
                    continue
                save_checkpoint(params, os.path.join(args.out, f"model_{base}_{_alpha_tag(alpha)}.ckpt"))
                engine = AmortizedEngine(params=params, loss=loss, tag=tag)
            else:
                engine = _direct_engine(cfg, loss)
            dm, per_label = pairwise_evaluation(engine, test, cfg.threads, tag=tag)
            failures += [f"{tag}: target {i} source {j}: {msg}" for i, j, msg in dm.failures]
            mats[alpha] = dm
            stem = f"{base}_a{_alpha_tag(alpha)}"
            if alpha in grid:
                write_matrix_csv(dm, os.path.join(args.out, f"dice_{stem}.csv"))
                render_heatmap(dm, os.path.join(args.out, f"dice_{stem}.png"))
                labels = sorted(int(v) for v in np.unique(test[0].labels) if v != 0)
                write_region_csv(region_report_from(per_label, labels, tag),
                                 os.path.join(args.out, f"regions_{stem}.csv"))
                summary.append((alpha, base, float(np.nanmean(dm.values))))
        base_mat = mats.get(0.0)
        for alpha in grid:
            if base_mat is None or alpha not in mats:
                continue
            delta = delta_matrix(mats[alpha], base_mat)
            stem = f"{base}_a{_alpha_tag(alpha)}"
            write_matrix_csv(delta, os.path.join(args.out, f"delta_{stem}.csv"))
            render_heatmap(delta, os.path.join(args.out, f"delta_{stem}.png"))

    with open(os.path.join(args.out, "summary.csv"), "w", encoding="ascii", newline="\n") as fh:
        fh.write("alpha,base,mean_dice\n")
        for alpha, base, md in summary:
            fh.write(f"{alpha:g},{base},{md!r}\n")
    render_barchart([(f"{b}:{_alpha_tag(a)}", v) for a, b, v in summary],
                    os.path.join(args.out, "mean_dice.png"), title="mean DICE vs alpha", ylabel="mean DICE")
    if failures:
        with open(os.path.join(args.out, "failures.txt"), "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(failures) + "\n")
        print(f"{len(failures)} registrations failed; see failures.txt")
    print(f"sweep over {len(grid)} alphas x {len(cfg.bases)} bases on {len(test)} test samples -> {args.out}")
    return EXIT_OK


def cmd_bias_experiment(cfg, args):
    samples = _load_corpus(args.corpus, args.split)
    n = len(samples)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    engines = [(a, _direct_engine(cfg, replace(cfg.loss, alpha=a))) for a in cfg.bias_alphas]
    rows = []
    for k in range(cfg.pairs):
        tgt = samples[k % n]
        pairs = [("identical", tgt)]
        if n > 1:
            pairs.insert(0, ("distinct", samples[(k + 1) % n]))
        for kind, src in pairs:
            for alpha, eng in engines:
                rep = bias_experiment(eng, tgt, src, cfg.bias)
                rows.append((k, kind, eng.tag, alpha, rep.dice_clean, rep.dice_biased, rep.drop))
    with open(args.out, "w", encoding="ascii", newline="\n") as fh:
        fh.write("pair,kind,engine,alpha,dice_clean,dice_biased,drop\n")
        for k, kind, tag, alpha, dc, db, drop in rows:
            fh.write(f"{k},{kind},{tag},{alpha:g},{dc!r},{db!r},{drop!r}\n")
    bars = []
    for kind in ("distinct", "identical"):
        for _, eng in engines:
            drops = [r[6] for r in rows if r[1] == kind and r[2] == eng.tag]
            if drops:
                bars.append((f"{kind[:4]}:{eng.tag.split('_', 1)[1]}", float(np.mean(drops))))
    render_barchart(bars, os.path.splitext(args.out)[0] + ".png",
                    title="mean DICE drop under illumination bias", ylabel="DICE drop")
    for label, v in bars:
        print(f"{label}: mean drop {v:.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_loss_flags(p):
    g = p.add_argument_group("loss")
    g.add_argument("--alpha", type=float, help="SSIM weight in [0, 1]")
    g.add_argument("--beta", type=float, help="regularizer weight")
    g.add_argument("--base", choices=("mse", "ncc"), help="base similarity metric")
    g.add_argument("--window", type=int, help="SSIM window size (odd)")


def _add_opt_flags(p, training):
    g = p.add_argument_group("optimizer")
    g.add_argument("--lr", type=float, help="Adam learning rate")
    g.add_argument("--patience", type=int, help="stop after this many stale iterations/epochs")
    g.add_argument("--delta", type=float, help="minimum improvement that resets patience")
    if training:
        g.add_argument("--batch-size", dest="batch_size", type=int)
        g.add_argument("--max-epochs", dest="max_epochs", type=int)
    else:
        g.add_argument("--max-iters", dest="max_iters", type=int)


def make_parser():
    common = _Parser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI config file (see README)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random stream")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker processes for pairwise evaluation")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="intenreg", description="SSIM-augmented deformable registration toolkit",
                     parents=[common])
    parser.add_argument("--version", action="version", version=f"intenreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom-gen", parents=[common], help="write a synthetic phantom corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=80, help="total subjects (default 80)")
    p.add_argument("--test-subjects", dest="test_subjects", type=int,
                   help="subjects in the test split (default subjects // 5)")
    g = p.add_argument_group("phantom")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--regions", type=int)
    g.add_argument("--jitter", type=float)
    g.add_argument("--deform-amplitude", dest="deform_amplitude", type=float)
    g.add_argument("--deform-smoothness", dest="deform_smoothness", type=float)
    g.add_argument("--noise", type=float)

    p = sub.add_parser("register", parents=[common], help="register one image pair")
    p.add_argument("target")
    p.add_argument("source")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--no-affine", dest="no_affine", action="store_true")
    p.add_argument("--source-labels", dest="source_labels", help="segmentation to warp along")
    _add_loss_flags(p)
    _add_opt_flags(p, training=False)

    p = sub.add_parser("train", parents=[common], help="train the amortized network")
    p.add_argument("corpus")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_loss_flags(p)
    _add_opt_flags(p, training=True)

    p = sub.add_parser("sweep", parents=[common], help="alpha sweep with pairwise DICE matrices")
    p.add_argument("corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--engine", choices=("direct", "train"))
    p.add_argument("--alphas", type=_floats, help="comma-separated alpha grid")
    p.add_argument("--bases", type=lambda s: tuple(x for x in s.split(",") if x))
    p.add_argument("--limit", type=int, help="use only the first N test subjects")
    _add_loss_flags(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)

    p = sub.add_parser("bias-experiment", parents=[common], help="DICE drop under illumination bias")
    p.add_argument("corpus")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--pairs", type=int)
    p.add_argument("--alphas", type=_floats, help="engine alphas (default 0,0.75)")
    p.add_argument("--amplitude", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--center", type=_floats, help="row,col")
    _add_loss_flags(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    return parser


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "register": cmd_register,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bias-experiment": cmd_bias_experiment,
}


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "threads", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        if getattr(args, "limit", None) is not None and args.limit < 1:
            raise UsageError("--limit must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ValidationError) as exc:
        print(f"intenreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"intenreg: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ParseError) as exc:
        print(f"intenreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RegistrationError as exc:
        print(f"intenreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
