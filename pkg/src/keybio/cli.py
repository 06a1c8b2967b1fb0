"""Command-line entry point: ``keybio <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Options may also come from ``--config FILE`` (``key = value`` lines under
``[common]`` or ``[<command>]`` headers); command-line flags win over the
file, the file wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import datetime as dt
import hashlib
import logging
import os
import sys

import numpy as np

from . import __version__
from .analysis import constant_embedder, emit_plot, oracle_embedder, text_dependency_report, text_hash_embedder, timing_only
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import LogFormatError, SynthConfig, extract_features, generate_synthetic, read_log, split_subjects, write_log
from .evaluation import run_auth_protocol, run_ident_protocol
from .learn import LOSS_KINDS, InsufficientDataError, NumericalError, TrainConfig, TrainingSet, train
from .net import ModelConfig, count_params
from .seeding import derive_rng

DATA_ENV = "KEYBIO_DATA_DIR"
STUBS = ("oracle", "constant", "text-hash")

log = logging.getLogger("keybio")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        text = action.help or ""
        if "%(default)" in text or action.default in (None, False, argparse.SUPPRESS) or not action.option_strings:
            return text
        return f"{text} (default: %(default)s)".lstrip()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# --------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file with [common]/[command] sections")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, fixed-order execution")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help=f"keystroke log (relative paths also tried under ${DATA_ENV})")
    p.add_argument("--subset", choices=("all", "train", "test"), default="all", help="which side of the subject split to use")
    p.add_argument("--train-fraction", type=float, default=2 / 3, help="fraction of subjects in the training side")
    p.add_argument("--split-seed", type=int, default=0)


def _add_model_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained model checkpoint")
    src.add_argument("--stub", choices=STUBS, help="control embedder instead of a trained model")


def build_parser() -> _Parser:
    fmt = _HelpFormatter
    parser = _Parser(prog="keybio", description="Keystroke-dynamics embedding toolkit", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"keybio {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic keystroke dataset", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--out", required=True, help="output log file")
    p.add_argument("--subjects", type=_positive_int, default=100)
    p.add_argument("--sessions", type=_positive_int, default=15, help="sessions per subject")
    p.add_argument("--sentence-len", type=_positive_int, default=70, help="mean keystrokes per session")
    p.add_argument("--sentence-pool", type=_positive_int, default=SynthConfig.sentence_pool)
    p.add_argument("--typo-rate", type=float, default=SynthConfig.typo_rate)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the embedding network", formatter_class=fmt)
    _add_common(p)
    _add_data(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--loss", choices=LOSS_KINDS, default="triplet")
    p.add_argument("--units", type=_positive_int, default=128)
    p.add_argument("--max-len", type=_positive_int, default=50, help="sequence length M")
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--recurrent-dropout", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=0.05, help="Adam learning rate")
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--margin", type=float, default=1.5, help="contrastive/triplet margin alpha")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batches-per-epoch", type=_positive_int, default=150)
    p.add_argument("--batch-size", type=_positive_int, default=512)
    p.add_argument("--seed", type=int, default=0, help="seed for init, sampling and dropout")
    p.add_argument("--resume", help="checkpoint to continue from (params and optimizer state)")

    p = sub.add_parser("eval-auth", help="authentication protocol: per-subject EER grid", formatter_class=fmt)
    _add_common(p)
    _add_data(p)
    _add_model_source(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--M", type=_int_list, default="50", help="sequence lengths, comma-separated")
    p.add_argument("--G", type=_int_list, default="5", help="gallery sizes, comma-separated")
    p.add_argument("--k", type=_positive_int, default=1000, help="enrolled subjects")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval-ident", help="identification protocol: rank-n accuracy", formatter_class=fmt)
    _add_common(p)
    _add_data(p)
    _add_model_source(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--M", type=_positive_int, default=50)
    p.add_argument("--background", type=_positive_int, default=1000, help="background size B")
    p.add_argument("--ranks", type=_int_list, default="1,50,100")
    p.add_argument("--prescreen", help="attribute used to pre-screen the background (e.g. country)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="text dependency: edit distance vs. score", formatter_class=fmt)
    _add_common(p)
    _add_data(p)
    _add_model_source(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--M", type=_positive_int, default=50)
    p.add_argument("--G", type=_positive_int, default=1)
    p.add_argument("--k", type=_positive_int, default=1000)
    p.add_argument("--timing-only", action="store_true", help="zero the keycode feature before embedding")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("info", help="version, parameter counts, checkpoint summary", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--units", type=_positive_int, default=128)
    p.add_argument("--input-dim", type=_positive_int, default=5)

    for sp in _subparsers(parser).values():
        for action in sp._actions:
            if action.help is None:
                action.help = action.dest.replace("_", " ")
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def apply_config_file(sub: argparse.ArgumentParser, command: str, path: str) -> None:
    """Install config-file values as defaults of ``sub`` (unknown keys rejected)."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep case: --M and --G are upper-case flags
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = {}
    for section in ("common", command):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions:
                raise UsageError(f"unknown key {key!r} in [{section}] of {path}")
            action = actions[dest]
            if isinstance(action, argparse._StoreTrueAction):
                low = raw.strip().lower()
                if low not in _TRUE | _FALSE:
                    raise UsageError(f"{key}: expected a boolean, got {raw!r}")
                values[dest] = low in _TRUE
            else:
                if action.choices is not None and action.type is None and raw not in action.choices:
                    raise UsageError(f"{key}: {raw!r} not in {list(action.choices)}")
                values[dest] = raw
                action.required = False
    extra = set(cp.sections()) - {"common", *_subparsers_names()}
    if extra:
        raise UsageError(f"unknown section(s) {sorted(extra)} in {path}")
    for group in sub._mutually_exclusive_groups:
        if any(a.dest in values for a in group._group_actions):
            group.required = False
    sub.set_defaults(**values)


def _subparsers_names():
    return ("synth", "train", "eval-auth", "eval-ident", "analyze", "info")


def _peek_config(argv: list[str]) -> tuple[str | None, str | None]:
    """(command, config path) found in argv without a full parse."""
    command = next((a for a in argv if a in _subparsers_names()), None)
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return command, argv[i + 1]
        if a.startswith("--config="):
            return command, a.split("=", 1)[1]
    return command, None


def parse_args(argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command, config = _peek_config(argv)
    if command and config:
        # file values become defaults first, so required flags may come from the file
        apply_config_file(_subparsers(parser)[command], command, config)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# helpers


def _resolve_data(path: str) -> str:
    if os.path.exists(path) or os.path.isabs(path):
        return path
    base = os.environ.get(DATA_ENV)
    if base and os.path.exists(os.path.join(base, path)):
        return os.path.join(base, path)
    return path


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_features(args):
    path = _resolve_data(args.data)
    if not os.path.exists(path):
        raise DataError(f"data file not found: {args.data}")
    feats = [extract_features(s) for s in read_log(path)]
    if args.subset != "all":
        train_side, test_side = split_subjects(feats, args.train_fraction, args.split_seed)
        feats = train_side if args.subset == "train" else test_side
    return path, feats


def _model(args):
    if args.stub and args.checkpoint:
        raise UsageError("give either a checkpoint or a stub, not both")
    if args.stub == "oracle":
        return oracle_embedder()
    if args.stub == "constant":
        return constant_embedder()
    if args.stub == "text-hash":
        return text_hash_embedder()
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    return load_checkpoint(args.checkpoint).params


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from None


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: str, args, inputs: dict[str, str], started: str, extra: dict | None = None) -> None:
    lines = [f"toolkit_version={__version__}", f"command={args.command}"]
    for key, value in sorted(vars(args).items()):
        if key == "command":
            continue
        if isinstance(value, list):
            value = ",".join(map(str, value))
        lines.append(f"config.{key}={value}")
    for name, p in sorted(inputs.items()):
        lines.append(f"input.{name}={p}")
        lines.append(f"input.{name}.sha256={_digest(p)}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    lines += [f"started={started}", f"finished={_now()}"]
    _write(path, "\n".join(lines) + "\n")


@contextlib.contextmanager
def _threads(deterministic: bool):
    if not deterministic:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_subjects=args.subjects,
        sessions_per_subject=args.sessions,
        mean_sentence_len=args.sentence_len,
        sentence_pool=args.sentence_pool,
        typo_rate=args.typo_rate,
        seed=args.seed,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seqs = generate_synthetic(cfg)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    if not os.path.isdir(out_dir):
        raise DataError(f"output directory does not exist: {out_dir}")
    write_log(args.out, seqs)
    subjects = len({s.subject_id for s in seqs})
    print(f"sequences={len(seqs)} subjects={subjects} keystrokes={sum(len(s) for s in seqs)}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    mc = ModelConfig(units=args.units, max_len=args.max_len, dropout=args.dropout, recurrent_dropout=args.recurrent_dropout)
    tc = TrainConfig(
        loss=args.loss, learning_rate=args.lr, beta1=args.beta1, beta2=args.beta2, epsilon=args.epsilon,
        margin=args.margin, epochs=args.epochs, batches_per_epoch=args.batches_per_epoch,
        batch_size=args.batch_size, seed=args.seed,
    )
    try:
        mc.validate()
        tc.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path, feats = _load_features(args)
    init = optimizer = None
    inputs = {"data": path}
    if args.resume:
        if not os.path.exists(args.resume):
            raise DataError(f"checkpoint not found: {args.resume}")
        ck = load_checkpoint(args.resume)
        if ck.params.config != mc:
            raise DataError("resume checkpoint was trained with a different model config")
        init, optimizer = ck.params, ck.optimizer
        inputs["resume"] = args.resume
    _ensure_dir(args.out_dir)
    ts = TrainingSet.from_sequences(feats, mc.max_len)
    params, history = train(ts, mc, tc, init=init, optimizer=optimizer)
    ckpt = os.path.join(args.out_dir, "checkpoint.ckpt")
    save_checkpoint(ckpt, params, args.seed, history.optimizer, extra={"loss": args.loss, "subjects": ts.num_subjects})
    _write(os.path.join(args.out_dir, "history.csv"), history.to_csv())
    write_manifest(
        os.path.join(args.out_dir, "manifest.txt"), args, inputs, started,
        {"train_subjects": ts.num_subjects, "train_sequences": len(ts.labels),
         "optimizer_steps": history.optimizer.t, "wall_clock_s": f"{history.wall_clock:.3f}"},
    )
    last = history.mean_loss[-1] if history.mean_loss else float("nan")
    print(f"trained {len(history.mean_loss)} epochs, steps={history.optimizer.t}, final_loss={last:.6f}")
    print(f"checkpoint={ckpt}")
    return 0


def cmd_eval_auth(args) -> int:
    started = _now()
    path, feats = _load_features(args)
    model = _model(args)
    _ensure_dir(args.out_dir)
    grid = {}
    for M in args.M:
        for G in args.G:
            rng = derive_rng(args.seed, "auth.protocol")
            rep = run_auth_protocol(model, feats, G, M, args.k, rng)
            grid[M, G] = rep.mean_eer
            tag = f"M{M}_G{G}"
            _write(os.path.join(args.out_dir, f"per_subject_{tag}.csv"), rep.per_subject_csv())
            _write(os.path.join(args.out_dir, f"roc_{tag}.csv"), rep.roc_csv())
            emit_plot(
                rep.roc[:, 1:], "roc", os.path.join(args.out_dir, f"roc_{tag}.svg"),
                title=f"ROC M={M} G={G}", xlabel="FAR", ylabel="FRR",
                metadata={"mean_eer_percent": repr(rep.mean_eer), "M": M, "G": G, "k": args.k},
            )
    header = "M\\G," + ",".join(f"G={G}" for G in args.G)
    rows = [header] + [f"{M}," + ",".join(repr(grid[M, G]) for G in args.G) for M in args.M]
    _write(os.path.join(args.out_dir, "eer_grid.csv"), "\n".join(rows) + "\n")
    summary = [f"authentication k={args.k} mean EER (%)"] + [
        f"M={M} G={G} eer={grid[M, G]:.4f}" for M in args.M for G in args.G
    ]
    _write(os.path.join(args.out_dir, "summary.txt"), "\n".join(summary) + "\n")
    inputs = {"data": path} | ({"checkpoint": args.checkpoint} if args.checkpoint else {})
    write_manifest(os.path.join(args.out_dir, "manifest.txt"), args, inputs, started)
    print("\n".join(summary))
    return 0


def cmd_eval_ident(args) -> int:
    started = _now()
    path, feats = _load_features(args)
    model = _model(args)
    _ensure_dir(args.out_dir)
    rng = derive_rng(args.seed, "ident.protocol")
    rep = run_ident_protocol(model, feats, args.background, args.M, args.ranks, rng, prescreen=args.prescreen)
    _write(os.path.join(args.out_dir, "rank_accuracy.csv"), rep.rank_csv())
    _write(os.path.join(args.out_dir, "summary.txt"), rep.summary())
    inputs = {"data": path} | ({"checkpoint": args.checkpoint} if args.checkpoint else {})
    write_manifest(os.path.join(args.out_dir, "manifest.txt"), args, inputs, started)
    print(rep.summary(), end="")
    return 0


def cmd_analyze(args) -> int:
    started = _now()
    path, feats = _load_features(args)
    model = _model(args)
    if args.timing_only:
        model = timing_only(model)
    _ensure_dir(args.out_dir)
    rng = derive_rng(args.seed, "analysis.protocol")
    rep = text_dependency_report(model, feats, args.M, args.k, rng, G=args.G)
    _write(os.path.join(args.out_dir, "pairs.csv"), rep.pairs_csv())
    _write(os.path.join(args.out_dir, "summary.txt"), rep.summary())
    sel = rep.plot_indices
    pts = np.array([[rep.pairs[i].levenshtein, rep.pairs[i].embed_distance] for i in sel], dtype=float)
    groups = [0 if rep.pairs[i].genuine else 1 for i in sel]
    emit_plot(
        pts, "scatter", os.path.join(args.out_dir, "scatter.svg"),
        title="edit distance vs. score", xlabel="Levenshtein distance", ylabel="score", groups=groups,
        metadata={"pearson_all_pairs": repr(rep.p), "slope_all_pairs": repr(rep.slope), "pairs": rep.n},
    )
    inputs = {"data": path} | ({"checkpoint": args.checkpoint} if args.checkpoint else {})
    write_manifest(os.path.join(args.out_dir, "manifest.txt"), args, inputs, started)
    print(rep.summary(), end="")
    return 0


def cmd_info(args) -> int:
    mc = ModelConfig(units=args.units, input_dim=args.input_dim)
    print(f"keybio {__version__}")
    print(f"trainable_params(units={args.units}, input_dim={args.input_dim})={count_params(mc)}")
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        cfg = ck.params.config
        C = 0 if ck.params.classifier is None else ck.params.classifier.W.shape[0]
        print(f"checkpoint={args.checkpoint}")
        print(f"config={cfg}")
        print(f"seed={ck.seed} head_classes={C} optimizer_steps={ck.optimizer.t if ck.optimizer else 0}")
        print(f"trainable_params={count_params(cfg, C)}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval-auth": cmd_eval_auth,
    "eval-ident": cmd_eval_ident,
    "analyze": cmd_analyze,
    "info": cmd_info,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"keybio: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse: --help, --version, usage errors
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.deterministic):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"keybio: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"keybio: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, LogFormatError, InsufficientDataError, CheckpointError, OSError) as exc:
        print(f"keybio: data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"keybio: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
