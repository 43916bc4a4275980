"""Command line entry point.

Settings resolve as flags > JSON config file (``--config`` or the
``WAVER_CONFIG`` environment variable) > built-in defaults. Exit codes: 0 on
success, 2 for usage and validation errors, 3 for data errors, 4 when a
non-finite value shows up during training.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ._validation import check_choice, check_int, check_real
from .distill import DEFAULT_Z, KnowledgeCorpus, build_corpus
from .encoders import PrecomputedEncoder, ToyEncoder
from .evaluation import (
    STYLE_SEEDS,
    SWEEP_KAPPAS,
    annotator_csv,
    annotator_selections,
    annotator_split_eval,
    format_table,
    is_prefix_chain,
    kappa_sweep,
    multi_caption_eval,
    report_csv,
    report_table,
    style_csv,
    style_eval,
    style_table,
    sweep_csv,
    sweep_table,
)
from .exceptions import DataError, InvalidConfig, NumericError, ValidationError, WaverError
from .ingest import generate_synthetic, load_dataset, save_dataset, split_holdout
from .train import (
    TAU_MAX,
    TAU_MIN,
    RetrievalModel,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_loop,
    write_trace,
)
from .vcd import ContentDictionary, build_dictionary, read_phrase_sidecar

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    kappa: int = 5
    z: float = DEFAULT_Z
    batch_size: int = 126
    epochs: int = 5
    max_steps: int = None
    lr: float = 1e-4
    momentum: float = 0.0
    optimizer: str = "sgd"
    tau_init: float = 0.07
    seed: int = 0
    dim: int = 32
    d_proj: int = None
    encoder_seed: int = 0
    text_pooling: str = "mean"

    def validate(self):
        check_int(self.kappa, "kappa", 1)
        check_real(self.z, "z", 0.0, low_open=True)
        check_int(self.dim, "dim", 1)
        check_int(self.encoder_seed, "encoder_seed")
        if self.d_proj is not None:
            check_int(self.d_proj, "d_proj", 1)
            if self.d_proj > self.dim:
                raise InvalidConfig(f"d_proj ({self.d_proj}) must not exceed dim ({self.dim})")
        check_real(self.tau_init, "tau_init", TAU_MIN, TAU_MAX)
        check_choice(self.text_pooling, "text_pooling", {"mean", "last"})
        self.train_config()
        return self

    def train_config(self):
        return TrainConfig(
            batch_size=self.batch_size, epochs=self.epochs, max_steps=self.max_steps,
            learning_rate=self.lr, momentum=self.momentum, tau_init=self.tau_init,
            seed=self.seed, d_proj=self.d_proj, text_pooling=self.text_pooling,
            optimizer=self.optimizer,
        ).validate()


CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def load_config_file(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidConfig(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidConfig(f"config file {path} must hold a JSON object")
    unknown = set(data) - CONFIG_FIELDS
    if unknown:
        raise InvalidConfig(f"config file {path}: unknown keys {sorted(unknown)}")
    return data


def resolve_config(args, environ=None):
    """Merge defaults, the config file and explicit flags, then validate."""
    environ = os.environ if environ is None else environ
    merged = asdict(RunConfig())
    path = getattr(args, "config", None) or environ.get("WAVER_CONFIG")
    if path:
        merged.update(load_config_file(path))
    for name in CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    return RunConfig(**merged).validate()


def _int_list(text):
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list is empty")
    return values


def _add_run_flags(p, training=True):
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("--dim", type=int)
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    p.add_argument("--features", help="WVTR feature store (video id -> frames)")
    p.add_argument("--text-pooling", dest="text_pooling", choices=("mean", "last"))
    if training:
        p.add_argument("--kappa", type=int)
        p.add_argument("--z", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--steps", dest="max_steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--optimizer", choices=("sgd", "adam"))
        p.add_argument("--tau-init", dest="tau_init", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--d-proj", dest="d_proj", type=int)


def _add_model_flags(p):
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dictionary", help="rebuild the corpus from this dictionary")
    src.add_argument("--corpus", help="cached corpus file")
    p.add_argument("--z", type=float)
    p.add_argument("--dataset", required=True)
    p.add_argument("--csv", help="write CSV here ('-' for standard output)")


def build_parser():
    parser = argparse.ArgumentParser(prog="waver", description="Text-video retrieval with content dictionaries.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset manifest")
    p.add_argument("--seed", type=int, default=16)
    p.add_argument("--videos", type=int, default=80)
    p.add_argument("--captions", type=int, default=5)
    p.add_argument("--style-variants", type=int, default=4)
    p.add_argument("--strength", type=float, default=0.1)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--holdout", type=int, default=0, help="hold out the last N videos")
    p.add_argument("--out", required=True)
    p.add_argument("--test-out", help="manifest for the held-out videos")

    vcd = sub.add_parser("vcd", help="video content dictionary")
    vsub = vcd.add_subparsers(dest="vcd_command", required=True)
    p = vsub.add_parser("build", help="build a content dictionary")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-from", help="mine phrases from this manifest instead")
    p.add_argument("--sidecar", help="caption-id -> phrases TSV replacing the rules")
    _add_run_flags(p)

    p = sub.add_parser("train", help="train the projection heads")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dictionary", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--corpus-out", help="also cache the knowledge corpus here")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="multi-caption evaluation")
    _add_model_flags(p)
    p.add_argument("--annotators", action="store_true", help="add one row per annotator")
    _add_run_flags(p, training=False)

    p = sub.add_parser("style-eval", help="single caption per video over several seeds")
    _add_model_flags(p)
    p.add_argument("--seeds", type=_int_list, default=list(STYLE_SEEDS))
    p.add_argument("--population-std", action="store_true", help="divide by n instead of n - 1")
    _add_run_flags(p, training=False)

    p = sub.add_parser("kappa-sweep", help="retrain and evaluate for several top-kappa values")
    p.add_argument("--dataset", required=True, help="training manifest")
    p.add_argument("--test", required=True, help="evaluation manifest")
    p.add_argument("--kappas", type=_int_list, default=list(SWEEP_KAPPAS))
    p.add_argument("--sidecar")
    p.add_argument("--csv")
    _add_run_flags(p)
    return parser


# -- helpers --------------------------------------------------------------------


def _require(*paths):
    for path in paths:
        if path is not None and not Path(path).is_file():
            raise InvalidConfig(f"no such file: {path}")


def _backend(cfg, features=None, dim=None):
    dim = cfg.dim if dim is None else dim
    text = ToyEncoder(dim=dim, seed=cfg.encoder_seed, pooling=cfg.text_pooling)
    if features:
        return PrecomputedEncoder.from_file(features, text_encoder=text)
    return text


def _emit_csv(text, target, out):
    if target == "-":
        out.write(text)
    elif target:
        Path(target).write_text(text, encoding="utf-8")


def _load_model(args, cfg):
    result, pooling = load_checkpoint(args.checkpoint)
    cfg.text_pooling = pooling
    backend = _backend(cfg, args.features, dim=result.video_head.dim)
    if args.corpus:
        corpus = KnowledgeCorpus.load(args.corpus)
    else:
        dictionary = ContentDictionary.load(args.dictionary)
        corpus = build_corpus(dictionary, backend, cfg.z)
    if corpus.dim != result.video_head.dim:
        raise InvalidConfig(f"corpus dim {corpus.dim} != checkpoint dim {result.video_head.dim}")
    return RetrievalModel.from_result(result, corpus, backend, pooling)


# -- commands -------------------------------------------------------------------


def cmd_generate(args, out):
    check_int(args.videos, "videos", 2)
    check_int(args.captions, "captions", 1)
    if args.holdout:
        check_int(args.holdout, "holdout", 1)
        if not args.test_out:
            raise InvalidConfig("--holdout needs --test-out")
    ds = generate_synthetic(args.seed, args.videos, args.captions, args.style_variants,
                            args.strength, name=args.name)
    if args.holdout:
        train, test = split_holdout(ds, args.holdout)
        save_dataset(train, args.out)
        save_dataset(test, args.test_out)
        out.write(f"wrote {len(train.videos)} train and {len(test.videos)} test videos\n")
    else:
        save_dataset(ds, args.out)
        out.write(f"wrote {len(ds.videos)} videos, {len(ds.captions)} captions\n")


def cmd_vcd_build(args, out):
    cfg = resolve_config(args)
    _require(args.dataset, args.vocab_from, args.sidecar, args.features)
    dataset = load_dataset(args.dataset)
    vocab_source = load_dataset(args.vocab_from) if args.vocab_from else None
    sidecar = read_phrase_sidecar(args.sidecar) if args.sidecar else None
    backend = _backend(cfg, args.features)
    dictionary = build_dictionary(dataset, backend, cfg.kappa, vocab_source, sidecar)
    dictionary.save(args.out)
    out.write(f"U={dictionary.vocab_size} L={len(dictionary)} kappa={dictionary.kappa}\n")


def cmd_train(args, out):
    cfg = resolve_config(args)
    config = cfg.train_config()
    _require(args.dataset, args.dictionary, args.features)
    dataset = load_dataset(args.dataset)
    dictionary = ContentDictionary.load(args.dictionary)
    if dictionary.dim != cfg.dim:
        raise InvalidConfig(f"dictionary was built with dim={dictionary.dim}, run uses dim={cfg.dim}")
    backend = _backend(cfg, args.features)
    corpus = build_corpus(dictionary, backend, cfg.z)
    if args.corpus_out:
        corpus.save(args.corpus_out)
    result = train_loop(dataset, corpus, backend, config)
    save_checkpoint(args.out, result, cfg.text_pooling)
    write_trace(args.trace or f"{args.out}.trace.csv", result.trace)
    final = result.trace[-1][1] if result.trace else float("nan")
    out.write(f"steps={len(result.trace)} final_loss={final:.6f} tau={result.tau:.6f}\n")


def cmd_eval(args, out):
    cfg = resolve_config(args)
    _require(args.checkpoint, args.dictionary, args.corpus, args.dataset, args.features)
    model = _load_model(args, cfg)
    dataset = load_dataset(args.dataset)
    report = multi_caption_eval(model, dataset)
    rows = [(dataset.split, report.values())]
    csv_text = report_csv(report)
    if args.annotators:
        per = annotator_split_eval(model, dataset, annotator_selections(dataset))
        rows += [(a, r.values()) for a, r in per.items()]
        csv_text += annotator_csv(per)
    out.write(format_table("split", rows) if args.annotators else report_table(report, dataset.split))
    _emit_csv(csv_text, args.csv, out)


def cmd_style_eval(args, out):
    cfg = resolve_config(args)
    _require(args.checkpoint, args.dictionary, args.corpus, args.dataset, args.features)
    model = _load_model(args, cfg)
    dataset = load_dataset(args.dataset)
    style = style_eval(model, dataset, args.seeds, ddof=0 if args.population_std else 1)
    out.write(style_table(style))
    _emit_csv(style_csv(style), args.csv, out)


def cmd_kappa_sweep(args, out):
    cfg = resolve_config(args)
    config = cfg.train_config()
    _require(args.dataset, args.test, args.sidecar, args.features)
    train = load_dataset(args.dataset)
    test = load_dataset(args.test)
    sidecar = read_phrase_sidecar(args.sidecar) if args.sidecar else None
    backend = _backend(cfg, args.features)
    rows = kappa_sweep(train, test, backend, args.kappas, config, cfg.z, sidecar)
    out.write(sweep_table(rows))
    if not is_prefix_chain([r.dictionary for r in rows]):
        raise DataError("dictionaries across kappa values are not nested")
    _emit_csv(sweep_csv(rows), args.csv, out)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "style-eval": cmd_style_eval,
    "kappa-sweep": cmd_kappa_sweep,
}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    handler = cmd_vcd_build if args.command == "vcd" else COMMANDS[args.command]
    try:
        handler(args, out)
    except ValidationError as exc:
        err.write(f"waver: error: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        err.write(f"waver: numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except WaverError as exc:
        err.write(f"waver: data error: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        err.write(f"waver: data error: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
