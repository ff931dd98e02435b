"""Command-line pipeline: gen-data, train, eval, embed.

One flat ``key = value`` config file drives every stage; subcommand flags
override individual keys.  Outputs are deterministic for a fixed config, and
every artifact directory receives a ``run_config.txt`` provenance block with
the resolved config and its sha256 hash.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .encoders import ImageEncoderConfig, TextEncoderConfig, Vocabulary
from .rng import Rng
from .syndata import (
    caption_vocabulary_words, generate_corpus, split_corpus, write_corpus,
)
from .training import (
    TrainConfig, CheckpointError, train_model, save_checkpoint, load_checkpoint,
)
from .zeroshot import (
    EvalReport, builtin_tasks, evaluate_task, render_report,
    load_external_dataset,
)


class CliError(Exception):
    """User-facing error; maps to exit code 2."""


# every config key with its default; the value's type fixes the parse
CONFIG_DEFAULTS = {
    "seed": 0,
    "corpus_dir": "corpus",
    "checkpoint_path": "model.ckpt",
    "report_dir": "reports",
    "n_pairs": 2000,
    "image_size": 64,
    "threads": 1,
    "batch_size": 32,
    "epochs": 5,
    "learning_rate": 1e-3,
    "embed_dim": 64,
    "stem_channels": 16,
    "num_residual_blocks": 4,
    "text_model_dim": 64,
    "text_num_layers": 2,
    "text_num_heads": 4,
    "text_max_seq_len": 32,
}


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; '#' starts a comment; unknown keys fail."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(f"cannot read config file: {err}") from err
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_DEFAULTS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = type(CONFIG_DEFAULTS[key])
        try:
            out[key] = kind(value)
        except ValueError as err:
            raise CliError(
                f"{path}:{lineno}: bad value for {key!r}: {err}") from err
    return out


def resolve_config(args) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    # flags win over the file
    for key in CONFIG_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def config_text(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()


def write_provenance(directory: Path, cfg: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    body = f"# config sha256 = {config_hash(cfg)}\n{config_text(cfg)}"
    (directory / "run_config.txt").write_text(body, encoding="utf-8")


def train_config_from(cfg: dict, vocab_size: int) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
        image=ImageEncoderConfig(
            input_size=cfg["image_size"],
            stem_channels=cfg["stem_channels"],
            num_residual_blocks=cfg["num_residual_blocks"],
            embed_dim=cfg["embed_dim"]),
        text=TextEncoderConfig(
            vocab_size=vocab_size,
            max_seq_len=cfg["text_max_seq_len"],
            model_dim=cfg["text_model_dim"],
            num_layers=cfg["text_num_layers"],
            num_heads=cfg["text_num_heads"],
            embed_dim=cfg["embed_dim"]))


def _load_corpus(cfg: dict, size: int):
    manifest = Path(cfg["corpus_dir"]) / "manifest.jsonl"
    if not manifest.exists():
        raise CliError(f"no corpus at {manifest}; run gen-data first")
    try:
        return load_external_dataset(manifest, size=size)
    except (ValueError, FileNotFoundError) as err:
        raise CliError(str(err)) from err


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as err:
        raise CliError(f"{path}: {err}") from err
    except OSError as err:
        raise CliError(f"cannot read checkpoint: {err}") from err


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    try:
        pairs = generate_corpus(cfg["n_pairs"], cfg["seed"],
                                size=cfg["image_size"],
                                threads=cfg["threads"])
        split_corpus(pairs, cfg["seed"])
    except ValueError as err:
        raise CliError(str(err)) from err
    out = Path(cfg["corpus_dir"])
    try:
        write_provenance(out, cfg)
        manifest = write_corpus(pairs, out)
    except OSError as err:
        raise CliError(f"cannot write corpus: {err}") from err
    counts = {s: sum(1 for p in pairs if p.split == s)
              for s in ("train", "val", "test")}
    print(f"wrote {len(pairs)} pairs to {manifest} "
          f"(train {counts['train']}, val {counts['val']}, "
          f"test {counts['test']})")
    print(f"config sha256: {config_hash(cfg)}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    samples = _load_corpus(cfg, cfg["image_size"])
    train_split = [s for s in samples if s.split == "train"]
    val_split = [s for s in samples if s.split == "val"]
    vocab = Vocabulary(caption_vocabulary_words())
    try:
        tc = train_config_from(cfg, vocab.size)
        params, log = train_model(tc, train_split, val_split, vocab)
    except ValueError as err:
        raise CliError(str(err)) from err
    ckpt = Path(cfg["checkpoint_path"])
    if ckpt.parent != Path("."):
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    metrics = {}
    if log.epochs:
        last = log.epochs[-1]
        metrics = {"val_loss": last.val_loss,
                   "image_to_text_r1": last.image_to_text_r1,
                   "text_to_image_r1": last.text_to_image_r1}
    save_checkpoint(ckpt, params, tc, vocab, epoch=cfg["epochs"],
                    metrics=metrics)
    log_path = ckpt.with_suffix(".log.csv")
    log.write_csv(log_path)
    print(f"saved checkpoint to {ckpt} and training log to {log_path}")
    if log.steps:
        print(f"first-step loss {log.steps[0].loss:.6f}, "
              f"final loss {log.steps[-1].loss:.6f}")
    print(f"config sha256: {config_hash(cfg)}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ck = _load_checkpoint(cfg["checkpoint_path"])
    tasks = builtin_tasks()
    wanted = args.tasks.split(",") if args.tasks else list(tasks)
    for name in wanted:
        if name not in tasks:
            raise CliError(f"unknown task {name!r}; valid tasks: "
                           + ", ".join(sorted(tasks)))
    samples = _load_corpus(cfg, ck.config.image.input_size)
    test_split = [s for s in samples if s.split == "test"] or samples
    report = EvalReport(model_id="local", config_hash=config_hash(cfg))
    for name in wanted:
        try:
            res = evaluate_task(ck.config, ck.params, tasks[name],
                                test_split, ck.vocab)
        except ValueError as err:
            raise CliError(str(err)) from err
        report.results.append(res)
        print(f"{name}: n={res.n} excluded={res.n_excluded} "
              f"accuracy={res.accuracy:.3f}")
    out = Path(cfg["report_dir"])
    try:
        write_provenance(out, cfg)
        header = f"# config sha256 = {config_hash(cfg)}\n"
        (out / "report.csv").write_text(
            header + render_report([report], fmt="csv"), encoding="utf-8")
        (out / "report.txt").write_text(
            header + render_report([report], fmt="text"), encoding="utf-8")
    except OSError as err:
        raise CliError(f"cannot write report: {err}") from err
    print(f"wrote {out / 'report.csv'} and {out / 'report.txt'}")
    return 0


def cmd_embed(args) -> int:
    from .encoders import encode_image

    cfg = resolve_config(args)
    ck = _load_checkpoint(cfg["checkpoint_path"])
    manifest = Path(args.input) if args.input \
        else Path(cfg["corpus_dir"]) / "manifest.jsonl"
    if not manifest.exists():
        raise CliError(f"no manifest at {manifest}")
    try:
        samples = load_external_dataset(
            manifest, size=ck.config.image.input_size)
    except (ValueError, FileNotFoundError) as err:
        raise CliError(str(err)) from err
    if not samples:
        raise CliError("manifest contains no samples")
    out_path = Path(args.out) if args.out else Path(cfg["report_dir"]) / "embeddings.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config sha256 = {config_hash(cfg)}",
             "id," + ",".join(f"d{i}" for i in range(ck.config.image.embed_dim))]
    for lo in range(0, len(samples), 64):
        chunk = samples[lo:lo + 64]
        batch = np.stack([s.image for s in chunk])
        emb = encode_image(ck.config.image, ck.params, batch).data
        for s, row in zip(chunk, emb):
            lines.append(str(s.id) + "," + ",".join(f"{v:.17g}" for v in row))
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} embeddings to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("-c", "--config", metavar="FILE",
                   help="path to a key = value config file")
    p.add_argument("--seed", type=int, help="global seed "
                   f"(default {CONFIG_DEFAULTS['seed']})")
    p.add_argument("--threads", type=int, dest="threads",
                   help="worker cap; never changes results "
                   f"(default {CONFIG_DEFAULTS['threads']})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fundusclip",
        description="synthetic fundus image-caption pipeline: generate, "
                    "train, evaluate, export")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and write a corpus")
    _add_common(g)
    g.add_argument("--n", type=int, dest="n_pairs",
                   help=f"corpus size (default {CONFIG_DEFAULTS['n_pairs']})")
    g.add_argument("--out", dest="corpus_dir",
                   help="corpus directory "
                   f"(default {CONFIG_DEFAULTS['corpus_dir']})")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the dual encoder on a corpus")
    _add_common(t)
    t.add_argument("--corpus", dest="corpus_dir",
                   help="corpus directory "
                   f"(default {CONFIG_DEFAULTS['corpus_dir']})")
    t.add_argument("--checkpoint", dest="checkpoint_path",
                   help="output checkpoint path "
                   f"(default {CONFIG_DEFAULTS['checkpoint_path']})")
    t.add_argument("--epochs", type=int,
                   help=f"training epochs (default {CONFIG_DEFAULTS['epochs']})")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot evaluation and report")
    _add_common(e)
    e.add_argument("--checkpoint", dest="checkpoint_path",
                   help="checkpoint to evaluate "
                   f"(default {CONFIG_DEFAULTS['checkpoint_path']})")
    e.add_argument("--corpus", dest="corpus_dir",
                   help="corpus directory "
                   f"(default {CONFIG_DEFAULTS['corpus_dir']})")
    e.add_argument("--tasks", help="comma-separated task names "
                   "(default: all built-in tasks)")
    e.add_argument("--out", dest="report_dir",
                   help="report directory "
                   f"(default {CONFIG_DEFAULTS['report_dir']})")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="export image embeddings as CSV")
    _add_common(m)
    m.add_argument("--checkpoint", dest="checkpoint_path",
                   help="checkpoint to embed with "
                   f"(default {CONFIG_DEFAULTS['checkpoint_path']})")
    m.add_argument("--input", help="manifest.jsonl to embed "
                   "(default: the corpus manifest)")
    m.add_argument("--out", help="output CSV path "
                   "(default: <report_dir>/embeddings.csv)")
    m.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags and 0 on --help; keep its codes
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
