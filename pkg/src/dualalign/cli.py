"""Command-line entry point: ``dualalign caption|train|eval|retrieve|export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import OrderedDict
from pathlib import Path

from .alignment import fit, init_model, load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import (
    FeatureStore,
    attach_captions,
    build_vocab,
    by_split,
    encode_pairs,
    load_manifest,
    split_records,
    write_manifest,
)
from .errors import AlignError, ConfigError, EmptyCaption
from .inference import (
    PromptSet,
    aggregate_report,
    build_index,
    export_embeddings,
    fmt2,
    retrieve,
    top1_accuracy,
)
from .synthetic import make_synthetic

log = logging.getLogger("dualalign")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(seed=getattr(args, "seed", None), out_dir=getattr(args, "out_dir", None))


def _out_dir(args) -> Path:
    out = Path(_run_config(args).out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_caption(args) -> int:
    src = Path(args.manifest)
    records = load_manifest(src)
    updated = attach_captions(records, args.captioner, overwrite=args.overwrite)
    dest = Path(args.output) if args.output else _out_dir(args) / src.name
    if dest.resolve() == src.resolve():
        raise ConfigError("refusing to overwrite the input manifest; pass a different --output")
    if updated == records and dest.resolve().parent == src.resolve().parent:
        dest.write_bytes(src.read_bytes())
    else:
        write_manifest(updated, dest)
    changed = sum(a != b for a, b in zip(records, updated))
    print(f"captioned {changed} of {len(records)} records -> {dest}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args).with_overrides(
        manifest=args.manifest,
        preset=args.preset,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
    )
    if args.print_defaults:
        print(json.dumps(cfg.resolved(), indent=2))
        return 0
    if not cfg.manifest:
        raise ConfigError("no manifest given (config key 'manifest' or --manifest)")
    tc = cfg.train_config()
    records = load_manifest(cfg.manifest)
    if any(r.split is None for r in records):
        records = split_records(records, cfg.split_ratios, cfg.seed)
    for r in records:
        if not r.caption:
            raise EmptyCaption(r.id)
    classes = cfg.classes or list(OrderedDict.fromkeys(r.label for r in records))
    vocab = build_vocab(records, cfg.vocab_size)
    store = FeatureStore()
    train = encode_pairs(by_split(records, "train"), vocab, store)
    val = encode_pairs(by_split(records, "val"), vocab, store)
    d_in = train.features.shape[1]
    if cfg.d_in is not None and cfg.d_in != d_in:
        raise ConfigError(f"config d_in={cfg.d_in} but features have dimension {d_in}")
    model = init_model(
        cfg.seed, vocab, d_in, cfg.h, cfg.d_v, cfg.d_t, cfg.n,
        image_mode=cfg.image_mode, text_mode=cfg.text_mode, classes=classes, template=cfg.template,
    )

    def on_epoch(epoch, train_loss, val_loss):
        log.info("epoch %d/%d train_loss=%.6f val_loss=%s", epoch + 1, tc.epochs, train_loss,
                 "n/a" if val_loss is None else f"{val_loss:.6f}")

    model, history = fit(model, train, val if len(val) >= 2 else None, tc, on_epoch=on_epoch)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.cclp")
    _dump_json(history.to_json(), out / "history.json")
    _dump_json({"wall_time": history.wall_time}, out / "timing.json")
    _dump_json(cfg.resolved(), out / "config.json")
    write_manifest(records, out / "splits.jsonl")
    final = history.val_loss[-1]
    print(f"final val loss: {'n/a' if final is None else f'{final:.6f}'}")
    print(f"checkpoint: {out / 'model.cclp'}")
    return 0


def _parse_named(items, sep="=") -> list[tuple[str | None, str]]:
    out = []
    for item in items:
        name, eq, value = item.partition(sep)
        out.append((name, value) if eq else (None, item))
    return out


def cmd_eval(args) -> int:
    accuracies: OrderedDict[str, float] = OrderedDict()
    if args.report_only:
        if args.paths:
            raise ConfigError("--report-only takes NAME=ACCURACY pairs, not checkpoint/manifests")
        for name, value in _parse_named(args.report_only):
            if name is None:
                raise ConfigError(f"--report-only entries look like NAME=ACCURACY, got {value!r}")
            try:
                accuracies[name] = float(value)
            except ValueError:
                raise ConfigError(f"accuracy for {name!r} is not a number: {value!r}") from None
    else:
        if len(args.paths) < 2:
            raise ConfigError("eval needs a checkpoint and at least one manifest")
        model = load_checkpoint(args.paths[0])
        prompts = PromptSet.for_model(model, args.template)
        store = FeatureStore()
        for name, path in _parse_named(args.paths[1:]):
            records = load_manifest(path)
            if args.split:
                records = by_split(records, args.split)
            accuracies[name or Path(path).stem] = top1_accuracy(model, records, prompts, store, mode=args.prob_mode)
    report = aggregate_report(accuracies, args.ood or [], method=args.method)
    out = _out_dir(args)
    (out / "report.json").write_text(report.dumps(), encoding="utf-8")
    sys.stdout.write(report.render_table())
    return 0


def cmd_retrieve(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = load_manifest(args.index_manifest)
    if args.split:
        records = by_split(records, args.split)
    store = FeatureStore()
    index = build_index(model, records, args.modality, store)
    exclude = None
    if args.query is not None:
        query = args.query
        shown = args.query
    else:
        query = store.resolve_ref(args.query_image)
        shown = args.query_image
        if args.exclude_self:
            path, _, idx = args.query_image.rpartition(":")
            target = (str(Path(path).resolve()), int(idx))
            exclude = next((r.id for r in records if (str(Path(r.feature_path).resolve()), r.index) == target), None)
    hits = retrieve(model, query, index, args.k, exclude_id=exclude)
    width = max(len("id"), *(len(i) for i, _ in hits))
    print(f"{'rank':>4}  {'id'.ljust(width)}  cosine")
    for rank, (rid, cos) in enumerate(hits, start=1):
        print(f"{rank:>4}  {rid.ljust(width)}  {cos:.6f}")
    result = {"query": shown, "k": args.k, "modality": args.modality,
              "results": [{"rank": i + 1, "id": rid, "cosine": cos} for i, (rid, cos) in enumerate(hits)]}
    _dump_json(result, _out_dir(args) / "retrieval.json")
    return 0


def cmd_export(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    if args.split:
        records = by_split(records, args.split)
    export_embeddings(model, records, args.output, FeatureStore(), modality=args.modality)
    print(f"wrote {len(records)} rows -> {args.output}")
    return 0


def cmd_synth(args) -> int:
    path = make_synthetic(args.out, per_class=args.per_class, dim=args.dim, sigma=args.sigma,
                          seed=_run_config(args).seed, captioned=not args.uncaptioned)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="dualalign", parents=[common], description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("caption", parents=[common], help="fill captions with an external captioner")
    c.add_argument("manifest")
    c.add_argument("--captioner", required=True, help="command reading PATH:INDEX lines, writing caption lines")
    c.add_argument("--output", help="output manifest (default: <out-dir>/<manifest name>)")
    c.add_argument("--overwrite", action="store_true", help="recaption records that already have captions")
    c.set_defaults(func=cmd_caption)

    t = sub.add_parser("train", parents=[common], help="split, train, save checkpoint and history")
    t.add_argument("--manifest")
    t.add_argument("--preset", choices=["paper", "desk"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--print-defaults", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="zero-shot top-1 accuracy report")
    e.add_argument("paths", nargs="*", metavar="CHECKPOINT [NAME=]MANIFEST")
    e.add_argument("--ood", nargs="+", metavar="NAME", help="datasets counted in the OOD average")
    e.add_argument("--split", choices=["train", "val", "test"], help="evaluate only this split of each manifest")
    e.add_argument("--report-only", nargs="+", metavar="NAME=ACC", help="aggregate precomputed accuracies")
    e.add_argument("--method", default="model", help="row label in the table")
    e.add_argument("--template", help="prompt template (default: the checkpoint's)")
    e.add_argument("--prob-mode", choices=["softmax", "literal"], default="softmax")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("retrieve", parents=[common], help="exact top-k cosine retrieval")
    r.add_argument("checkpoint")
    r.add_argument("--index-manifest", required=True)
    q = r.add_mutually_exclusive_group(required=True)
    q.add_argument("--query", help="text query; bare class names use the prompt template")
    q.add_argument("--query-image", help="feature reference PATH:INDEX")
    r.add_argument("--k", type=_positive_int, required=True)
    r.add_argument("--modality", choices=["image", "text"], default="image", help="what the index holds")
    r.add_argument("--split", choices=["train", "val", "test"])
    r.add_argument("--exclude-self", action="store_true")
    r.set_defaults(func=cmd_retrieve)

    x = sub.add_parser("export", parents=[common], help="write embeddings as TSV")
    x.add_argument("checkpoint")
    x.add_argument("manifest")
    x.add_argument("output")
    x.add_argument("--modality", choices=["image", "text"], default="image")
    x.add_argument("--split", choices=["train", "val", "test"])
    x.set_defaults(func=cmd_export)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic 8-class dataset")
    s.add_argument("out")
    s.add_argument("--per-class", type=_positive_int, default=100)
    s.add_argument("--dim", type=_positive_int, default=32)
    s.add_argument("--sigma", type=float, default=0.3)
    s.add_argument("--uncaptioned", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except AlignError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"ERROR {exc.code}: {msg}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"ERROR {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
