"""Command-line entry point: ``mmaudio <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import annotate as ann
from .config import config_digest, resolve_config, subseed
from .engine import load_checkpoint, save_checkpoint
from .exceptions import DataIntegrityError, InvalidInputError, MMAudioError
from .frontend import FrontendConfig, build_mel_filterbank, featurize_waveform, list_wavs, read_wav, write_record
from .models import VARIANTS, build_variant, describe
from .train import (
    LabelIndex,
    TrainConfig,
    VideoDataset,
    load_network,
    network_meta,
    run_training,
    split_by_fold,
)

logger = logging.getLogger("mmaudio")


def _ordered_map(fn, items, workers):
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _frontend(cfg):
    f = cfg["frontend"]
    return FrontendConfig(16000, f["n_fft"], f["n_mels"], f["fmin"], f["fmax"], f["log_offset"])


def cmd_featurize(args, cfg):
    fcfg = _frontend(cfg)
    fb = build_mel_filterbank(fcfg.n_fft, fcfg.n_mels, fcfg.fmin, fcfg.fmax)
    paths = list_wavs(args.inp)
    os.makedirs(args.out, exist_ok=True)

    def work(path):
        frames = featurize_waveform(read_wav(path), fcfg, fb)
        stem = os.path.splitext(os.path.basename(path))[0]
        for k, frame in enumerate(frames):
            write_record(os.path.join(args.out, f"{stem}_{k:04d}.lmel"), frame)
        return len(frames)

    counts = _ordered_map(work, paths, cfg["workers"])
    print(f"featurized {len(paths)} file(s) into {sum(counts)} record(s)")


def cmd_annotate(args, cfg):
    records = ann.read_records(args.inp)
    seed = cfg["annotate"]["seed"]
    if seed is None:
        seed = subseed(cfg["seed"], "annotate.predictor")
    predictor = ann.SyntheticPredictor(seed=seed, threshold=cfg["annotate"]["threshold"])
    threshold = cfg["annotate"]["threshold"]

    def work(record):
        try:
            return ann.annotate_record(record, predictor, threshold), None
        except Exception as exc:  # noqa: BLE001 - per-record isolation
            return None, (record.uuid, repr(exc))

    outcomes = _ordered_map(work, records, cfg["workers"])
    results = [a for a, _ in outcomes if a is not None]
    failures = [f for _, f in outcomes if f is not None]
    ann.write_annotations(args.out, results)
    print(f"annotated {len(results)} video(s); {len(failures)} failure(s)")
    for uuid, err in failures:
        print(f"  failed {uuid}: {err}", file=sys.stderr)


def cmd_stats(args, cfg):
    vocab = ann.LabelVocabulary.standard() if args.vocab == "standard" else ann.LabelVocabulary.load(args.vocab)
    stats = ann.vocab_stats(ann.read_annotations(args.inp), vocab)
    sys.stdout.write(stats.report(vocab))


def cmd_describe(args, cfg):
    spec = build_variant(args.variant, n_classes=args.n_classes, width_divisor=args.width_divisor)
    sys.stdout.write(describe(spec))


def _load_frames(audio_root, uuid, fcfg, fb):
    path = os.path.join(audio_root, f"{uuid}.wav")
    frames = featurize_waveform(read_wav(path), fcfg, fb)
    return np.stack([f.values for f in frames]) if frames else np.zeros((0, 100, 64))


def cmd_train(args, cfg):
    t = cfg["train"]
    fcfg = _frontend(cfg)
    fb = build_mel_filterbank(fcfg.n_fft, fcfg.n_mels, fcfg.fmin, fcfg.fmax)
    annotations = ann.read_annotations(args.manifest)
    frames = _ordered_map(lambda a: _load_frames(args.audio_root, a.uuid, fcfg, fb), annotations, cfg["workers"])
    keep = [i for i, f in enumerate(frames) if len(f)]
    annotations = [annotations[i] for i in keep]
    frames = [frames[i] for i in keep]
    if not annotations:
        raise InvalidInputError("no training video has at least one second of audio")
    index = LabelIndex.from_annotations(annotations, t["n_classes"])
    train_idx, val_idx = split_by_fold(annotations, t["val_fraction"])
    dataset = VideoDataset([annotations[i] for i in train_idx], [frames[i] for i in train_idx], index)
    val = None
    if val_idx:
        val = VideoDataset([annotations[i] for i in val_idx], [frames[i] for i in val_idx], index).validation_arrays()
    spec = build_variant(t["variant"], n_classes=t["n_classes"], width_divisor=t["width_divisor"])
    from .models import Network

    seed = subseed(cfg["seed"], "train")
    network = Network(spec, seed=subseed(cfg["seed"], "train.init"))
    config = TrainConfig(lr0=t["lr0"], decay=t["decay"], batch_size=t["batch_size"], l2=t["l2"],
                         epochs=t["epochs"], seed=seed, val_fraction=t["val_fraction"])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "label_index.json"), "w", encoding="utf-8") as fh:
        json.dump({"format_version": 1, "label_ids": index.ids, "n_outputs": index.n_outputs}, fh)
    meta = network_meta(spec)
    meta["config_digest"] = config_digest(cfg)
    history = run_training(network, dataset, config, out_dir=args.out, val=val, meta=meta)
    print("epoch\tlr\ttrain_loss\tval_top1\tval_map")
    sys.stdout.write(history.metric_log())


def read_benchmark_manifest(path):
    """Lines of ``{"clip": path, "labels": [...], "fold": n}`` or ``"split": name``."""
    clips, labels, tags = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            doc = json.loads(line)
            if doc.get("format_version", 1) != 1:
                raise DataIntegrityError(f"{path}:{lineno}: unsupported format_version")
            tag = doc.get("fold", doc.get("split"))
            if tag is None:
                raise DataIntegrityError(f"{path}:{lineno}: missing fold/split assignment")
            clips.append(doc["clip"])
            labels.append([str(x) for x in doc["labels"]])
            tags.append(str(tag))
    return clips, labels, tags


def cmd_embed(args, cfg):
    from .evaluation import EmbeddingDataset, concat_embeddings, extract_embeddings

    network, _, _, _ = load_network(args.checkpoint, variant=args.variant)
    fcfg = _frontend(cfg)
    clips, labels, tags = read_benchmark_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    root = args.audio_root or base

    def work(clip):
        return extract_embeddings(network, read_wav(os.path.join(root, clip)), fcfg, clip_id=clip)

    sequences = _ordered_map(work, clips, cfg["workers"])
    X = concat_embeddings(sequences)
    classes = sorted({lab for labs in labels for lab in labs})
    col = {c: i for i, c in enumerate(classes)}
    if all(len(labs) == 1 for labs in labels):
        y = np.array([col[labs[0]] for labs in labels])
    else:
        y = np.zeros((len(labels), len(classes)), dtype=int)
        for i, labs in enumerate(labels):
            y[i, [col[lab] for lab in labs]] = 1
    EmbeddingDataset(X, y, np.array(tags), tuple(clips), tuple(classes)).save(args.out)
    print(f"embedded {len(clips)} clip(s): {X.shape[1]} features each")


def _head_params(cfg, benchmark):
    from .evaluation import BENCHMARK_DROPOUT

    e = cfg["eval"]
    dropout = e["dropout"] if e["dropout"] is not None else BENCHMARK_DROPOUT[benchmark]
    return {"lr": e["lr"], "batch_size": e["batch_size"], "l2": e["l2"], "dropout": dropout,
            "epochs": e["epochs"], "random_state": subseed(cfg["seed"], f"eval.{benchmark}") % (2 ** 32)}


def cmd_transfer(args, cfg):
    from .evaluation import EmbeddingDataset, TransferClassifier

    benchmark = args.benchmark or cfg["eval"]["benchmark"]
    data = EmbeddingDataset.load(args.embeddings)
    tags = np.asarray(data.tags).astype(str)
    train_tags = {"esc50": None, "tut2018": {"train"}, "audioset_balanced": {"balanced_train"}}[benchmark]
    mask = np.ones(len(tags), bool) if train_tags is None else np.isin(tags, list(train_tags))
    if args.heldout is not None:
        mask &= tags != str(args.heldout)
    if not mask.any():
        raise InvalidInputError("no training clips selected")
    clf = TransferClassifier(**_head_params(cfg, benchmark)).fit(data.X[mask], data.y[mask])
    save_checkpoint(args.out, clf.params_, meta={"benchmark": benchmark, "classes": clf.classes_.tolist(),
                                                 "multilabel": bool(clf.multilabel_),
                                                 "config_digest": config_digest(cfg)})
    print(f"trained {benchmark} head on {int(mask.sum())} clip(s); final loss {clf.loss_curve_[-1]:.6f}")


def cmd_evaluate(args, cfg):
    from .evaluation import EmbeddingDataset, run_protocol

    benchmark = args.benchmark or cfg["eval"]["benchmark"]
    data = EmbeddingDataset.load(args.embeddings)
    report = run_protocol(benchmark, data, _head_params(cfg, benchmark))
    text = report.to_text()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    sys.stdout.write(text)


def build_parser():
    p = argparse.ArgumentParser(prog="mmaudio", description="Log-mel frontend, VGGish training and transfer tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="<command>")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--workers", type=int, help="parallel workers, 0 = all cores (results do not depend on this)")
        if name == "annotate":
            sp.add_argument("--seed", dest="annotate_seed", type=int, help="synthetic predictor seed")
        sp.add_argument("--root-seed" if name == "annotate" else "--seed", dest="seed", type=int,
                        help="root seed (overrides config)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("featurize", cmd_featurize, "WAV file or directory -> log-mel records")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    sp = add("annotate", cmd_annotate, "video manifest -> label manifest (synthetic predictor)")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float)

    sp = add("stats", cmd_stats, "per-label counts of a label manifest")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--vocab", required=True, help="vocabulary TSV, or 'standard'")

    sp = add("describe", cmd_describe, "layer table, shapes, parameter and FLOP counts")
    sp.add_argument("--variant", choices=VARIANTS, required=True)
    sp.add_argument("--width-divisor", type=int, default=1)
    sp.add_argument("--n-classes", type=int, default=10998)

    sp = add("train", cmd_train, "train a network on annotated videos")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--audio-root", required=True)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--width-divisor", type=int)

    sp = add("embed", cmd_embed, "benchmark manifest -> clip embeddings (.npz)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--audio-root")
    sp.add_argument("--variant", choices=VARIANTS)

    sp = add("transfer", cmd_transfer, "train a transfer head on embeddings")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--benchmark", choices=("esc50", "tut2018", "audioset_balanced"))
    sp.add_argument("--heldout", help="fold/split tag to exclude from training")

    sp = add("evaluate", cmd_evaluate, "run a benchmark protocol on embeddings")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--benchmark", choices=("esc50", "tut2018", "audioset_balanced"))
    sp.add_argument("--out")
    return p


def _overrides(args):
    o = {"seed": args.seed, "workers": args.workers}
    if getattr(args, "threshold", None) is not None:
        o["annotate.threshold"] = args.threshold
    if getattr(args, "annotate_seed", None) is not None:
        o["annotate.seed"] = args.annotate_seed
    for flag, key in (("variant", "train.variant"), ("epochs", "train.epochs"), ("width_divisor", "train.width_divisor")):
        if args.command == "train" and getattr(args, flag, None) is not None:
            o[key] = getattr(args, flag)
    if args.command in ("transfer", "evaluate") and args.benchmark:
        o["eval.benchmark"] = args.benchmark
    return o


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, _overrides(args))
        print(f"config-digest: {config_digest(cfg)}", file=sys.stderr)
        args.func(args, cfg)
    except (MMAudioError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"mmaudio {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def dispatch(argv):
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
