"""Command-line entry point: ``cgcnet <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage, configuration or missing
input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import config as cfgmod
from .features import descriptor_matrix
from .graph import assemble_graph, is_bundle, load_bundle, save_bundle
from .netpbm import read_pnm, write_pnm
from .synth import DISRUPTION, build_graphs, generate_image, split_indices, synth_samples
from .training import evaluate, load_checkpoint, majority_vote, predict, save_checkpoint, train
from .viz import node_clusters, render_svg

log = logging.getLogger("cgcnet")


class UsageError(Exception):
    """Bad arguments or missing inputs (exit code 2)."""


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _bundle_dirs(path):
    """A single bundle, or every bundle directly below ``path`` (sorted)."""
    if not os.path.isdir(path):
        raise UsageError(f"graph directory not found: {path}")
    if is_bundle(path):
        return [path]
    subdirs = sorted(os.path.join(path, d) for d in os.listdir(path))
    found = [d for d in subdirs if os.path.isdir(d) and is_bundle(d)]
    if not found:
        raise UsageError(f"no graph bundles under {path}")
    return found


def _load_ckpt(path):
    if not os.path.isfile(os.path.join(path, "manifest.json")):
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_build_graph(args):
    _require_file(args.labels, "label map")
    _require_file(args.image, "intensity image")
    cfg = cfgmod.load_config(args.config, ["sampler", "edges"])
    sampler = replace(cfg["sampler"], seed=args.seed) if args.seed is not None else cfg["sampler"]
    labels, image = read_pnm(args.labels), read_pnm(args.image)
    if labels.shape[:2] != image.shape[:2]:
        raise UsageError(f"label map {labels.shape[:2]} and image {image.shape[:2]} differ in size")
    feats, coords = descriptor_matrix(labels, image)
    meta = {"source_labels": os.path.basename(args.labels), "source_image": os.path.basename(args.image)}
    graph = assemble_graph(feats, coords, sampler, cfg["edges"], args.label, meta)
    save_bundle(graph, args.out)
    print(f"nodes {graph.n} edges {len(graph.edges())}")
    return 0


def cmd_synth(args):
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    if not 1 <= args.classes <= len(DISRUPTION):
        raise UsageError(f"--classes must be in 1..{len(DISRUPTION)}")
    cfg = cfgmod.load_config(args.config, ["synth", "sampler", "edges"])
    sampler = replace(cfg["sampler"], seed=args.seed)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {args.out}: {exc.strerror}") from exc
    samples = synth_samples(args.per_class, args.seed, cfg["synth"], n_classes=args.classes)
    graphs = build_graphs(samples, sampler, cfg["edges"])
    names = [s.image_id for s in samples]
    for name, smp, g in zip(names, samples, graphs):
        save_bundle(g, os.path.join(args.out, name))
        if args.write_images:
            labels, image, _ = generate_image(replace(cfg["synth"], label=smp.label, seed=smp.seed))
            write_pnm(os.path.join(args.out, name, "labels.pgm"), labels, maxval=65535)
            write_pnm(os.path.join(args.out, name, "image.pgm"), image, maxval=255)
    train_idx, test_idx = split_indices(len(graphs), args.seed)
    manifest = {
        "seed": args.seed,
        "classes": args.classes,
        "per_class": args.per_class,
        "train": [names[i] for i in train_idx],
        "test": [names[i] for i in test_idx],
        "configs": {k: asdict(v) for k, v in cfg.items()},
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(graphs)} graphs ({len(train_idx)} train / {len(test_idx)} test) to {args.out}")
    return 0


def _dataset(path):
    if not os.path.isdir(path):
        raise UsageError(f"data directory not found: {path}")
    manifest = os.path.join(path, "manifest.json")
    if os.path.isfile(manifest):
        with open(manifest) as fh:
            m = json.load(fh)
        train_set = [load_bundle(os.path.join(path, n)) for n in m["train"]]
        test_set = [load_bundle(os.path.join(path, n)) for n in m.get("test", [])]
        return train_set, test_set
    return [load_bundle(d) for d in _bundle_dirs(path)], []


def cmd_train(args):
    model_cfg = cfgmod.load_config(args.model_config, ["model"])["model"]
    train_cfg = cfgmod.load_config(args.train_config, ["train"])["train"]
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        schedule = tuple((e, r) for e, r in train_cfg.lr_schedule if e < args.epochs or e == 0)
        train_cfg = replace(train_cfg, epochs=args.epochs, lr_schedule=schedule)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    train_set, val_set = _dataset(args.data)
    log_path = args.log or os.path.join(args.out, "epochs.jsonl")
    os.makedirs(args.out, exist_ok=True)
    ckpt, reports = train(
        train_set, model_cfg, train_cfg, val_set or None, log_path,
        on_epoch=lambda r: print(f"epoch {r.epoch} loss {r.loss:.4f} train_acc {r.train_acc:.3f}"
                                 + (f" val_acc {r.val_acc:.3f}" if r.val_acc is not None else "")),
    )
    save_checkpoint(ckpt, args.out)
    if val_set:
        acc, _ = evaluate(val_set, ckpt)
        print(f"final val accuracy {acc:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_predict(args):
    ckpt = _load_ckpt(args.ckpt)
    dirs = _bundle_dirs(args.graph)
    graphs = [load_bundle(d) for d in dirs]
    probs = predict(graphs, ckpt)
    preds = []
    for d, g, p in zip(dirs, graphs, probs):
        cls = int(np.argmax(p))
        preds.append(cls)
        print(json.dumps({"graph": os.path.basename(os.path.normpath(d)), "class": cls,
                          "probabilities": [float(x) for x in p]}))
    if args.group_by_image:
        groups = {}
        for d, g, cls in zip(dirs, graphs, preds):
            groups.setdefault(str(g.meta.get("image_id", os.path.basename(os.path.normpath(d)))), []).append(cls)
        for img in sorted(groups):
            print(json.dumps({"image": img, "class": majority_vote(groups[img]), "patches": len(groups[img])}))
    return 0


def cmd_viz_clusters(args):
    ckpt = _load_ckpt(args.ckpt)
    if not 1 <= args.stage <= ckpt.model_cfg.n_stages:
        raise UsageError(f"--stage must be in 1..{ckpt.model_cfg.n_stages}")
    if not is_bundle(args.graph):
        raise UsageError(f"not a graph bundle: {args.graph}")
    graph = load_bundle(args.graph)
    clusters = node_clusters(graph, ckpt, args.stage)
    with open(args.out, "w") as fh:
        fh.write(render_svg(graph, clusters, title=f"stage {args.stage} clusters"))
    print(f"{graph.n} nodes in {len(set(clusters.tolist()))} clusters -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cgcnet", description="Cell-graph construction and hierarchical graph classification.")
    p.add_argument("--print-config", action="store_true", help="print every default configuration value and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    b = sub.add_parser("build-graph", help="descriptors + sampling + edges for one image")
    b.add_argument("--labels", required=True, help="16-bit P5 instance label map")
    b.add_argument("--image", required=True, help="8-bit P5/P6 intensity image")
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--label", type=int, choices=range(len(DISRUPTION)), help="optional class label")
    b.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("synth", help="synthetic labelled graph collection")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--write-images", action="store_true", help="also write labels.pgm / image.pgm per sample")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--model-config")
    t.add_argument("--train-config")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="epoch log path (default: <out>/epochs.jsonl)")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("predict", help="class probabilities for one or more bundles")
    q.add_argument("--graph", required=True)
    q.add_argument("--ckpt", required=True)
    q.add_argument("--group-by-image", action="store_true")
    q.set_defaults(func=cmd_predict)

    v = sub.add_parser("viz-clusters", help="SVG of argmax cluster assignments")
    v.add_argument("--graph", required=True)
    v.add_argument("--ckpt", required=True)
    v.add_argument("--stage", type=int, default=1)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_clusters)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.print_config:
        sys.stdout.write(cfgmod.default_text())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
