"""Command line: ``generate``, ``train``, ``eval`` and ``report``.

Exit codes: 0 success, 1 bad configuration or input, 2 I/O failure,
3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from .checkpoint import CheckpointBundle, CheckpointError, load_bundle, save_bundle
from .config import ConfigError, TrainConfig, config_hash, domain_specs, load_config
from .data import (class_histogram, generate_domain, load_directory_dataset,
                   save_directory_dataset)
from .metrics import HistoryCsvError, RunHistory, comparison_table, emit_table, parse_history_csv
from .models import SegNet, TmStore
from .trainer import (ContinualState, TrainingDivergedError, derive_seed, evaluate, predict,
                      run_continual, source_only_history, train_source_only)

log = logging.getLogger("etm")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 1, 2, 3

# class index -> RGB of emitted semantic maps: background, circle, square,
# triangle, diamond, ring, cross, bar
MAP_PALETTE = [
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (255, 225, 25),
    (145, 30, 180),
    (70, 240, 240),
    (245, 130, 48),
]
_DATA_STREAM = 101


class UsageError(Exception):
    """Bad user input that is not a config problem (exit 1)."""


def _threads() -> None:
    value = os.environ.get("ETM_NUM_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"ETM_NUM_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"ETM_NUM_THREADS must be a positive integer, got {value!r}")
    torch.set_num_threads(n)


def _domain_seed(seed: int, k: int) -> int:
    return derive_seed(seed, _DATA_STREAM, k)


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    specs = domain_specs(cfg)
    domains = []
    for k, spec in enumerate(specs):
        for split in ("train", "val"):
            ds = generate_domain(spec, _domain_seed(cfg["seed"], k), split)
            save_directory_dataset(ds, out / spec.name / split)
            if ds.labeled:
                hist = class_histogram(ds)
                print(f"{spec.name}/{split}: {len(ds)} images, class pixels "
                      + " ".join(str(int(v)) for v in hist))
            else:
                print(f"{spec.name}/{split}: {len(ds)} images, unlabeled")
        domains.append({"name": spec.name, "role": spec.role})
    manifest = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "domains": domains,
                "num_classes": cfg["num_classes"], "image_size": cfg["image_size"]}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return 0


def _load_split(data_dir: Path, name: str, split: str, num_classes: int):
    path = data_dir / name / split
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    return load_directory_dataset(path, num_classes)


class _MetricsLog:
    """Tab-separated eval log; rows of unfinished domains are dropped on resume."""

    HEADER = "domain_index\titeration\teval_domain\tmiou"

    def __init__(self, path: Path, chash: str, keep_through: int):
        rows = []
        if keep_through > 0 and path.exists():
            for line in path.read_text().splitlines()[2:]:
                if int(line.split("\t")[0]) <= keep_through:
                    rows.append(line)
        self.path = path
        path.write_text("\n".join([f"# config_hash={chash}", self.HEADER] + rows) + "\n")

    def __call__(self, domain_index: int, iteration: int, name: str, value: float) -> None:
        with self.path.open("a") as fh:
            fh.write(f"{domain_index}\t{iteration}\t{name}\t{value!r}\n")


def _latest_checkpoint(out: Path, chash: str) -> Optional[CheckpointBundle]:
    root = out / "checkpoints"
    if not root.is_dir():
        return None
    done = sorted((int(p.name.split("_")[1]) for p in root.glob("after_*")
                   if (p / "manifest.json").exists()), reverse=True)
    for j in done:
        bundle = load_bundle(root / f"after_{j}")
        if bundle.config_hash != chash:
            raise UsageError(f"{root / f'after_{j}'} was written by a different configuration; "
                             "use a fresh --out directory")
        return bundle
    return None


def _write_history(out: Path, history: RunHistory) -> None:
    (out / "history.csv").write_text(emit_table(history, "csv"))


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    chash = config_hash(cfg)
    tc = TrainConfig.from_experiment(cfg)
    data, out = Path(args.data), Path(args.out)
    source = _load_split(data, tc.domains[0], "train", tc.num_classes)
    targets = [_load_split(data, n, "train", tc.num_classes) for n in tc.targets]
    target_vals = [_load_split(data, n, "val", tc.num_classes) for n in tc.targets]
    out.mkdir(parents=True, exist_ok=True)

    if cfg["mode"] == "source_only":
        net = train_source_only(tc, source)
        history = source_only_history(tc, net, target_vals)
        history.config_hash = chash
        metrics = _MetricsLog(out / "metrics.tsv", chash, 0)
        for d, v in enumerate(target_vals, start=1):
            metrics(len(target_vals), 0, v.name, history.entries[(len(target_vals), d)])
        save_bundle(CheckpointBundle.from_state(cfg, net, TmStore(), history,
                                                len(targets)), out / "bundle")
        _write_history(out, history)
        print(emit_table(history))
        return 0

    resume = None
    bundle = _latest_checkpoint(out, chash)
    if bundle is not None:
        net = bundle.segnet()
        resume = ContinualState(segnet=net, tm_store=bundle.tm_store(net), history=bundle.history,
                                domain_index=bundle.completed_domain)
        log.info("resuming after domain %d", bundle.completed_domain)
        if bundle.completed_domain >= len(targets):
            _write_history(out, bundle.history)
            _install_final(out, bundle.completed_domain)
            print(emit_table(bundle.history))
            return 0
    metrics = _MetricsLog(out / "metrics.tsv", chash,
                          bundle.completed_domain if bundle is not None else 0)

    def on_domain_end(state: ContinualState) -> None:
        state.history.config_hash = chash
        save_bundle(CheckpointBundle.from_state(cfg, state.segnet, state.tm_store, state.history,
                                                state.domain_index),
                    out / "checkpoints" / f"after_{state.domain_index}")

    state, history = run_continual(tc, source, targets, target_vals, resume=resume,
                                   metrics_sink=metrics, on_domain_end=on_domain_end)
    history.config_hash = chash
    _install_final(out, len(targets))
    _write_history(out, history)
    print(emit_table(history))
    return 0


def _install_final(out: Path, completed: int) -> None:
    final = out / "bundle"
    if final.exists():
        shutil.rmtree(final)
    shutil.copytree(out / "checkpoints" / f"after_{completed}", final)


def eval_domain(bundle: CheckpointBundle, data_dir: Path, domain: str):
    """Network and memory pair used for ``domain``, plus its validation set."""
    names = bundle.domain_names
    net = bundle.segnet()
    store = bundle.tm_store(net)
    available = [names[0]] + names[1:bundle.completed_domain + 1]
    if domain not in available:
        raise UsageError(f"unknown or not yet adapted domain {domain!r}; available: "
                         + ", ".join(available))
    index = names.index(domain)
    tm_pair = store[index] if index in store else None
    ds = _load_split(data_dir, domain, "val", net.num_classes)
    return net, tm_pair, ds


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    net, tm_pair, ds = eval_domain(bundle, Path(args.data), args.domain)
    per_class, value = evaluate(net, tm_pair, ds)
    for c, iou in enumerate(per_class):
        print(f"class {c}: " + ("n/a" if np.isnan(iou) else f"{100 * iou:.2f}"))
    print(f"mIoU {100 * value:.2f} ({value!r})")
    if args.emit_maps:
        write_maps(net, tm_pair, ds, Path(args.emit_maps))
    return 0


def write_maps(net: SegNet, tm_pair, ds, out: Path, batch_size: int = 25) -> int:
    out.mkdir(parents=True, exist_ok=True)
    flat = [v for rgb in MAP_PALETTE for v in rgb]
    flat += [0] * (768 - len(flat))
    width = max(4, len(str(len(ds))))
    net.eval()
    for start in range(0, len(ds), batch_size):
        x = torch.from_numpy(ds.images[start:start + batch_size])
        pred = predict(net, tm_pair, x).numpy().astype(np.uint8)
        for k, p in enumerate(pred):
            im = Image.fromarray(p, mode="P")
            im.putpalette(flat)
            im.save(out / f"{start + k:0{width}d}.png")
    return len(ds)


def cmd_report(args) -> int:
    histories = []
    for path in args.histories:
        try:
            h = parse_history_csv(Path(path).read_text())
        except HistoryCsvError as exc:
            raise UsageError(f"{path}: {exc}") from None
        if h.method is None:
            h.method = Path(path).stem
        histories.append(h)
    for h in histories:
        print(emit_table(h, args.format), end="" if args.format == "csv" else "\n")
    if len(histories) > 1 and args.format == "text":
        print()
        print(comparison_table(histories))
    elif len(histories) > 1:
        comparison_table(histories)   # still refuse conflicting domain lists
    if args.plot:
        plot_histories(histories, Path(args.plot))
    return 0


def plot_histories(histories: List[RunHistory], out: Path) -> List[Path]:
    """One mIoU-vs-checkpoint chart per evaluation domain."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    names = histories[0].domain_names
    written = []
    for d, name in enumerate(names, start=1):
        fig, ax = plt.subplots(figsize=(4, 3))
        for h in histories:
            xs = [j for j in range(d, len(names) + 1) if (j, d) in h.entries]
            ax.plot(xs, [100 * h.entries[(j, d)] for j in xs], marker="o", label=h.method)
        ax.set_xticks(range(1, len(names) + 1), [f"after {n}" for n in names])
        ax.set_ylabel(f"mIoU on {name}")
        ax.legend()
        fig.tight_layout()
        path = out / f"miou_{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render every configured domain to disk")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="source-only or continual training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class IoU of a bundle on one domain")
    p.add_argument("bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--emit-maps", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tables (and charts) from history CSVs")
    p.add_argument("histories", nargs="+")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--plot", metavar="DIR")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        return args.func(args)
    except (ConfigError, UsageError, HistoryCsvError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed input files (bad label values, mismatched comparisons, ...)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
