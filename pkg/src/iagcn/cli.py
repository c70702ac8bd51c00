"""Command-line front end: ``iagcn {train,evaluate,check-grad,synth,bench}``.

Every subcommand takes an optional ``--config FILE`` followed by
``key=value`` overrides. ``seed`` is always required.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, check_paths, load_config, parse_config_text, parse_pairs, resolve
from .data import InteractionDataset, generate_synthetic, load_dataset, write_dataset
from .evaluation import evaluate
from .grad import Triplet, finite_diff_check, triplet_trees
from .graph import USER, build_graph
from .model import GUIDE_MODES, Hyperparams, LayerWeights, init_embeddings, load_snapshot, save_snapshot
from .train import TrainingDiverged, sample_negatives, stream_rng, train

_log = logging.getLogger("iagcn")

SNAPSHOT_NAME = "snapshot.iagcn"
METRICS_NAME = "metrics.tsv"
CONFIG_NAME = "config.txt"
RESULTS_NAME = "results.tsv"
METRICS_HEADER = "epoch\tloss\trecall@20\tndcg@20\twall_seconds\n"
RESULTS_HEADER = "dataset\tguide_mode\tK\tbeta_mode\trecall@20\tndcg@20\tseed\n"

GRAD_GATE = 1e-5
GRAD_EPSILON = 1e-6
GRAD_DEFAULTS = {
    "synth_users": "15",
    "synth_items": "15",
    "synth_blocks": "3",
    "synth_p_in": "0.5",
    "synth_p_out": "0.1",
    "dim": "8",
}
BENCH_SEEDS = 3


class CommandError(RuntimeError):
    pass


def load_data(cfg: RunConfig, seed: int | None = None) -> InteractionDataset:
    if cfg.uses_files:
        check_paths(cfg)
        return load_dataset(cfg.train_file, cfg.test_file)
    return generate_synthetic(
        cfg.synth_users,
        cfg.synth_items,
        cfg.synth_blocks,
        cfg.synth_p_in,
        cfg.synth_p_out,
        cfg.seed if seed is None else seed,
    )


def results_row(cfg: RunConfig, hp: Hyperparams, recall: float, ndcg: float, seed: int) -> str:
    return f"{cfg.dataset_name}\t{hp.guide_mode}\t{hp.layers}\t{hp.beta_mode}\t{recall:.10f}\t{ndcg:.10f}\t{seed}\n"


def append_results(path: Path, rows):
    new = not path.exists()
    with path.open("a", encoding="utf-8") as fh:
        if new:
            fh.write(RESULTS_HEADER)
        fh.writelines(rows)


def read_results(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    keys = lines[0].split("\t")
    return [dict(zip(keys, line.split("\t"))) for line in lines[1:] if line]


# -- subcommands ----------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    data = load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")
    hp = cfg.hyperparams()
    schedule = cfg.schedule()
    metrics = out / METRICS_NAME
    metrics.write_text(METRICS_HEADER, encoding="utf-8")

    def on_eval(row):
        with metrics.open("a", encoding="utf-8") as fh:
            fh.write(row.format(cfg.deterministic) + "\n")

    try:
        result = train(data, hp, schedule, cfg.seed, on_eval=on_eval)
    except TrainingDiverged as exc:
        (out / "diagnostics.json").write_text(json.dumps(exc.diagnostics, indent=2), encoding="utf-8")
        raise CommandError(f"{exc}; diagnostics written to {out / 'diagnostics.json'}") from None
    save_snapshot(out / SNAPSHOT_NAME, result.best)
    best = max(result.log, key=lambda r: r.recall)
    append_results(out / RESULTS_NAME, [results_row(cfg, hp, best.recall, best.ndcg, cfg.seed)])
    print(f"best epoch {result.best_epoch}: recall@20 {best.recall:.4f} ndcg@20 {best.ndcg:.4f}")
    return 0


def cmd_evaluate(cfg: RunConfig, snapshot_path: str) -> int:
    path = Path(snapshot_path)
    if not path.is_file():
        raise FileNotFoundError(f"snapshot not found: {path}")
    hp = cfg.hyperparams()
    snap = load_snapshot(path, learned=hp.beta_mode == "learned")
    data = load_data(cfg)
    if snap.layers != hp.layers:
        raise CommandError(f"snapshot has K={snap.layers} but config has layers={hp.layers}")
    if snap.table.dim != hp.dim:
        raise CommandError(f"snapshot has d={snap.table.dim} but config has dim={hp.dim}")
    shape = (len(snap.table.user_emb), len(snap.table.item_emb))
    if shape != (data.num_users, data.num_items):
        raise CommandError(f"snapshot has {shape[0]} users x {shape[1]} items but the dataset has {data.num_users} x {data.num_items}")
    res = evaluate(snap, data, build_graph(data), hp)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    append_results(out / RESULTS_NAME, [results_row(cfg, hp, res.mean_recall, res.mean_ndcg, cfg.seed)])
    print(f"recall@20 {res.mean_recall:.6f} ndcg@20 {res.mean_ndcg:.6f}")
    return 0


def _grad_triplet(graph, rng) -> Triplet:
    users = np.flatnonzero((graph.degrees[USER] > 0) & (graph.degrees[USER] < graph.num_items))
    u = int(rng.choice(users))
    pos = int(rng.choice(graph.neighbors(USER, u)))
    neg = int(sample_negatives(graph, [u], rng)[0])
    return Triplet(u, pos, neg)


def grad_grid(cfg: RunConfig, modes=GUIDE_MODES, depths=(0, 1, 2, 3)) -> list[tuple[str, int, float, float]]:
    """``(mode, K, max relative error, seconds)`` for every grid cell."""
    data = load_data(cfg)
    graph = build_graph(data)
    base = cfg.hyperparams()
    cells = []
    for mode in modes:
        for K in depths:
            rng = stream_rng(cfg.seed, 100 + 10 * GUIDE_MODES.index(mode) + K)
            hp = replace(base, guide_mode=mode, layers=K)
            table = init_embeddings(data.num_users, data.num_items, hp.dim, rng)
            weights = LayerWeights(rng.normal(size=K + 1), learned=True)
            t = _grad_triplet(graph, rng)
            trees = None if hp.full_fanout else triplet_trees(graph, t, hp, rng)
            start = time.perf_counter()
            err = finite_diff_check(t, table, graph, hp, GRAD_EPSILON, weights=weights, trees=trees)
            cells.append((mode, K, err, time.perf_counter() - start))
    return cells


def cmd_check_grad(cfg: RunConfig) -> int:
    cells = grad_grid(cfg)
    ok = True
    print("guide_mode\tK\tmax_rel_error\tstatus")
    for mode, K, err, _ in cells:
        passed = err < GRAD_GATE
        ok &= passed
        print(f"{mode}\t{K}\t{err:.3e}\t{'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.uses_files:
        raise CommandError("synth needs synth_* keys, not train_file/test_file")
    data = load_data(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(data, out / "train.txt", out / "test.txt")
    print(f"{data.num_users} users, {data.num_items} items, {len(data.train_edges)} train / {len(data.test_edges)} test edges")
    return 0


def bench_runs(cfg: RunConfig) -> list[tuple[Hyperparams, int, float, float]]:
    """Configured model, LightGCN and K=0 MF at ``BENCH_SEEDS`` consecutive seeds.

    All three share dim, lr, epochs and batch size. Synthetic data is
    regenerated per seed.
    """
    base = cfg.hyperparams()
    variants = [base, replace(base, guide_mode="lightgcn_norm"), replace(base, guide_mode="lightgcn_norm", layers=0)]
    seen = []
    for hp in variants:
        if hp not in seen:
            seen.append(hp)
    runs = []
    for seed in range(cfg.seed, cfg.seed + BENCH_SEEDS):
        data = load_data(cfg, seed)
        graph = build_graph(data)
        for hp in seen:
            start = time.perf_counter()
            result = train(data, hp, cfg.schedule(), seed, graph=graph)
            best = max(result.log, key=lambda r: r.recall)
            _log.info("%s K=%d seed %d: recall@20 %.4f (%.0fs)", hp.guide_mode, hp.layers, seed, best.recall, time.perf_counter() - start)
            runs.append((hp, seed, best.recall, best.ndcg))
    return runs


def cmd_bench(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")
    start = time.perf_counter()
    runs = bench_runs(cfg)
    append_results(out / RESULTS_NAME, [results_row(cfg, hp, r, n, s) for hp, s, r, n in runs])
    print("guide_mode\tK\tmean_recall@20\tmean_ndcg@20")
    keys = []
    for hp, *_ in runs:
        if (hp.guide_mode, hp.layers) not in keys:
            keys.append((hp.guide_mode, hp.layers))
    for mode, K in keys:
        rows = [(r, n) for hp, _, r, n in runs if (hp.guide_mode, hp.layers) == (mode, K)]
        print(f"{mode}\t{K}\t{np.mean([r for r, _ in rows]):.6f}\t{np.mean([n for _, n in rows]):.6f}")
    print(f"total {time.perf_counter() - start:.1f}s")
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iagcn", description="Interactive graph convolution recommender")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a model and write snapshot, metrics log and resolved config"),
        ("evaluate", "score a snapshot and append a results row"),
        ("check-grad", "finite-difference gradient gate over modes x K=0..3"),
        ("synth", "write a synthetic block dataset as train.txt/test.txt"),
        ("bench", "compare the configured model, LightGCN and MF over three seeds"),
    ):
        p = sub.add_parser(name, help=help_text)
        if name == "evaluate":
            p.add_argument("snapshot", help="snapshot file written by train")
        p.add_argument("-c", "--config", help="key=value config file")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def _config(args) -> RunConfig:
    if args.command != "check-grad":
        return load_config(args.config, args.overrides)
    raw = dict(GRAD_DEFAULTS)
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    raw.update(parse_pairs(args.overrides, "<command line>"))
    return resolve(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.snapshot)
        if args.command == "check-grad":
            return cmd_check_grad(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        return cmd_bench(cfg)
    except (ConfigError, CommandError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"iagcn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
