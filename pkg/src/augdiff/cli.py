"""Command-line pipeline driver.

    augdiff <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--override key=value ...]

Every subcommand writes into its own directory under ``out`` together with a
``run_manifest.json`` holding the config hash, input hashes and code version.
Exit codes: 0 success, 1 config error, 2 missing artifact, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .augmentor import AugmentConfig, CountingPredictor, augment_bag
from .config import RunConfig, load_config
from .data import (Bag, BagManifest, gen_instance_corpus, gen_mil_task, make_splits, make_world, read_corpus,
                   read_manifest, read_splits, read_truth, save_bags, file_digest, write_corpus, write_task)
from .diffusion import load_dae, save_dae, train_dae
from .errors import (ConfigError, FormatError, InvalidArgument, MissingArtifact, NumericDomainError,
                     NumericFailure, UndefinedMetric)
from .metrics import evaluate
from .mil import bag_probs, load_mil, save_mil, train_mil

log = logging.getLogger("augdiff")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
SWEEP_COLUMNS = ["policy", "mil_variant", "T", "K", "condition_mode", "seed", "micro_acc", "macro_auc",
                 "epochs_run", "wall_seconds"]
BENCH_COLUMNS = ["N", "T", "K", "seconds", "instances_per_second", "denoiser_calls", "simulated_extractor_seconds"]


# -- small output helpers ------------------------------------------------------------------

def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> Path:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def _run_manifest(cfg: RunConfig, sub: str, outdir: Path, inputs: list[Path], outputs: list[Path],
                  timed: list[Path] = ()) -> Path:
    """Record config, input and output hashes. Outputs carrying wall times are listed unhashed."""
    def digest(paths, rel=None):
        return {str(p.relative_to(rel) if rel else p): file_digest(p) for p in sorted(paths)}

    return _write_json(outdir / "run_manifest.json", {
        "subcommand": sub, "code_version": __version__, "config_sha256": cfg.sha256(), "config": cfg.raw,
        "inputs": digest(inputs), "outputs": digest(outputs, outdir),
        "timed_outputs": sorted(str(p.relative_to(outdir)) for p in timed)})


def _manifest_inputs(m: BagManifest) -> list[Path]:
    return [m.root / "manifest.json"] + [m.root / r.file for r in m.bags]


def _load_task(cfg: RunConfig):
    """(manifest, bags by id, split dict with train/val/test ids)."""
    root = cfg.input_path("data")
    manifest = read_manifest(root / "manifest.json")
    bags = {b.id: b for b in manifest.load_all(truth=read_truth(root))}
    if cfg.split is None:
        splits = read_splits(root)
    else:
        raw = make_splits(manifest, cfg.split)
        if cfg.split.fractions is not None:
            splits = raw
        else:
            k = cfg.split.k
            test, val = f"fold{cfg.test_fold}", f"fold{(cfg.test_fold + 1) % k}"
            splits = {"test": raw[test], "val": raw[val],
                      "train": [i for f, ids in sorted(raw.items()) if f not in (test, val) for i in ids]}
    for name in ("train", "val", "test"):
        if not splits.get(name):
            raise ConfigError(f"split {name!r} is empty or missing")
    return manifest, bags, splits


def _labels_count(bags: dict) -> int:
    return max(2, max(b.label for b in bags.values()) + 1)


# -- subcommands ------------------------------------------------------------------------------

def cmd_gen_synthetic(cfg: RunConfig) -> Path:
    out = cfg.out / "data"
    spec = cfg.synthetic
    world = make_world(spec)
    task = gen_mil_task(spec, np.random.default_rng([spec.seed, 1]), world)
    write_task(task, out)
    corpus = gen_instance_corpus(spec, np.random.default_rng([spec.seed, 2]), world=world)
    corpus_path = write_corpus(corpus, out)
    outputs = [p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json"]
    log.info("wrote %d bags and a %d-row corpus to %s", len(task.bags), len(corpus), out)
    _run_manifest(cfg, "gen-synthetic", out, [], outputs)
    return corpus_path


def cmd_train_dae(cfg: RunConfig) -> Path:
    corpus_path = cfg.input_path("corpus")
    corpus = read_corpus(corpus_path)
    params, tlog = train_dae(corpus.features, corpus.conditions, cfg.dae)
    out = cfg.out / "dae"
    out.mkdir(parents=True, exist_ok=True)
    sha = save_dae(out / "dae.bin", params)
    _write_json(out / "dae_log.json", {"epoch_loss": tlog.epoch_loss, "val_loss": tlog.val_loss,
                                       "steps": tlog.steps, "dae_sha256": sha})
    inputs = [corpus_path] + sorted((corpus_path.parent / "corpus").glob("*.bin"))
    _run_manifest(cfg, "train-dae", out, inputs, [out / "dae.bin", out / "dae_log.json"])
    return out / "dae.bin"


def cmd_augment(cfg: RunConfig) -> Path:
    manifest = read_manifest(cfg.input_path("data") / "manifest.json")
    dae, sha = load_dae(cfg.input_path("dae"))
    aug_cfg = cfg.augment_for(cfg.seed)
    aug_cfg.validate(dae)
    out = cfg.out / "augment"
    augmented, provenance = [], {}
    for bag in manifest.load_all():
        res = augment_bag(bag, dae, aug_cfg, epoch=0, checkpoint_hash=sha)
        augmented.append(res.as_bag())
        provenance[res.id] = res.provenance
    save_bags(augmented, out)
    _write_json(out / "provenance.json", provenance)
    outputs = [out / "manifest.json", out / "provenance.json"] + [out / f"bags/{b.id}.bin" for b in augmented]
    _run_manifest(cfg, "augment", out, _manifest_inputs(manifest) + [cfg.input_path("dae")], outputs)
    return out / "manifest.json"


def _train_one(cfg: RunConfig, bags: dict, splits: dict, seed: int, dae=None, dae_sha="", offline=None,
               **changes):
    mcfg = cfg.mil_for(seed, **changes)
    train = [bags[i] for i in splits["train"]]
    if mcfg.policy == "offline":
        if offline is None:
            raise MissingArtifact("policy offline needs an augmented manifest (run augment first)")
        missing = [b.id for b in train if b.id not in offline]
        if missing:
            raise MissingArtifact(f"augmented manifest lacks training bags, e.g. {missing[0]!r}")
        train = train + [Bag(f"{b.id}#aug", b.label, offline[b.id].features) for b in train]
    val = [bags[i] for i in splits["val"]]
    return train_mil(train, val, mcfg, dae=dae if mcfg.policy == "augdiff" else None,
                     n_classes=_labels_count(bags), dae_hash=dae_sha)


def _offline_bags(cfg: RunConfig) -> tuple[dict, list[Path]]:
    m = read_manifest(cfg.input_path("augmented"))
    return {b.id: b for b in m.load_all()}, _manifest_inputs(m)


def cmd_train_mil(cfg: RunConfig) -> Path:
    manifest, bags, splits = _load_task(cfg)
    inputs = _manifest_inputs(manifest)
    dae, sha, offline = None, "", None
    if cfg.mil.policy == "augdiff":
        dae, sha = load_dae(cfg.input_path("dae"))
        inputs.append(cfg.input_path("dae"))
    if cfg.mil.policy == "offline":
        offline, extra = _offline_bags(cfg)
        inputs += extra
    params, hist = _train_one(cfg, bags, splits, cfg.seed, dae, sha, offline)
    out = cfg.out / "mil"
    out.mkdir(parents=True, exist_ok=True)
    save_mil(out / "mil.bin", params)
    _write_json(out / "history.json", hist.to_json())
    _run_manifest(cfg, "train-mil", out, inputs, [out / "mil.bin", out / "history.json"])
    return out / "mil.bin"


def cmd_eval(cfg: RunConfig) -> Path:
    manifest, bags, splits = _load_task(cfg)
    params, _ = load_mil(cfg.input_path("mil"))
    test = [bags[i] for i in splits["test"]]
    probs = bag_probs(params, test)
    labels = [b.label for b in test]
    report = evaluate(probs, labels)
    out = cfg.out / "eval"
    _write_json(out / "eval.json", report.to_json())
    rows = [{"id": b.id, "label": b.label, "pred": int(p.argmax()), **{f"p{c}": repr(float(v)) for c, v in enumerate(p)}}
            for b, p in zip(test, probs)]
    _write_csv(out / "predictions.csv", ["id", "label", "pred"] + [f"p{c}" for c in range(probs.shape[1])], rows)
    _run_manifest(cfg, "eval", out, _manifest_inputs(manifest) + [cfg.input_path("mil")],
                  [out / "eval.json", out / "predictions.csv"])
    log.info("test micro acc %.4f, macro AUC %s", report.micro_acc, report.macro_auc)
    return out / "eval.json"


def sweep_cells(cfg: RunConfig) -> list[dict]:
    cells = []
    T = cfg.augment.T
    for policy in cfg.sweep.policies:
        for variant in cfg.sweep.variants:
            if policy == "augdiff":
                grid = [(T, k, c) for k in cfg.sweep.k_values(T) for c in cfg.sweep.condition_modes]
            else:
                grid = [("", "", "")]
            for t, k, cond in grid:
                for seed in cfg.seeds:
                    cells.append({"policy": policy, "mil_variant": variant, "T": t, "K": k, "condition_mode": cond,
                                  "seed": seed})
    return cells


def cmd_sweep(cfg: RunConfig) -> Path:
    manifest, bags, splits = _load_task(cfg)
    inputs = _manifest_inputs(manifest)
    dae, sha, offline = None, "", None
    if "augdiff" in cfg.sweep.policies:
        dae, sha = load_dae(cfg.input_path("dae"))
        inputs.append(cfg.input_path("dae"))
    if "offline" in cfg.sweep.policies:
        offline, extra = _offline_bags(cfg)
        inputs += extra
    test = [bags[i] for i in splits["test"]]
    labels = [b.label for b in test]
    out = cfg.out / "sweep"
    rows, cell_files = [], []
    for cell in sweep_cells(cfg):
        changes = {"policy": cell["policy"], "variant": cell["mil_variant"]}
        if cell["policy"] == "augdiff":
            changes.update(K=cell["K"], condition=cell["condition_mode"])
        start = time.perf_counter()
        params, hist = _train_one(cfg, bags, splits, cell["seed"], dae, sha, offline, **changes)
        report = evaluate(bag_probs(params, test), labels)
        wall = time.perf_counter() - start
        row = dict(cell, micro_acc=repr(report.micro_acc),
                   macro_auc="" if report.macro_auc is None else repr(report.macro_auc),
                   epochs_run=hist.epochs_run, wall_seconds=f"{wall:.3f}")
        tag = "_".join(str(cell[k]) for k in ("policy", "mil_variant", "K", "condition_mode", "seed") if cell[k] != "")
        cell_files.append(_write_json(out / "cells" / tag / "result.json",
                                      {"cell": cell, "eval": report.to_json(), "history": hist.to_json()}))
        rows.append(row)
        log.info("sweep %s: macro AUC %s, %d epochs, %.1fs", tag, row["macro_auc"], hist.epochs_run, wall)
    _write_csv(out / "results.csv", SWEEP_COLUMNS, rows)
    _run_manifest(cfg, "sweep", out, inputs, cell_files,
                  timed=[out / "results.csv"])
    return out / "results.csv"


def bench_augment(dae, pool: np.ndarray, sizes, K: int, repeats: int, seed: int = 0,
                  extractor_seconds: float = 0.0, sha: str = "") -> dict:
    """Time augment_bag on bags of each size built by cycling ``pool`` rows."""
    if pool.shape[0] == 0:
        raise InvalidArgument("benchmark needs at least one instance")
    cfg = AugmentConfig(T=dae.T, K=K, seed=seed)
    cfg.validate(dae)
    rows = []
    for n in sizes:
        if n < 1:
            raise InvalidArgument(f"benchmark size must be positive, got {n}")
        bag = Bag(f"bench{n}", 0, pool[np.arange(n) % pool.shape[0]])
        times, calls = [], 0
        for _ in range(repeats):
            counter = CountingPredictor(dae)
            start = time.perf_counter()
            augment_bag(bag, dae, cfg, predict=counter, checkpoint_hash=sha)
            times.append(time.perf_counter() - start)
            calls = counter.calls
        sec = float(np.median(times))
        rows.append({"N": n, "T": dae.T, "K": K, "seconds": sec, "instances_per_second": n / sec,
                     "denoiser_calls": calls, "simulated_extractor_seconds": n * extractor_seconds})
    ns = np.array([r["N"] for r in rows], dtype=float)
    secs = np.array([r["seconds"] for r in rows])
    slope, intercept = np.polyfit(ns, secs, 1) if len(rows) >= 2 else (secs[0] / ns[0], 0.0)
    by_n = {r["N"]: r["seconds"] for r in rows}
    doubling = {str(n): by_n[2 * n] / by_n[n] for n in sorted(by_n) if 2 * n in by_n}
    return {"rows": rows, "slope_seconds_per_instance": float(slope), "intercept_seconds": float(intercept),
            "doubling_ratios": doubling}


def cmd_bench(cfg: RunConfig) -> Path:
    dae, sha = load_dae(cfg.input_path("dae"))
    manifest = read_manifest(cfg.input_path("data") / "manifest.json")
    pool = np.concatenate([b.features for b in manifest.load_all()])
    report = bench_augment(dae, pool, cfg.bench.sizes, cfg.augment.K, cfg.bench.repeats, cfg.seed,
                           cfg.bench.extractor_seconds_per_instance, sha)
    out = cfg.out / "bench"
    _write_json(out / "bench.json", report)
    _write_csv(out / "bench.csv", BENCH_COLUMNS, report["rows"])
    _run_manifest(cfg, "bench", out, _manifest_inputs(manifest) + [cfg.input_path("dae")], [],
                  timed=[out / "bench.json", out / "bench.csv"])
    return out / "bench.csv"


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(projected points, 2 x D components, explained-variance ratios of the two components).

    Each component is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise InvalidArgument("projection needs at least 3 feature vectors")
    if len(np.unique(x, axis=0)) < 2:
        raise InvalidArgument("projection needs at least 2 distinct points")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    comps = np.zeros((2, x.shape[1]))
    k = min(2, x.shape[1])
    comps[:k] = vecs[:, :k].T
    for c in comps[:k]:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    total = vals.sum()
    ratios = np.zeros(2)
    ratios[:k] = vals[:k] / total if total > 0 else 0.0
    return centered @ comps.T, comps, ratios


def cmd_export_projection(cfg: RunConfig) -> Path:
    sources = cfg.projection
    if not sources:
        sources = [{"tag": "original", "manifest": str(cfg.input_path("data") / "manifest.json")}]
        if cfg.input_path("augmented").exists():
            sources.append({"tag": "augdiff", "manifest": str(cfg.input_path("augmented"))})
    feats, tags, classes, inputs = [], [], [], []
    dim = None
    for src in sources:
        m = read_manifest(src["manifest"])
        if dim is not None and m.dim != dim:
            raise InvalidArgument(f"manifest {src['manifest']} has dim {m.dim}, expected {dim}")
        dim = m.dim
        truth = read_truth(m.root)
        for bag in m.load_all(truth=truth):
            feats.append(bag.features)
            tags += [src["tag"]] * bag.n
            classes += bag.instance_classes.tolist() if bag.instance_classes is not None else [""] * bag.n
        inputs += _manifest_inputs(m)
    points, comps, ratios = pca_2d(np.concatenate(feats))
    out = cfg.out / "projection"
    rows = [{"source": t, "x": repr(float(p[0])), "y": repr(float(p[1])), "instance_class": c}
            for t, p, c in zip(tags, points, classes)]
    _write_csv(out / "projection.csv", ["source", "x", "y", "instance_class"], rows)
    _write_json(out / "projection.json", {"explained_variance_ratio": ratios.tolist(),
                                          "components": comps.tolist(), "n_points": len(rows)})
    _run_manifest(cfg, "export-projection", out, inputs, [out / "projection.csv", out / "projection.json"])
    return out / "projection.csv"


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-dae": cmd_train_dae,
    "augment": cmd_augment,
    "train-mil": cmd_train_mil,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "export-projection": cmd_export_projection,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="augdiff", description="Diffusion-based feature augmentation for MIL")
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="RunConfig JSON file")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="run seed (replaces the config's seed list)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON; repeatable")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config, args.override, args.out, args.seed)
        result = COMMANDS[args.subcommand](cfg)
        print(result)
        return EXIT_OK
    except (ConfigError, InvalidArgument, UndefinedMetric) as exc:
        print(f"augdiff: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:  # includes MissingArtifact
        print(f"augdiff: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericFailure, NumericDomainError) as exc:
        print(f"augdiff: numeric failure: {exc}", file=sys.stderr)
        report = getattr(exc, "report", None)
        if report:
            print(json.dumps(report, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
