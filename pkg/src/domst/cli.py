"""Command line entry point: ``domst <command> [options]``.

Commands: gen-data, train, compare, bench, grad-check. Reports go to
``--out`` as JSON plus a text rendering; without ``--out`` the JSON is
printed to stdout. Failures exit nonzero with a JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    GenConfig,
    WatershedDataset,
    SyntheticTruth,
    load_watershed_dir,
    synthetic_corpus,
    write_watershed_csv,
)
from .errors import DomSTError
from .executors import TrainConfig
from .harness import (
    VARIANT_LABELS,
    gradient_check,
    model_parallel_benchmark,
    pixcon_recovery_score,
    run_comparison,
    run_timing_table,
)
from .model import VARIANTS, ModelConfig, save_checkpoint
from .pipeline import replicate_models, split_by_watershed, train_job

log = logging.getLogger("domst")
TRUTH_FILE = "truth.json"


# ------------------------------------------------------------------- config


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DomSTError(f"config {path}: invalid JSON ({exc})") from None
    unknown = set(cfg) - {"gen", "model", "train", "experiment"}
    if unknown:
        raise DomSTError(f"config {path}: unknown sections {sorted(unknown)}")
    return cfg


def _overrides(args, mapping: dict) -> dict:
    return {field: getattr(args, arg) for arg, field in mapping.items() if getattr(args, arg, None) is not None}


def _gen_config(args, cfg: dict) -> GenConfig:
    d = dict(cfg.get("gen", {}))
    d.update(_overrides(args, {"pixels": "n_pixels", "days": "n_days", "noise": "noise_rel", "tau": "tau_km"}))
    if "unit_hydrograph" in d:
        d["unit_hydrograph"] = tuple(d["unit_hydrograph"])
    if d.get("grid") is not None:
        d["grid"] = tuple(d["grid"])
    return GenConfig(**d)


def _model_config(args, cfg: dict, variant: str | None = None) -> ModelConfig:
    d = dict(cfg.get("model", {}))
    d.update(_overrides(args, {"lookback": "lookback", "hidden": "lstm_hidden", "strategy": "partition_strategy"}))
    if variant is not None:
        d["variant"] = variant
    v = d.get("variant", "multihead_plus_p")
    if getattr(args, "heads", None) is not None and v == "multihead_plus_p":
        d["heads"] = args.heads
    if v != "multihead_plus_p":
        d.pop("heads", None)
        d.pop("use_pixcon", None)
    return ModelConfig(**d)


def _train_config(args, cfg: dict) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    d.update(_overrides(args, {"epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
                               "executor": "executor", "workers": "workers"}))
    d.setdefault("shuffle_seed", args.seed)
    return TrainConfig(**d)


def _experiment(cfg: dict) -> dict:
    return dict(cfg.get("experiment", {}))


# --------------------------------------------------------------------- data


def _truth_to_dict(truth: SyntheticTruth) -> dict:
    return {"contribution": truth.contribution.tolist(), "unit_hydrograph": truth.unit_hydrograph.tolist(),
            "base_flow": truth.base_flow}


def _load_dataset(directory: Path) -> WatershedDataset:
    ds = load_watershed_dir(directory)
    truth_path = directory / TRUTH_FILE
    if truth_path.exists():
        t = json.loads(truth_path.read_text())
        ds.truth = SyntheticTruth(np.array(t["contribution"]), np.array(t["unit_hydrograph"]), t["base_flow"])
    return ds


def _corpus(args, cfg: dict, n_default: int):
    if getattr(args, "data", None):
        root = Path(args.data)
        if (root / "precip.csv").exists():
            return [(root.name, _load_dataset(root))]
        dirs = sorted(p for p in root.iterdir() if (p / "precip.csv").exists())
        if not dirs:
            raise DomSTError(f"no watershed directories under {root}")
        return [(p.name, _load_dataset(p)) for p in dirs]
    n = args.watersheds if getattr(args, "watersheds", None) is not None else _experiment(cfg).get("watersheds", n_default)
    return synthetic_corpus(n, _gen_config(args, cfg), seed=args.seed)


# ----------------------------------------------------------------- commands


def _emit(args, name: str, report: dict, text: str | None = None) -> None:
    payload = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(payload + "\n")
        if text is not None:
            (out / f"{name}.txt").write_text(text)
    if text is not None:
        print(text, end="", file=sys.stdout if args.out else sys.stderr)
    if not args.out:
        print(payload)


def cmd_gen_data(args, cfg) -> int:
    if not args.out:
        raise DomSTError("gen-data needs --out")
    corpus = _corpus(args, cfg, 1)
    written = []
    for wid, ds in corpus:
        d = write_watershed_csv(ds, Path(args.out) / wid)
        (d / TRUTH_FILE).write_text(json.dumps(_truth_to_dict(ds.truth), indent=2) + "\n")
        written.append({"watershed_id": wid, "n_pixels": ds.n_pixels, "n_days": ds.n_days})
    _emit(args, "gen-data", {"command": "gen-data", "seed": args.seed, "gen": _gen_config(args, cfg).__dict__,
                             "watersheds": written})
    return 0


def cmd_train(args, cfg) -> int:
    corpus = _corpus(args, cfg, 1)
    if len(corpus) != 1:
        raise DomSTError("train takes exactly one watershed; point --data at a single watershed directory")
    ds = split_by_watershed(corpus)[0]
    mcfg = _model_config(args, cfg, args.variant)
    tcfg = _train_config(args, cfg)
    if args.emit_traces:
        tcfg = replace(tcfg, executor="distributed")
    job = replicate_models(mcfg, [ds], args.seed, tcfg, _experiment(cfg).get("train_fraction", 0.8))[0]
    result = train_job(job, keep_model=True)
    report = {"command": "train", "seed": args.seed, "model": job.model_config.to_dict(),
              "train": tcfg.to_dict(), "result": result.to_dict()}
    if result.status != "ok":
        _emit(args, "train", report)
        raise DomSTError(f"training failed: {result.error}")
    model = result.model
    if model.config.use_pixcon:
        report["pixcon_weights"] = model.pixcon_weights().tolist()
        if ds.truth is not None:
            report["pixcon_recovery_spearman"] = pixcon_recovery_score(model, ds.truth.contribution)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "checkpoint.json")
        if args.dump_partition:
            (out / "partition.json").write_text(model.partition.to_json() + "\n")
        if args.emit_traces:
            with open(out / "traces.jsonl", "w") as fh:
                for tr in result.traces:
                    fh.write(json.dumps(tr.to_dict(), sort_keys=True) + "\n")
    elif args.dump_partition:
        report["partition"] = model.partition.to_dict()
    text = (f"{VARIANT_LABELS[mcfg.variant]} on {ds.watershed_id}: train NSE {result.train_nse:.6f}, "
            f"test NSE {result.test_nse:.6f} after {result.epochs} epochs\n")
    _emit(args, "train", report, text)
    return 0


def _variants(args, cfg) -> list[str]:
    if args.variants:
        vs = [v.strip() for v in args.variants.split(",") if v.strip()]
    else:
        vs = _experiment(cfg).get("variants", list(VARIANTS))
    bad = [v for v in vs if v not in VARIANTS]
    if bad:
        raise DomSTError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
    return vs


def cmd_compare(args, cfg) -> int:
    corpus = _corpus(args, cfg, 4)
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else _experiment(cfg).get("seeds", [args.seed + i for i in range(5)]))
    table = run_comparison(corpus, _variants(args, cfg), seeds, _model_config(args, cfg), _train_config(args, cfg),
                           heads=args.heads, mode="IP-D", pool_size=args.pool,
                           train_fraction=_experiment(cfg).get("train_fraction", 0.8))
    report = {"command": "compare", "seed": args.seed, **table.to_dict()}
    _emit(args, "comparison", report, table.to_text())
    return 0


def cmd_bench(args, cfg) -> int:
    corpus = _corpus(args, cfg, 8)
    table = run_timing_table(corpus, _variants(args, cfg), args.pool, _model_config(args, cfg),
                             _train_config(args, cfg), seed=args.seed, heads=args.heads)
    if args.model_parallel:
        heavy = ModelConfig(variant="multihead_plus_p", heads=args.heads or 4,
                            conv_layers=((args.heavy_channels, 5), (args.heavy_channels, 5)),
                            lookback=args.lookback or 30, seed=args.seed)
        ds = corpus[0][1]
        tcfg = TrainConfig(epochs=1, shuffle_seed=args.seed, workers=args.pool)
        table.model_parallel = model_parallel_benchmark(ds, heavy, tcfg, n_samples=args.heavy_samples)
    report = {"command": "bench", "seed": args.seed, **table.to_dict()}
    text = table.to_text()
    if table.model_parallel:
        mp_ = table.model_parallel
        text += (f"model parallel (H={mp_['heads']}, {mp_['workers']} workers): sequential "
                 f"{mp_['sequential_time']:.2f} s, distributed {mp_['distributed_time']:.2f} s, "
                 f"speedup {mp_['speedup']:.2f}x\n")
    _emit(args, "bench", report, text)
    return 0


def cmd_grad_check(args, cfg) -> int:
    variants = _variants(args, cfg)
    base = _model_config(args, cfg, "multihead_plus_p")
    results = [gradient_check(v, n_pixels=args.pixels or 8, lookback=args.lookback or 16, heads=args.heads or 2,
                              seed=args.seed, base=base) for v in variants]
    report = {"command": "grad-check", "seed": args.seed, "tolerance": 1e-4, "results": results,
              "passed": all(r["passed"] for r in results)}
    text = "".join(f"{VARIANT_LABELS[r['variant']]}: max relative error {r['max_rel_error']:.3e} "
                   f"({'PASS' if r['passed'] else 'FAIL'})\n" for r in results)
    _emit(args, "grad-check", report, text)
    if not report["passed"]:
        raise DomSTError("gradient check failed")
    return 0


# ------------------------------------------------------------------- parser


def _global_args(p: argparse.ArgumentParser, suppress: bool) -> None:
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p.add_argument("--seed", type=int, default=d(42), help="global seed (default 42)")
    p.add_argument("--config", default=d(None), help="JSON file with gen/model/train/experiment sections")
    p.add_argument("--pool", type=int, default=d(4), help="worker pool size (default 4)")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("--emit-traces", action="store_true", default=d(False), help="write per-step traces as JSON lines")
    p.add_argument("--dump-partition", action="store_true", default=d(False), help="write the pixel->head map")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domst", description=__doc__.splitlines()[0])
    _global_args(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    _global_args(common, suppress=True)
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="watershed directory, or a directory of watershed directories")
    data.add_argument("--watersheds", type=int, help="number of synthetic watersheds when --data is absent")
    data.add_argument("--pixels", type=int)
    data.add_argument("--days", type=int)
    data.add_argument("--noise", type=float, help="relative noise level of synthetic discharge")
    data.add_argument("--tau", type=float, help="synthetic contribution decay length (km)")
    arch = argparse.ArgumentParser(add_help=False)
    arch.add_argument("--heads", type=int)
    arch.add_argument("--lookback", type=int)
    arch.add_argument("--hidden", type=int)
    arch.add_argument("--strategy", choices=["distance-quantile", "round-robin", "contiguous-block"])
    arch.add_argument("--epochs", type=int)
    arch.add_argument("--batch-size", dest="batch_size", type=int)
    arch.add_argument("--lr", type=float)
    arch.add_argument("--executor", choices=["sequential", "distributed"])
    arch.add_argument("--workers", type=int, help="spatial worker threads for the distributed executor")
    arch.add_argument("--variants", help="comma-separated variants")

    sub.add_parser("gen-data", parents=[common, data], help="write synthetic watersheds as CSV")
    p = sub.add_parser("train", parents=[common, data, arch], help="train one variant on one watershed")
    p.add_argument("--variant", choices=VARIANTS, default="multihead_plus_p")
    p = sub.add_parser("compare", parents=[common, data, arch], help="three-variant NSE comparison")
    p.add_argument("--seeds", help="comma-separated seeds (default: 5 seeds from --seed)")
    p = sub.add_parser("bench", parents=[common, data, arch], help="S vs IP-D timing table")
    p.add_argument("--model-parallel", action="store_true", help="also time sequential vs distributed execution")
    p.add_argument("--heavy-channels", type=int, default=128)
    p.add_argument("--heavy-samples", type=int, default=64)
    sub.add_parser("grad-check", parents=[common, data, arch], help="finite-difference gradient check")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "compare": cmd_compare, "bench": cmd_bench,
            "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (DomSTError, ValueError, OSError, TypeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
