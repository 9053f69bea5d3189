"""Command-line entry point: generate, train, transfer, ablate, evaluate, tacf, inspect."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import evaluation as ev
from . import storage
from .dataset import GenerationConfig, generate
from .model import VARIANTS, ModelConfig, ScattererNet, count_parameters
from .preprocess import ScattererGrid
from .scene import build_scene, oracle_scatterers, step_scene
from .training import Split, TrainConfig, few_shot_transfer, predict, split_dataset, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def version_string() -> str:
    """git-describe style when run from a checkout, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _load_config(path) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError("config document must be a JSON object")
    return cfg


def _run_manifest(command: str, config: dict, seeds: dict, outputs: dict, **extra) -> dict:
    return {"command": command, "version": version_string(), "config": config, "config_digest": _digest(config),
            "seeds": seeds, "outputs": outputs, **extra}


def _model_config(data_manifest: dict, overrides: dict, variant: str | None = None) -> ModelConfig:
    m_x, m_y, n_x, n_y = (data_manifest[k] for k in ("m_x", "m_y", "n_x", "n_y"))
    if m_x % n_x or m_y % n_y or m_x // n_x != m_y // n_y:
        raise ValueError(f"feature grid {m_x}x{m_y} cannot be patched onto a {n_x}x{n_y} output")
    kw = dict(m_x=m_x, m_y=m_y, n_x=n_x, n_y=n_y, patch=m_x // n_x)
    kw.update(overrides)
    if variant:
        kw["variant"] = variant
    if "lora_targets" in kw:
        kw["lora_targets"] = tuple(kw["lora_targets"])
    return ModelConfig(**kw)


def _train_config(overrides: dict, seed=None, epochs=None) -> TrainConfig:
    kw = dict(overrides)
    if seed is not None:
        kw["seed"] = seed
    if epochs is not None:
        kw["epochs"] = epochs
    return TrainConfig(**kw)


def _metric_config(args, overrides: dict) -> ev.MetricConfig:
    kw = dict(overrides)
    if getattr(args, "zero_epsilon", None) is not None:
        kw["zero_epsilon"] = args.zero_epsilon
    if getattr(args, "s_th", None) is not None:
        kw["s_th"] = args.s_th
    return ev.MetricConfig(**kw)


def _check_dims(model_cfg: dict, data_manifest: dict):
    for k in ("m_x", "m_y", "n_x", "n_y"):
        if model_cfg[k] != data_manifest[k]:
            raise ValueError(
                f"dimension mismatch: checkpoint {k}={model_cfg[k]} but dataset {k}={data_manifest[k]}")


# ---------------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    gen = dict(cfg.get("generation", cfg))
    if args.seed is not None:
        gen["scene_seed"] = args.seed
    if args.condition:
        gen["condition"] = args.condition
    if args.samples is not None:
        gen["sample_count"] = args.samples
    gcfg = GenerationConfig.from_dict(gen)
    records, manifest = generate(gcfg)
    manifest["version"] = version_string()
    out = storage.write_dataset(records, manifest, args.out)
    storage.dump_json(_run_manifest("generate", gcfg.to_dict(), {"scene_seed": gcfg.scene_seed,
                                                                 "lidar_seed": gcfg.lidar_seed},
                                    {"dataset": str(out)}), Path(args.out) / "run.json")
    print(f"wrote {manifest['sample_count']} samples ({manifest['condition_key']}) to {out}")
    return EXIT_OK


def _train_run(args, variant=None, command="train") -> int:
    cfg = _load_config(args.config)
    dman, data, _ = storage.load_arrays(args.data)
    mcfg = _model_config(dman, cfg.get("model", {}), variant or getattr(args, "variant", None))
    tcfg = _train_config(cfg.get("train", {}), args.seed, args.epochs)
    if args.seed is not None:
        mcfg = dataclasses.replace(mcfg, seed=args.seed)
    split = split_dataset(len(data), tcfg.split_ratio, tcfg.seed)
    model = ScattererNet(mcfg)
    result = train(model, data, split, tcfg)
    mcfg_metrics = _metric_config(args, cfg.get("metrics", {}))
    pred = predict(model, data, split.test)
    report = ev.evaluate_condition(pred, data.targets[split.test], dman["condition_key"], mcfg_metrics,
                                   split.test, storage.state_digest(model.state_dict()))
    out = Path(args.out)
    ckpt = storage.save_checkpoint(model, out / "checkpoint", steps=result.steps, extra={
        "condition_key": dman["condition_key"], "split": split.to_dict(), "train_config": tcfg.to_dict(),
        "dataset_digest": dman["params_digest"], "normalization": dman["normalization"],
        "best_epoch": result.best_epoch, "variant": mcfg.variant,
    })
    storage.write_history(out / "history.csv", result.history)
    storage.dump_json(report, out / "report.json")
    storage.write_csv(out / "report.csv", ev.report_rows(report), storage.REPORT_COLUMNS)
    full_cfg = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "metrics": mcfg_metrics.to_dict()}
    storage.dump_json(_run_manifest(command, full_cfg, {"train": tcfg.seed, "model": mcfg.seed,
                                                        "backbone": mcfg.backbone_seed},
                                    {"checkpoint": str(ckpt), "history": str(out / "history.csv"),
                                     "report": str(out / "report.json")},
                                    variant=mcfg.variant, summary=report["summary"],
                                    guarded_batches=result.guarded_batches), out / "run.json")
    s = report["summary"]
    print(f"{command} {mcfg.variant}: best epoch {result.best_epoch}, test p_pos={s['p_pos']:.4f} "
          f"p_num={s['p_num']} nmse={s['nmse']}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_run(args)


def cmd_ablate(args) -> int:
    return _train_run(args, variant=args.variant, command="ablate")


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    model, cman = storage.load_checkpoint(args.checkpoint)
    dman, data, _ = storage.load_arrays(args.data)
    _check_dims(cman["model_config"], dman)
    seed = args.seed if args.seed is not None else cman.get("train_config", {}).get("seed", 0)
    if args.seed is None and "split" in cman and cman.get("dataset_digest") == dman["params_digest"]:
        split = Split.from_dict(cman["split"])  # same dataset: reuse the training run's test split
    else:
        ratio = cman.get("train_config", {}).get("split_ratio", (4, 1, 1))
        split = split_dataset(len(data), tuple(ratio), seed)
    pred = predict(model, data, split.test)
    report = ev.evaluate_condition(pred, data.targets[split.test], dman["condition_key"],
                                   _metric_config(args, cfg.get("metrics", {})), split.test,
                                   cman["state_digest"], cman.get("condition_key"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    storage.dump_json(report, out / "report.json")
    storage.write_csv(out / "report.csv", ev.report_rows(report), storage.REPORT_COLUMNS)
    storage.dump_json(_run_manifest("evaluate", cfg, {"split": seed},
                                    {"report": str(out / "report.json")}, summary=report["summary"]),
                      out / "run.json")
    print(json.dumps(report["summary"]))
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _load_config(args.config)
    model, cman = storage.load_checkpoint(args.checkpoint)
    dman, data, _ = storage.load_arrays(args.data)
    _check_dims(cman["model_config"], dman)
    if args.condition and args.condition != dman["condition_key"]:
        raise ValueError(f"dataset condition {dman['condition_key']} differs from --condition {args.condition}")
    if dman["condition_key"] == cman.get("condition_key"):
        raise ValueError("transfer target condition equals the source condition")
    tcfg = _train_config(cfg.get("train", {}), None, args.epochs)
    split = split_dataset(len(data), tcfg.split_ratio, args.seed if args.seed is not None else tcfg.seed)
    ks = sorted(args.k or cfg.get("few_shot_counts", [0]))
    seeds = args.seeds or cfg.get("seeds", [0])
    mcfg = ModelConfig(**{**cman["model_config"], "lora_targets": tuple(cman["model_config"]["lora_targets"])})
    metric_cfg = _metric_config(args, cfg.get("metrics", {}))
    rows = few_shot_transfer(model.state_dict(), mcfg, data, split, ks, seeds, tcfg, metric_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    storage.write_csv(out / "transfer.csv", rows, storage.TRANSFER_COLUMNS)
    outputs = {"curve": str(out / "transfer.csv")}
    if ks == [0]:
        pred = predict(model, data, split.test)
        report = ev.evaluate_condition(pred, data.targets[split.test], dman["condition_key"], metric_cfg,
                                       split.test, cman["state_digest"], cman.get("condition_key"))
        storage.dump_json(report, out / "report.json")
        outputs["report"] = str(out / "report.json")
    storage.dump_json(_run_manifest("transfer", {**cfg, "train": tcfg.to_dict()}, {"seeds": list(seeds)},
                                    outputs, source=cman.get("condition_key"), target=dman["condition_key"],
                                    rows=rows), out / "run.json")
    for r in rows:
        print(f"k={r['k']} seed={r['seed']} p_pos={r['p_pos']:.4f} p_num={r['p_num']}")
    return EXIT_OK


def cmd_tacf(args) -> int:
    model, cman = storage.load_checkpoint(args.checkpoint)
    dman, data, records = storage.load_arrays(args.data)
    _check_dims(cman["model_config"], dman)
    if not 0 <= args.sample < len(records):
        raise ValueError(f"sample {args.sample} out of range (dataset has {len(records)})")
    rec = records[args.sample]
    gcfg = GenerationConfig.from_dict(dman["generation"])
    scene = build_scene(gcfg.scene_config())
    last = min(rec.snapshot + args.window, gcfg.snapshot_count)
    snaps = [step_scene(scene, i, rec.link) for i in range(rec.snapshot, last)]
    dt = scene.config.dt
    max_lag = min(args.max_lag, (len(snaps) - 1) * dt)
    lags = np.arange(0, int(round(max_lag / dt)) + 1) * dt
    tcfg = ev.TacfConfig(rec.f_c, tuple(lags), dt)
    oracle = oracle_scatterers(snaps[0], scene, rec.f_c)
    pred = predict(model, data, [args.sample])[0] * dman["normalization"]
    grid = ScattererGrid(np.clip(pred, 0.0, None), tuple(rec.bounds))
    res = ev.compare_tacf(grid, oracle, snaps, tcfg, seed=args.seed or 0, z=scene.config.antenna_height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"lag_s": l, "tacf_pred": p, "tacf_oracle": o}
            for l, p, o in zip(res["lags"], res["tacf_pred"], res["tacf_oracle"])]
    storage.write_csv(out / "tacf.csv", rows, storage.TACF_COLUMNS)
    storage.dump_json(_run_manifest("tacf", {"sample": args.sample, "window": args.window, "max_lag": max_lag},
                                    {"placement": args.seed or 0}, {"curve": str(out / "tacf.csv")},
                                    max_abs_gap=res["max_abs_gap"]), out / "run.json")
    print(f"max |TACF_pred - TACF_oracle| = {res['max_abs_gap']:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_file():
        arr = storage.read_blob(path)
        print(json.dumps({"shape": list(arr.shape), "min": float(arr.min()) if arr.size else None,
                          "max": float(arr.max()) if arr.size else None}))
        return EXIT_OK
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise storage.StorageError(storage.MISSING_MANIFEST, f"{mpath} not found")
    man = storage.load_json(mpath)
    if man.get("kind") == "scatgen-checkpoint":
        model, _ = storage.load_checkpoint(path)
        total, trainable = count_parameters(model)
        print(json.dumps({"kind": "checkpoint", "condition": man.get("condition_key"),
                          "backbone_digest": man["backbone_digest"], "total_params": total,
                          "trainable_params": trainable}))
    else:
        storage.read_dataset(path)
        keep = ("condition_key", "sample_count", "m_x", "m_y", "n_x", "n_y", "normalization",
                "occupied_cell_fraction")
        print(json.dumps({"kind": "dataset", **{k: man.get(k) for k in keep}}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scatgen", description=__doc__)
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config document")
        if seed:
            sp.add_argument("--seed", type=int)

    def metrics(sp):
        sp.add_argument("--zero-epsilon", type=float)
        sp.add_argument("--s-th", type=float)

    g = sub.add_parser("generate", help="simulate scenes into a dataset directory")
    common(g)
    g.add_argument("--condition")
    g.add_argument("--samples", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    for name, func in (("train", cmd_train), ("ablate", cmd_ablate)):
        t = sub.add_parser(name, help=f"{name} a model on a dataset")
        common(t)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--epochs", type=int)
        t.add_argument("--variant", choices=VARIANTS, required=name == "ablate",
                       default=None if name == "ablate" else "full")
        metrics(t)
        t.set_defaults(func=func)

    tr = sub.add_parser("transfer", help="few-shot fine-tune a checkpoint on another condition")
    common(tr)
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--k", type=int, action="append", help="few-shot count (repeatable); 0 = zero-shot")
    tr.add_argument("--seeds", type=int, nargs="+")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--condition", help="expected target condition key")
    metrics(tr)
    tr.set_defaults(func=cmd_transfer)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset's test split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    metrics(e)
    e.set_defaults(func=cmd_evaluate)

    tc = sub.add_parser("tacf", help="TACF of predicted vs oracle scatterers along a link")
    common(tc)
    tc.add_argument("--checkpoint", required=True)
    tc.add_argument("--data", required=True)
    tc.add_argument("--sample", type=int, default=0)
    tc.add_argument("--window", type=int, default=50, help="snapshots in the correlation window")
    tc.add_argument("--max-lag", type=float, default=2.0, help="seconds")
    tc.add_argument("--out", required=True)
    tc.set_defaults(func=cmd_tacf)

    i = sub.add_parser("inspect", help="summarize a dataset, checkpoint or blob")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_VALIDATION
    try:
        return args.func(args)
    except (ValueError, KeyError, storage.StorageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
