"""Command-line entry point wiring generation, training, embedding,
evaluation, probing, statistics, and sweeps into reproducible runs.

Every command is a deterministic function of (config, inputs, --seed) and
writes a RunManifest next to its outputs listing the resolved configuration
and every artifact file produced.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import check_keys, read_kv
from .dataset import (
    generate_synthetic,
    generator_config_dict,
    load_dataset,
    save_dataset,
    split_query_gallery,
)
from .embedder import concat, embed_all, load_embeddings, save_embeddings
from .errors import ConfigError, ToolkitError
from .evaluation import (
    PROBE_CONFIG_KEYS,
    ProbeConfig,
    curves_to_csv,
    evaluate_embeddings,
    fit_probe,
    lambda_sweep,
    sweep_to_csv,
)
from .presets import GEN_CONFIG_KEYS, generator_config_from_dict, get_preset
from .trainer import (
    BRANCH_CONFIG_KEYS,
    Trainer,
    branch_config_from_dict,
    checkpoint_load,
    checkpoint_save,
)

_SPLIT_STREAM = 10


def _keys_epilog(title: str, keys: dict[str, str]) -> str:
    lines = [f"{title} keys (key = value file, unknown keys rejected):"]
    lines += [f"  {k:<22} {v}" for k, v in keys.items()]
    return "\n".join(lines)


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    resolved: dict, inputs: list, outputs: list, t0: float) -> Path:
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "resolved_config": resolved,
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "toolkit_version": __version__,
        "duration_s": round(time.time() - t0, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _file_config(args) -> dict[str, str]:
    return read_kv(args.config) if getattr(args, "config", None) else {}


def _branch_config(args, raw: dict[str, str]):
    """Preset defaults < config file < CLI flags."""
    base = dict(raw)
    if getattr(args, "preset", None):
        preset = get_preset(args.preset)
        overrides = dict(preset.branch_overrides)
        overrides.setdefault("bias_channel", preset.bias_channel)
        for key, value in overrides.items():
            name = {"lam_db": "lambda_db", "lam_dr": "lambda_dr"}.get(key, key)
            if name == "hidden":
                value = ",".join(str(h) for h in value)
            base.setdefault(name, str(value))
    cfg = branch_config_from_dict(base)
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=args.mode)
    if getattr(args, "channel", None):
        cfg = replace(cfg, bias_channel=args.channel)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def cmd_gen(args) -> int:
    t0 = time.time()
    out = _out_dir(args)
    raw = _file_config(args)
    if args.preset:
        preset = get_preset(args.preset)
        base = {k: str(v) for k, v in generator_config_dict(preset.generator).items()}
        base["eval_fraction"] = str(preset.eval_fraction)
        base.update(raw)
        raw = base
    gen_cfg, fraction = generator_config_from_dict(raw)
    seed = args.seed if args.seed is not None else 0
    ds = generate_synthetic(gen_cfg, seed=seed)
    ds = split_query_gallery(ds, fraction, np.random.default_rng(np.random.SeedSequence((seed, _SPLIT_STREAM))))
    data_path = out / "dataset.csv"
    save_dataset(ds, data_path)
    resolved = dict(ds.meta["generator"], eval_fraction=fraction,
                    dropped_queries=ds.meta["dropped_queries"])
    _write_manifest(out, "gen", args, resolved, [], [data_path], t0)
    print(f"wrote {data_path} ({len(ds)} samples, {ds.meta['dropped_queries']} dropped queries)")
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    out = _out_dir(args)
    ds = load_dataset(args.data)
    cfg = _branch_config(args, _file_config(args))
    trainer = Trainer(ds, cfg)
    trainer.run()
    ckpt = out / "checkpoint.npz"
    checkpoint_save(ckpt, trainer.params, trainer.adam, cfg, trainer.epoch)
    log_path = out / "trainlog.csv"
    log_path.write_text(trainer.log.to_csv())
    _write_manifest(out, "train", args, cfg.to_dict(), [args.data], [ckpt, log_path], t0)
    last = trainer.log.epochs[-1] if trainer.log.epochs else None
    tail = f", final loss_dr {last.loss_dr:.5f}" if last else ""
    print(f"trained {cfg.mode} branch for {trainer.epoch} epochs{tail}; wrote {ckpt}")
    return 0


def cmd_embed(args) -> int:
    t0 = time.time()
    out = _out_dir(args)
    ds = load_dataset(args.data)
    sets = []
    for i, ckpt in enumerate(args.checkpoints):
        params, _, cfg, _ = checkpoint_load(ckpt)
        sets.append(embed_all(params, ds, branch_name=f"{cfg.mode}:{Path(ckpt).stem}:{i}"))
    es = concat(sets)
    emb_path = out / "embeddings.csv"
    save_embeddings(es, emb_path)
    resolved = {"checkpoints": [str(c) for c in args.checkpoints], "dim": es.dim}
    _write_manifest(out, "embed", args, resolved, [args.data, *args.checkpoints], [emb_path], t0)
    print(f"wrote {emb_path} ({len(es)} rows, dim {es.dim})")
    return 0


def cmd_eval(args) -> int:
    t0 = time.time()
    out = _out_dir(args)
    es = load_embeddings(args.data)
    report = evaluate_embeddings(
        es,
        protocol=args.protocol,
        channel=args.channel,
        config_echo={"protocol": args.protocol, "channel": args.channel},
    )
    outputs = []
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    outputs.append(report_path)
    metrics_path = out / "metrics.csv"
    flat = report.flat_metrics()
    metrics_path.write_text(
        ",".join(flat) + "\n" + ",".join(str(v) for v in flat.values()) + "\n"
    )
    outputs.append(metrics_path)
    for ch in report.channels:
        curve_path = out / f"curves_{ch}.csv"
        curve_path.write_text(curves_to_csv(report, ch))
        outputs.append(curve_path)
    _write_manifest(out, "eval", args, report.config, [args.data], outputs, t0)
    print(
        f"rank1 {report.rank1:.4f} rank5 {report.rank5:.4f} map {report.map:.4f} "
        f"({report.n_queries} queries, {report.dropped_queries} dropped)"
    )
    return 0


def cmd_probe(args) -> int:
    t0 = time.time()
    out = _out_dir(args)
    es = load_embeddings(args.data)
    raw = _file_config(args)
    check_keys(raw, PROBE_CONFIG_KEYS, what="probe config")
    cfg = ProbeConfig(
        epochs=int(raw.get("probe_epochs", 200)),
        rate=float(raw.get("probe_rate", 0.01)),
        train_fraction=float(raw.get("probe_train_fraction", 0.5)),
        seed=args.seed if args.seed is not None else int(raw.get("probe_seed", 0)),
    )
    report, _ = fit_probe(es, args.channel, cfg)
    path = out / "probe.json"
    path.write_text(json.dumps(report.__dict__, indent=2, sort_keys=True) + "\n")
    resolved = {"channel": args.channel, "probe_epochs": cfg.epochs, "probe_rate": cfg.rate,
                "probe_train_fraction": cfg.train_fraction, "probe_seed": cfg.seed}
    _write_manifest(out, "probe", args, resolved, [args.data], [path], t0)
    print(f"probe accuracy on {args.channel}: {report.accuracy:.4f} "
          f"({report.n_test} held-out rows)")
    return 0


def cmd_stats(args) -> int:
    t0 = time.time()
    out = _out_dir(args)
    es = load_embeddings(args.data)
    report = evaluate_embeddings(es, protocol="standard", stat_channels=[args.channel])
    st = report.channels[args.channel]
    curve_path = out / f"curves_{args.channel}.csv"
    curve_path.write_text(curves_to_csv(report, args.channel))
    nauc_path = out / "nauc.json"
    nauc_path.write_text(
        json.dumps(
            {"channel": args.channel, "nauc10_neg": st.nauc_neg, "nauc10_pos": st.nauc_pos},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    _write_manifest(out, "stats", args, {"channel": args.channel}, [args.data],
                    [curve_path, nauc_path], t0)
    print(f"nauc10 same-{args.channel}: negatives {st.nauc_neg:.4f}, positives {st.nauc_pos:.4f}")
    return 0


def cmd_sweep(args) -> int:
    t0 = time.time()
    out = _out_dir(args)
    ds = load_dataset(args.data)
    cfg = _branch_config(args, _file_config(args))
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--lambdas expects comma-separated numbers, got {args.lambdas!r}") from None
    rows = lambda_sweep(ds, cfg, cfg.mode, lambdas)
    sweep_path = out / "sweep.csv"
    sweep_path.write_text(sweep_to_csv(rows))
    resolved = dict(cfg.to_dict(), lambdas=",".join(f"{v:g}" for v in lambdas))
    _write_manifest(out, "sweep", args, resolved, [args.data], [sweep_path], t0)
    print(sweep_to_csv(rows).strip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biasreid",
        description="Bias-controlled adversarial metric learning and retrieval bias auditing.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen", help="generate a synthetic dataset with query/gallery split",
                       epilog=_keys_epilog("generator", GEN_CONFIG_KEYS), formatter_class=fmt)
    p.add_argument("--config", help="generator key=value file")
    p.add_argument("--preset", help="bundled preset: default, pose2, cam6, part3")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train one branch on a dataset CSV",
                       epilog=_keys_epilog("branch", BRANCH_CONFIG_KEYS), formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--config", help="branch key=value file")
    p.add_argument("--preset", help="use a bundled preset's branch defaults")
    p.add_argument("--mode", choices=["reduce", "enhance"])
    p.add_argument("--channel", help="bias channel the loss pairs on")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="apply trained branch checkpoints and concatenate")
    p.add_argument("checkpoints", nargs="+", help="one or more checkpoint files, in order")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("eval", help="rank the gallery and report CMC/mAP plus bias curves")
    p.add_argument("--data", required=True, help="embeddings CSV")
    p.add_argument("--protocol", choices=["standard", "nobias"], default="standard")
    p.add_argument("--channel", help="bias channel (required for nobias)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe", help="train a frozen-feature bias probe and report accuracy",
                       epilog=_keys_epilog("probe", PROBE_CONFIG_KEYS), formatter_class=fmt)
    p.add_argument("--data", required=True, help="embeddings CSV")
    p.add_argument("--channel", required=True)
    p.add_argument("--config", help="probe key=value file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("stats", help="same-bias rank-position curves and nauc10")
    p.add_argument("--data", required=True, help="embeddings CSV")
    p.add_argument("--channel", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("sweep", help="train+evaluate one branch per lambda value",
                       epilog=_keys_epilog("branch", BRANCH_CONFIG_KEYS), formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--lambdas", required=True, help="comma-separated bias-loss weights")
    p.add_argument("--config", help="branch key=value file")
    p.add_argument("--preset")
    p.add_argument("--mode", choices=["reduce", "enhance"], default="reduce")
    p.add_argument("--channel")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ToolkitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
