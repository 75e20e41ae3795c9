"""Command-line entry points.

Verbs: synth-data, train-vae, train-ldm, convert, evaluate. Every
command is deterministic given config + seed. Exit codes: 0 success,
2 validation error, 3 stage-ordering/compatibility error, 1 runtime
failure. LATENTSING_OUT_ROOT overrides the configured output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import Config, load_config
from .errors import LatentSingError, StageOrderError, ValidationError
from .synthdata import DatasetManifest, synth_dataset


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="config file (key = value lines); defaults otherwise")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, default=None,
                   help="shorthand for --set seed=N")


def _load_cfg(args) -> Config:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _out_root(cfg: Config) -> Path:
    return Path(os.environ.get("LATENTSING_OUT_ROOT", cfg.out_root))


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def cmd_synth_data(args) -> int:
    cfg = _load_cfg(args)
    out = args.out if args.out is not None else _out_root(cfg) / "data"
    manifest = synth_dataset(out, cfg)
    print(f"wrote {len(manifest.entries)} clips under {out}")
    print(out / "manifest.json")
    return 0


def cmd_train_vae(args) -> int:
    from .vae import train_vae

    cfg = _load_cfg(args)
    data = args.data if args.data is not None else _out_root(cfg) / "data" / "manifest.json"
    manifest = DatasetManifest.load(data)
    out = args.out if args.out is not None else _out_root(cfg) / "vae"
    _, history = train_vae(manifest, cfg, out_dir=out)
    _write_csv(Path(out) / "vae_loss.csv", history)
    final = Path(out) / f"vae_step{cfg.vae_steps:06d}.ckpt"
    print(final)
    return 0


def cmd_train_ldm(args) -> int:
    from .diffusion import train_ldm

    cfg = _load_cfg(args)
    vae_path = args.vae if args.vae is not None else _out_root(cfg) / "vae" / f"vae_step{cfg.vae_steps:06d}.ckpt"
    if not Path(vae_path).exists():
        raise StageOrderError(
            f"no VAE checkpoint at {vae_path}; run train-vae first")
    vae_ckpt = load_checkpoint(vae_path, expected_hash=cfg.config_hash())
    data = args.data if args.data is not None else _out_root(cfg) / "data" / "manifest.json"
    manifest = DatasetManifest.load(data)
    out = args.out if args.out is not None else _out_root(cfg) / "ldm"
    _, _, history = train_ldm(manifest, vae_ckpt, cfg, out_dir=out)
    _write_csv(Path(out) / "ldm_loss.csv", history)
    final = Path(out) / f"ldm_step{cfg.ldm_steps:06d}.ckpt"
    print(final)
    return 0


def cmd_convert(args) -> int:
    # validate inputs before any model load
    for p in [args.source, *args.ref, args.vae, args.ldm]:
        if not Path(p).exists():
            raise ValidationError(f"no such file: {p}")
    from .audio import load_wav, save_wav
    from .pipeline import ConversionRequest, convert

    vae_ckpt = load_checkpoint(args.vae)
    ldm_ckpt = load_checkpoint(args.ldm, expected_hash=vae_ckpt.config_hash)
    w = args.w if args.w is not None else float(
        ldm_ckpt.extras.get("w", vae_ckpt.config.guidance_w))
    req = ConversionRequest(source=load_wav(args.source),
                            references=[load_wav(p) for p in args.ref],
                            w=w, seed=args.seed if args.seed is not None else 0)
    result = convert(req, vae_ckpt, ldm_ckpt)
    save_wav(result.audio, args.out)
    sidecar = {
        "config_hash": vae_ckpt.config_hash,
        "seed": req.seed,
        "w": w,
        "target_mean_f0": result.target_mean_f0,
        "timings": result.timings,
    }
    Path(str(args.out) + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import build_pairs, evaluate, plot_report

    for p in [args.vae, args.ldm]:
        if not Path(p).exists():
            raise ValidationError(f"no such file: {p}")
    vae_ckpt = load_checkpoint(args.vae)
    ldm_ckpt = load_checkpoint(args.ldm, expected_hash=vae_ckpt.config_hash)
    cfg = vae_ckpt.config
    data = args.data if args.data is not None else _out_root(cfg) / "data" / "manifest.json"
    manifest = DatasetManifest.load(data)
    scenarios = ["seen", "unseen"] if args.scenario == "both" else [args.scenario]
    trials = []
    for scenario in scenarios:
        trials.extend(build_pairs(manifest, scenario))
    report = evaluate(trials, manifest, vae_ckpt, ldm_ckpt, w=args.w,
                      max_trials=cfg.eval_max_trials)
    out = args.out if args.out is not None else _out_root(cfg) / "eval"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    plot_report(report, out)
    failures = report.aggregates["overall"]["failures"]
    print(f"{len(report.trials)} trials, {failures} failures")
    print(out / "report.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentsing",
        description="Desk-scale any-to-any singing voice conversion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    _add_config_args(p)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-vae", help="pretrain the latent autoencoder")
    _add_config_args(p)
    p.add_argument("--data", type=Path, default=None, help="manifest path")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-ldm", help="train the latent diffusion model")
    _add_config_args(p)
    p.add_argument("--data", type=Path, default=None, help="manifest path")
    p.add_argument("--vae", type=Path, default=None, help="VAE checkpoint")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_train_ldm)

    p = sub.add_parser("convert", help="convert a source clip to a target voice")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--ref", type=Path, action="append", required=True,
                   help="target reference wav (repeatable)")
    p.add_argument("--vae", type=Path, required=True)
    p.add_argument("--ldm", type=Path, required=True)
    p.add_argument("--w", type=float, default=None,
                   help="guidance weight (default: training config value)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="run conversion trials and report metrics")
    p.add_argument("--data", type=Path, default=None, help="manifest path")
    p.add_argument("--vae", type=Path, required=True)
    p.add_argument("--ldm", type=Path, required=True)
    p.add_argument("--scenario", choices=["seen", "unseen", "both"],
                   default="both")
    p.add_argument("--w", type=float, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LatentSingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
