"""Objective evaluation: trial construction, singer similarity (speaker
embedding cosine), F0 Pearson correlation, JSON reports, and bar charts.

Singer similarity is measured both toward the target (the paper-style
score) and toward the source, which quantifies timbre leakage directly.
Synthetic singers have no gender, so buckets pair pitch-profile classes
(L/H) instead of M/F; ingested corpora without recognizable classes fall
into a single U2U bucket.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .audio import AudioClip, load_wav, resample
from .checkpoint import Checkpoint
from .conditioning import SpeakerEncoder, speaker_embed
from .config import Config, derive_seed
from .errors import ValidationError
from .pipeline import ConversionRequest, convert_prepared
from .pitch import extract_f0, fpc
from .synthdata import DatasetManifest, ManifestEntry, pitch_class_of


@dataclass
class Trial:
    trial_id: str
    source_path: str
    source_singer: str
    target_singer: str
    ref_paths: list[str]
    bucket: str
    scenario: str


@dataclass
class TrialResult:
    trial_id: str
    source_singer: str
    target_singer: str
    bucket: str
    scenario: str
    ssim_to_target: float | None = None
    ssim_to_source: float | None = None
    fpc: float | None = None
    error: str | None = None


def _bucket(src_singer: str, tgt_singer: str) -> str:
    codes = {"low": "L", "high": "H"}
    a = pitch_class_of(src_singer)
    b = pitch_class_of(tgt_singer)
    if a is None or b is None:
        return "U2U"
    return f"{codes[a]}2{codes[b]}"


def build_pairs(manifest: DatasetManifest, scenario: str) -> list[Trial]:
    """Cross-validation pairing: every test clip of the scenario's split
    is a source, every other singer in the split is a target, and the
    target's held-out clips are the references."""
    if scenario not in ("seen", "unseen"):
        raise ValidationError(f"unknown scenario {scenario!r}")
    split = "test-seen" if scenario == "seen" else "test-unseen"
    entries = sorted(manifest.by_split(split), key=lambda e: e.path)
    singers = sorted({e.singer_id for e in entries})
    if len(singers) < 2:
        raise ValidationError(
            f"scenario {scenario!r} needs at least 2 singers with '{split}' clips")
    refs_of = {s: [e.path for e in entries if e.singer_id == s] for s in singers}
    trials = []
    for entry in entries:
        for target in singers:
            if target == entry.singer_id:
                continue
            trials.append(Trial(
                trial_id=f"{scenario}-{len(trials):04d}",
                source_path=entry.path,
                source_singer=entry.singer_id,
                target_singer=target,
                ref_paths=refs_of[target],
                bucket=_bucket(entry.singer_id, target),
                scenario=scenario,
            ))
    return trials


def ssim(converted: AudioClip, target_refs: list[AudioClip],
         embedder: SpeakerEncoder, cfg: Config) -> float:
    """Cosine similarity between the converted clip's speaker embedding
    and the pooled reference embedding."""
    e_conv = speaker_embed([converted], embedder, cfg).values
    e_tar = speaker_embed(target_refs, embedder, cfg).values
    return float(torch.dot(e_conv, e_tar))


def _aggregate(rows: list[TrialResult]) -> dict:
    ok = [r for r in rows if r.error is None]
    out = {"count": len(rows), "failures": len(rows) - len(ok)}
    for metric in ("ssim_to_target", "ssim_to_source", "fpc"):
        vals = np.array([getattr(r, metric) for r in ok], dtype=np.float64)
        out[metric] = ({"mean": float(vals.mean()), "std": float(vals.std()),
                        "count": int(vals.size)} if vals.size else
                       {"mean": None, "std": None, "count": 0})
    return out


def aggregate_report(rows: list[TrialResult]) -> dict:
    agg: dict = {"overall": _aggregate(rows)}
    for scenario in sorted({r.scenario for r in rows}):
        sc_rows = [r for r in rows if r.scenario == scenario]
        agg[scenario] = _aggregate(sc_rows)
        agg[scenario]["buckets"] = {
            b: _aggregate([r for r in sc_rows if r.bucket == b])
            for b in sorted({r.bucket for r in sc_rows})
        }
    return agg


@dataclass
class MetricsReport:
    meta: dict
    trials: list[TrialResult]
    aggregates: dict = field(default_factory=dict)
    # reserved for externally collected listening scores
    nmos: float | None = None
    smos: float | None = None

    def to_json(self) -> str:
        payload = {"meta": self.meta,
                   "trials": [asdict(t) for t in self.trials],
                   "aggregates": self.aggregates,
                   "nmos": self.nmos, "smos": self.smos}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        data = json.loads(Path(path).read_text())
        return cls(meta=data["meta"],
                   trials=[TrialResult(**t) for t in data["trials"]],
                   aggregates=data["aggregates"],
                   nmos=data.get("nmos"), smos=data.get("smos"))


def evaluate(trials: list[Trial], manifest: DatasetManifest,
             vae_ckpt: Checkpoint, ldm_ckpt: Checkpoint,
             w: float | None = None, seed: int | None = None,
             max_trials: int = 0) -> MetricsReport:
    """Run the conversion pipeline per trial and score it.

    ssim is computed against both target references and the source clip;
    fpc compares the commanded (shifted) contour with the contour
    re-extracted from the converted audio. Per-trial failures are
    recorded, not fatal.
    """
    from .diffusion import load_denoiser
    from .vae import load_vae_system

    cfg: Config = vae_ckpt.config
    if vae_ckpt.config_hash != ldm_ckpt.config_hash:
        raise ValidationError(
            "VAE and LDM checkpoints were trained under different configs")
    if w is None:
        w = float(ldm_ckpt.extras.get("w", cfg.guidance_w))
    if seed is None:
        seed = cfg.seed
    if max_trials and len(trials) > max_trials:
        keep = np.linspace(0, len(trials) - 1, max_trials).round().astype(int)
        trials = [trials[i] for i in sorted(set(keep.tolist()))]
    system = load_vae_system(vae_ckpt)
    denoiser = load_denoiser(ldm_ckpt)
    latent_scale = float(ldm_ckpt.extras["latent_scale"])
    rows = []
    for trial in trials:
        row = TrialResult(trial_id=trial.trial_id,
                          source_singer=trial.source_singer,
                          target_singer=trial.target_singer,
                          bucket=trial.bucket, scenario=trial.scenario)
        try:
            source = resample(
                load_wav(manifest.base_dir / trial.source_path), cfg.sample_rate)
            refs = [resample(load_wav(manifest.base_dir / p), cfg.sample_rate)
                    for p in trial.ref_paths]
            req = ConversionRequest(
                source=source, references=refs, w=w,
                seed=derive_seed(seed, f"trial:{trial.trial_id}"))
            result = convert_prepared(req, system, denoiser, latent_scale, cfg)
            row.ssim_to_target = ssim(result.audio, refs, system.speaker, cfg)
            row.ssim_to_source = ssim(result.audio, [source], system.speaker, cfg)
            f0_out = extract_f0(result.audio, cfg.f0_min, cfg.f0_max,
                                hop=cfg.hop, threshold=cfg.yin_threshold)
            row.fpc = fpc(result.shifted_f0, f0_out)
        except Exception as exc:  # per-trial isolation
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    meta = {"config_hash": vae_ckpt.config_hash, "seed": seed, "w": w,
            "n_trials": len(rows)}
    return MetricsReport(meta=meta, trials=rows,
                         aggregates=aggregate_report(rows))


def plot_report(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """Grouped per-bucket bar charts, one file per scenario plus an
    overall chart. File names are deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not report.trials:
        raise ValidationError("cannot plot an empty report")
    metrics = ("ssim_to_target", "ssim_to_source", "fpc")
    files = []
    scenarios = [k for k in sorted(report.aggregates) if k != "overall"]
    for scenario in scenarios:
        buckets = report.aggregates[scenario].get("buckets", {})
        names = sorted(buckets)
        if not names:
            continue
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.8 / len(metrics)
        xs = np.arange(len(names))
        for i, metric in enumerate(metrics):
            means = [buckets[b][metric]["mean"] for b in names]
            means = [m if m is not None else 0.0 for m in means]
            ax.bar(xs + i * width, means, width, label=metric)
        ax.set_xticks(xs + width * (len(metrics) - 1) / 2)
        ax.set_xticklabels(names)
        ax.set_title(f"{scenario} scenario")
        ax.legend(fontsize=8)
        ax.set_ylim(-1, 1)
        path = out / f"metrics_{scenario}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        files.append(path)
    return files
