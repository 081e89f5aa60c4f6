"""Command-line interface: simulate, train, synth, eval, ablate, plot.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure. All outputs
go under a user-specified run directory; DEFORMGAN_DATA_ROOT supplies a
default dataset root.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import click
import numpy as np

from . import deform_sim, metrics, plotting, training
from .config import ConfigError, ExperimentConfig
from .imaging import (
    DatasetError,
    Image2D,
    foreground_mask,
    load_dataset,
    load_image,
    save_image,
    write_manifest,
)
from .warp import save_field

SLICE_ID_RE = re.compile(r"^(?P<subject>.+)_s(?P<slice>\d+)$")


def _resolve_data(path: str | None) -> Path:
    if path is None:
        root = click.get_current_context().obj.get("data_root")
        if root is None:
            raise click.UsageError("no --data given and DEFORMGAN_DATA_ROOT is not set")
        return Path(root) / "manifest.json"
    return Path(path)


@click.group()
@click.option("--data-root", envvar="DEFORMGAN_DATA_ROOT", default=None,
              help="Default dataset root (env DEFORMGAN_DATA_ROOT).")
@click.pass_context
def main(ctx, data_root):
    """Deformation-aware adversarial synthesis toolkit."""
    ctx.obj = {"data_root": data_root}


@main.command()
@click.option("--data", type=click.Path(), default=None, help="Input manifest of aligned pairs.")
@click.option("--level", type=click.IntRange(1, 6), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def simulate(data, level, seed, out):
    """Write a misaligned copy of an aligned dataset (plus fields + manifest)."""
    try:
        manifest = load_dataset(_resolve_data(data))
        spec = deform_sim.level_spec(level, seed=seed)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        rng = training.seed_stream(seed, "simulate")
        entries = []
        for rec in manifest.pairs:
            pair = manifest.load_pair(rec)
            misaligned, field = deform_sim.apply_misalignment(pair, spec, rng)
            sid = rec.sample_id
            names = {
                "source": f"{sid}_src.raw",
                "target": f"{sid}_tgt.raw",
                "aligned_target": f"{sid}_aligned.raw",
            }
            save_image(misaligned.source, out_dir / names["source"])
            save_image(misaligned.target, out_dir / names["target"])
            save_image(misaligned.aligned_target, out_dir / names["aligned_target"])
            save_field(field, out_dir / f"{sid}_field.bin")
            entries.append({"id": sid, **names})
        write_manifest(
            out_dir / "manifest.json",
            entries,
            modality_names=manifest.modality_names,
            split=manifest.split,
            normalization=manifest.normalization,
        )
        meta = {"level": level, "level_name": spec.level_name, "seed": seed,
                "control_spacing": list(spec.control_spacing),
                "magnitude_range": list(spec.magnitude_range)}
        (out_dir / "simulation.json").write_text(json.dumps(meta, indent=2))
        click.echo(f"wrote {len(entries)} misaligned pairs to {out_dir}")
    except (DatasetError, ValueError) as exc:
        raise click.ClickException(str(exc))


def _load_experiment(config, preset, overrides) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(config, overrides)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    if preset is not None:
        cfg.set("train", "preset", preset)
    return cfg


@main.command()
@click.option("--config", type=click.Path(exists=False), default=None)
@click.option("--preset", type=click.Choice(sorted(training.PRESETS)), default=None)
@click.option("--data", type=click.Path(), default=None, help="Training manifest.")
@click.option("--val-data", type=click.Path(), default=None, help="Validation manifest.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--resume", type=click.Path(), default=None, help="Checkpoint directory to resume.")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Config override, repeatable.")
def train(config, preset, data, val_data, out, resume, overrides):
    """Train a model and log losses, validation curve and checkpoints."""
    parsed = {}
    for item in overrides:
        key, _, value = item.partition("=")
        parsed[key] = value
    cfg = _load_experiment(config, preset, parsed)
    if data is not None:
        cfg.set("data", "train_manifest", data)
    if val_data is not None:
        cfg.set("data", "val_manifest", val_data)
    manifest_path = cfg.get("data", "train_manifest") or None
    try:
        manifest = load_dataset(_resolve_data(manifest_path))
        val_path = cfg.get("data", "val_manifest")
        val_manifest = load_dataset(val_path) if val_path else None
        tcfg = training.TrainConfig.from_experiment(cfg)
        run_dir = training.train(tcfg, manifest, out, val_manifest=val_manifest,
                                 resume_from=resume, experiment=cfg)
        plotting.save_convergence_curve(run_dir / "validation.csv", run_dir / "convergence.png")
        click.echo(f"run complete: {run_dir}")
    except (DatasetError, training.TrainingError) as exc:
        raise click.ClickException(str(exc))


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(), default=None)
@click.option("--direction", type=click.Choice(["x2y", "y2x"]), default="x2y", show_default=True)
@click.option("--fields/--no-fields", default=False, help="Also emit forward fields.")
@click.option("--out", type=click.Path(), required=True)
def synth(checkpoint, data, direction, fields, out):
    """Generator-only inference over a dataset; predictions stay in source space."""
    try:
        manifest = load_dataset(_resolve_data(data))
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        n = 0
        for sid, pred, field in training.synthesize(checkpoint, manifest, direction, fields):
            save_image(Image2D(np.clip(pred, -1, 1)), out_dir / f"{sid}.raw")
            if field is not None:
                save_field(field, out_dir / f"{sid}_field.bin")
            n += 1
        click.echo(f"synthesized {n} images to {out_dir}")
    except (DatasetError, training.TrainingError) as exc:
        raise click.ClickException(str(exc))


def _evaluate(manifest, pred_lookup, data_range, background_level, background_tol):
    report = metrics.MetricsReport(config={
        "data_range": data_range,
        "background_level": background_level,
        "background_tolerance": background_tol,
    })
    volumes: dict[str, list] = {}
    for rec in manifest.pairs:
        pair = manifest.load_pair(rec)
        ref = pair.aligned_target if pair.aligned_target is not None else pair.target
        pred = pred_lookup(rec.sample_id)
        mask = foreground_mask(ref, background_level, background_tol)
        if not mask.any():
            continue
        row = {
            "nmae": metrics.nmae(pred, ref.values, mask),
            "psnr": metrics.psnr(pred, ref.values, mask, data_range),
        }
        if min(ref.shape) >= metrics.SSIM_WINDOW:
            row["ssim"] = metrics.ssim(pred, ref.values, mask, data_range)
        report.add(rec.sample_id, **row)
        m = SLICE_ID_RE.match(rec.sample_id)
        if m:
            volumes.setdefault(m.group("subject"), []).append((int(m.group("slice")), pred, ref, mask))
    return report, volumes


def _volume_report(volumes, data_range) -> metrics.MetricsReport:
    from .imaging import denormalize

    report = metrics.MetricsReport()
    for subject, slices in sorted(volumes.items()):
        slices.sort(key=lambda t: t[0])
        pred = np.stack([s[1] for s in slices])
        ref = np.stack([s[2].values for s in slices])
        mask = np.stack([s[3] for s in slices])
        lo, hi = slices[0][2].intensity_scale
        phys_range = hi - lo
        pred_phys = (pred + 1.0) * 0.5 * phys_range + lo
        ref_phys = np.stack([denormalize(s[2]) for s in slices])
        row = {
            "mae3d": metrics.mae3d(pred_phys, ref_phys, mask),
            "psnr3d": metrics.psnr3d(pred, ref, mask, data_range),
            "ssim3d": metrics.ssim3d(pred, ref, mask, data_range),
        }
        report.add(subject, **row)
    return report


def _write_reports(report, out_dir: Path, prefix: str = "metrics") -> dict:
    rows = report.per_sample
    names = report.metric_names()
    with open(out_dir / f"{prefix}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample_id"] + names)
        writer.writeheader()
        writer.writerows(rows)
    summary = report.aggregate()
    (out_dir / "summary.json").write_text(json.dumps(
        {"metrics": summary, "config": report.config}, indent=2))
    return summary


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--pred", type=click.Path(exists=True), default=None,
              help="Directory of predicted images named <sample_id>.raw/.png (skips inference).")
@click.option("--data", type=click.Path(), default=None)
@click.option("--direction", type=click.Choice(["x2y", "y2x"]), default="x2y", show_default=True)
@click.option("--data-range", type=float, default=2.0, show_default=True)
@click.option("--background-level", type=float, default=-1.0, show_default=True)
@click.option("--background-tol", type=float, default=1e-3, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def eval_cmd(checkpoint, pred, data, direction, data_range, background_level, background_tol, out):
    """Score predictions against the aligned reference; writes metrics.csv,
    summary.json and an overview figure."""
    if (checkpoint is None) == (pred is None):
        raise click.UsageError("provide exactly one of --checkpoint or --pred")
    try:
        manifest = load_dataset(_resolve_data(data))
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if pred is not None:
            pred_dir = Path(pred)

            def lookup(sid):
                for ext in (".raw", ".png"):
                    p = pred_dir / f"{sid}{ext}"
                    if p.exists():
                        return load_image(p).values
                raise DatasetError(f"no prediction found for sample {sid} in {pred_dir}")
        else:
            preds = {
                sid: arr for sid, arr, _ in training.synthesize(checkpoint, manifest, direction)
            }

            def lookup(sid):
                return preds[sid]

        report, volumes = _evaluate(manifest, lookup, data_range, background_level, background_tol)
        summary = _write_reports(report, out_dir)
        if volumes and all(len(v) > 1 for v in volumes.values()):
            vol_report = _volume_report(volumes, data_range)
            with open(out_dir / "metrics3d.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=["sample_id"] + vol_report.metric_names())
                writer.writeheader()
                writer.writerows(vol_report.per_sample)
        if summary:
            plotting.save_metrics_overview(summary, out_dir / "overview.png")
        click.echo(f"evaluated {len(report.per_sample)} samples; summary in {out_dir}")
    except (DatasetError, metrics.MetricError, training.TrainingError) as exc:
        raise click.ClickException(str(exc))


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--data", type=click.Path(), default=None)
@click.option("--val-data", type=click.Path(), default=None)
@click.option("--only", default=None, help="Comma-separated preset subset, e.g. 'B,F'.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE")
def ablate(config, data, val_data, only, out, overrides):
    """Run the ablation presets (A-F, G1, G2) and emit a comparison table."""
    presets = ["A", "B", "C", "D", "E", "F", "G1", "G2"]
    if only:
        requested = [p.strip() for p in only.split(",") if p.strip()]
        unknown = [p for p in requested if p not in presets]
        if unknown:
            raise click.UsageError(f"unknown presets: {', '.join(unknown)}")
        presets = requested
    parsed = {}
    for item in overrides:
        key, _, value = item.partition("=")
        parsed[key] = value
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        for preset in presets:
            cfg = _load_experiment(config, preset, parsed)
            if data is not None:
                cfg.set("data", "train_manifest", data)
            manifest = load_dataset(_resolve_data(cfg.get("data", "train_manifest") or None))
            val_path = val_data or cfg.get("data", "val_manifest")
            val_manifest = load_dataset(val_path) if val_path else None
            tcfg = training.TrainConfig.from_experiment(cfg)
            run_dir = training.train(tcfg, manifest, out_dir / preset,
                                     val_manifest=val_manifest, experiment=cfg)
            rows.append({
                "preset": preset,
                "final_nmae": training._read_last_validation(run_dir / "validation.csv"),
            })
        with open(out_dir / "comparison.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["preset", "final_nmae"])
            writer.writeheader()
            writer.writerows(rows)
        click.echo(f"ablation table with {len(rows)} rows in {out_dir / 'comparison.csv'}")
    except (DatasetError, training.TrainingError) as exc:
        raise click.ClickException(str(exc))


@main.command()
@click.option("--pred", type=click.Path(exists=True), required=True)
@click.option("--ref", type=click.Path(exists=True), required=True)
@click.option("--error-vmax", type=float, default=None,
              help="Pin the error color scale (shared across methods).")
@click.option("--out", type=click.Path(), required=True)
def plot(pred, ref, error_vmax, out):
    """Side-by-side prediction / reference / absolute-error figure."""
    try:
        pred_img = load_image(pred)
        ref_img = load_image(ref)
        path = plotting.save_comparison_figure(
            pred_img.values, ref_img.values, out, error_vmax=error_vmax
        )
        click.echo(f"figure written to {path}")
    except (DatasetError, ValueError) as exc:
        raise click.ClickException(str(exc))


if __name__ == "__main__":
    main()
