"""Command-line entry points: preprocess, train, predict, evaluate.

Exit codes: 0 success, 2 config/validation failure, 3 per-case failures
(the run continued for the other cases).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import infer_eval, preprocess, report, train as train_mod
from .config import ConfigError, RunConfig, load_run_config
from .labelset import LabelSetError
from .volume_io import (
    ManifestError,
    VolumeIOError,
    load_case,
    load_manifest,
    read_label_volume,
    read_volume,
    write_volume,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _load_config(config_path, output, seed, members, no_tta) -> RunConfig:
    overrides = {}
    if members is not None:
        overrides["n_members"] = members
    if no_tta:
        overrides["tta"] = False
    try:
        cfg = load_run_config(config_path, overrides)
    except (ConfigError, ValueError) as exc:
        raise click.exceptions.Exit(_fail(str(exc)))
    if output is not None:
        cfg.output_dir = Path(output)
    if seed is not None:
        cfg.train = train_mod.TrainConfig(**{**cfg.train.to_dict(), "seed": seed})
    return cfg


def _fail(message: str) -> int:
    click.echo(f"error: {message}", err=True)
    return EXIT_CONFIG


@click.group()
def main():
    """Partially supervised 3D brain MRI segmentation pipeline."""


@main.command(name="preprocess")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--output", type=click.Path(), default=None, help="Output directory override.")
@click.option("--cases", default=None, help="Comma-separated case_id subset.")
def cmd_preprocess(config_path, output, cases):
    """Produce per-case patch / mask / geometry triples."""
    cfg = _load_config(config_path, output, None, None, False)
    try:
        if cfg.manifest is None:
            raise ConfigError("config needs paths.manifest for preprocessing")
        registry = cfg.registry()
        manifest = load_manifest(cfg.manifest, known_protocols=set(registry.mapping_names()))
        atlas = preprocess.AtlasCollection.load(cfg.atlas) if cfg.atlas else None
    except (ConfigError, ManifestError, LabelSetError, preprocess.PreprocessError) as exc:
        sys.exit(_fail(str(exc)))

    wanted = set(cases.split(",")) if cases else None
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    for entry in manifest:
        if wanted is not None and entry.case_id not in wanted:
            continue
        try:
            image, labels, mask = load_case(entry)
            case = preprocess.preprocess_case(
                entry.case_id,
                image,
                atlas=atlas,
                ga=entry.gestational_age,
                labels=labels,
                mask=mask,
                patch_shape=cfg.unet.patch_shape,
                target_spacing=cfg.target_spacing,
                dilation_voxels=cfg.dilation_voxels,
            )
            write_volume(case.image_patch, out_dir / f"{entry.case_id}_patch.nii.gz")
            write_volume(case.mask_patch, out_dir / f"{entry.case_id}_mask.nii.gz")
            preprocess.save_geometry(case.geometry, out_dir / f"{entry.case_id}_geometry.json")
            if case.label_patch is not None:
                write_volume(case.label_patch, out_dir / f"{entry.case_id}_labels.nii.gz")
            click.echo(f"preprocessed {entry.case_id}")
        except (VolumeIOError, preprocess.PreprocessError, RuntimeError, ValueError) as exc:
            failures.append(entry.case_id)
            click.echo(f"failed {entry.case_id}: {exc}", err=True)
    if failures:
        click.echo(f"{len(failures)} case(s) failed: {', '.join(failures)}", err=True)
        sys.exit(EXIT_PARTIAL)


@main.command(name="train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--output", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Base seed override.")
@click.option("--members", type=int, default=None, help="Number of ensemble members.")
@click.option("--patches", type=click.Path(exists=True), default=None,
              help="Directory of preprocessed patches (default: output dir).")
def cmd_train(config_path, output, seed, members, patches):
    """Train the ensemble on preprocessed patches."""
    cfg = _load_config(config_path, output, seed, members, False)
    try:
        if cfg.manifest is None:
            raise ConfigError("config needs paths.manifest for training")
        registry = cfg.registry()
        manifest = load_manifest(cfg.manifest, known_protocols=set(registry.mapping_names()))
        patch_dir = Path(patches) if patches else Path(cfg.output_dir)
        samples = _load_training_samples(manifest, patch_dir)
    except (ConfigError, ManifestError, LabelSetError, VolumeIOError) as exc:
        sys.exit(_fail(str(exc)))

    out_dir = Path(cfg.output_dir)
    ensemble = train_mod.train_ensemble(
        n_members=cfg.n_members,
        base_seed=cfg.train.seed,
        config=cfg.train,
        samples=samples,
        registry=registry,
        unet_config=cfg.unet,
        loss_config=cfg.loss,
        augment_config=cfg.augment,
        output_dir=out_dir,
        device=cfg.device(),
    )
    for member in ensemble["members"]:
        if member["status"] == "ok":
            record_path = out_dir / f"member_{member['member']:02d}_record.json"
            if record_path.exists():
                with open(record_path) as f:
                    rec = train_mod.RunRecord(**json.load(f))
                report.render_run(rec, out_dir, run_name=f"member_{member['member']:02d}")
    failed = [m for m in ensemble["members"] if m["status"] != "ok"]
    click.echo(
        f"trained {len(ensemble['members']) - len(failed)}/{len(ensemble['members'])} members; "
        f"manifest at {out_dir / 'ensemble.json'}"
    )
    if failed:
        sys.exit(EXIT_PARTIAL)


def _load_training_samples(manifest, patch_dir: Path):
    samples = []
    for entry in manifest:
        patch_path = patch_dir / f"{entry.case_id}_patch.nii.gz"
        labels_path = patch_dir / f"{entry.case_id}_labels.nii.gz"
        if not patch_path.exists():
            raise VolumeIOError(f"missing preprocessed patch: {patch_path}")
        if not labels_path.exists():
            raise VolumeIOError(f"missing preprocessed labels: {labels_path}")
        image = read_volume(patch_path)
        labels = read_label_volume(labels_path)
        samples.append(
            train_mod.TrainingSample(
                case_id=entry.case_id,
                image=image.data,
                labels=labels.data,
                mapping_name=entry.protocol_id,
            )
        )
    return samples


@main.command(name="predict")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--output", type=click.Path(), default=None)
@click.option("--no-tta", is_flag=True, default=False, help="Disable flip averaging.")
@click.option("--cases", default=None, help="Comma-separated case_id subset.")
@click.option("--patches", type=click.Path(exists=True), default=None,
              help="Directory of preprocessed patches (default: output dir).")
def cmd_predict(config_path, output, no_tta, cases, patches):
    """Predict native-space label volumes for preprocessed cases."""
    cfg = _load_config(config_path, output, None, None, no_tta)
    try:
        if cfg.manifest is None:
            raise ConfigError("config needs paths.manifest for prediction")
        registry = cfg.registry()
        manifest = load_manifest(cfg.manifest, known_protocols=set(registry.mapping_names()))
        ensemble_path = cfg.ensemble_manifest or Path(cfg.output_dir) / "ensemble.json"
        ensemble = infer_eval.EnsembleManifest.load(ensemble_path)
        nets = ensemble.load_networks()
    except (ConfigError, ManifestError, LabelSetError, infer_eval.InferenceError) as exc:
        sys.exit(_fail(str(exc)))

    wanted = set(cases.split(",")) if cases else None
    patch_dir = Path(patches) if patches else Path(cfg.output_dir)
    out_dir = Path(cfg.output_dir) / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    order = np.argsort([str(p) for p in ensemble.checkpoints])
    nets = [nets[i] for i in order]
    for entry in manifest:
        if wanted is not None and entry.case_id not in wanted:
            continue
        try:
            geometry_path = patch_dir / f"{entry.case_id}_geometry.json"
            if not geometry_path.exists():
                raise infer_eval.InferenceError(
                    f"missing geometry sidecar for {entry.case_id}: expected {geometry_path}"
                )
            geometry = preprocess.load_geometry(geometry_path)
            patch = read_volume(patch_dir / f"{entry.case_id}_patch.nii.gz")
            native = read_volume(entry.image_path)
            probs = infer_eval.ensemble_predict(nets, patch.data, tta=cfg.tta)
            labels = infer_eval.postprocess(probs, geometry, native)
            write_volume(labels, out_dir / f"{entry.case_id}_pred.nii.gz")
            click.echo(f"predicted {entry.case_id}")
        except (VolumeIOError, preprocess.PreprocessError, infer_eval.InferenceError) as exc:
            failures.append(entry.case_id)
            click.echo(f"failed {entry.case_id}: {exc}", err=True)
    if failures:
        click.echo(f"{len(failures)} case(s) failed: {', '.join(failures)}", err=True)
        sys.exit(EXIT_PARTIAL)


@main.command(name="evaluate")
@click.option("--pred-dir", required=True, type=click.Path(exists=True))
@click.option("--gt-dir", required=True, type=click.Path(exists=True))
@click.option("--output", type=click.Path(), default="evaluation")
@click.option("--protocol", default="feta", help="Protocol name for class definitions.")
@click.option("--labelsets", type=click.Path(exists=True), default=None,
              help="Extra labelset config file.")
def cmd_evaluate(pred_dir, gt_dir, output, protocol, labelsets):
    """Per-class Dice tables, summary, and figure for paired label volumes."""
    from .labelset import builtin_registry, load_labelset_config

    registry = builtin_registry()
    if labelsets:
        load_labelset_config(labelsets, registry)
    try:
        proto = registry.protocol(protocol)
    except LabelSetError as exc:
        sys.exit(_fail(str(exc)))

    try:
        predictions = _collect_labels(Path(pred_dir), suffix="_pred")
        ground_truths = _collect_labels(Path(gt_dir), suffix="_gt")
        if not predictions and not ground_truths:
            raise infer_eval.InferenceError("no cases found in either directory")
        rep = infer_eval.evaluate_cases(predictions, ground_truths, proto)
    except (VolumeIOError, infer_eval.InferenceError) as exc:
        sys.exit(_fail(str(exc)))

    paths = report.render_evaluation(rep, output)
    click.echo(open(paths["summary"]).read())
    click.echo(f"report written to {Path(output)}")
    if rep.unpaired:
        click.echo(f"unpaired cases: {', '.join(rep.unpaired)}", err=True)
        sys.exit(EXIT_PARTIAL)


def _collect_labels(directory: Path, suffix: str) -> dict:
    out = {}
    for path in sorted(directory.glob("*.nii*")):
        name = path.name
        for ext in (".nii.gz", ".nii"):
            if name.endswith(ext):
                name = name[: -len(ext)]
                break
        if name.endswith(suffix):
            name = name[: -len(suffix)]
        out[name] = read_label_volume(path)
    return out


if __name__ == "__main__":
    main()
