"""Command-line experiment orchestration.

Verbs: train, decode, interpret, ablate, datagen, report. Exit codes:
0 success, 2 configuration error, 3 runtime failure. Every command writes
under a run-stamped directory derived from the config hash, so identical
config + seed reruns produce byte-identical artifacts in the same place.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import figures
from .config import ExperimentConfig, load_config, save_config_snapshot
from .errors import CheckpointError, ConfigError, ValidationError
from .ibbi import (
    contribution_series,
    export_contribution_csv,
    export_partition_csv,
    roi_attention_map,
)
from .metrics import METRIC_COLUMNS, MetricReport, compute_report
from .pipeline import (
    DatasetBundle,
    build_dataset,
    build_model,
    decode_samples,
    fit_encoder_for,
    metric_extractors,
    roi_parcel_ids_by_level,
)
from .sampler import SampleConfig, sample
from .seeds import stable_seed
from .storage import (
    save_ground_truth,
    save_scenes,
    write_atlas_manifest,
    write_response_archive,
)
from .trace import AttentionTrace
from .training import load_checkpoint, train

ABLATIONS = ("token_dropout", "linear_mapper", "parcels_p", "dim_f", "n_candidates", "roi_masking")


def _image_shape(config: ExperimentConfig) -> tuple[int, int, int]:
    return (3, config.dataset.resolution, config.dataset.resolution)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_datagen(config: ExperimentConfig, out_dir: Path, base_dir: Optional[Path]) -> None:
    if config.dataset.kind != "synthetic":
        raise ConfigError("dataset.kind: datagen requires 'synthetic'")
    bundle = build_dataset(config, base_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_atlas_manifest(bundle.atlas_full, out_dir / "atlas.tsv")
    save_scenes(bundle.train_scenes, out_dir / "train_scenes.npz")
    save_scenes(bundle.test_scenes, out_dir / "test_scenes.npz")
    write_response_archive(bundle.train_samples_full, out_dir / "train_responses.bin")
    write_response_archive(bundle.test_samples_full, out_dir / "test_responses.bin")
    if bundle.truth is not None:
        save_ground_truth(bundle.truth, out_dir / "ground_truth.npz")
    save_config_snapshot(config, out_dir / "config_snapshot.yaml")
    print(f"dataset written to {out_dir}")


def cmd_train(config: ExperimentConfig, out_dir: Path, base_dir: Optional[Path]) -> None:
    bundle = build_dataset(config, base_dir)
    model, maps, sched = build_model(config, bundle.atlas)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config_snapshot(config, out_dir / "config_snapshot.yaml")
    result = train(
        model,
        maps,
        bundle.train_images(),
        bundle.train_responses(),
        config.train,
        sched,
        out_dir,
    )
    figures.loss_curve_figure(result.losses, out_dir / "loss_curve.png")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss curve: {result.loss_curve_path} ({result.steps_run} steps)")


def _load_checkpoint_for(config: ExperimentConfig, checkpoint: Optional[str], bundle: DatasetBundle):
    if checkpoint is None:
        raise ConfigError("decode requires --checkpoint")
    loaded = load_checkpoint(checkpoint)
    if loaded.maps.num_parcels != bundle.atlas.size or loaded.maps.v_max != bundle.atlas.v_max:
        raise CheckpointError(
            f"checkpoint was trained for {loaded.maps.num_parcels} parcels (v_max {loaded.maps.v_max}), "
            f"config dataset has {bundle.atlas.size} (v_max {bundle.atlas.v_max})"
        )
    return loaded


def cmd_decode(config: ExperimentConfig, out_dir: Path, base_dir: Optional[Path], checkpoint: Optional[str]) -> None:
    bundle = build_dataset(config, base_dir)
    loaded = _load_checkpoint_for(config, checkpoint, bundle)
    encoder_model = fit_encoder_for(config, bundle)

    result = decode_samples(
        loaded.model,
        loaded.maps,
        loaded.sched,
        bundle.test_samples,
        encoder_model,
        base_seed=config.seed,
        steps=config.sample.steps,
        candidates=config.sample.candidates,
        image_shape=_image_shape(config),
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    images_dir = out_dir / "images"
    traces_dir = out_dir / "traces"
    images_dir.mkdir(exist_ok=True)
    traces_dir.mkdir(exist_ok=True)
    _write_csv(
        out_dir / "ranking.csv",
        ["sample_id", "candidate_seed", "score", "rank", "selected"],
        result.ranking_rows,
    )
    with torch.no_grad():
        tokens = loaded.maps(torch.from_numpy(bundle.test_responses()))
    for i, brain_sample in enumerate(bundle.test_samples):
        figures.save_image_png(result.selected_images[i], images_dir / f"{brain_sample.stimulus_id}.png")
        cfg = SampleConfig(steps=config.sample.steps, seed=result.selected_seeds[i])
        _, trace = sample(loaded.model, loaded.sched, tokens[i], cfg, _image_shape(config), capture=True)
        trace.save(traces_dir / f"{brain_sample.stimulus_id}.npz")
    save_config_snapshot(config, out_dir / "config_snapshot.yaml")
    print(f"decoded {len(bundle.test_samples)} samples -> {out_dir}")


def _logged_timesteps(trace: AttentionTrace, count: int) -> list[int]:
    ts = trace.timesteps
    if len(ts) <= count:
        return ts
    idx = np.round(np.linspace(0, len(ts) - 1, count)).astype(int)
    return [ts[i] for i in idx]


def cmd_interpret(config: ExperimentConfig, out_dir: Path, base_dir: Optional[Path], traces_dir: Optional[str]) -> None:
    if traces_dir is None:
        raise ConfigError("interpret requires --traces")
    traces_path = Path(traces_dir)
    if not traces_path.is_dir():
        raise ConfigError(f"--traces: not a directory: {traces_dir}")
    trace_files = sorted(traces_path.glob("*.npz"))
    if not trace_files:
        raise ConfigError(f"--traces: no trace dumps (*.npz) found in {traces_dir}")
    bundle = build_dataset(config, base_dir)
    atlas = bundle.atlas
    labels = atlas.roi_labels()
    out_dir.mkdir(parents=True, exist_ok=True)
    if not labels:
        print("notice: atlas has no ROI labels; emitting contribution outputs only, heatmaps skipped")

    for trace_file in trace_files:
        trace = AttentionTrace.load(trace_file)
        if trace.num_parcels != atlas.size:
            raise ValidationError(
                f"{trace_file.name}: trace has {trace.num_parcels} parcels, atlas has {atlas.size}"
            )
        stem = trace_file.stem
        result = contribution_series(trace)
        export_contribution_csv(result, atlas, out_dir / f"{stem}_contributions.csv")
        export_partition_csv(result, atlas, out_dir / f"{stem}_partitions.csv")
        figures.contribution_bar_chart(result, atlas, out_dir / f"{stem}_contribution_bar.png")
        figures.hemisphere_scatter(result, atlas, out_dir / f"{stem}_hemispheres.png", seed=config.seed)
        if labels:
            logged = _logged_timesteps(trace, config.sample.interpret_timesteps)
            maps_by_roi = {}
            for label in labels:
                indices = [atlas.index_of(pid) for pid in atlas.parcel_ids_for_label(label)]
                maps_by_roi[label] = [
                    roi_attention_map(trace, indices, t, (config.dataset.resolution,) * 2) for t in logged
                ]
            image_path = traces_path.parent / "images" / f"{stem}.png"
            overlay = figures.load_image_png(image_path) if image_path.exists() else None
            figures.roi_heatmap_grid(maps_by_roi, out_dir / f"{stem}_roi_heatmaps.png", image=overlay)
    print(f"interpretability outputs for {len(trace_files)} trace(s) -> {out_dir}")


def _evaluate(config, bundle, encoder_model, recons: np.ndarray) -> MetricReport:
    low, high = metric_extractors(config, bundle, encoder_model)
    return compute_report(recons, bundle.test_images(), low, high)


def _train_variant(config: ExperimentConfig, bundle, *, token_dropout=True, shared_maps=False, tmp_dir=None):
    variant_train = dataclasses.replace(config.train, token_dropout=token_dropout)
    model, maps, sched = build_model(config, bundle.atlas, shared_maps=shared_maps)
    train(model, maps, bundle.train_images(), bundle.train_responses(), variant_train, sched, tmp_dir)
    return model, maps, sched


def cmd_ablate(config: ExperimentConfig, out_dir: Path, base_dir: Optional[Path], which: Optional[str]) -> None:
    if which not in ABLATIONS:
        raise ConfigError(f"unknown ablation {which!r}; valid names: {', '.join(ABLATIONS)}")
    bundle = build_dataset(config, base_dir)
    encoder_model = fit_encoder_for(config, bundle)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = out_dir / "work"
    rows: list[tuple[str, MetricReport]] = []

    def decode_with(model, maps, sched, candidates=None, mask_ids=None) -> np.ndarray:
        return decode_samples(
            model,
            maps,
            sched,
            bundle.test_samples,
            encoder_model,
            base_seed=config.seed,
            steps=config.sample.steps,
            candidates=candidates or config.sample.candidates,
            image_shape=_image_shape(config),
            mask_parcel_ids=mask_ids,
            atlas=bundle.atlas,
        ).selected_images

    if which == "token_dropout":
        for label, dropout in (("with-td", True), ("without-td", False)):
            model, maps, sched = _train_variant(config, bundle, token_dropout=dropout, tmp_dir=work / label)
            rows.append((label, _evaluate(config, bundle, encoder_model, decode_with(model, maps, sched))))
    elif which == "linear_mapper":
        for label, shared in (("parcel-wise", False), ("shared-map", True)):
            model, maps, sched = _train_variant(config, bundle, shared_maps=shared, tmp_dir=work / label)
            rows.append((label, _evaluate(config, bundle, encoder_model, decode_with(model, maps, sched))))
    elif which == "parcels_p":
        for k in config.ablate.parcel_counts:
            sub_config = dataclasses.replace(config, k=int(k))
            sub_bundle = build_dataset(sub_config, base_dir)
            sub_encoder = fit_encoder_for(sub_config, sub_bundle)
            model, maps, sched = build_model(sub_config, sub_bundle.atlas)
            train(model, maps, sub_bundle.train_images(), sub_bundle.train_responses(), sub_config.train, sched, work / f"p{2 * k}")
            recons = decode_samples(
                model, maps, sched, sub_bundle.test_samples, sub_encoder,
                base_seed=config.seed, steps=config.sample.steps, candidates=config.sample.candidates,
                image_shape=_image_shape(config),
            ).selected_images
            rows.append((f"p={2 * k}", _evaluate(sub_config, sub_bundle, sub_encoder, recons)))
    elif which == "dim_f":
        for f_dim in config.ablate.token_dims:
            sub_config = dataclasses.replace(config, model=dataclasses.replace(config.model, token_dim=int(f_dim)))
            model, maps, sched = _train_variant(sub_config, bundle, tmp_dir=work / f"f{f_dim}")
            rows.append((f"f={f_dim}", _evaluate(config, bundle, encoder_model, decode_with(model, maps, sched))))
    elif which == "n_candidates":
        model, maps, sched = _train_variant(config, bundle, tmp_dir=work / "base")
        for count in config.ablate.candidate_counts:
            recons = decode_with(model, maps, sched, candidates=int(count))
            rows.append((f"candidates={count}", _evaluate(config, bundle, encoder_model, recons)))
    elif which == "roi_masking":
        model, maps, sched = _train_variant(config, bundle, tmp_dir=work / "base")
        by_level = roi_parcel_ids_by_level(bundle.atlas)
        for label, mask_ids in (("no-masking", None), ("low-level-masking", by_level["low"]), ("high-level-masking", by_level["high"])):
            if mask_ids is not None and not mask_ids:
                print(f"notice: no parcels for {label}; skipping row")
                continue
            recons = decode_with(model, maps, sched, mask_ids=mask_ids)
            rows.append((label, _evaluate(config, bundle, encoder_model, recons)))

    table_rows = [[label] + [f"{report.aggregates[c]:.6f}" for c in METRIC_COLUMNS] for label, report in rows]
    _write_csv(out_dir / f"ablate_{which}.csv", ["condition"] + list(METRIC_COLUMNS), table_rows)
    lines = [" | ".join(["condition"] + list(METRIC_COLUMNS))]
    for row in table_rows:
        lines.append(" | ".join(str(v) for v in row))
    (out_dir / f"ablate_{which}.txt").write_text("\n".join(lines) + "\n")
    print(f"ablation {which}: {len(rows)} condition(s) -> {out_dir}")


def cmd_report(config: ExperimentConfig, out_dir: Path, base_dir: Optional[Path], decoded_dir: Optional[str]) -> None:
    if decoded_dir is None:
        raise ConfigError("report requires --decoded (a decode run directory)")
    images_dir = Path(decoded_dir) / "images"
    if not images_dir.is_dir():
        raise ConfigError(f"--decoded: no images/ directory under {decoded_dir}")
    bundle = build_dataset(config, base_dir)
    recons = []
    for scene in bundle.test_scenes:
        path = images_dir / f"{scene.stimulus_id}.png"
        if not path.exists():
            raise ValidationError(f"missing decoded image {path}")
        recons.append(figures.load_image_png(path))
    encoder_model = fit_encoder_for(config, bundle)
    report = _evaluate(config, bundle, encoder_model, np.stack(recons))
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "metrics.csv")
    table = report.render_table()
    (out_dir / "metrics.txt").write_text(table + "\n")
    print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="braindiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "decode", "interpret", "ablate", "datagen", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config YAML")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output base directory")
        p.add_argument("--checkpoint", default=None, help="trained checkpoint (.npz)")
        if name == "interpret":
            p.add_argument("--traces", default=None, help="directory of attention dumps")
        if name == "ablate":
            p.add_argument("--which", default=None, help=f"one of: {', '.join(ABLATIONS)}")
        if name == "report":
            p.add_argument("--decoded", default=None, help="decode run directory to score")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed)
        base_dir = Path(args.config).parent
        out_dir = config.run_dir(args.command, args.out)
        if args.command == "datagen":
            cmd_datagen(config, out_dir, base_dir)
        elif args.command == "train":
            cmd_train(config, out_dir, base_dir)
        elif args.command == "decode":
            cmd_decode(config, out_dir, base_dir, args.checkpoint)
        elif args.command == "interpret":
            cmd_interpret(config, out_dir, base_dir, args.traces)
        elif args.command == "ablate":
            cmd_ablate(config, out_dir, base_dir, args.which)
        elif args.command == "report":
            cmd_report(config, out_dir, base_dir, args.decoded)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
