"""``cwdm`` command line: one entry point, one subcommand per workflow.

Exit codes: 0 success, 1 validation error, 2 partial failure, 3 internal error.
Every ``section.key`` of the run config is also a ``--section.key`` flag.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import ablation, plotting
from .checkpoint import CheckpointError, Registry, RegistryError, file_sha256
from .config import TOY_OVERRIDES, ConfigError, RunConfig, apply_overrides, load_config, section_fields
from .data import (
    DataError,
    MODALITIES,
    PreprocessSpec,
    generate_toy_dataset,
    load_volume,
    make_pseudo_validation,
    preprocess_volume,
    read_manifest,
    save_volume,
    scan_case,
    scan_dataset,
    write_manifest,
)
from .metrics import evaluate_split
from .sampler import CaseSettings, SamplingRequestError, synthesize_manifest
from .trainer import train, train_all

log = logging.getLogger("cwdm")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_INTERNAL = 0, 1, 2, 3
VALIDATION_ERRORS = (ConfigError, DataError, RegistryError, CheckpointError, SamplingRequestError, FileNotFoundError)


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="YAML run config")
    parent.add_argument("--toy", action="store_true", help="apply the desk-scale preset before other overrides")
    group = parent.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        for key in section_fields(type(getattr(RunConfig(), f.name))):
            group.add_argument(f"--{f.name}.{key}", dest=f"{f.name}.{key}", metavar="VALUE", default=None)
    return parent


def resolve_config(args) -> RunConfig:
    config = load_config(args.config)
    if args.toy:
        apply_overrides(config, dict(TOY_OVERRIDES))
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    apply_overrides(config, overrides)
    # keep the network's time normalisation tied to the schedule length
    if "model.timesteps" not in overrides:
        config.model.timesteps = config.schedule.T
    return config.validate()


def _settings(config: RunConfig) -> CaseSettings:
    return CaseSettings(
        seed=config.sample.seed,
        clamp=config.sample.clamp,
        profile=config.data.profile,
        ext=config.data.ext,
        preprocess=config.data.preprocess_spec(),
        use_ema=config.sample.use_ema,
        snapshot_every=config.sample.snapshot_every,
    )


def _require_dir(path, what: str) -> Path:
    if path is None or not Path(path).is_dir():
        raise ConfigError(f"{what} {path} is not a directory")
    return Path(path)


# -- subcommands -------------------------------------------------------------


def cmd_toy_data(args, config):
    records = generate_toy_dataset(args.n, tuple(args.shape), args.seed, args.out, config.data.profile, config.data.ext)
    print(f"wrote {len(records)} toy cases to {args.out}")
    return EXIT_OK


def cmd_preprocess(args, config):
    root = _require_dir(args.root or config.data.root, "dataset root")
    records = scan_dataset(root, config.data.profile)
    spec = PreprocessSpec(config.data.clip_lower_pct, config.data.clip_upper_pct)
    out = Path(args.out)
    rows = []
    for rec in records:
        for code, src in rec.modality_paths.items():
            vol = load_volume(src)
            dst = out / rec.subject_id / Path(src).name
            save_volume(dst, dataclasses.replace(vol, data=preprocess_volume(vol.data, spec)))
            rows.append([rec.subject_id, code, str(src), str(dst.relative_to(out)), file_sha256(dst)])
    config.dump(out / "resolved_config.yaml")
    tmp = out / "preprocess_manifest.tsv.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["case_id", "modality", "source", "output", "sha256"])
        writer.writerows(rows)
    tmp.replace(out / "preprocess_manifest.tsv")
    print(f"preprocessed {len(rows)} volumes from {len(records)} cases into {out}")
    return EXIT_OK


def cmd_train(args, config):
    _require_dir(config.data.root, "data.root")
    if args.resume is not None and not Path(args.resume).is_file():
        raise ConfigError(f"resume checkpoint {args.resume} not found")
    result = train(config, args.out, resume=args.resume)
    plotting.loss_curve(result.loss_log, Path(args.out) / "loss.png")
    print(f"{config.train.target}: iteration {result.iteration}, checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_train_all(args, config):
    _require_dir(config.data.root, "data.root")
    manifest, failures = train_all(config, args.out, skip_existing=args.skip_existing)
    config.dump(Path(args.out) / "resolved_config.yaml")
    print(f"registry: {manifest}")
    if failures:
        print(f"failed targets: {', '.join(failures)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_pseudoval(args, config):
    root = _require_dir(args.root or config.data.root, "dataset root")
    records = make_pseudo_validation(scan_dataset(root, config.data.profile), args.seed)
    write_manifest(records, args.out)
    print(f"wrote {len(records)} rows to {args.out}")
    return EXIT_OK


def cmd_synthesize(args, config):
    registry = Registry.read(args.registry)
    if (args.case is None) == (args.manifest is None):
        raise ConfigError("give exactly one of --case or --manifest")
    if args.case is not None:
        case = _require_dir(args.case, "case directory")
        paths = scan_case(case, config.data.profile)
        missing = [m for m in MODALITIES if m not in paths]
        if len(missing) != 1:
            raise SamplingRequestError(f"{case.name}: exactly one modality may be missing, found {len(missing)}")
        rows, root = [{"case_id": case.name, "dropped": missing[0]}], case.parent
    else:
        rows = read_manifest(args.manifest)
        if not rows:
            raise ConfigError(f"manifest {args.manifest} has no rows")
        # default: the dataset the manifest's ground truth lives in
        root = args.root or config.data.root or Path(rows[0]["ground_truth"]).parent.parent
        root = _require_dir(root, "dataset root")
    for target in sorted({r["dropped"] for r in rows}):
        registry.checkpoint_path(target)
    out = Path(args.out)
    done, failed = synthesize_manifest(rows, root, registry, out, _settings(config), config.sample.workers)
    config.dump(out / "resolved_config.yaml")
    for case_id, err in failed:
        print(f"{case_id}: {err}", file=sys.stderr)
    print(f"synthesized {len(done)} of {len(rows)} cases into {out}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_evaluate(args, config):
    crop = "cropped_224" if args.crop else config.evaluate.crop_mode
    _require_dir(args.pred, "prediction directory")
    if not Path(args.manifest).is_file():
        raise ConfigError(f"manifest {args.manifest} not found")
    report = evaluate_split(
        args.pred, args.manifest, crop, config.data.profile, config.data.preprocess_spec(), config.evaluate.workers
    )
    out = Path(args.out)
    report.write(out)
    if report.per_case:
        plotting.metrics_chart(report, out / "metrics.png")
    config.dump(out / "resolved_config.yaml")
    print(report.render_table(), end="")
    if report.missing:
        print(f"missing predictions for: {', '.join(report.missing)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_ablate(args, config):
    _require_dir(config.data.root, "data.root")
    ablation.grid(config)
    out = Path(args.out)
    rows = ablation.run_ablation(config, out, args.eval_root)
    ablation.write_report(rows, out, config.ablate.target)
    plotting.ablation_chart(rows, out / "ablation.png")
    config.dump(out / "resolved_config.yaml")
    print(ablation.render_table(rows, config.ablate.target), end="")
    return EXIT_OK


def cmd_figures(args, config):
    real_root = _require_dir(args.real, "real directory")
    synth_root = _require_dir(args.synth, "synthetic directory")
    spec = config.data.preprocess_spec()
    out = Path(args.out)
    written = 0
    for case_dir in sorted(p for p in synth_root.iterdir() if p.is_dir()):
        synth = scan_case(case_dir, config.data.profile)
        real_dir = real_root / case_dir.name
        if not synth or not real_dir.is_dir():
            continue
        real = scan_case(real_dir, config.data.profile)
        for code, path in synth.items():
            if code not in real:
                continue
            r = load_volume(real[code]).data
            r = preprocess_volume(r, spec) if spec is not None else r
            s = load_volume(path).data
            stem = f"{case_dir.name}-{config.data.profile[code]}"
            plotting.slice_panel({code: r}, {code: s}, out / f"{stem}-panel.png", title=case_dir.name)
            plotting.save_mosaic(out / f"{stem}-mosaic.png", plotting.panel_mosaic(r, s))
            written += 1
    print(f"wrote {written} panel(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="cwdm", description="Conditional wavelet diffusion for missing-modality synthesis")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-data", parents=[parent], help="generate a synthetic four-modality dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--shape", type=int, nargs=3, default=(32, 32, 32))
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("preprocess", parents=[parent], help="percentile-clip and normalize a dataset")
    p.add_argument("--root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[parent], help="train one target-modality model")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-all", parents=[parent], help="train all four models and write registry.tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--skip-existing", action="store_true")
    p.set_defaults(func=cmd_train_all)

    p = sub.add_parser("pseudoval", parents=[parent], help="drop one random modality per case")
    p.add_argument("--root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest path")
    p.set_defaults(func=cmd_pseudoval)

    p = sub.add_parser("synthesize", parents=[parent], help="generate missing modalities")
    p.add_argument("--registry", required=True, type=Path)
    p.add_argument("--case", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--root", help="dataset root for --manifest (default data.root)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", parents=[parent], help="MSE/PSNR/SSIM against manifest ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--crop", action="store_true", help="centered 224x224 in-plane crop")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[parent], help="skip x schedule x width grid")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-root", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("figures", parents=[parent], help="middle-slice real/synthetic panels")
    p.add_argument("--real", required=True, type=Path)
    p.add_argument("--synth", required=True, type=Path)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_figures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return args.func(args, config)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
