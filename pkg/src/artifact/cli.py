"""Command-line entry point: one subcommand per pipeline stage, files as interfaces.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .fanbeam import GeometryError, build_geometry, build_projector
from .phantoms import (
    CorpusConfig, VolumeIOError, hu_normalize, make_corpus, read_array, read_volume, write_array,
    write_mask, write_pgm, write_volume,
)
from .tensor import set_deterministic
from .training import ConfigError, RunConfig, write_config_snapshot

log = logging.getLogger("artifact")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, GeometryError, VolumeIOError, CheckpointError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="run config (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. weights.lambda_s=0 (repeatable)")
    p.add_argument("--deterministic", action="store_true", help="fixed-order reductions for bit-reproducible runs")
    p.add_argument("--overwrite", action="store_true", help="replace existing results in --out")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="artifact", description="Two-view fan-beam CT reconstruction with anatomy-guided losses.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write the synthetic phantom corpora")
    _common(p, config_required=True)

    p = sub.add_parser("pretrain-seg", help="pretrain and freeze the segmentation network")
    _common(p, config_required=True)

    p = sub.add_parser("train", help="adversarial training of the generator")
    _common(p, config_required=True)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")

    p = sub.add_parser("reconstruct", help="reconstruct one projection pair")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--x-ap", type=Path, required=True)
    p.add_argument("--x-lat", type=Path, required=True)
    p.add_argument("--seg", type=Path, help="segmentation checkpoint (default: config seg_checkpoint)")

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    _common(p, config_required=True)
    p.add_argument("--checkpoint", type=Path, help="generator checkpoint (default: latest in config out_dir)")
    p.add_argument("--seg", type=Path, help="segmentation checkpoint (default: config seg_checkpoint)")

    p = sub.add_parser("project", help="simulate a.p. and lat. projections of a volume")
    _common(p, config_required=False)
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--geometry", type=Path, help="geometry JSON (default: config geometry block)")

    p = sub.add_parser("sweep", help="train and evaluate over a lambda_s x lambda_p grid")
    _common(p, config_required=True)
    p.add_argument("--lambda-s", default="0,0.5,1,2,4")
    p.add_argument("--lambda-p", default="0,0.25,0.5,1")
    p.add_argument("--seg", type=Path, help="segmentation checkpoint (default: config seg_checkpoint)")
    return parser


def _floats(text: str, name: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{name}: {exc}") from exc
    if not vals or any(v < 0 for v in vals):
        raise UsageError(f"{name} needs a comma-separated list of non-negative numbers")
    return vals


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.overrides)
    if args.deterministic:
        cfg = cfg.with_overrides(["deterministic=true"])
    if cfg.deterministic:
        set_deterministic(True)
    return cfg


def _prepare_out(out: Path, overwrite: bool, allow_existing: bool = False) -> Path:
    """Refuse to write into a non-empty directory unless told to replace it."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if overwrite:
            shutil.rmtree(out)
        elif not allow_existing:
            raise ConfigError(f"output directory {out} is not empty; pass --overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _out_dir(args, cfg: RunConfig | None, default: str) -> Path:
    if args.out is not None:
        return args.out
    if cfg is not None and default == "out_dir":
        return Path(cfg.out_dir)
    raise ConfigError("--out is required for this command")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(_out_dir(args, cfg, "out_dir"), args.overwrite)
    data = cfg.raw["data"]
    geometry = cfg.geometry
    corpus = CorpusConfig(seed=cfg.seed, grid_n=geometry.grid_n, n_slices=data["n_slices"],
                          voxel_pitch_mm=geometry.voxel_pitch_mm, recon_train=data["recon_train"],
                          recon_test=data["recon_test"], seg_train=data["seg_train"], seg_test=data["seg_test"])
    manifest = make_corpus(corpus, geometry, out, cfg.cache_dir)
    write_config_snapshot(cfg.with_overrides([f"corpus={json.dumps(str(out))}"]), out)
    print(f"corpus written to {out} ({sum(len(v) for v in manifest.splits.values())} samples)")
    return EXIT_OK


def cmd_pretrain_seg(args) -> int:
    from .training import pretrain_segnet

    cfg = _load_config(args)
    out = _prepare_out(_out_dir(args, cfg, "out_dir"), args.overwrite)
    write_config_snapshot(cfg, out)
    res = pretrain_segnet(cfg, out)
    print(f"segnet checkpoint {res.checkpoint} (best held-out DSC {res.best_dsc:.4f} at epoch {res.best_epoch})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_loss_log
    from .training import train_gan

    cfg = _load_config(args)
    out = _prepare_out(_out_dir(args, cfg, "out_dir"), args.overwrite, allow_existing=args.resume)
    write_config_snapshot(cfg, out)
    run = train_gan(cfg, out_dir=out, resume=args.resume)
    if run.log_path.exists() and run.log_path.stat().st_size:
        plot_loss_log(run.log_path, out / "loss_log.png")
    last = run.checkpoints[-1] if run.checkpoints else None
    print(f"trained {run.steps} steps; last checkpoint {last}")
    return EXIT_OK


def _segnet(args, cfg: RunConfig | None):
    from .training import load_segnet

    path = args.seg or (cfg.seg_checkpoint if cfg is not None else None)
    if not path:
        raise ConfigError("a segmentation checkpoint is needed (--seg or seg_checkpoint)")
    return load_segnet(Path(path))


def cmd_reconstruct(args) -> int:
    from .training import load_generator, reconstruct

    cfg = _load_config(args) if args.config else None
    out = _prepare_out(_out_dir(args, cfg, "--out"), args.overwrite)
    g, _ = load_generator(args.checkpoint, cfg.cache_dir if cfg else None)
    x_ap, _ = read_array(args.x_ap)
    x_lat, _ = read_array(args.x_lat)
    want = (g.geometry.n_detector_bins,)
    for name, x in (("--x-ap", x_ap), ("--x-lat", x_lat)):
        if x.ndim != 2 or x.shape[:1] != want:
            raise ConfigError(f"{name}: projection shape {x.shape} does not match {want[0]} detector bins")
    seg = _segnet(args, cfg) if (args.seg or (cfg and cfg.seg_checkpoint)) else None
    vol, mask = reconstruct(g, x_ap, x_lat, seg)
    write_volume(vol, out / "volume")
    write_mask(mask, out / "mask")
    z = vol.data.shape[-1] // 2
    write_pgm(out / "volume_mid.pgm", hu_normalize(vol.data[:, :, z]))
    write_pgm(out / "mask_mid.pgm", mask.data[:, :, z] / 3.0)
    if cfg is not None:
        write_config_snapshot(cfg, out)
    else:
        (out / "resolved_config.json").write_text(json.dumps({
            "checkpoint": str(args.checkpoint), "x_ap": str(args.x_ap), "x_lat": str(args.x_lat),
            "seg": str(args.seg) if args.seg else None,
        }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"reconstruction written to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_testset
    from .training import latest_checkpoint, open_corpus

    cfg = _load_config(args)
    ckpt = args.checkpoint or latest_checkpoint(Path(cfg.out_dir))
    if ckpt is None:
        raise ConfigError(f"no checkpoint given and none found under {cfg.out_dir}")
    out = _prepare_out(_out_dir(args, cfg, "--out"), args.overwrite)
    write_config_snapshot(cfg, out)
    report = evaluate_testset(ckpt, open_corpus(cfg), _segnet(args, cfg), out)
    agg = report.aggregate
    print(f"{report.n_samples} samples: PSNR {agg['psnr_db']['mean']:.2f} dB, SSIM {agg['ssim']['mean']:.3f}, "
          f"RMSE {agg['rmse_hu']['mean']:.1f} HU, DSC_gt {agg['dsc_mean_gt']['mean']:.3f}")
    if report.missing:
        print(f"warning: {len(report.missing)} samples missing: {', '.join(report.missing)}", file=sys.stderr)
    return EXIT_OK


def cmd_project(args) -> int:
    from .plotting import plot_projections
    from .phantoms import simulate_projection_pair

    cfg = _load_config(args) if args.config else None
    if args.geometry is not None:
        try:
            geometry = build_geometry(json.loads(args.geometry.read_text(encoding="utf-8")))
        except ValueError as exc:
            raise ConfigError(f"geometry file {args.geometry}: {exc}") from exc
    elif cfg is not None:
        geometry = cfg.geometry
    else:
        raise ConfigError("project needs --geometry or --config")
    out = _prepare_out(_out_dir(args, cfg, "--out"), args.overwrite)
    vol = read_volume(args.volume)
    if vol.data.shape[:2] != (geometry.grid_n, geometry.grid_n):
        raise ConfigError(f"volume {args.volume} grid {vol.data.shape} does not match geometry grid {geometry.grid_n}")
    x_ap, x_lat = simulate_projection_pair(vol, build_projector(geometry, cfg.cache_dir if cfg else None))
    write_array(out / "x_ap", x_ap, "projection", units="normalized")
    write_array(out / "x_lat", x_lat, "projection", units="normalized")
    hi = max(float(x_ap.max()), float(x_lat.max()), 1e-12)
    write_pgm(out / "x_ap.pgm", x_ap, (0.0, hi))
    write_pgm(out / "x_lat.pgm", x_lat, (0.0, hi))
    plot_projections(x_ap, x_lat, out / "projections.png")
    snapshot = {"volume": str(args.volume), "geometry": {k: v for k, v in geometry.__dict__.items()}}
    (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"projections written to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .evaluation import run_sweep

    ls = _floats(args.lambda_s, "--lambda-s")
    lp = _floats(args.lambda_p, "--lambda-p")
    cfg = _load_config(args)
    out = _prepare_out(_out_dir(args, cfg, "out_dir"), args.overwrite)
    write_config_snapshot(cfg, out)
    seg = _segnet(args, cfg)  # evaluation segments every cell, whatever its weights
    reports = run_sweep(cfg, seg, out, ls, lp)
    print(f"{len(reports)} sweep cells evaluated; summary in {out / 'sweep.csv'}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-seg": cmd_pretrain_seg,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "project": cmd_project,
    "sweep": cmd_sweep,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
