"""Command-line pipeline: gen-data, train-vae, train-dit, infer, eval.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 missing dependency
(dataset/checkpoint), 5 input-validation error. All stages read one JSON
config (see configs/toy.json); --set section.key=value overrides file values.
The run-directory root comes from config run_root, else $BEAMCKM_RUN_ROOT,
else ./runs.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import write_tensor
from .config import ConfigError, RunConfig
from .dataset import Dataset, generate_dataset
from .diffusion import make_schedule, sample_ckm
from .metrics import SCENARIOS, EvaluationError, nmse_db_arrays, run_scenario
from .pngio import save_grayscale
from .propagation import (BeamVector, EnvScene, channel_field, db_to_unit,
                          generate_ckm, steering_vector)
from .training import load_dit, load_vae, train_dit, train_vae

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING_DEP = 4
EXIT_BAD_INPUT = 5


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set or [])


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = cfg.path("dataset")
    try:
        manifest = generate_dataset(cfg.dataset_config(), out)
    except OSError as exc:
        print(f"error: cannot write dataset: {exc}", file=sys.stderr)
        return EXIT_IO
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    total = sum(counts.values())
    print(f"dataset: {out}")
    print(f"records: {total} "
          f"(train {counts['train']}, unseen_beams {counts['unseen_beams']}, "
          f"unseen_locations {counts['unseen_locations']})")
    print(f"config hash: {manifest['config_hash']}")
    return EXIT_OK


def cmd_train_vae(args) -> int:
    cfg = _load_config(args)
    ds_dir = cfg.path("dataset")
    if not (ds_dir / "manifest.json").exists():
        print(f"error: dataset not found at {ds_dir}; run gen-data first",
              file=sys.stderr)
        return EXIT_MISSING_DEP
    data = Dataset(ds_dir)
    out = cfg.path("vae")
    try:
        result = train_vae(data, cfg.vae_config(), cfg.budget("vae"), out,
                           resume=args.resume)
    except OSError as exc:
        print(f"error: cannot write checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"vae checkpoint: {out}")
    print(f"recon mse: {result['mse_init']:.6g} -> {result['mse_final']:.6g}")
    return EXIT_OK


def cmd_train_dit(args) -> int:
    cfg = _load_config(args)
    ds_dir = cfg.path("dataset")
    if not (ds_dir / "manifest.json").exists():
        print(f"error: dataset not found at {ds_dir}", file=sys.stderr)
        return EXIT_MISSING_DEP
    vae_dir = cfg.path("vae")
    if not (vae_dir / "manifest.json").exists():
        print(f"error: no frozen VAE checkpoint at {vae_dir}; run train-vae first",
              file=sys.stderr)
        return EXIT_MISSING_DEP
    data = Dataset(ds_dir)
    vae, vae_manifest = load_vae(vae_dir)
    if not vae_manifest.get("frozen", False):
        print(f"error: VAE checkpoint at {vae_dir} is not marked frozen",
              file=sys.stderr)
        return EXIT_MISSING_DEP
    T, b1, bT = cfg.schedule_params()
    out = cfg.path("dit")
    try:
        result = train_dit(data, vae, cfg.dit_config(), cfg.cond_config(),
                           make_schedule(T, b1, bT), cfg.budget("dit"), out,
                           resume=args.resume)
    except OSError as exc:
        print(f"error: cannot write checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"dit checkpoint: {out}")
    print(f"final training loss: {result['final_loss']:.6g}")
    return EXIT_OK


def _load_pipeline(cfg: RunConfig):
    vae_dir, dit_dir = cfg.path("vae"), cfg.path("dit")
    for d, name in ((cfg.path("dataset"), "dataset"), (vae_dir, "VAE checkpoint"),
                    (dit_dir, "DiT checkpoint")):
        if not (d / "manifest.json").exists():
            raise FileNotFoundError(f"{name} not found at {d}")
    data = Dataset(cfg.path("dataset"))
    vae, _ = load_vae(vae_dir)
    dit, cond, dit_manifest = load_dit(dit_dir)
    T, b1, bT = cfg.schedule_params()
    return data, vae, dit, cond, make_schedule(T, b1, bT), dit_manifest


def _parse_beam(args, data: Dataset) -> BeamVector:
    n = data.n_antennas
    power = data.manifest["power_budget"]
    if args.theta is not None:
        w = steering_vector(args.theta, n, data.manifest["spacing_ratio"])
        return BeamVector(w * math.sqrt(power / n), power_budget=power)
    raw = Path(args.beam_file).read_bytes()
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if flat.size != 2 * n:
        raise ValueError(f"beam file holds {flat.size} floats, expected {2 * n}")
    w = flat[0::2] + 1j * flat[1::2]
    return BeamVector(w, power_budget=power)


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    try:
        data, vae, dit, cond, sched, _ = _load_pipeline(cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_DEP

    rid_prefix = args.scene  # "<scene>_t<idx>", e.g. s00_t01
    matches = [r for r in data.manifest["records"] if r.startswith(rid_prefix + "_b")]
    if not matches:
        print(f"error: no records for scene id {rid_prefix!r}", file=sys.stderr)
        return EXIT_BAD_INPUT
    try:
        beam = _parse_beam(args, data)
    except (OSError, ValueError) as exc:
        print(f"error: bad beam spec: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    scene = data.scene_for(matches[0])
    rng = np.random.default_rng([cfg.resolved["sampling"]["seed"], 0])
    pred = sample_ckm(scene, beam, dit, cond, vae, sched, rng,
                      data.floor_db, data.ceiling_db)

    out = cfg.path("infer")
    try:
        out.mkdir(parents=True, exist_ok=True)
        tag = f"{rid_prefix}_infer"
        write_tensor(out / f"{tag}_map.bckm", pred.values_db.astype(np.float32))
        save_grayscale(out / f"{tag}.png",
                       db_to_unit(pred.values_db, data.floor_db, data.ceiling_db))
    except OSError as exc:
        print(f"error: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO

    params = data.channel_params()
    fld = channel_field(scene, params, data.n_antennas, data.manifest["spacing_ratio"])
    truth = generate_ckm(scene, params, beam, data.manifest["spacing_ratio"], field=fld)
    score = nmse_db_arrays(pred.values_db, truth.values_db, truth.valid_mask)
    print(f"wrote {out / (rid_prefix + '_infer_map.bckm')}")
    print(f"nmse vs oracle: {score:.3f} dB")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.scenario not in SCENARIOS:
        print(f"error: unknown scenario {args.scenario!r}; choose from {SCENARIOS}",
              file=sys.stderr)
        return EXIT_CONFIG
    cfg = _load_config(args)
    try:
        data, vae, dit, cond, sched, dit_manifest = _load_pipeline(cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_DEP
    out = cfg.path("eval") / args.scenario
    try:
        report = run_scenario(data, vae, dit, cond, sched, args.scenario, out,
                              seed=cfg.resolved["sampling"]["seed"],
                              write_pngs=cfg.resolved["eval"]["write_pngs"])
        report.config_hash = dit_manifest["config_hash"]
        report.write(out / "report.json")
    except EvaluationError as exc:
        print(f"error: evaluation failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"report: {out / 'report.json'}")
    print(f"{args.scenario}: {len(report.records)} records, "
          f"aggregate NMSE {report.aggregate_nmse_db:.3f} dB")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beamckm",
        description="beam-aware channel-map diffusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config value (repeatable)")

    p = sub.add_parser("gen-data", help="synthesize the oracle dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="pre-train and freeze the VAE")
    common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-dit", help="train diffusion transformer + condition encoder")
    common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train_dit)

    p = sub.add_parser("infer", help="sample one map for a scene and beam")
    common(p)
    p.add_argument("--scene", required=True, metavar="SCENE_TX",
                   help="scene/tx id, e.g. s00_t01")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--theta", type=float, default=None,
                       help="steering angle in radians (beam synthesized)")
    group.add_argument("--beam-file", default=None,
                       help="raw little-endian float32 file of 2*N_t values")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="run a generalization scenario")
    common(p)
    p.add_argument("scenario", help="unseen-beams or unseen-locations")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
