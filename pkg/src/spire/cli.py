"""Command-line interface.

Subcommands: simulate, corrupt, train, predict, mtip, phase, fsc, plot.
Every subcommand is a pure function of (inputs, flags, seed): re-running
with the same arguments reproduces every output byte for byte. Exit codes:
0 success, 1 usage, 2 I/O or format errors, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import artifacts as art
from . import geometry as geo
from . import metrics, mtip, phasing, plots, simulate
from .container import ContainerError, read_container, write_container
from .simulate import DensityVolume, IntensityVolume, PdbParseError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_hash(args: argparse.Namespace) -> str:
    skip = {"func", "json", "config"}
    payload = {k: v for k, v in vars(args).items() if k not in skip}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _geometry_header(geom: geo.DetectorGeometry) -> dict:
    return {
        "n_side": geom.n_side,
        "pixel_size": geom.pixel_size,
        "distance": geom.distance,
        "photon_energy": geom.photon_energy,
    }


def _geometry_from_header(header: dict) -> geo.DetectorGeometry:
    g = header.get("geometry")
    if g is None:
        raise ValueError("container header carries no geometry block")
    return geo.DetectorGeometry(
        n_side=int(g["n_side"]),
        pixel_size=float(g["pixel_size"]),
        distance=float(g["distance"]),
        photon_energy=float(g["photon_energy"]),
    )


def _read_role(path: str, role: str) -> tuple[dict, np.ndarray]:
    header, payload = read_container(path)
    if header["role"] != role:
        raise ValueError(f"{path}: expected role {role!r}, found {header['role']!r}")
    return header, payload


def _volume_from_container(path: str):
    header, payload = read_container(path)
    role = header["role"]
    if role == "density":
        return role, DensityVolume(grid=payload.astype(np.float64), voxel_size=float(header["voxel_size"]))
    if role == "intensity":
        return role, IntensityVolume(grid=payload.astype(np.float64), q_spacing=float(header["q_spacing"]))
    raise ValueError(f"{path}: expected a density or intensity container, found role {role!r}")


def _fluence_model_from_args(args) -> art.FluenceModel:
    if getattr(args, "fluence_samples", None):
        with open(args.fluence_samples) as fh:
            samples = art.load_fluence_samples(fh.read())
        return art.FluenceModel(kind="empirical", samples=samples)
    lo, hi = args.fluence_clip
    return art.FluenceModel(
        kind="lognormal",
        mu_ln=float(np.log(args.fluence_median)),
        sigma_ln=args.fluence_sigma_ln,
        clip_range=(lo, hi),
    )


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> dict:
    geom = geo.DetectorGeometry(
        n_side=args.n_side,
        pixel_size=args.pixel_size,
        distance=args.distance,
        photon_energy=args.energy,
    )
    if args.pdb:
        with open(args.pdb) as fh:
            atoms = simulate.parse_pdb_atoms(fh.read())
        rho = simulate.atoms_to_density(atoms, args.grid, args.voxel_size, args.blur_sigma)
    else:
        rho = simulate.make_blob_phantom(
            args.grid, args.voxel_size, n_blobs=args.phantom_blobs, seed=args.seed
        )
    ds = simulate.simulate_dataset(
        rho, geom, args.n_images, flux_scale=args.flux_scale, seed=args.seed,
        oversample=args.oversample,
    )
    chash = _config_hash(args)
    base = {
        "geometry": _geometry_header(geom),
        "seed": args.seed,
        "config_hash": chash,
        "voxel_size": args.voxel_size,
    }
    write_container(
        f"{args.out_prefix}_images.spi",
        {**base, "role": "images", "flux_scale": args.flux_scale},
        ds.images.astype(np.float32),
    )
    write_container(
        f"{args.out_prefix}_rotations.spi", {**base, "role": "rotations"}, ds.rotations
    )
    write_container(
        f"{args.out_prefix}_density.spi", {**base, "role": "density"}, rho.grid
    )
    outputs = [f"{args.out_prefix}_{s}.spi" for s in ("images", "rotations", "density")]
    if args.save_intensity:
        vol = simulate.density_to_intensity(rho, oversample=args.oversample)
        write_container(
            f"{args.out_prefix}_intensity.spi",
            {**base, "role": "intensity", "q_spacing": vol.q_spacing},
            vol.grid,
        )
        outputs.append(f"{args.out_prefix}_intensity.spi")
    return {"outputs": outputs, "n_images": args.n_images, "config_hash": chash}


# ---------------------------------------------------------------- corrupt


def cmd_corrupt(args) -> dict:
    header, images = _read_role(args.images, "images")
    cfg = art.ArtifactConfig(
        enabled=frozenset(args.artifacts.upper()),
        gaussian_sigma=args.sigma,
        fluence=_fluence_model_from_args(args),
        seed=args.seed,
    )
    corrupted, gammas = art.corrupt_dataset(images.astype(np.float64), cfg)
    chash = _config_hash(args)
    base = {k: header[k] for k in ("geometry", "voxel_size") if k in header}
    base.update({"seed": args.seed, "config_hash": chash, "artifacts": args.artifacts.upper()})
    write_container(
        f"{args.out_prefix}_images.spi", {**base, "role": "images"}, corrupted.astype(np.float32)
    )
    write_container(f"{args.out_prefix}_gammas.spi", {**base, "role": "gammas"}, gammas)
    return {
        "outputs": [f"{args.out_prefix}_images.spi", f"{args.out_prefix}_gammas.spi"],
        "config_hash": chash,
    }


# ---------------------------------------------------------------- train


def cmd_train(args) -> dict:
    import torch

    from .model import ModelConfig, SpiModel, parameter_index_map
    from .train import TrainConfig, TrainingDiverged, fit

    header, images = _read_role(args.images, "images")
    geom = _geometry_from_header(header)
    qgrid = geo.build_qgrid(geom)
    widths = tuple(int(w) for w in args.trunk_widths.split(","))
    mcfg = ModelConfig(
        trunk_widths=widths,
        blocks_per_stage=args.blocks_per_stage,
        siren_width=args.siren_width,
        siren_hidden_layers=args.siren_layers,
        siren_omega_first=args.omega_first,
        q_scale=1.0 / qgrid.q_max,
    )
    torch.manual_seed(args.seed)
    model = SpiModel(mcfg)
    tcfg = TrainConfig(
        epochs=args.epochs,
        warmup_epochs=args.warmup_epochs,
        lr_min=args.lr_min,
        lr_max=args.lr_max,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        seed=args.seed,
        input_premultiplier=args.premultiplier,
        pixel_sample=args.pixel_sample,
    )
    pixel_mask = None
    if args.mask_beamstop:
        pixel_mask = art.build_beamstop_mask(geom.n_side).bits.astype(bool)
    result = fit(images.astype(np.float64), qgrid, model, tcfg, pixel_mask=pixel_mask)
    with open(f"{args.out_prefix}_history.csv", "w") as fh:
        fh.write(result.history_csv())
    if result.diverged:
        raise TrainingDiverged(
            f"non-finite loss; history preserved in {args.out_prefix}_history.csv"
        )
    chash = _config_hash(args)
    ckpt_header = {
        "role": "params",
        "geometry": _geometry_header(geom),
        "seed": args.seed,
        "config_hash": chash,
        "index_map": [[n, o, list(s)] for n, o, s in parameter_index_map(model)],
        "model_config": {
            "trunk_widths": list(mcfg.trunk_widths),
            "blocks_per_stage": mcfg.blocks_per_stage,
            "siren_width": mcfg.siren_width,
            "siren_hidden_layers": mcfg.siren_hidden_layers,
            "siren_omega_first": mcfg.siren_omega_first,
            "siren_omega_hidden": mcfg.siren_omega_hidden,
            "q_scale": mcfg.q_scale,
        },
        "train_config": {
            "epochs": tcfg.epochs,
            "input_premultiplier": tcfg.input_premultiplier,
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
        },
    }
    write_container(
        f"{args.out_prefix}_checkpoint.spi",
        ckpt_header,
        result.best_params.numpy().astype(np.float32),
    )
    return {
        "outputs": [f"{args.out_prefix}_checkpoint.spi", f"{args.out_prefix}_history.csv"],
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "config_hash": chash,
    }


def _load_checkpoint(path: str):
    import torch

    from .model import ModelConfig, SpiModel, set_flat_params

    header, flat = _read_role(path, "params")
    mc = header["model_config"]
    mcfg = ModelConfig(
        trunk_widths=tuple(mc["trunk_widths"]),
        blocks_per_stage=mc["blocks_per_stage"],
        siren_width=mc["siren_width"],
        siren_hidden_layers=mc["siren_hidden_layers"],
        siren_omega_first=mc["siren_omega_first"],
        siren_omega_hidden=mc["siren_omega_hidden"],
        q_scale=mc["q_scale"],
    )
    model = SpiModel(mcfg)
    set_flat_params(model, torch.from_numpy(flat.astype(np.float32)))
    return header, model


# ---------------------------------------------------------------- predict


def cmd_predict(args) -> dict:
    from .train import TrainConfig, predict_dataset

    ckpt_header, model = _load_checkpoint(args.checkpoint)
    header, images = _read_role(args.images, "images")
    geom = _geometry_from_header(ckpt_header)
    qgrid = geo.build_qgrid(geom)
    tcfg = TrainConfig(
        input_premultiplier=float(ckpt_header["train_config"]["input_premultiplier"])
    )
    rots, gammas, recon = predict_dataset(model, images.astype(np.float64), qgrid, tcfg)
    chash = _config_hash(args)
    base = {"geometry": ckpt_header["geometry"], "seed": args.seed, "config_hash": chash}
    write_container(f"{args.out_prefix}_rotations.spi", {**base, "role": "rotations"}, rots)
    write_container(f"{args.out_prefix}_gammas.spi", {**base, "role": "gammas"}, gammas)
    outputs = [f"{args.out_prefix}_rotations.spi", f"{args.out_prefix}_gammas.spi"]
    if args.save_recon:
        write_container(
            f"{args.out_prefix}_recon.spi", {**base, "role": "images"}, recon.astype(np.float32)
        )
        outputs.append(f"{args.out_prefix}_recon.spi")
    if args.save_intensity:
        from .model import predict_intensity_volume

        q_spacing = args.q_spacing or qgrid.q_max / (args.intensity_m // 2 - 1)
        vol = predict_intensity_volume(model, args.intensity_m, q_spacing)
        write_container(
            f"{args.out_prefix}_intensity.spi",
            {**base, "role": "intensity", "q_spacing": q_spacing},
            vol.grid,
        )
        outputs.append(f"{args.out_prefix}_intensity.spi")
    return {"outputs": outputs, "config_hash": chash}


# ---------------------------------------------------------------- phase


def cmd_phase(args) -> dict:
    role, vol = _volume_from_container(args.intensity)
    if role != "intensity":
        raise ValueError("phase requires an intensity container")
    cfg = phasing.PhasingConfig(n_restarts=args.restarts, seed=args.seed)
    history: list[dict] = []
    rho, residual = phasing.retrieve_phase(vol, cfg, history_out=history)
    chash = _config_hash(args)
    write_container(
        f"{args.out_prefix}_density.spi",
        {"role": "density", "voxel_size": rho.voxel_size, "seed": args.seed, "config_hash": chash},
        rho.grid,
    )
    with open(f"{args.out_prefix}_residuals.csv", "w") as fh:
        fh.write("restart,iteration,residual\n")
        for row in history:
            fh.write(f"{row['restart']},{row['iteration']},{row['residual']!r}\n")
    return {
        "outputs": [f"{args.out_prefix}_density.spi", f"{args.out_prefix}_residuals.csv"],
        "residual": residual,
        "config_hash": chash,
    }


# ---------------------------------------------------------------- mtip


def cmd_mtip(args) -> dict:
    header, images = _read_role(args.images, "images")
    geom = _geometry_from_header(header)
    mode = args.mode.replace("-", "_")
    pred_rots = pred_gammas = None
    if mode == "ml_assisted":
        if not args.pred_rotations:
            raise ValueError("--pred-rotations is required in ml-assisted mode")
        _, pred_rots = _read_role(args.pred_rotations, "rotations")
        if args.pred_gammas:
            _, pred_gammas = _read_role(args.pred_gammas, "gammas")
    truth = None
    if args.truth_density:
        role, truth = _volume_from_container(args.truth_density)
        if role != "density":
            raise ValueError("--truth-density must point at a density container")
    cfg = mtip.MtipConfig(
        n_reference=args.n_reference,
        grid_m=args.grid_m,
        q_spacing=args.q_spacing,
        lambda_reg=args.lambda_reg,
        outer_iterations=args.outer_iterations,
        mode=mode,
        seed=args.seed,
    )
    pixel_mask = None
    if args.mask_beamstop:
        pixel_mask = art.build_beamstop_mask(geom.n_side).bits.astype(bool)
    result = mtip.mtip_iterate(
        images.astype(np.float64),
        cfg,
        geom,
        predicted_rotations=pred_rots,
        predicted_gammas=pred_gammas,
        truth_density=truth,
        pixel_mask=pixel_mask,
    )
    chash = _config_hash(args)
    base = {"geometry": _geometry_header(geom), "seed": args.seed, "config_hash": chash}
    write_container(
        f"{args.out_prefix}_intensity.spi",
        {**base, "role": "intensity", "q_spacing": result.intensity.q_spacing},
        result.intensity.grid,
    )
    write_container(
        f"{args.out_prefix}_density.spi",
        {**base, "role": "density", "voxel_size": result.density.voxel_size},
        result.density.grid,
    )
    with open(f"{args.out_prefix}_trace.csv", "w") as fh:
        fh.write("iteration,resolution,phasing_residual\n")
        for entry in result.trace:
            res = "indeterminate" if entry.resolution is None else repr(entry.resolution)
            fh.write(f"{entry.iteration},{res},{entry.phasing_residual!r}\n")
    final = result.trace[-1].resolution if result.trace else None
    return {
        "outputs": [
            f"{args.out_prefix}_intensity.spi",
            f"{args.out_prefix}_density.spi",
            f"{args.out_prefix}_trace.csv",
        ],
        "final_resolution": "indeterminate" if final is None else final,
        "config_hash": chash,
    }


# ---------------------------------------------------------------- fsc


def cmd_fsc(args) -> dict:
    role_a, vol_a = _volume_from_container(args.volume_a)
    role_b, vol_b = _volume_from_container(args.volume_b)
    if role_a != role_b:
        raise ValueError(f"role mismatch: {role_a} vs {role_b}")
    if role_a == "density":
        if args.align:
            vol_b, _ = metrics.align_density_volumes(
                vol_a, vol_b, rotation_search=args.rotation_search, seed=args.seed
            )
        curve = metrics.fsc_density(vol_a, vol_b, n_shells=args.n_shells)
    else:
        curve = metrics.fsc_intensity(vol_a, vol_b, n_shells=args.n_shells)
    resolution = metrics.resolution_at(curve, args.threshold)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("q,fsc,count\n")
            for q, f, c in zip(curve.q, curve.fsc, curve.counts):
                fh.write(f"{q!r},{f!r},{c}\n")
    if args.svg:
        plots.write_svg_curves(
            args.svg,
            [("FSC", curve.q, curve.fsc)],
            x_label="q (1/Angstrom)",
            y_label="FSC",
            title=f"FSC ({role_a})",
            y_range=(-0.2, 1.05),
            hlines=(args.threshold,),
        )
    out = "indeterminate" if resolution is None else resolution
    print(f"resolution: {out}")
    return {
        "resolution": out,
        "threshold": args.threshold,
        "outputs": [p for p in (args.csv, args.svg) if p],
    }


# ---------------------------------------------------------------- plot


def cmd_plot(args) -> dict:
    if args.kind == "patterns":
        _, images = _read_role(args.images, "images")
        count = min(args.count, len(images))
        grid = plots.tile_images(images[:count].astype(np.float64), n_cols=args.cols)
        plots.write_pgm(args.out, np.log1p(grid))
        return {"outputs": [args.out, args.out + ".json"], "count": count}
    if args.kind == "fsc":
        rows = np.genfromtxt(args.csv_in, delimiter=",", names=True)
        plots.write_svg_curves(
            args.out,
            [("FSC", np.atleast_1d(rows["q"]), np.atleast_1d(rows["fsc"]))],
            x_label="q (1/Angstrom)",
            y_label="FSC",
            title="FSC",
            y_range=(-0.2, 1.05),
            hlines=(0.5, 0.143),
        )
        return {"outputs": [args.out]}
    if args.kind == "gamma-scatter":
        _, pred = _read_role(args.pred, "gammas")
        _, truth = _read_role(args.truth, "gammas")
        slope = float(pred @ truth / (truth @ truth))
        r2 = metrics.through_origin_r2(pred, truth)
        plots.write_svg_scatter(
            args.out,
            truth,
            pred,
            x_label="true brightness factor",
            y_label="predicted brightness factor",
            title=f"slope {slope:.4f}, R2 {r2:.4f}",
            fit_slope=slope,
        )
        return {"outputs": [args.out], "slope": slope, "r2": r2}
    raise ValueError(f"unknown plot kind {args.kind!r}")


# ---------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="spire", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p):
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--config", help="JSON file whose keys override flags")
        p.add_argument("--json", action="store_true", help="machine-readable summary on stdout")

    p = sub.add_parser("simulate", help="render a phantom or PDB structure to patterns")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--pdb", help="fixed-column PDB file; default is a blob phantom")
    p.add_argument("--phantom-blobs", type=int, default=6)
    p.add_argument("--grid", type=int, default=32, help="density grid side")
    p.add_argument("--voxel-size", type=float, default=2.0, help="Angstrom per voxel")
    p.add_argument("--blur-sigma", type=float, default=1.5, help="atom splat sigma, Angstrom")
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--n-side", type=int, default=48)
    p.add_argument("--pixel-size", type=float, default=0.1 / 128)
    p.add_argument("--distance", type=float, default=0.2)
    p.add_argument("--energy", type=float, default=4.6, help="photon energy, keV")
    p.add_argument("--flux-scale", type=float, default=1.0)
    p.add_argument("--oversample", type=int, default=2)
    p.add_argument("--save-intensity", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("corrupt", help="apply experimental artifacts to a dataset")
    p.add_argument("--images", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--artifacts", default="FPGB", help="subset of FPGB, any order")
    p.add_argument("--sigma", type=float, default=0.05, help="Gaussian readout sigma")
    p.add_argument("--fluence-median", type=float, default=1.0)
    p.add_argument("--fluence-sigma-ln", type=float, default=0.45)
    p.add_argument("--fluence-clip", type=float, nargs=2, default=(0.3, 2.6))
    p.add_argument("--fluence-samples", help="text file, one sample per line")
    add_common(p)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="fit the self-supervised model")
    p.add_argument("--images", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--lr-min", type=float, default=1e-7)
    p.add_argument("--lr-max", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--premultiplier", type=float, default=1.0)
    p.add_argument("--pixel-sample", type=int, default=None)
    p.add_argument("--trunk-widths", default="16,32,64")
    p.add_argument("--blocks-per-stage", type=int, default=2)
    p.add_argument("--siren-width", type=int, default=256)
    p.add_argument("--siren-layers", type=int, default=5)
    p.add_argument("--omega-first", type=float, default=30.0)
    p.add_argument("--mask-beamstop", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--save-recon", action="store_true")
    p.add_argument("--save-intensity", action="store_true")
    p.add_argument("--intensity-m", type=int, default=64)
    p.add_argument("--q-spacing", type=float, default=None)
    add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("phase", help="phase-retrieve a density from an intensity")
    p.add_argument("--intensity", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--restarts", type=int, default=10)
    add_common(p)
    p.set_defaults(func=cmd_phase)

    p = sub.add_parser("mtip", help="multi-tiered iterative phasing")
    p.add_argument("--images", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--mode", choices=["pure", "ml-assisted"], default="pure")
    p.add_argument("--pred-rotations")
    p.add_argument("--pred-gammas")
    p.add_argument("--truth-density")
    p.add_argument("--n-reference", type=int, default=2000)
    p.add_argument("--grid-m", type=int, default=64)
    p.add_argument("--q-spacing", type=float, default=None)
    p.add_argument("--lambda-reg", type=float, default=1e-3)
    p.add_argument("--outer-iterations", type=int, default=6)
    p.add_argument("--mask-beamstop", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_mtip)

    p = sub.add_parser("fsc", help="Fourier shell correlation of two volumes")
    p.add_argument("volume_a")
    p.add_argument("volume_b")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--n-shells", type=int, default=None)
    p.add_argument("--align", action="store_true", help="align densities before FSC")
    p.add_argument("--rotation-search", type=int, default=0)
    p.add_argument("--csv")
    p.add_argument("--svg")
    add_common(p)
    p.set_defaults(func=cmd_fsc)

    p = sub.add_parser("plot", help="emit PGM/SVG figures")
    p.add_argument("kind", choices=["patterns", "fsc", "gamma-scatter"])
    p.add_argument("--images")
    p.add_argument("--csv-in")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--cols", type=int, default=4)
    add_common(p)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"spire: config error: {exc}", file=sys.stderr)
            return 2
        for key, value in overrides.items():
            setattr(args, key.replace("-", "_"), value)
    try:
        summary = args.func(args)
    except (ContainerError, PdbParseError, OSError) as exc:
        print(f"spire: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"spire: numerical failure: {exc}", file=sys.stderr)
        return 3
    if args.json:
        print(json.dumps(summary, sort_keys=True, default=str))
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
