"""Command-line interface.

Every subcommand writes a ``<output>.manifest.json`` next to its main output
recording the resolved configuration, inputs, outputs, seed, tool version
and run time. ``nesh rerun MANIFEST`` repeats a run from its manifest.
"""

import argparse
from contextlib import nullcontext
from dataclasses import asdict
import json
import logging
import os
from pathlib import Path
import sys
import time

import numpy as np

from nesh import __version__
from nesh.errors import NeshError


PUBLISHED_DEFAULTS_NOTE = "defaults follow the published NeSH settings"


class CliError(Exception):
    pass


class _Run:
    """Tracks outputs of one subcommand so they can be removed on failure."""

    def __init__(self, args, command):
        self.args = args
        self.command = command
        self.outputs = []
        self.inputs = {}
        self.config = {}
        self.start = time.perf_counter()

    def out(self, path):
        path = str(path)
        self.outputs.append(path)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        return path

    def cleanup(self):
        for path in self.outputs:
            try:
                os.remove(path)
            except FileNotFoundError:
                pass

    def write_manifest(self, anchor):
        manifest = {
            "subcommand": self.command,
            "argv": self.args._argv,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": list(self.outputs),
            "seed": self.args.seed,
            "tool_version": __version__,
            "duration_s": time.perf_counter() - self.start,
        }
        path = self.out(str(anchor) + ".manifest.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_directions(path):
    dirs = np.loadtxt(path, ndmin=2)
    if dirs.shape[1] != 3 and dirs.shape[0] == 3:
        dirs = dirs.T
    if dirs.shape[1] != 3:
        raise CliError(f"{path}: expected rows of 3 direction components")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(norms == 0):
        raise CliError(f"{path}: zero-length direction")
    return dirs / norms[:, None]


def _add_dataset_args(p, shell=True):
    p.add_argument("--dwi", required=True, help="4D diffusion NIfTI (.nii/.nii.gz)")
    p.add_argument("--bvecs", required=True, help="FSL bvecs text file (3 rows, unit directions)")
    p.add_argument("--bvals", required=True, help="FSL bvals text file (s/mm^2)")
    p.add_argument("--mask", help="binary mask NIfTI; default: every voxel")
    if shell:
        p.add_argument("--shell", type=float, default=1000.0,
                       help="b-value of the shell to use, s/mm^2 (default: 1000, matched within 100)")


def _add_training_args(p):
    g = p.add_argument_group("training", PUBLISHED_DEFAULTS_NOTE + "; flags override --config")
    g.add_argument("--config", help="JSON file of training options (keys as the flags below, with "
                                    "'lam' for lambda)")
    g.add_argument("--lmax", type=int, help="maximum even SH degree (default: 8, or 2 for <= 10 directions)")
    g.add_argument("--lpos", type=int, help="positional-encoding frequency bands per axis (default: 12)")
    g.add_argument("--sigma", type=float, help="highest encoding frequency, cycles per unit (default: 4)")
    g.add_argument("--n-layers", type=int, help="number of weight layers including the output (default: 4)")
    g.add_argument("--hidden-dim", type=int, help="neurons per hidden layer (default: 2048)")
    g.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-4)")
    g.add_argument("--lambda", dest="lam", type=float,
                   help="L1 weight on predicted coefficients, dimensionless (default: 1e-5)")
    g.add_argument("--epochs", type=int, help="passes over all coordinate-direction pairs (default: 5)")
    g.add_argument("--batch-size", type=int, help="pairs per Adam step (default: 1000)")
    g.add_argument("--head-gain", type=float,
                   help="scale of the output layer's initial weights, dimensionless (default: 0.01)")


def _training_config(args):
    from nesh.model import TrainingConfig

    options = {}
    if args.config:
        with open(args.config) as fh:
            options.update(json.load(fh))
    for key in ("lmax", "lpos", "sigma", "n_layers", "hidden_dim", "lr", "lam", "epochs", "batch_size",
                "head_gain"):
        value = getattr(args, key)
        if value is not None:
            options[key] = value
    if args.seed_given or "seed" not in options:
        options["seed"] = args.seed
    return TrainingConfig.from_dict(options)


def _dataset(args, run):
    from nesh.data_io import load_dataset

    run.inputs.update(dwi=args.dwi, bvecs=args.bvecs, bvals=args.bvals, mask=args.mask)
    return load_dataset(args.dwi, args.bvecs, args.bvals, args.mask)


def cmd_phantom(args, run):
    from nesh.data_io import save_dataset, write_nifti
    from nesh.phantom import bundled_spec_path, generate_phantom, load_phantom_spec

    if not os.path.exists(args.spec) and not args.spec.endswith(".ini"):
        args.spec = bundled_spec_path(args.spec)
    spec = load_phantom_spec(args.spec)
    if args.seed_given:
        spec.seed = args.seed
    args.seed = spec.seed
    out = Path(args.out_dir)
    run.inputs["spec"] = args.spec
    run.config = {"seed": spec.seed, "noise_sigma": spec.noise_sigma, "bvalue": spec.bvalue,
                  "dims": list(spec.grid.dims), "n_directions": int(spec.directions.shape[0])}
    dataset, truth = generate_phantom(spec)
    for name in ("dwi.nii.gz", "bvecs", "bvals", "mask.nii.gz"):
        run.out(out / name)
    save_dataset(dataset, str(out) + os.sep)
    grid = dataset.grid
    write_nifti(truth.clean, grid, run.out(out / "truth_clean.nii.gz"))
    write_nifti(truth.md, grid, run.out(out / "truth_md.nii.gz"))
    write_nifti(truth.fa, grid, run.out(out / "truth_fa.nii.gz"))
    rgb = np.abs(truth.principal) * truth.fa[..., None]
    write_nifti(rgb, grid, run.out(out / "truth_colorfa.nii.gz"))
    run.write_manifest(out / "phantom")


def cmd_fit(args, run):
    from nesh.model import fit, save_model, write_loss_log

    config = _training_config(args)
    dataset = _dataset(args, run)
    model = fit(dataset, args.shell, config)
    run.config = {"training": model.config.to_dict(), "shell": args.shell,
                  "n_fit_directions": model.n_fit_directions, "signal_scale": model.signal_scale}
    save_model(model, run.out(args.out))
    write_loss_log(model.history, run.out(args.out + ".loss.csv"))
    run.write_manifest(args.out)


def cmd_reconstruct(args, run):
    from nesh.data_io import resample_affine, write_nifti
    from nesh.model import load_model, reconstruct

    model = load_model(args.checkpoint)
    run.inputs["checkpoint"] = args.checkpoint
    if args.directions:
        run.inputs["directions"] = args.directions
        directions = _load_directions(args.directions)
    else:
        directions = model.fit_directions
    grid = model.grid.upsampled(args.upsample_factor)
    vol = reconstruct(model, grid, directions)
    run.config = {"upsample_factor": args.upsample_factor, "n_directions": int(directions.shape[0]),
                  "voxel_size": list(grid.voxel_size), "dims": list(grid.dims)}
    write_nifti(vol, grid, run.out(args.out), resample_affine(model.affine, model.grid, grid))
    run.write_manifest(args.out)


def cmd_shi(args, run):
    from nesh.data_io import select_shell, write_nifti
    from nesh.shi import shi_fit_volume, shi_sample

    dataset = _dataset(args, run)
    idx = select_shell(dataset, args.shell)
    vol = shi_fit_volume(dataset, idx, args.lmax, args.lb_lambda)
    if args.directions:
        run.inputs["directions"] = args.directions
        directions = _load_directions(args.directions)
    else:
        directions = dataset.gradients.bvecs[idx]
    out = shi_sample(vol, directions)
    run.config = {"lmax": vol.lmax, "lb_lambda": vol.lb_lambda, "shell": args.shell,
                  "n_fit_directions": int(idx.size), "n_directions": int(directions.shape[0]),
                  "rank_warning": vol.rank_warning}
    write_nifti(out, dataset.grid, run.out(args.out), dataset.output_affine())
    run.write_manifest(args.out)


def cmd_dti(args, run):
    from nesh.data_io import write_nifti
    from nesh.dti import dti_maps

    dataset = _dataset(args, run)
    maps = dti_maps(dataset, args.shell)
    aff = dataset.output_affine()
    prefix = args.out_prefix
    run.config = {"shell": args.shell}
    write_nifti(maps.md.values, dataset.grid, run.out(prefix + "md.nii.gz"), aff)
    write_nifti(maps.fa.values, dataset.grid, run.out(prefix + "fa.nii.gz"), aff)
    write_nifti(maps.color_fa.values, dataset.grid, run.out(prefix + "colorfa.nii.gz"), aff)
    run.write_manifest(prefix.rstrip("_.-") or prefix + "dti")


def _same_grid_volumes(path_a, path_b):
    from nesh.data_io import read_nifti

    a, grid_a = read_nifti(path_a)
    b, grid_b = read_nifti(path_b)
    if a.shape != b.shape:
        raise CliError(f"shape mismatch: {path_a} {a.shape} vs {path_b} {b.shape}")
    if not np.allclose(grid_a.voxel_size, grid_b.voxel_size):
        raise CliError(f"voxel size mismatch: {grid_a.voxel_size} vs {grid_b.voxel_size}")
    return a, b, grid_a


def cmd_rmse(args, run):
    from nesh.data_io import read_nifti
    from nesh.evaluation import masked_rmse

    a, b, grid = _same_grid_volumes(args.volume_a, args.volume_b)
    run.inputs.update(volume_a=args.volume_a, volume_b=args.volume_b, mask=args.mask)
    mask = None
    if args.mask:
        mask = read_nifti(args.mask)[0] > 0
        if mask.ndim == 4:
            mask = mask[..., 0]
    report = masked_rmse(a, b, mask, args.arm)
    print(f"RMSE {report.rmse:.6g} over {report.n_voxels} voxels x {report.n_directions} directions "
          f"(arm {report.arm})")
    print(f"rmse,{report.arm},{report.rmse!r},{report.n_voxels},{report.n_directions}")
    run.config = asdict(report)
    if args.out:
        with open(run.out(args.out), "w") as fh:
            fh.write("arm,rmse,n_voxels,n_directions\n")
            fh.write(f"{report.arm},{report.rmse!r},{report.n_voxels},{report.n_directions}\n")
        run.write_manifest(args.out)


def cmd_sweep(args, run):
    from nesh.data_io import read_nifti, select_shell
    from nesh.evaluation import angular_sweep, write_sweep_csv

    config = _training_config(args)
    dataset = _dataset(args, run)
    idx = select_shell(dataset, args.shell)
    too_many = [n for n in args.n_list if not 1 <= n <= idx.size]
    if too_many:
        raise CliError(f"--n-list values {too_many} outside 1..{idx.size} (shell size)")
    reference = None
    if args.reference:
        run.inputs["reference"] = args.reference
        ref, _ = read_nifti(args.reference)
        if ref.shape[3] == len(dataset.gradients):
            ref = ref[..., idx]
        reference = ref
    result = angular_sweep(dataset, idx, args.n_list, args.arms, config, args.lb_lambda,
                           args.seed, reference)
    run.config = {"training": config.to_dict(), "n_list": args.n_list, "arms": args.arms,
                  "lb_lambda": args.lb_lambda, "shell": args.shell}
    write_sweep_csv(result, run.out(args.out))
    run.write_manifest(args.out)
    failed = [r for r in result.rows if r.error]
    for r in failed:
        print(f"warning: arm {r.arm} with {r.n_directions} directions failed: {r.error}", file=sys.stderr)


def cmd_diff(args, run):
    from nesh.data_io import read_nifti, write_nifti
    from nesh.evaluation import difference_map

    a, b, grid = _same_grid_volumes(args.map_a, args.map_b)
    affine = read_nifti(args.map_a, with_affine=True)[2]
    run.inputs.update(map_a=args.map_a, map_b=args.map_b)
    run.config = {"reference": args.map_b}
    diff = difference_map(a, b, reference=args.map_b)
    write_nifti(diff.values, grid, run.out(args.out), affine)
    run.write_manifest(args.out)


def cmd_rerun(args, run):
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    return main(manifest["argv"])


COMMANDS = {
    "phantom": cmd_phantom,
    "fit": cmd_fit,
    "reconstruct": cmd_reconstruct,
    "shi": cmd_shi,
    "dti": cmd_dti,
    "rmse": cmd_rmse,
    "sweep": cmd_sweep,
    "diff": cmd_diff,
    "rerun": cmd_rerun,
}


def build_parser():
    from nesh.shi import DEFAULT_LB_LAMBDA

    parser = argparse.ArgumentParser(prog="nesh", description="Continuous diffusion MRI signal representation with neural spherical harmonics.")
    parser.add_argument("--version", action="version", version=f"nesh {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="seed for every random choice: init, shuffling, noise, subsets (default: 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS worker threads (default: $NESH_THREADS, else library default)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic phantom dataset")
    p.add_argument("spec", help="phantom INI file (schema in nesh.phantom), or the name of a bundled "
                        "phantom such as bent_tube")
    p.add_argument("out_dir", help="directory for dwi.nii.gz, bvecs, bvals, mask and truth maps")

    p = sub.add_parser("fit", parents=[common], help="train a NeSH model on one shell")
    _add_dataset_args(p)
    _add_training_args(p)
    p.add_argument("--out", required=True, help="checkpoint path (.nesh); loss log goes to <out>.loss.csv")

    p = sub.add_parser("reconstruct", parents=[common], help="sample a trained model on a grid")
    p.add_argument("checkpoint", help="trained .nesh checkpoint")
    p.add_argument("--out", required=True, help="output 4D NIfTI")
    dirs = p.add_mutually_exclusive_group()
    dirs.add_argument("--directions", help="text file of unit directions (n rows of 3, or 3 rows)")
    dirs.add_argument("--all-fit-dirs", action="store_true", help="use the fitted directions (default)")
    p.add_argument("--upsample-factor", type=int, default=1,
                   help="integer spatial upsampling; voxel size (mm) is divided by it (default: 1)")

    p = sub.add_parser("shi", parents=[common], help="voxelwise regularized SH fit (baseline)")
    _add_dataset_args(p)
    p.add_argument("--lmax", type=int, default=None,
                   help="maximum even SH degree (default: 8, or 2 for <= 10 directions)")
    p.add_argument("--lb-lambda", type=float, default=DEFAULT_LB_LAMBDA,
                   help=f"Laplace-Beltrami weight, dimensionless (default: {DEFAULT_LB_LAMBDA})")
    p.add_argument("--directions", help="text file of directions to sample (default: fitted directions)")
    p.add_argument("--out", required=True, help="output 4D NIfTI")

    p = sub.add_parser("dti", parents=[common], help="MD, FA and colour-FA maps")
    _add_dataset_args(p)
    p.add_argument("--out-prefix", required=True,
                   help="prefix for <prefix>md.nii.gz (mm^2/s), fa.nii.gz and colorfa.nii.gz")

    p = sub.add_parser("rmse", parents=[common], help="masked RMSE between two volumes")
    p.add_argument("volume_a")
    p.add_argument("volume_b")
    p.add_argument("--mask", help="binary mask NIfTI; default: every voxel")
    p.add_argument("--arm", default="raw", help="label for the report (nesh, shi, cubic, raw)")
    p.add_argument("--out", help="optional CSV report path")

    p = sub.add_parser("sweep", parents=[common], help="angular subsampling sweep for NeSH and SHI")
    _add_dataset_args(p)
    _add_training_args(p)
    p.add_argument("--n-list", type=_int_list, required=True,
                   help="comma-separated numbers of fit directions, e.g. 10,15,30")
    p.add_argument("--arms", type=lambda s: [a for a in s.split(",") if a], default=["nesh", "shi"],
                   help="comma-separated arms among nesh,shi (default: nesh,shi)")
    p.add_argument("--lb-lambda", type=float, default=DEFAULT_LB_LAMBDA,
                   help=f"SHI Laplace-Beltrami weight (default: {DEFAULT_LB_LAMBDA})")
    p.add_argument("--reference", help="upsampling target NIfTI (default: the shell's own volumes)")
    p.add_argument("--out", required=True, help="CSV with arm,n_directions,recon_rmse,upsample_rmse")

    p = sub.add_parser("diff", parents=[common], help="signed difference map a - b")
    p.add_argument("map_a")
    p.add_argument("map_b", help="reference map, subtracted from map_a")
    p.add_argument("--out", required=True, help="output NIfTI")

    p = sub.add_parser("rerun", parents=[common], help="repeat a run recorded in a manifest")
    p.add_argument("manifest", help="*.manifest.json written by an earlier run")
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.threads is None and os.environ.get("NESH_THREADS"):
        args.threads = int(os.environ["NESH_THREADS"])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = _Run(args, args.command)
    try:
        with _thread_limit(args.threads):
            rc = COMMANDS[args.command](args, run)
    except (NeshError, CliError, OSError, ValueError, KeyError) as exc:
        run.cleanup()
        print(f"nesh {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
