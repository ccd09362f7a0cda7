import json

import nibabel as nib
import numpy as np
import pytest

from nesh.cli import main
from nesh.data_io import read_nifti
from nesh.model import TrainingConfig, load_model
from nesh.phantom import bundled_spec_path

SMALL_SPEC = """
[grid]
dims = 6, 6, 4
voxel_size = 2.5, 2.5, 2.5

[acquisition]
bvalue = 1000
n_directions = 12
noise_sigma = 0.02
seed = 0

[background]
tensor1 = 3e-3 3e-3 3e-3

[region arc]
shape = tube
center = 0, 0, 2
radius = 4
thickness = 1.8
tensor1 = 1.7e-3 0.2e-3 0.2e-3 | tangent
"""

TINY = ["--hidden-dim", "16", "--n-layers", "3", "--lpos", "2", "--epochs", "1", "--batch-size", "64"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.ini").write_text(SMALL_SPEC)
    assert main(["phantom", str(d / "small.ini"), str(d / "ph")]) == 0
    return d


def ds_args(d):
    ph = d / "ph"
    return ["--dwi", str(ph / "dwi.nii.gz"), "--bvecs", str(ph / "bvecs"), "--bvals", str(ph / "bvals"),
            "--mask", str(ph / "mask.nii.gz")]


@pytest.fixture(scope="module")
def checkpoint(workdir):
    out = workdir / "m.nesh"
    assert main(["fit", *ds_args(workdir), *TINY, "--out", str(out)]) == 0
    return out


def test_shipped_spec(tmp_path):
    assert main(["phantom", bundled_spec_path(), str(tmp_path / "a")]) == 0
    data, grid = read_nifti(tmp_path / "a" / "dwi.nii.gz")
    assert data.shape == (16, 16, 16, 31)
    manifest = json.loads((tmp_path / "a" / "phantom.manifest.json").read_text())
    assert manifest["subcommand"] == "phantom"
    assert manifest["seed"] == 0
    assert "tool_version" in manifest and "duration_s" in manifest


def test_phantom_same_seed_identical_files(workdir, tmp_path):
    assert main(["phantom", str(workdir / "small.ini"), str(tmp_path / "b")]) == 0
    for name in ("dwi.nii.gz", "bvecs", "bvals", "mask.nii.gz", "truth_fa.nii.gz"):
        assert (tmp_path / "b" / name).read_bytes() == (workdir / "ph" / name).read_bytes()


def test_seed_flag_overrides_file(workdir, tmp_path):
    assert main(["phantom", str(workdir / "small.ini"), str(tmp_path / "c"), "--seed", "7"]) == 0
    assert (tmp_path / "c" / "dwi.nii.gz").read_bytes() != (workdir / "ph" / "dwi.nii.gz").read_bytes()
    manifest = json.loads((tmp_path / "c" / "phantom.manifest.json").read_text())
    assert manifest["seed"] == 7


def test_invalid_spec(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL_SPEC.replace("radius = 4", "radius = 4\ncolour = red"))
    assert main(["phantom", str(bad), str(tmp_path / "out")]) != 0
    assert "colour" in capsys.readouterr().err


def test_fit_outputs(checkpoint):
    model = load_model(checkpoint)
    lines = (checkpoint.parent / "m.nesh.loss.csv").read_text().splitlines()
    assert len(lines) == 2
    manifest = json.loads((checkpoint.parent / "m.nesh.manifest.json").read_text())
    assert manifest["config"]["training"]["hidden_dim"] == 16
    assert model.config.hidden_dim == 16


def test_fit_defaults_in_manifest(workdir, tmp_path):
    # a config file supplies everything but the defaults we check
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "hidden_dim": 8, "n_layers": 2}))
    out = tmp_path / "d.nesh"
    assert main(["fit", *ds_args(workdir), "--config", str(cfg), "--out", str(out)]) == 0
    training = json.loads((tmp_path / "d.nesh.manifest.json").read_text())["config"]["training"]
    defaults = TrainingConfig()
    for key in ("lpos", "sigma", "lr", "lam", "batch_size", "beta1", "beta2", "eps", "seed"):
        assert training[key] == getattr(defaults, key)
    assert training["lmax"] == 8


def test_fit_rejects_odd_lmax(workdir, tmp_path, capsys):
    out = tmp_path / "odd.nesh"
    assert main(["fit", *ds_args(workdir), *TINY, "--lmax", "3", "--out", str(out)]) != 0
    assert not out.exists()
    assert "lmax" in capsys.readouterr().err


def test_reconstruct_shapes(checkpoint, tmp_path):
    out = tmp_path / "r1.nii.gz"
    assert main(["reconstruct", str(checkpoint), "--out", str(out), "--all-fit-dirs"]) == 0
    data, grid = read_nifti(out)
    assert data.shape == (6, 6, 4, 12)

    dirs = np.random.default_rng(0).normal(size=(90, 3))
    np.savetxt(tmp_path / "dirs.txt", dirs)
    np.savetxt(tmp_path / "dirs_t.txt", dirs.T)
    for name in ("dirs.txt", "dirs_t.txt"):
        out = tmp_path / f"r_{name}.nii.gz"
        assert main(["reconstruct", str(checkpoint), "--out", str(out), "--directions", str(tmp_path / name),
                     "--upsample-factor", "2"]) == 0
        data, grid = read_nifti(out)
        assert data.shape == (12, 12, 8, 90)
        assert grid.voxel_size == (1.25, 1.25, 1.25)


def test_rerun_reproduces(checkpoint, tmp_path):
    out = tmp_path / "r.nii.gz"
    assert main(["reconstruct", str(checkpoint), "--out", str(out)]) == 0
    first = out.read_bytes()
    out.unlink()
    assert main(["rerun", str(tmp_path / "r.nii.gz.manifest.json")]) == 0
    assert out.read_bytes() == first


def test_shi_three_cases(workdir, tmp_path):
    out = tmp_path / "s.nii.gz"
    assert main(["shi", *ds_args(workdir), "--out", str(out)]) == 0
    assert read_nifti(out)[0].shape == (6, 6, 4, 12)
    np.savetxt(tmp_path / "d90", np.random.default_rng(1).normal(size=(90, 3)))
    assert main(["shi", *ds_args(workdir), "--directions", str(tmp_path / "d90"), "--out", str(out)]) == 0
    assert read_nifti(out)[0].shape == (6, 6, 4, 90)
    assert main(["shi", *ds_args(workdir), "--lmax", "5", "--out", str(tmp_path / "x.nii")]) != 0


def test_dti_outputs_and_pixdim(workdir, tmp_path):
    prefix = str(tmp_path / "dti_")
    assert main(["dti", *ds_args(workdir), "--out-prefix", prefix]) == 0
    for name in ("md", "fa", "colorfa"):
        hdr = nib.load(prefix + name + ".nii.gz").header
        np.testing.assert_allclose(hdr["pixdim"][1:4], 2.5)
    assert read_nifti(prefix + "colorfa.nii.gz")[0].shape == (6, 6, 4, 3)


def test_dti_missing_b0(workdir, tmp_path, capsys):
    ph = workdir / "ph"
    data, grid, aff = read_nifti(ph / "dwi.nii.gz", with_affine=True)
    nib.save(nib.Nifti1Image(data[..., 1:].astype(np.float32), aff), str(tmp_path / "dw.nii.gz"))
    bvecs = np.loadtxt(ph / "bvecs")[:, 1:]
    np.savetxt(tmp_path / "bvecs", bvecs)
    np.savetxt(tmp_path / "bvals", np.full((1, 12), 1000.0))
    rc = main(["dti", "--dwi", str(tmp_path / "dw.nii.gz"), "--bvecs", str(tmp_path / "bvecs"),
               "--bvals", str(tmp_path / "bvals"), "--out-prefix", str(tmp_path / "x_")])
    assert rc != 0
    assert "b=0" in capsys.readouterr().err
    assert not list(tmp_path.glob("x_*"))


def test_rmse(workdir, tmp_path, capsys):
    dwi = str(workdir / "ph" / "dwi.nii.gz")
    assert main(["rmse", dwi, dwi, "--mask", str(workdir / "ph" / "mask.nii.gz")]) == 0
    out = capsys.readouterr().out.splitlines()
    machine = [line for line in out if line.startswith("rmse,")][0].split(",")
    assert float(machine[2]) == 0.0
    assert int(machine[3]) > 0
    assert main(["rmse", dwi, str(workdir / "ph" / "truth_fa.nii.gz")]) != 0


def test_sweep(workdir, tmp_path):
    out = tmp_path / "sweep.csv"
    args = ["sweep", *ds_args(workdir), *TINY, "--n-list", "4,8,12", "--arms", "nesh,shi", "--out", str(out)]
    assert main(args) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 7
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first
    assert main(["sweep", *ds_args(workdir), "--n-list", "40", "--out", str(tmp_path / "bad.csv")]) != 0
    assert not (tmp_path / "bad.csv").exists()


def test_diff(workdir, tmp_path):
    fa = str(workdir / "ph" / "truth_fa.nii.gz")
    md = str(workdir / "ph" / "truth_md.nii.gz")
    assert main(["diff", fa, fa, "--out", str(tmp_path / "z.nii.gz")]) == 0
    assert np.all(read_nifti(tmp_path / "z.nii.gz")[0] == 0)
    assert main(["diff", fa, md, "--out", str(tmp_path / "a.nii.gz")]) == 0
    assert main(["diff", md, fa, "--out", str(tmp_path / "b.nii.gz")]) == 0
    np.testing.assert_array_equal(read_nifti(tmp_path / "a.nii.gz")[0], -read_nifti(tmp_path / "b.nii.gz")[0])
    dwi = str(workdir / "ph" / "dwi.nii.gz")
    assert main(["diff", fa, dwi, "--out", str(tmp_path / "c.nii.gz")]) != 0


def test_threads_flag(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("NESH_THREADS", "1")
    assert main(["dti", *ds_args(workdir), "--out-prefix", str(tmp_path / "t_")]) == 0
    assert main(["dti", *ds_args(workdir), "--threads", "2", "--out-prefix", str(tmp_path / "u_")]) == 0


def test_help_mentions_units(capsys):
    with pytest.raises(SystemExit):
        main(["fit", "--help"])
    text = capsys.readouterr().out
    assert "s/mm^2" in text
