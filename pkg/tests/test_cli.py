import json

import numpy as np
import pytest

from crackbctf.cli import main
from crackbctf.quantize import read_bfm, read_label_mask
from crackbctf.raster import Raster, read_fr32, read_pnm, write_pnm

W, H = 64, 48


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_doc(err):
    line = [l for l in err.splitlines() if l.startswith("error: ")][-1]
    return json.loads(line[len("error: "):])


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth -> features -> quantize-fit -> quantize-apply -> train -> predict, run once."""
    d = tmp_path_factory.mktemp("chain")
    steps = [
        ["--seed", 2, "synth", "--output-dir", d / "s", "--width", W, "--height", H, "--cracks", 3],
        ["features", "--ir", d / "s/ir.pgm", "--vis", d / "s/vis.ppm", "--xray", d / "s/xray.pgm",
         "--output", d / "f.fr32", "--manifest-out", d / "m.json"],
        ["quantize-fit", "--features", d / "f.fr32", "--manifest", d / "m.json", "--output", d / "q.json"],
        ["quantize-apply", "--features", d / "f.fr32", "--manifest", d / "m.json", "--quantizer", d / "q.json",
         "--output", d / "x.bfm"],
        ["--seed", 1, "train", "--matrix", d / "x.bfm", "--labels", d / "s/labels.pgm", "--quantizer", d / "q.json",
         "--output", d / "post.json", "--train-pixels", 200, "--r", 1, "--rbar", 3, "--iters", 60,
         "--burnin", 20, "--thin", 2],
        ["predict", "--posterior", d / "post.json", "--matrix", d / "x.bfm", "--width", W, "--height", H,
         "--output", d / "prob.fr32", "--binary", d / "bin.pgm"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return d


def test_chain_outputs(chain):
    d = chain
    f = read_fr32(d / "f.fr32")
    assert f.shape == (H, W, 208)
    x = read_bfm(d / "x.bfm")
    assert x.n == W * H and x.p == 208
    assert read_label_mask(d / "s/labels.pgm").shape == (H, W)
    prob = read_fr32(d / "prob.fr32")
    assert prob.shape == (H, W, 1) and prob.min() >= 0 and prob.max() <= 1
    b = read_pnm(d / "bin.pgm").plane
    assert set(np.unique(b)) <= {0.0, 1.0}
    post = json.loads((d / "post.json").read_text())
    assert len(post["samples"]) == 20
    for name in ("f.fr32", "m.json", "q.json", "x.bfm", "post.json", "prob.fr32", "bin.pgm", "s/ir.pgm"):
        assert (d / (name + ".run.json")).is_file()


def test_run_manifest_contents_and_reproducibility(chain, tmp_path, capsys):
    d = chain
    doc = json.loads((d / "post.json.run.json").read_text())
    assert doc["command"] == "train"
    assert doc["parameters"]["iters"] == 60 and doc["parameters"]["seed"] == 1
    assert set(doc["inputs"]) >= {str(d / "x.bfm"), str(d / "s/labels.pgm")}
    assert all(len(h) == 64 for h in doc["outputs"].values())
    before = (d / "post.json").read_bytes(), (d / "post.json.run.json").read_bytes()
    code, _, _ = run(capsys, "--seed", 1, "train", "--matrix", d / "x.bfm", "--labels", d / "s/labels.pgm",
                     "--quantizer", d / "q.json", "--output", d / "post.json", "--train-pixels", 200,
                     "--r", 1, "--rbar", 3, "--iters", 60, "--burnin", 20, "--thin", 2)
    assert code == 0
    assert (d / "post.json").read_bytes() == before[0]
    assert (d / "post.json.run.json").read_bytes() == before[1]


def test_select_and_overlay(chain, capsys):
    d = chain
    code, out, _ = run(capsys, "select", "--posterior", d / "post.json", "--manifest", d / "m.json",
                       "--cutoff", 0.0, "--output", d / "sel.tsv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "X_j\tk_j\tP(incl)\tDescription"
    assert (d / "sel.tsv").read_text() == out
    code, _, _ = run(capsys, "overlay", "--vis", d / "s/vis.ppm", "--crack", d / "bin.pgm",
                     "--output", d / "ov.ppm")
    assert code == 0
    ov = read_pnm(d / "ov.ppm").data
    b = read_pnm(d / "bin.pgm").plane > 0.5
    assert ov.shape == (H, W, 3)
    assert np.all(ov[b] == (1.0, 0.0, 0.0))


@pytest.mark.parametrize("method", ["clahe", "flatten", "mca", "none"])
def test_preprocess(chain, tmp_path, capsys, method):
    out = tmp_path / "p.pgm"
    code, _, _ = run(capsys, "preprocess", "--input", chain / "s/xray.pgm", "--output", out,
                     "--method", method, "--mca-iterations", 3, "--tiles", 4)
    assert code == 0
    r = read_pnm(out)
    assert r.data.shape == (H, W, 1)
    if method == "none":
        np.testing.assert_array_equal(r.data, read_pnm(chain / "s/xray.pgm").data)


def test_align_recovers_shift(chain, tmp_path, capsys):
    ir = read_pnm(chain / "s/ir.pgm").plane
    moved = np.roll(np.roll(ir, 2, axis=0), -3, axis=1)
    write_pnm(Raster(moved), tmp_path / "mov.pgm", depth=16)
    code, out, _ = run(capsys, "align", "--reference", chain / "s/ir.pgm", "--moving", tmp_path / "mov.pgm",
                       "--output", tmp_path / "al.pgm", "--radius", 5, "--offset-out", tmp_path / "off.json")
    assert code == 0
    off = json.loads(out)
    assert (off["dx"], off["dy"]) == (3, -2)
    assert json.loads((tmp_path / "off.json").read_text()) == off


# ---------------------------------------------------------------- failures


def test_bad_arguments(capsys):
    code, _, err = run(capsys, "train", "--matrix", "x")
    doc = error_doc(err)
    assert code == 2 and doc["kind"] == "bad_arguments" and doc["exit"] == 2 and doc["message"]
    code, _, err = run(capsys, "nosuchcommand")
    assert code == 2
    code, _, err = run(capsys, "predict", "--posterior", "a", "--matrix", "b", "--width", "ten",
                       "--height", 3, "--output", "o")
    assert code == 2


def test_missing_input_and_corrupt_magic(tmp_path, capsys):
    code, _, err = run(capsys, "preprocess", "--input", tmp_path / "nope.pgm", "--output", tmp_path / "o.pgm")
    assert code == 3 and error_doc(err)["kind"] == "missing_input"
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"XX12\n")
    code, _, err = run(capsys, "preprocess", "--input", bad, "--output", tmp_path / "o.pgm")
    assert code == 3 and error_doc(err)["kind"] == "format_mismatch"
    assert not (tmp_path / "o.pgm").exists()


def test_dimension_mismatch(chain, tmp_path, capsys):
    code, _, err = run(capsys, "predict", "--posterior", chain / "post.json", "--matrix", chain / "x.bfm",
                       "--width", W + 1, "--height", H, "--output", tmp_path / "p.fr32")
    assert code == 4 and error_doc(err)["kind"] == "contract_violation"
    write_pnm(Raster(np.zeros((H, W + 2))), tmp_path / "other.pgm")
    code, _, err = run(capsys, "align", "--reference", chain / "s/ir.pgm", "--moving", tmp_path / "other.pgm",
                       "--output", tmp_path / "a.pgm")
    assert code == 4


def test_config_precedence(chain, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preprocess": {"method": "none", "output": str(tmp_path / "cfg_out.pgm")}}))
    code, _, _ = run(capsys, "--config", cfg, "preprocess", "--input", chain / "s/ir.pgm")
    assert code == 0
    np.testing.assert_array_equal(read_pnm(tmp_path / "cfg_out.pgm").data, read_pnm(chain / "s/ir.pgm").data)
    doc = json.loads((tmp_path / "cfg_out.pgm.run.json").read_text())
    assert doc["parameters"]["method"] == "none"
    # an explicit flag overrides the config value
    code, _, _ = run(capsys, "--config", cfg, "preprocess", "--input", chain / "s/ir.pgm", "--method", "clahe")
    assert code == 0
    doc = json.loads((tmp_path / "cfg_out.pgm.run.json").read_text())
    assert doc["parameters"]["method"] == "clahe"
    cfg.write_text(json.dumps({"preprocess": {"bogus": 1}}))
    code, _, err = run(capsys, "--config", cfg, "preprocess", "--input", chain / "s/ir.pgm", "--output", "x")
    assert code == 2
