import json

import numpy as np
import pytest

from hqsrestore import cli, model_store
from hqsrestore.image_io import load_image, load_mask, save_image, save_kernel
from hqsrestore.params import ModelParams
from hqsrestore.prior import random_prior
from hqsrestore.rbf import RbfGrid


def smooth_image(seed, shape=(40, 48)):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    img = 128 + 60 * np.sin(xx / (5 + seed)) * np.cos(yy / 7) + rng.normal(0, 5, shape)
    return np.clip(np.round(img), 0, 255)


@pytest.fixture
def clean_dir(tmp_path):
    d = tmp_path / "clean"
    d.mkdir()
    for i in range(3):
        save_image(d / f"img{i}.png", smooth_image(i))
    return d


@pytest.fixture
def model_path(tmp_path):
    prior = random_prior(np.random.default_rng(0), 2, 3, 3, RbfGrid(9, 310.0), weight_scale=5.0)
    lams = {"denoise/15": 0.3, "denoise/25": 0.1, "deconv/5": 1.0}
    path = tmp_path / "model.bin"
    model_store.save(ModelParams.create(prior, lams), path)
    return path


@pytest.fixture
def zero_model_path(tmp_path):
    # zero-weight prior: the prior step is the identity
    prior = random_prior(np.random.default_rng(1), 1, 1, 3, RbfGrid(5, 310.0), weight_scale=0.0)
    path = tmp_path / "zero.bin"
    model_store.save(ModelParams.create(prior, {"denoise/0": 1.0, "denoise/15": 0.5}), path)
    return path


def test_degrade_sigma_zero_reproduces_input(clean_dir, tmp_path):
    out = tmp_path / "deg"
    assert cli.main(["degrade", "--input", str(clean_dir), "--output", str(out), "--sigma", "0"]) == 0
    for i in range(3):
        assert np.array_equal(load_image(out / f"img{i}.png"), load_image(clean_dir / f"img{i}.png"))


def test_degrade_is_deterministic_per_seed(clean_dir, tmp_path):
    runs = []
    for tag in ("a", "b", "c"):
        seed = "7" if tag != "c" else "8"
        out = tmp_path / tag
        assert cli.main(["degrade", "--input", str(clean_dir), "--output", str(out), "--seed", seed, "--psf-size", "5"]) == 0
        runs.append([(out / f"img{i}.png").read_bytes() + (out / f"img{i}.psf.txt").read_bytes() for i in range(3)])
    assert runs[0] == runs[1]
    assert runs[0] != runs[2]


def test_degrade_mask_fraction(tmp_path):
    src = tmp_path / "big"
    src.mkdir()
    save_image(src / "a.png", smooth_image(0, (200, 200)))
    out = tmp_path / "deg"
    assert cli.main(["degrade", "--input", str(src), "--output", str(out), "--mask-fraction", "0.6"]) == 0
    mask = load_mask(out / "a.mask.pgm")
    assert abs((1 - mask.mean()) - 0.6) <= 0.005
    entry = json.loads((out / "manifest.json").read_text())["entries"][0]
    assert entry["task"] == "inpaint" and abs(entry["masked_fraction"] - 0.6) <= 0.005


def test_degrade_reports_bad_files_and_continues(clean_dir, tmp_path):
    (clean_dir / "broken.png").write_bytes(b"not an image")
    out = tmp_path / "deg"
    assert cli.main(["degrade", "--input", str(clean_dir), "--output", str(out)]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["entries"]) == 3
    assert [e["file"] for e in manifest["errors"]] == ["broken.png"]


def test_degrade_usage_errors(clean_dir, tmp_path):
    assert cli.main(["degrade", "--input", str(tmp_path / "nope"), "--output", str(tmp_path / "o")]) == 1
    assert cli.main(["degrade", "--input", str(clean_dir), "--output", str(tmp_path / "o"),
                     "--mask-fraction", "1.5"]) == 1
    with pytest.raises(SystemExit) as err:
        cli.main(["degrade", "--input", str(clean_dir)])
    assert err.value.code == 1


@pytest.mark.parametrize("extra", [
    ["--task", "deconv"],
    ["--task", "inpaint"],
    ["--task", "denoise", "--psf", "k.txt"],
    ["--T", "0"],
    ["--tau", "3"],
])
def test_restore_usage_errors_write_nothing(model_path, clean_dir, tmp_path, extra):
    out = tmp_path / "out.png"
    code = cli.main(["restore", "--model", str(model_path), "--input", str(clean_dir / "img0.png"),
                     "--output", str(out)] + extra)
    assert code == 1
    assert not out.exists() and not out.with_suffix(".jsonl").exists()


def test_restore_unknown_class_is_a_usage_error(model_path, clean_dir, tmp_path):
    code = cli.main(["restore", "--model", str(model_path), "--input", str(clean_dir / "img0.png"),
                     "--output", str(tmp_path / "o.png"), "--sigma", "40"])
    assert code == 1


def test_restore_corrupt_model_is_a_data_error(model_path, clean_dir, tmp_path):
    blob = bytearray(model_path.read_bytes())
    blob[50] ^= 1
    model_path.write_bytes(bytes(blob))
    code = cli.main(["restore", "--model", str(model_path), "--input", str(clean_dir / "img0.png"),
                     "--output", str(tmp_path / "o.png")])
    assert code == 2


def test_delta_psf_deconv_matches_denoise(model_path, clean_dir, tmp_path):
    delta = np.zeros((5, 5))
    delta[2, 2] = 1.0
    save_kernel(tmp_path / "delta.txt", delta)
    common = ["restore", "--model", str(model_path), "--input", str(clean_dir / "img1.png"),
              "--reference", str(clean_dir / "img0.png"), "--sigma", "15"]
    assert cli.main(common + ["--output", str(tmp_path / "den.png")]) == 0
    assert cli.main(common + ["--output", str(tmp_path / "dec.png"), "--task", "deconv",
                              "--psf", str(tmp_path / "delta.txt"), "--class-id", "denoise/15"]) == 0
    assert (tmp_path / "den.png").read_bytes() == (tmp_path / "dec.png").read_bytes()
    rows = [[json.loads(l) for l in (tmp_path / f"{n}.jsonl").read_text().splitlines()] for n in ("den", "dec")]
    assert len(rows[0]) == 3
    for a, b in zip(*rows):
        assert abs(a["psnr"] - b["psnr"]) <= 1e-8


def test_restore_color_image_per_channel(model_path, tmp_path):
    from PIL import Image

    rgb = np.stack([smooth_image(i) for i in range(3)], axis=-1).astype(np.uint8)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    assert cli.main(["restore", "--model", str(model_path), "--input", str(tmp_path / "c.png"),
                     "--output", str(tmp_path / "o.png"), "--T", "2"]) == 0
    with Image.open(tmp_path / "o.png") as im:
        assert im.mode == "RGB" and im.size == (48, 40)
    channels = {json.loads(l)["channel"] for l in (tmp_path / "o.jsonl").read_text().splitlines()}
    assert channels == {0, 1, 2}


def test_eval_clean_pairs_hit_the_cap(zero_model_path, clean_dir, tmp_path):
    report = tmp_path / "r.jsonl"
    code = cli.main(["eval", "--model", str(zero_model_path), "--reference", str(clean_dir),
                     "--sigma", "0", "--T", "1", "--report", str(report)])
    assert code == 0
    lines = [json.loads(l) for l in report.read_text().splitlines()]
    rows = [l for l in lines if l["type"] == "row"]
    assert len(rows) == 3 and all(r["output_psnr"] == 60.0 and r["input_psnr"] == 60.0 for r in rows)
    assert lines[-1]["type"] == "meta" and "runtime" in lines[-1]["note"]


def test_eval_aggregates_are_row_means(model_path, clean_dir, tmp_path, capsys):
    report = tmp_path / "r.jsonl"
    code = cli.main(["eval", "--model", str(model_path), "--reference", str(clean_dir),
                     "--sweep-T", "1,3", "--sweep-sigma", "15,25", "--report", str(report), "--jobs", "2"])
    assert code == 0
    lines = [json.loads(l) for l in report.read_text().splitlines()]
    rows = [l for l in lines if l["type"] == "row"]
    aggs = [l for l in lines if l["type"] == "aggregate"]
    assert len(rows) == 12 and len(aggs) == 4
    for a in aggs:
        sel = [r for r in rows if r["setting"] == a["setting"] and r["T"] == a["T"]]
        assert a["mean_output_psnr"] == pytest.approx(np.mean([r["output_psnr"] for r in sel]), abs=1e-12)
        assert a["mean_input_psnr"] == pytest.approx(np.mean([r["input_psnr"] for r in sel]), abs=1e-12)
    keys = [(r["setting"], r["T"], r["name"]) for r in rows]
    assert keys == sorted(keys)
    table = capsys.readouterr().out
    assert "sigma=15" in table and "sigma=25" in table


def test_eval_is_reproducible_across_job_counts(model_path, clean_dir, tmp_path):
    outs = []
    for jobs in ("1", "3"):
        report = tmp_path / f"r{jobs}.jsonl"
        cli.main(["eval", "--model", str(model_path), "--reference", str(clean_dir), "--report", str(report),
                  "--jobs", jobs])
        rows = [json.loads(l) for l in report.read_text().splitlines() if json.loads(l)["type"] == "row"]
        outs.append([(r["name"], r["input_psnr"], r["output_psnr"]) for r in rows])
    assert outs[0] == outs[1]


def test_eval_flags_unpaired_files(model_path, clean_dir, tmp_path, capsys):
    deg = tmp_path / "deg"
    assert cli.main(["degrade", "--input", str(clean_dir), "--output", str(deg)]) == 0
    save_image(clean_dir / "extra.png", smooth_image(5))
    report = tmp_path / "r.jsonl"
    code = cli.main(["eval", "--model", str(model_path), "--reference", str(clean_dir),
                     "--degraded", str(deg), "--report", str(report)])
    assert code == 2
    meta = [json.loads(l) for l in report.read_text().splitlines()][-1]
    assert meta["unpaired"] == ["extra"]
    assert "extra" in capsys.readouterr().out


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck", "--blocks", "loss", "--arch", "1,1,3,2"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2
    assert cli.main(["gradcheck", "--blocks", "prior-prox", "--corrupt", "prior-prox"]) == 3
    out = capsys.readouterr().out
    assert "FAIL prior-prox" in out and "stage" in out
    assert cli.main(["gradcheck", "--blocks", "nope"]) == 1


def test_train_from_manifest(clean_dir, tmp_path):
    manifest = {
        "images": [f"clean/img{i}.png" for i in range(3)],
        "patch_size": 24,
        "seed": 3,
        "classes": [{"kind": "denoise", "sigma": 15, "count": 4}, {"kind": "deconv", "sigma": 5, "count": 2, "psf_size": 5}],
        "config": {"T_final": 2, "n_stages": 1, "n_filters": 2, "filter_size": 3, "greedy_iters": 3, "refine_iters": 2},
    }
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    out = tmp_path / "models" / "net.bin"
    out.parent.mkdir()
    log = tmp_path / "train.jsonl"
    code = cli.main(["train", "--manifest", str(tmp_path / "m.json"), "--output", str(out), "--log", str(log)])
    assert code in (0, 3)
    model = model_store.load(out)
    assert sorted(model.class_ids) == ["deconv/5", "denoise/15"]
    assert model.prior.n_stages == 1 and model.prior.n_filters == 2
    assert sorted(p.name for p in out.parent.iterdir()) == ["net.bin", "net.greedy-1.bin", "net.refine-T2.bin"]
    assert model_store.load(out.parent / "net.greedy-1.bin").metadata["phase"] == "greedy-1"
    records = [json.loads(l) for l in log.read_text().splitlines()]
    assert records and {r["phase"] for r in records} <= {"greedy-1", "refine-T2"}
    assert all(np.isfinite(r["loss"]) for r in records)


def test_train_missing_manifest(tmp_path):
    assert cli.main(["train", "--manifest", str(tmp_path / "none.json"), "--output", str(tmp_path / "o.bin")]) == 1
