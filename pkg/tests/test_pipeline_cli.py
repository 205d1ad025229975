import json
import os

import numpy as np
import pytest

from structvol import cli, mgm, phantoms, pipeline, read_svol, write_svol


def write_cfg(tmp_path, **over):
    cfg = pipeline.demo_config()
    cfg.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def errors_for(path):
    return {e["path"] for e in pipeline.validate_config(path)["errors"]}


def test_demo_config_is_valid(tmp_path):
    assert pipeline.validate_config(write_cfg(tmp_path)) == {"valid": True, "errors": []}


def test_range_errors_name_fields(tmp_path):
    assert "skip_interval" in errors_for(write_cfg(tmp_path, skip_interval=0))
    bad = {"fraction": 0.5, "ranges": {"scale": [-0.5, 1.1]}}
    assert "mgm.ranges.scale" in errors_for(write_cfg(tmp_path, mgm=bad))
    assert "seed" in errors_for(write_cfg(tmp_path, seed=-1))
    assert "seed" in errors_for(write_cfg(tmp_path, seed=2 ** 64))
    assert "templates.manifest" in errors_for(write_cfg(tmp_path, templates={"manifest": "nope.json"}))
    assert "schedule" in errors_for(write_cfg(tmp_path, schedule="cosine"))
    assert "colour" in errors_for(write_cfg(tmp_path, colour=1))


def test_invalid_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{")
    assert not pipeline.validate_config(p)["valid"]


def test_missing_path_fails_before_any_stage(tmp_path, capsys):
    out = tmp_path / "out"
    p = write_cfg(tmp_path, templates={"manifest": "missing.json"}, output_dir=str(out))
    assert cli.main(["demo", "--config", str(p)]) == 2
    assert not out.exists()
    assert "templates.manifest" in capsys.readouterr().err


def run(tmp_path, name, threads=None, monkeypatch=None):
    if threads is not None:
        monkeypatch.setenv("STRUCTVOL_THREADS", str(threads))
    out = tmp_path / name
    pipeline.run_pipeline(write_cfg(tmp_path), str(out))
    return out


def snapshot(d):
    files = {}
    for root, _, names in os.walk(d):
        for n in names:
            p = os.path.join(root, n)
            files[os.path.relpath(p, d)] = open(p, "rb").read()
    return files


def test_pipeline_deterministic_and_manifest_complete(tmp_path, monkeypatch):
    a = run(tmp_path, "a", 1, monkeypatch)
    b = run(tmp_path, "b", 3, monkeypatch)
    sa, sb = snapshot(a), snapshot(b)
    assert sa == sb
    man = json.loads(sa["run_manifest.json"])
    listed = [x["path"] for x in man["artifacts"]]
    assert len(listed) == len(set(listed))
    assert set(listed) == {p.replace(os.sep, "/") for p in sa} - {"run_manifest.json"}
    for x in man["artifacts"]:
        assert x["sha256"] == pipeline._sha256(a / x["path"])
    report = json.loads(sa["report.json"])
    assert report["fid"] == "unavailable" and 0 <= report["mean_dice"] <= 1


def test_stage_failure_exit_code(tmp_path, capsys):
    cfg = {"segmenter": {**pipeline.demo_config()["segmenter"], "num_classes": 2}}
    lab = np.zeros((16, 16, 16), np.uint8)
    lab[4:8, 4:8, :] = 3
    pair = phantoms.phantom_pair((16, 16, 16), 0)
    write_svol(tmp_path / "m.svol", mgm.LabelVolume(lab))
    write_svol(tmp_path / "i.svol", pair.image)
    (tmp_path / "lib.json").write_text(json.dumps([{"image": "i.svol", "mask": "m.svol"}]))
    p = write_cfg(tmp_path, templates={"manifest": "lib.json"}, output_dir="o", **cfg)
    assert cli.main(["demo", "--config", str(p)]) == 3
    err = capsys.readouterr().err
    assert "train-seg" in err


def test_validate_command(tmp_path, capsys):
    assert cli.main(["validate", "--config", str(write_cfg(tmp_path))]) == 0
    assert cli.main(["validate", "--config", str(write_cfg(tmp_path, skip_interval=0))]) == 2
    assert cli.main(["bogus"]) == 2


def test_cli_chain(tmp_path, capsys):
    d = tmp_path
    pairs = [phantoms.phantom_pair((16, 16, 16), s, radius=2.0) for s in range(2)]
    recs = []
    for i, p in enumerate(pairs):
        write_svol(d / f"i{i}.svol", p.image)
        write_svol(d / f"m{i}.svol", p.mask)
        recs.append({"image": f"i{i}.svol", "mask": f"m{i}.svol"})
    (d / "lib.json").write_text(json.dumps(recs))

    assert cli.main(["mgm", "--in", str(d / "m0.svol"), "--out", str(d / "mt.svol"), "--seed", "4",
                     "--report", str(d / "topo.json")]) == 0
    topo = json.loads((d / "topo.json").read_text())
    assert topo["classes"]["1"]["before"] >= 1
    assert cli.main(["mgm", "--in", str(d / "m0.svol"), "--out", str(d / "id.svol"), "--rot", "0,0,0",
                     "--alpha", "0", "--no-closing"]) == 0
    np.testing.assert_array_equal(read_svol(d / "id.svol").labels, pairs[0].mask.labels)

    capsys.readouterr()
    assert cli.main(["pair", "--manifest", str(d / "lib.json"), "--list-pairs"]) == 0
    assert json.loads(capsys.readouterr().out)["count"] == 4
    assert cli.main(["pair", "--manifest", str(d / "lib.json"), "--reference", str(d / "mt.svol"),
                     "--template", "1", "--out", str(d / "cond.svol")]) == 0
    assert read_svol(d / "cond.svol").channels == 17

    args = ["synth", "--cond", str(d / "cond.svol"), "--schedule", "linear:0.001:0.2:50", "--seed", "2",
            "--trace", "k=10", "--out", str(d / "img.svol"), "--trace-out", str(d / "trace"), "--mu", "0.2"]
    assert cli.main(args) == 0
    assert sorted(os.listdir(d / "trace")) == [f"step_{s:06d}.svol" for s in (0, 10, 20, 30, 40)]
    first = (d / "img.svol").read_bytes()
    assert cli.main(args) == 0 and (d / "img.svol").read_bytes() == first

    assert cli.main(["ssv", "--trace-dir", str(d / "trace"), "--out", str(d / "cmap.svol")]) == 0
    c = read_svol(d / "cmap.svol").values
    assert c.min() >= 0 and c.max() <= 1

    from structvol import ssv
    entry = ssv.attach_confidence(read_svol(d / "mt.svol"), pairs[0].image, read_svol(d / "cmap.svol"))
    ssv.write_manifest(d / "corpus.json", [ssv.save_entry(entry, d, "syn0")])
    assert cli.main(["train-seg", "--corpus", str(d / "corpus.json"), "--cal", "on", "--epochs-pre", "3",
                     "--epochs-fine", "2", "--real", str(d / "lib.json"), "--seed", "1", "--lr", "4",
                     "--out", str(d / "model.json"), "--history", str(d / "h.csv")]) == 0
    assert (d / "h.csv").read_text().splitlines()[0] == "step,loss"
    assert cli.main(["train-seg", "--corpus", str(d / "corpus.json"), "--cal", "maybe",
                     "--out", str(d / "x.json")]) == 2

    assert cli.main(["eval", "--pred", str(d / "m0.svol"), "--gt", str(d / "m0.svol"),
                     "--metrics", "dice,rdice,lpips", "--out", str(d / "r.json")]) == 0
    assert json.loads((d / "r.json").read_text()) == {"dice": 1.0, "rdice": 1.0, "lpips": "unavailable"}
    assert cli.main(["eval", "--pred", str(d / "i0.svol"), "--gt", str(d / "i1.svol"),
                     "--metrics", "ssim,rmse", "--out", str(d / "r2.json")]) == 0
    assert cli.main(["eval", "--pred", str(d / "nope.svol"), "--gt", str(d / "m0.svol")]) == 2
    (d / "bad.svol").write_bytes(b"SVOL\x01")
    assert cli.main(["eval", "--pred", str(d / "bad.svol"), "--gt", str(d / "m0.svol")]) == 3


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["--help"])
    out = capsys.readouterr().out
    for sub in ("mgm", "pair", "synth", "ssv", "train-seg", "eval", "demo", "validate"):
        assert sub in out


def test_crop_config_checked_and_applied(tmp_path):
    crop = {"size": [12, 12, 12], "policy": "random"}
    tmpl = {"phantom": {"count": 3, "dims": [18, 18, 18], "noise": 0.05}}
    p = write_cfg(tmp_path, crop=crop, templates=tmpl)
    assert pipeline.validate_config(p)["valid"]
    out = tmp_path / "run"
    pipeline.run_pipeline(p, str(out))
    assert read_svol(out / "data" / "templates" / "000_image.svol").dims == (12, 12, 12)
    assert "crop.size" in errors_for(write_cfg(tmp_path, crop={"size": [10, 12, 12]}))
    assert "crop.policy" in errors_for(write_cfg(tmp_path, crop={"size": [8, 8, 8], "policy": "edge"}))


def test_pair_crop_flag(tmp_path):
    p = phantoms.phantom_pair((20, 20, 20), 0)
    write_svol(tmp_path / "i.svol", p.image)
    write_svol(tmp_path / "m.svol", p.mask)
    (tmp_path / "lib.json").write_text(json.dumps([{"image": "i.svol", "mask": "m.svol"}]))
    assert cli.main(["pair", "--manifest", str(tmp_path / "lib.json"), "--reference", str(tmp_path / "m.svol"),
                     "--template", "0", "--crop", "16,16,16", "--out", str(tmp_path / "c.svol")]) == 0
    c = read_svol(tmp_path / "c.svol")
    assert c.dims == (16, 16, 16)
    np.testing.assert_array_equal(c.values[16], p.image.values[0, 2:18, 2:18, 2:18])
