import json

import numpy as np
import pytest

from seedcomplete import checkpoint as ckpt_io
from seedcomplete.autodiff import default_dtype
from seedcomplete.cli import main
from seedcomplete.config import ConfigError, ModelConfig
from seedcomplete.dataset import make_sample, write_sample
from seedcomplete.metrics import format_report
from seedcomplete.model import SSCNet, compute_losses, noisy_depth, prepare
from seedcomplete.train import Trainer, epoch_order, evaluate, model_from_checkpoint, occupancy_summary
from seedcomplete.voxels import FormatError, SceneSpec, read_vgrid

TINY = dict(spec="16,16,8:0.8:0.0,-6.4,-2.0", channels=4, occ_channels=2, encoder_widths=(4, 4),
            refiner_widths=(4, 4, 8), aspp_branch=2, image_width=32, image_height=16, dtype="float64",
            lr=5e-3, steps=3)


def tiny_config(**kw):
    return ModelConfig(**{**TINY, **kw})


def tiny_samples(config, n=2):
    return [make_sample(i, config.output_spec, width=config.image_width, height=config.image_height,
                        scene_id=f"s{i}") for i in range(n)]


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_config(steps=6, threshold=0.3)
    samples = tiny_samples(cfg)
    tr = Trainer(cfg, samples)
    tr.run()
    return cfg, samples, tr


# -- config -------------------------------------------------------------------

def test_config_text_round_trip():
    cfg = tiny_config(semantic_guidance=False, threshold=0.25)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# desk run\nchannels = 8\nlr=1e-3\n")
    cfg = ModelConfig.load(p, ["lr=0.5"])
    assert cfg.channels == 8 and cfg.lr == 0.5


@pytest.mark.parametrize("pairs,match", [
    ({"nope": "1"}, "unknown config key"),
    ({"threshold": "1.0"}, "threshold"),
    ({"spec": "10,10,10:0.5"}, "divisible"),
    ({"image_width": "30"}, "divisible"),
])
def test_config_validation(pairs, match):
    with pytest.raises(ConfigError, match=match):
        ModelConfig.from_pairs(pairs)


def test_prepare_rejects_grid_mismatch():
    cfg = tiny_config()
    sample = make_sample(0, SceneSpec.desk(), width=32, height=16)
    with pytest.raises(ConfigError, match="grid"):
        prepare(sample, cfg)


def test_noisy_depth_keeps_misses():
    d = np.array([[0.0, 5.0], [3.0, 0.0]])
    out = noisy_depth(d, 0.5, 1, 0)
    assert out[0, 0] == 0 and out[1, 1] == 0
    assert out.tobytes() == noisy_depth(d, 0.5, 1, 0).tobytes()


# -- model --------------------------------------------------------------------

def test_output_is_twice_working_resolution(trained):
    cfg, samples, tr = trained
    pred = tr.model.predict(prepare(samples[0], cfg))
    assert pred.logits.shape == (cfg.n_classes,) + cfg.working_spec.dims
    assert pred.labels.shape == cfg.output_spec.dims


def test_infer_matches_train_graph(trained):
    cfg, samples, tr = trained
    prep = prepare(samples[0], cfg)
    train_pred = tr.model(prep, "train")
    infer_pred = tr.model.predict(prep)
    assert train_pred.n_seeds > 0
    assert train_pred.seed_logits is not None and train_pred.geo_logits is not None
    assert infer_pred.seed_logits is None and infer_pred.geo_logits is None
    assert train_pred.logits.data.tobytes() == infer_pred.logits.data.tobytes()


def test_bad_mode(trained):
    cfg, samples, tr = trained
    with pytest.raises(ValueError, match="mode"):
        tr.model(prepare(samples[0], cfg), "eval")


def test_losses_finite_and_guidance_off_zero():
    cfg = tiny_config(semantic_guidance=False, threshold=0.05)
    prep = prepare(tiny_samples(cfg, 1)[0], cfg)
    with default_dtype(cfg.dtype):
        model = SSCNet(cfg)
        rep = compute_losses(model(prep), prep, cfg)
    vals = rep.values()
    assert all(np.isfinite(v) for v in vals.values())
    assert vals["l_sem"] == 0


# -- training -----------------------------------------------------------------

def test_seed_telemetry(trained):
    _, _, tr = trained
    for rec in tr.records:
        if "n_seeds" in rec:
            assert rec["n_seeds"] == rec["occupancy_above"]["threshold"]


def test_occupancy_summary():
    s = occupancy_summary(np.array([0.05, 0.15, 0.55, 0.95]), 0.5)
    assert s["0.1"] == 3 and s["0.5"] == 2 and s["0.9"] == 1 and s["threshold"] == 2


def test_epoch_order_is_permutation():
    a = epoch_order(3, 0, 10)
    assert sorted(a.tolist()) == list(range(10))
    assert a.tolist() == epoch_order(3, 0, 10).tolist()
    assert a.tolist() != epoch_order(3, 1, 10).tolist()


def test_epoch_records(trained):
    _, _, tr = trained
    epochs = [r for r in tr.records if "epoch" in r]
    assert [r["epoch"] for r in epochs] == [1, 2, 3]
    assert set(epochs[0]["mean_losses"]) == {"l_geo", "l_occ", "l_sem", "l_ssc", "total"}


def test_lr_zero_freezes_parameters():
    cfg = tiny_config(lr=0.0, steps=0, epochs=1)
    tr = Trainer(cfg, tiny_samples(cfg))
    before = {k: v.copy() for k, v in tr.model.state_dict().items()}
    tr.run()
    assert tr.step == 2
    for k, v in tr.model.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


def test_identical_runs_give_identical_checkpoints():
    cfg = tiny_config(steps=2)
    a = ckpt_io.to_bytes(Trainer(cfg, tiny_samples(cfg)).checkpoint())
    runs = []
    for _ in range(2):
        tr = Trainer(cfg, tiny_samples(cfg))
        tr.run()
        runs.append(ckpt_io.to_bytes(tr.checkpoint()))
    assert runs[0] == runs[1] and runs[0] != a


def test_resume_is_bit_identical(tmp_path):
    cfg = tiny_config(steps=5)
    straight = Trainer(cfg, tiny_samples(cfg))
    straight.run()
    first = Trainer(cfg, tiny_samples(cfg))
    first.run(steps=3)
    ckpt_io.save(tmp_path / "mid.ckpt", first.checkpoint())
    resumed = Trainer(cfg, tiny_samples(cfg), resume=ckpt_io.load(tmp_path / "mid.ckpt"))
    recs = resumed.run()
    assert recs[0]["step"] == 4
    want = [r for r in straight.records if r.get("step") == 4 and "losses" in r][0]
    assert recs[0]["losses"] == want["losses"]
    assert ckpt_io.to_bytes(resumed.checkpoint()) == ckpt_io.to_bytes(straight.checkpoint())


def test_resume_with_other_config_rejected(trained):
    cfg, samples, tr = trained
    with pytest.raises(ConfigError, match="differs"):
        Trainer(cfg.replace(lr=1.0), samples, resume=tr.checkpoint())


def test_gradient_accumulation_runs():
    cfg = tiny_config(steps=1, accum_steps=2)
    rec = Trainer(cfg, tiny_samples(cfg)).train_step()
    assert len(rec["scenes"]) == 2


def test_evaluate_deterministic_with_class_lines(trained):
    cfg, samples, tr = trained
    a = evaluate(samples, tr.model, cfg, ranges=(3.2,))
    b = evaluate(samples, tr.model, cfg, ranges=(3.2,))
    text = format_report(a["full"], ranged=a["ranges"])
    assert text == format_report(b["full"], ranged=b["ranges"])
    assert text.startswith("road ") and "mIoU@3.2" in text


# -- checkpoint format --------------------------------------------------------

def test_checkpoint_round_trip(trained, tmp_path):
    _, _, tr = trained
    raw = ckpt_io.to_bytes(tr.checkpoint())
    back = ckpt_io.from_bytes(raw)
    assert ckpt_io.to_bytes(back) == raw
    cfg, model = model_from_checkpoint(back)
    for (k, v), (k2, v2) in zip(model.state_dict().items(), tr.model.state_dict().items()):
        assert k == k2 and v.tobytes() == v2.tobytes()


def test_checkpoint_errors(trained):
    raw = ckpt_io.to_bytes(trained[2].checkpoint())
    with pytest.raises(FormatError, match="truncated array"):
        ckpt_io.from_bytes(raw[:-3])
    with pytest.raises(FormatError, match="magic"):
        ckpt_io.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="version 9"):
        ckpt_io.from_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError, match="trailing"):
        ckpt_io.from_bytes(raw + b"\0")
    with pytest.raises(FileNotFoundError):
        ckpt_io.load("/nonexistent/x.ckpt")


# -- command line -------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--seed", "0", "--count", "2", "--spec", TINY["spec"], "--out", str(data),
                 "--width", "32", "--height", "16"]) == 0
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(tiny_config().to_text())
    ck = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(ck), "--set", "steps=2"]) == 0
    log = [json.loads(l) for l in (tmp_path / "m.ckpt.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log if "losses" in r] == [1, 2]
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ck), "--data", str(data), "--format", "kv"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("iou=") and "miou@12.8=" in out
    grid = tmp_path / "pred.vgrd"
    assert main(["infer", "--ckpt", str(ck), "--sample", str(data / "scenes" / "0000"), "--out-vgrid", str(grid)]) == 0
    vals, spec = read_vgrid(grid)
    want = SceneSpec.parse(TINY["spec"])
    # the header stores origin and voxel size as float32
    assert spec.dims == want.dims and vals.dtype == np.uint8
    np.testing.assert_array_equal(np.float32(spec.origin), np.float32(want.origin))
    assert main(["bench", "--ckpt", str(ck), "--repeats", "1"]) == 0


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"SSCK\x01\x00")
    assert main(["infer", "--ckpt", str(bad), "--sample", str(tmp_path), "--out-vgrid", str(tmp_path / "o")]) == 2
    assert main(["train", "--out", str(tmp_path / "x.ckpt"), "--set", "threshold=2"]) == 1
    err = capsys.readouterr().err
    assert "threshold" in err


def test_cli_sample_written_by_library_loads(tmp_path):
    cfg = tiny_config()
    write_sample(tmp_path / "scene", tiny_samples(cfg, 1)[0])
    tr = Trainer(cfg.replace(steps=1), tiny_samples(cfg, 1))
    tr.run()
    ckpt_io.save(tmp_path / "m.ckpt", tr.checkpoint())
    assert main(["infer", "--ckpt", str(tmp_path / "m.ckpt"), "--sample", str(tmp_path / "scene"),
                 "--out-vgrid", str(tmp_path / "p.vgrd")]) == 0
