import json

import numpy as np
import pytest
from PIL import Image

from cdcnet.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from cdcnet.cli import format_config, fuse_score_files, main, parse_config
from cdcnet.data import collate, synth_dataset
from cdcnet.metrics import ScoreRow, aggregate, read_scores, write_scores
from cdcnet.models import ModelConfig, SingleModalCDCN, build_model
from cdcnet.tensor import Tensor, no_grad
from cdcnet.train import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    batch_loss,
    dump_features,
    evaluate,
    lr_at,
    prefetch,
    score_records,
    train,
)

TINY = dict(init_channels=4, input_size=16, attention=False)


def tiny_cfg(tmp_path, **kw):
    model = ModelConfig(**{**TINY, **kw.pop("model", {})})
    base = dict(lr=1e-3, epochs=2, batch_size=4, checkpoint_dir=str(tmp_path / "ck"), model=model)
    base.update(kw)
    return TrainConfig(**base)


# optimiser ---------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.5, -2.0]))
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(2)], state, 1e-3)
    assert np.array_equal(p.data, [1.5, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.02, 1e4])
def test_adam_first_step(g):
    p = Tensor(np.array([0.0]))
    adam_step([p], [np.array([g])], AdamState.for_params([p]), 1e-4)
    assert p.data[0] == pytest.approx(-1e-4 * np.sign(g), rel=1e-4)


def test_adam_matches_closed_form():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=3))
    x, m, v = p.data.copy(), np.zeros(3), np.zeros(3)
    state = AdamState.for_params([p])
    for t in range(1, 6):
        g = rng.normal(size=3)
        adam_step([p], [g], state, 0.01, weight_decay=0.1)
        g = g + 0.1 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)
    assert state.step == 5


def test_adam_quadratic_monotone():
    p = Tensor(np.array([1.0]))
    state = AdamState.for_params([p])
    losses = []
    for _ in range(60):
        losses.append(float(p.data[0] ** 2))
        adam_step([p], [2 * p.data], state, 0.01)
    tail = losses[10:]
    assert all(b < a for a, b in zip(tail, tail[1:]))


def test_adam_non_finite_names_parameter():
    p, q = Tensor(np.zeros(2)), Tensor(np.zeros(2))
    with pytest.raises(TrainingError, match="head.bias"):
        adam_step([p, q], [np.zeros(2), np.array([np.nan, 1.0])], AdamState.for_params([p, q]), 1e-3,
                  names=["stem.weight", "head.bias"])


def test_lr_schedule():
    assert [lr_at(e, 1e-4, 20) for e in (0, 19, 20, 39, 40)] == [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5]
    for e in range(100):
        assert lr_at(e, 1e-4, 20) == 0.5 ** (e // 20) * 1e-4


def test_train_config_validation():
    for kw in (dict(lr=0.0), dict(batch_size=0), dict(epochs=0)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_prefetch_keeps_order_and_errors():
    assert list(prefetch(iter(range(50)), 3)) == list(range(50))

    def boom():
        yield 1
        raise RuntimeError("decode failed")

    with pytest.raises(RuntimeError, match="decode failed"):
        list(prefetch(boom(), 2))


# loss at initialisation --------------------------------------------------


def test_initial_loss_vs_zero_masks():
    rng = np.random.default_rng(0)
    model = SingleModalCDCN(ModelConfig(init_channels=16, input_size=64))
    x = rng.uniform(size=(4, 3, 64, 64)).astype(np.float32)
    with no_grad():
        pred = model(Tensor(x)).data
        _, rep = batch_loss(model, {"rgb": Tensor(x)}, np.zeros((4, 8, 8), dtype=np.float32))
    assert np.isfinite(rep.overall) and rep.overall < 1.5
    assert rep.mse == pytest.approx(float(np.mean(pred.astype(np.float64) ** 2)), rel=1e-5)


# training loop -----------------------------------------------------------


def test_train_writes_log_and_checkpoints(tmp_path):
    recs = synth_dataset(4, 4, 16, seed=0)
    cfg = tiny_cfg(tmp_path)
    res = train(cfg, recs, dev_records=synth_dataset(2, 2, 16, seed=1))
    ck = tmp_path / "ck"
    assert (ck / "epoch_000.ckpt").exists() and (ck / "epoch_001.ckpt").exists()
    assert (ck / "final.ckpt").exists() and (ck / "best.ckpt").exists()
    assert res.checkpoint == ck / "best.ckpt"
    log = [json.loads(line) for line in (ck / "train_log.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in log] == [0, 1]
    for e in log:
        assert e["overall"] == pytest.approx(e["mse"] + e["cdl"], abs=1e-12)
        assert {"dev_acer", "dev_apcer", "dev_bpcer", "dev_threshold"} <= set(e)
    assert len(res.steps) == 4


def test_train_deterministic(tmp_path):
    recs = synth_dataset(4, 4, 16, seed=0)
    a = train(tiny_cfg(tmp_path / "a", augment=True), recs)
    b = train(tiny_cfg(tmp_path / "b", augment=True), recs)
    assert (tmp_path / "a/ck/train_log.jsonl").read_bytes() == (tmp_path / "b/ck/train_log.jsonl").read_bytes()
    _, ta = read_checkpoint(tmp_path / "a/ck/final.ckpt")
    _, tb = read_checkpoint(tmp_path / "b/ck/final.ckpt")
    assert ta.keys() == tb.keys() and all(np.array_equal(ta[k], tb[k]) for k in ta)
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_train_max_steps(tmp_path):
    res = train(tiny_cfg(tmp_path, epochs=10, max_steps=3, save_every=0), synth_dataset(4, 4, 16, seed=0))
    assert len(res.steps) == 3
    assert not list((tmp_path / "ck").glob("epoch_*.ckpt"))


def test_train_rejects_bad_data(tmp_path):
    with pytest.raises(TrainingError, match="both classes"):
        train(tiny_cfg(tmp_path), synth_dataset(4, 0, 16))
    with pytest.raises(TrainingError, match="expects 16px"):
        train(tiny_cfg(tmp_path), synth_dataset(2, 2, 32))
    recs = [r.__class__(r.id, {"rgb": r.images["rgb"]}, r.label, r.sub_protocol, r.mask_gt)
            for r in synth_dataset(2, 2, 16)]
    cfg = tiny_cfg(tmp_path, model=dict(modalities=("rgb", "depth")))
    with pytest.raises(TrainingError, match="depth"):
        train(cfg, recs)


def test_train_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = tiny_cfg(tmp_path, checkpoint_dir=str(blocker / "sub"))
    with pytest.raises(TrainingError, match="not writable"):
        train(cfg, synth_dataset(2, 2, 16))


def test_score_fusion_training_runs(tmp_path):
    cfg = tiny_cfg(tmp_path, epochs=1, model=dict(modalities=("rgb", "depth"), fusion="score"))
    res = train(cfg, synth_dataset(2, 2, 16))
    rep = res.steps[0]
    assert rep.overall == pytest.approx(rep.mse + rep.cdl)


# checkpoints and evaluation ----------------------------------------------


@pytest.mark.parametrize(
    "model_kw",
    [{}, dict(modalities=("rgb", "depth", "ir")), dict(modalities=("rgb", "ir"), fusion="score"),
     dict(modalities=("rgb", "depth"), fusion="input", attention=True)],
)
def test_checkpoint_round_trip(tmp_path, model_kw):
    cfg = tiny_cfg(tmp_path, epochs=1, model=model_kw)
    recs = synth_dataset(3, 3, 16, seed=2)
    res = train(cfg, recs)
    before = [r.score for r in score_records(res.model, recs)]
    model, meta = load_checkpoint(tmp_path / "ck" / "final.ckpt")
    assert model.cfg == res.model.cfg
    assert meta["train_config"]["lr"] == cfg.lr
    after = [r.score for r in score_records(model, recs)]
    assert np.abs(np.subtract(before, after)).max() <= 1e-6
    for (n, p), (_, q) in zip(res.model.named_parameters(), model.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_checkpoint_header(tmp_path):
    model = SingleModalCDCN(ModelConfig(**TINY))
    path = save_checkpoint(model, tmp_path / "m.ckpt", {"note": "x"})
    header, tensors = read_checkpoint(path)
    assert header["version"] == 1 and header["meta"] == {"note": "x"}
    assert ModelConfig.from_dict(header["model_config"]) == model.cfg
    names = [e["name"] for e in header["tensors"]]
    assert "backbone.stem.weight" in names and "backbone.stem_bn.running_var" in names
    assert all(t.dtype == np.float32 for t in tensors.values())


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage!" + bytes(16))
    with pytest.raises(CheckpointError, match="not a cdcnet checkpoint"):
        load_checkpoint(bad)
    model = SingleModalCDCN(ModelConfig(**TINY))
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="past the end"):
        load_checkpoint(path)


def test_evaluate_report(tmp_path):
    recs = synth_dataset(6, 6, 16, seed=3)
    model = build_model(ModelConfig(**TINY))
    report, rows = evaluate(model, recs, "min_acer")
    assert [m["sub_protocol"] for m in report["sub_protocols"]] == ["4@1", "4@2", "4@3"]
    mean, std = aggregate([m["ACER"] for m in report["sub_protocols"]])
    assert report["overall"]["ACER_mean"] == pytest.approx(mean, abs=0.006)
    assert report["overall"]["ACER_std"] == pytest.approx(std, abs=0.006)
    assert len(rows) == 12


def test_evaluate_rejects_unknown_protocol():
    recs = synth_dataset(2, 2, 16)
    recs[0] = recs[0].__class__(recs[0].id, recs[0].images, "live", "4@7", recs[0].mask_gt)
    with pytest.raises(ValueError, match="4@7"):
        evaluate(build_model(ModelConfig(**TINY)), recs)


def test_dump_features(tmp_path):
    rec = synth_dataset(1, 0, 16)[0]
    for kw, streams in [({}, 1), (dict(modalities=("rgb", "depth", "ir")), 3), (dict(modalities=("rgb", "depth"), fusion="input"), 1)]:
        model = build_model(ModelConfig(**{**TINY, **kw}))
        out = tmp_path / str(streams) / str(len(kw))
        paths = dump_features(model, rec, out)
        assert len(paths) == 3 * streams + 1
        with no_grad():
            inputs, _ = collate([rec], model.cfg.modalities)
            mask = model({m: Tensor(v) for m, v in inputs.items()}).data[0]
        png = np.asarray(Image.open(paths[-1]), dtype=np.float64) / 255
        assert np.abs(png - mask).max() <= 1 / 255


def test_dump_features_uniform_on_zero_input(tmp_path):
    rec = synth_dataset(1, 0, 16)[0]
    zero = rec.__class__(rec.id, {"rgb": np.zeros_like(rec.images["rgb"])}, rec.label, rec.sub_protocol, rec.mask_gt)
    model = build_model(ModelConfig(**TINY))
    for p in dump_features(model, zero, tmp_path)[:-1]:
        img = np.asarray(Image.open(p))
        assert img.min() == img.max()


# command line ------------------------------------------------------------


def test_config_round_trip():
    cfg = TrainConfig(lr=3e-4, max_steps=7, model=ModelConfig(modalities=("rgb", "depth"), fusion="score",
                                                              score_weights={"rgb": 0.25, "depth": 0.75}))
    assert parse_config(format_config(cfg)) == cfg


def test_config_keys():
    cfg = parse_config("# desk run\nlr = 2e-4\ntheta = 0.5\nmodel.input_size = 64\nseed = 3\nmodalities = rgb, ir\n")
    assert cfg.lr == 2e-4 and cfg.seed == 3
    assert cfg.model.theta == 0.5 and cfg.model.input_size == 64 and cfg.model.seed == 3
    assert cfg.model.modalities == ("rgb", "ir")
    for text, msg in [("color = red", "unknown"), ("lr = fast", "'lr'"), ("no equals sign", "malformed")]:
        with pytest.raises(ValueError, match=msg):
            parse_config(text)


def _score_file(path, scores, ids=None, labels=None):
    ids = ids or [f"s{i}" for i in range(len(scores))]
    labels = labels or ["live", "spoof"] * (len(scores) // 2)
    rows = [ScoreRow(i, "4@1", lab, s) for i, lab, s in zip(ids, labels, scores)]
    write_scores(rows, path)
    return path


def test_fuse_files(tmp_path):
    a = _score_file(tmp_path / "a.csv", [0.9, 0.2, 0.6, 0.4])
    b = _score_file(tmp_path / "b.csv", [0.5, 0.0, 0.2, 0.8])
    assert [r.score for r in fuse_score_files([a, b], [0.5, 0.5])] == pytest.approx([0.7, 0.1, 0.4, 0.6])
    assert [r.score for r in fuse_score_files([a, b], [1.0, 0.0])] == [0.9, 0.2, 0.6, 0.4]
    assert [r.score for r in fuse_score_files([a, a], [0.3, 0.7])] == pytest.approx([0.9, 0.2, 0.6, 0.4])


def test_fuse_files_mismatch(tmp_path):
    a = _score_file(tmp_path / "a.csv", [0.9, 0.2], ids=["x", "y"])
    b = _score_file(tmp_path / "b.csv", [0.5, 0.1], ids=["x", "z"])
    with pytest.raises(ValueError, match=r"\['y', 'z'\]"):
        fuse_score_files([a, b], [0.5, 0.5])


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth-data", "--out", str(data), "--live", "3", "--spoof", "3", "--size", "16"]) == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"data_dir = {data}\ncheckpoint_dir = {tmp_path / 'ck'}\nepochs = 1\nbatch_size = 3\n"
        "init_channels = 4\ninput_size = 16\nattention = false\n"
    )
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = tmp_path / "ck" / "final.ckpt"
    assert ckpt.exists()
    scores = tmp_path / "scores.csv"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--threshold", "min_acer",
                 "--scores", str(scores), "--report", str(tmp_path / "r.json")]) == 0
    assert len(read_scores(scores)) == 6
    assert "ACER" in json.loads((tmp_path / "r.json").read_text())["pooled"]
    capsys.readouterr()
    assert main(["predict", "--checkpoint", str(ckpt), "--images",
                 str(data / "rgb" / "live_0000.png"), str(data / "rgb" / "spoof_0000.png")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and lines[0].split("\t")[2] in ("live", "spoof")
    fused = tmp_path / "fused.csv"
    assert main(["fuse-scores", "--in", f"{scores},{scores}", "--weights", "0.5,0.5", "--out", str(fused)]) == 0
    assert [r.score for r in read_scores(fused)] == pytest.approx([r.score for r in read_scores(scores)])
    out = tmp_path / "feat"
    assert main(["dump-features", "--checkpoint", str(ckpt), "--sample", "live_0001", "--out", str(out)]) == 0
    assert len(list(out.glob("*.png"))) == 4


def test_cli_exit_codes(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", "x"])
    assert exc.value.code == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == 1
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lr = -1\n")
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path)]) == 1
    a = _score_file(tmp_path / "a.csv", [0.9, 0.2])
    assert main(["fuse-scores", "--in", f"{a},{a}", "--weights", "0.7,0.7"]) == 1

    data = tmp_path / "data"
    main(["synth-data", "--out", str(data), "--live", "2", "--spoof", "2", "--size", "16"])
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    good = tmp_path / "good.cfg"
    good.write_text(f"checkpoint_dir = {blocker / 'ck'}\ninit_channels = 4\ninput_size = 16\n")
    assert main(["train", "--config", str(good), "--data", str(data)]) == 2
