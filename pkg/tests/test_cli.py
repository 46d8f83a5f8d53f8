import numpy as np
import pytest

from spacetime.ablation import AXES, axis_settings
from spacetime.cli import main
from spacetime.config import ConfigError, RunConfig, parse_config
from spacetime.training import (
    CheckpointMismatch,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
    training_patches,
    walk_settings,
)
from spacetime.walk import clip_forward, cycle_loss

SMOKE = """
train_clips = 4
eval_clips = 2
batch_size = 2
hidden = 6
embed_dim = 6
clip_length = 2
epochs_phase1 = 3
epochs_phase2 = 2
max_steps = 10
"""


@pytest.fixture
def smoke_cfg(tmp_path):
    path = tmp_path / "smoke.cfg"
    path.write_text(SMOKE)
    return path


def test_config_round_trip_and_fingerprint():
    cfg = parse_config("window_shape = 5x5\ntau = 0.1  # sharper\n")
    assert cfg.window_shape == (5, 5) and cfg.tau == 0.1
    again = parse_config(cfg.dumps())
    assert again == cfg and again.fingerprint() == cfg.fingerprint()
    assert cfg.fingerprint() != RunConfig().fingerprint()


@pytest.mark.parametrize(
    "text,field",
    [
        ("window_shape = 2x3", "window_shape"),
        ("tau = 0", "tau"),
        ("clip_length = 0", "clip_length"),
        ("dropout_threshold = 2.5", "dropout_threshold"),
        ("edge_variant = learned", "edge_variant"),
        ("bogus = 1", "bogus"),
        ("tau = fast", "tau"),
    ],
)
def test_config_errors_name_field(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    cfg = parse_config(SMOKE)
    patches = training_patches(cfg)
    result = train(cfg, patches=patches)
    save_checkpoint(tmp_path / "ck.json", result.model, cfg)
    model, _ = load_checkpoint(tmp_path / "ck.json", cfg)
    for k, v in result.model.params.weights.items():
        assert model.params.weights[k].tobytes() == v.tobytes()
    settings = walk_settings(cfg)

    def loss(m):
        batch, _ = clip_forward(patches[0], m.params, m.edge, m.table, settings, cfg.dropout_threshold)
        return float(cycle_loss(batch, cfg.tau)[0].value)

    assert loss(model) == loss(result.model)
    assert model.step == result.model.step == 10
    assert model.optimizer.step_count == 10


def test_checkpoint_fingerprint_guard(tmp_path):
    cfg = parse_config(SMOKE)
    save_checkpoint(tmp_path / "ck.json", build_model(cfg), cfg)
    other = cfg.replace(tau=0.1)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "ck.json", other)
    _, used = load_checkpoint(tmp_path / "ck.json", other, override=True)
    assert used.tau == 0.1


def test_train_writes_trace_and_checkpoint(tmp_path, smoke_cfg, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(smoke_cfg), "--out", str(out)]) == 0
    lines = (out / "trace.tsv").read_text().splitlines()
    assert lines[0] == "step\tphase\tloss\tsub_losses\tkept_fraction"
    assert len(lines) == 11
    assert (out / "checkpoint.json").exists()
    assert len((out / "timing.tsv").read_text().splitlines()) == 11


def test_train_is_deterministic(tmp_path, smoke_cfg):
    for name in ("a", "b"):
        assert main(["train", "--config", str(smoke_cfg), "--out", str(tmp_path / name), "--seed", "3"]) == 0
    for f in ("trace.tsv", "checkpoint.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_rejects_even_window(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("window_shape = 2x3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) != 0
    assert "window_shape" in capsys.readouterr().err


def test_divergence_keeps_last_good_checkpoint(tmp_path, smoke_cfg, monkeypatch):
    import spacetime.training as tr
    from spacetime.walk import TrainingDiverged

    real = tr.train_step

    def flaky(*args, **kwargs):
        if args[8] >= 4:  # positional step index
            raise TrainingDiverged("non-finite loss at step 4", {"step": 4})
        return real(*args, **kwargs)

    monkeypatch.setattr(tr, "train_step", flaky)
    out = tmp_path / "run"
    assert main(["train", "--config", str(smoke_cfg), "--out", str(out)]) != 0
    model, _ = load_checkpoint(out / "checkpoint.json")
    assert 0 < model.step <= 4


def test_eval_records(tmp_path, smoke_cfg, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(smoke_cfg), "--out", str(out)])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "clip\tframe\tmetric\tvalue"
    metrics = {ln.split("\t")[2] for ln in lines[1:]}
    assert {"correspondence_accuracy", "jaccard", "pck@0.1", "pck@0.2"} <= metrics
    summary = [ln for ln in lines if ln.startswith("summary")]
    assert len(summary) == 4
    value = summary[0].split("\t")[3]
    assert value == "NONE" or len(value.split(".")[1]) == 6


def test_eval_dataset_errors(tmp_path, smoke_cfg, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(smoke_cfg), "--out", str(out)])
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--data", str(empty)]) != 0
    assert "no clips found" in capsys.readouterr().err
    (empty / "clip_0000").mkdir()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--data", str(empty)]) != 0
    assert "missing sidecar" in capsys.readouterr().err


def test_eval_config_mismatch_needs_override(tmp_path, smoke_cfg):
    out = tmp_path / "run"
    main(["train", "--config", str(smoke_cfg), "--out", str(out)])
    other = tmp_path / "other.cfg"
    other.write_text(SMOKE + "tau = 0.1\n")
    ck = str(out / "checkpoint.json")
    assert main(["eval", "--checkpoint", ck, "--config", str(other)]) != 0
    assert main(["eval", "--checkpoint", ck, "--config", str(other), "--override"]) == 0


def test_gen_data_then_propagate(tmp_path, smoke_cfg):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(smoke_cfg), "--out", str(data), "--count", "2"]) == 0
    assert sorted(p.name for p in data.iterdir()) == ["clip_0000", "clip_0001"]
    run = tmp_path / "run"
    main(["train", "--config", str(smoke_cfg), "--out", str(run)])
    prop = tmp_path / "prop"
    assert main(["propagate", "--checkpoint", str(run / "checkpoint.json"), "--data", str(data), "--out", str(prop)]) == 0
    lines = (prop / "clip_0000.tsv").read_text().splitlines()
    assert lines[0] == "frame\tnode\tlabel" and len(lines) == 1 + 3 * 49


def test_gradcheck_report(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    names = [ln.split("\t")[0] for ln in lines[1:]]
    assert names[-1] == "end_to_end"
    assert {"row_softmax", "matmul", "l2_normalize_rows", "cross_entropy_rows", "weighted_sum"} <= set(names)
    assert all(ln.endswith("ok") for ln in lines[1:])


def test_gradcheck_negative_control():
    assert main(["gradcheck", "--corrupt", "weighted_sum"]) != 0


def test_ablation_axes():
    assert [label for label, _ in axis_settings("window")] == ["3(h)", "3(v)", "9", "25"]
    assert len(axis_settings("delta")) == 5
    assert [label for label, _ in axis_settings("path-length")] == ["4", "8", "12", "20"]
    assert [o["clip_length"] * 2 for _, o in AXES["path-length"]] == [4, 8, 12, 20]
    assert len(axis_settings("edge-variant")) == 3
    with pytest.raises(ValueError):
        axis_settings("depth")


def test_ablate_unknown_axis():
    assert main(["ablate", "--axis", "depth"]) != 0


def test_ablate_delta_emits_five_rows(tmp_path, smoke_cfg):
    out = tmp_path / "delta.tsv"
    assert main(["ablate", "--config", str(smoke_cfg), "--axis", "delta", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("axis\tsetting")
    assert [r.split("\t")[1] for r in rows[1:]] == ["0.0", "0.1", "0.2", "0.3", "0.4"]


def test_ablate_path_length_rows(tmp_path, smoke_cfg):
    out = tmp_path / "paths.tsv"
    assert main(["ablate", "--config", str(smoke_cfg), "--axis", "path-length", "--out", str(out)]) == 0
    rows = [r.split("\t") for r in out.read_text().splitlines()[1:]]
    assert [r[2] for r in rows] == ["4", "8", "12", "20"]
