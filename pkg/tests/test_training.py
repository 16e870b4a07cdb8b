import json
from dataclasses import replace

import pytest
import torch
import torchvision

from rasnet import data, training
from rasnet.errors import CheckpointError, ConfigError, NonFiniteLossError, ValidationError
from rasnet.model import ModelConfig, build_model
from rasnet.training import TrainConfig, TrainHistory, lr_at_step

TINY = dict(image_size=(32, 32), batch_size=4)


@pytest.fixture(scope="module")
def tiny(tiny_root):
    return data.load_dataset(tiny_root)


class TestSchedule:
    def test_paper_values(self):
        cfg = TrainConfig()
        assert lr_at_step(cfg, 0) == 3e-4
        assert lr_at_step(cfg, 29) == 3e-4
        assert lr_at_step(cfg, 30) == pytest.approx(2.4e-4, rel=1e-12)
        assert lr_at_step(cfg, 90) == pytest.approx(1.536e-4, rel=1e-12)

    def test_closed_form(self):
        cfg = TrainConfig(lr_initial=1e-3, lr_decay_factor=0.5, lr_decay_every=7)
        for s in range(200):
            assert lr_at_step(cfg, s) == 1e-3 * 0.5 ** (s // 7)

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_at_step(TrainConfig(), -1)

    @pytest.mark.parametrize("kw", [
        {"batch_size": 0}, {"lr_initial": 0.0}, {"lr_decay_factor": 0.0}, {"lr_decay_factor": 1.5},
        {"lr_decay_every": 0}, {"max_steps": -1}, {"alpha": -1.0}, {"image_size": (320, 250)},
    ])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_history_jsonl_round_trip():
    h = TrainHistory([{"step": 0, "lr": 3e-4, "h": 2.0, "j": 0.1, "total": 2.7}],
                     [{"step": 10, "mean_dice": 0.5, "mean_iou": 0.4}])
    lines = h.to_jsonl().splitlines()
    assert [json.loads(x)["kind"] for x in lines] == ["step", "eval"]
    assert TrainHistory.from_jsonl(h.to_jsonl()) == h


def test_zero_steps_returns_initialisation(tiny, tmp_path):
    cfg = TrainConfig(max_steps=0, seed=3, **TINY)
    res = training.train(ModelConfig(), cfg, tiny, out_dir=tmp_path)
    assert res.history.steps == [] and res.step == 0
    init = build_model(ModelConfig(), seed=3).state_dict()
    state = training.load_checkpoint(res.checkpoint).model_state
    assert all(torch.equal(init[k], state[k]) for k in init)
    assert (tmp_path / "history.jsonl").read_text() == ""


def test_same_seed_same_history(tiny):
    cfg = TrainConfig(max_steps=50, seed=4, **TINY)
    a = training.train(ModelConfig(), cfg, tiny).history.losses()
    b = training.train(ModelConfig(), cfg, tiny).history.losses()
    assert len(a) == 50
    for x, y in zip(a, b):
        assert float(f"{x:.3g}") == float(f"{y:.3g}")


def test_history_records_schedule(tiny):
    cfg = TrainConfig(max_steps=4, lr_decay_every=2, **TINY)
    steps = training.train(ModelConfig(), cfg, tiny).history.steps
    assert [r["step"] for r in steps] == [0, 1, 2, 3]
    assert [r["lr"] for r in steps] == [lr_at_step(cfg, s) for s in range(4)]
    for r in steps:
        assert r["total"] == pytest.approx(r["h"] - cfg.alpha * torch.log(torch.tensor(r["j"])).item(), rel=1e-5)


def test_eval_records(tiny):
    train, test = data.manifest_split(tiny)
    cfg = TrainConfig(max_steps=4, eval_every=2, **TINY)
    res = training.train(ModelConfig(), cfg, train, eval_dataset=test)
    assert [e["step"] for e in res.history.evals] == [2, 4]


def test_empty_dataset(tiny):
    with pytest.raises(ValidationError):
        training.train(ModelConfig(), TrainConfig(**TINY), tiny.subset([]))


def test_non_finite_loss_aborts(tiny, tmp_path, monkeypatch):
    real = training.combined_loss

    def poisoned(logits, labels, cfg):
        out = real(logits, labels, cfg)
        out.total = out.total * float("nan")
        return out

    monkeypatch.setattr(training, "combined_loss", poisoned)
    with pytest.raises(NonFiniteLossError) as exc:
        training.train(ModelConfig(), TrainConfig(max_steps=3, **TINY), tiny, out_dir=tmp_path)
    assert exc.value.step == 0 and len(exc.value.batch_indices) == 4
    dump = json.loads((tmp_path / "nonfinite.json").read_text())
    assert dump["frames"] == [list(k) for k in exc.value.batch_indices]


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny, tmp_path):
        res = training.train(ModelConfig(), TrainConfig(max_steps=2, **TINY), tiny, out_dir=tmp_path)
        state = training.load_checkpoint(res.checkpoint, expect=ModelConfig())
        live = res.model.state_dict()
        assert state.step == 2
        assert all(torch.equal(live[k], state.model_state[k]) for k in live)
        rebuilt = state.build_model().state_dict()
        assert all(torch.equal(live[k], rebuilt[k]) for k in live)
        meta = json.loads((tmp_path / "checkpoint.pt.json").read_text())
        assert meta["num_classes"] == 8 and meta["step"] == 2 and meta["train_config"]["max_steps"] == 2

    def test_incompatible_config(self, tiny, tmp_path):
        res = training.train(ModelConfig(), TrainConfig(max_steps=0, **TINY), tiny, out_dir=tmp_path)
        with pytest.raises(CheckpointError, match="incompatible"):
            training.load_checkpoint(res.checkpoint, expect=ModelConfig(num_classes=5))
        with pytest.raises(CheckpointError, match="incompatible"):
            training.load_checkpoint(res.checkpoint, expect=ModelConfig(use_afm=False))

    def test_version_mismatch(self, tiny, tmp_path):
        res = training.train(ModelConfig(), TrainConfig(max_steps=0, **TINY), tiny, out_dir=tmp_path)
        side = tmp_path / "checkpoint.pt.json"
        meta = json.loads(side.read_text())
        meta["format_version"] = 99
        side.write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="format"):
            training.load_checkpoint(res.checkpoint)

    def test_tampered_metadata(self, tiny, tmp_path):
        res = training.train(ModelConfig(), TrainConfig(max_steps=0, **TINY), tiny, out_dir=tmp_path)
        side = tmp_path / "checkpoint.pt.json"
        meta = json.loads(side.read_text())
        meta["model_config"]["num_classes"] = 4
        side.write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="disagree"):
            training.load_checkpoint(res.checkpoint)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            training.load_checkpoint(tmp_path / "none.pt")

    def test_resume_matches_continuous(self, tiny, tmp_path):
        cfg = TrainConfig(max_steps=6, lr_decay_every=2, **TINY)
        full = training.train(ModelConfig(), cfg, tiny).history.losses()
        part = training.train(ModelConfig(), replace(cfg, max_steps=5), tiny, out_dir=tmp_path)
        state = training.load_checkpoint(part.checkpoint)
        rest = training.train(ModelConfig(), cfg, tiny, resume=state).history
        assert [r["step"] for r in rest.steps] == [5]
        assert rest.steps[0]["total"] == pytest.approx(full[5], rel=1e-6)


class TestComparison:
    def test_arm_names_afm(self, tiny, tmp_path):
        train, test = data.manifest_split(tiny)
        arms = training.comparison_arms("afm_ablation", ModelConfig(), TrainConfig(max_steps=2, **TINY))
        rep = training.run_comparison("afm_ablation", arms, (train, test), out_dir=tmp_path)
        assert [name for name, _ in rep.rows] == ["RASNet without AFM", "RASNet"]
        assert json.loads((tmp_path / "comparison.json").read_text())["protocol"] == "afm_ablation"
        assert "RASNet without AFM" in (tmp_path / "comparison.txt").read_text()

    def test_arm_names_init(self, tiny, tmp_path):
        weights = tmp_path / "r50.pth"
        torch.save(torchvision.models.resnet50(weights=None).state_dict(), weights)
        train, test = data.manifest_split(tiny)
        arms = training.comparison_arms("init_strategy", ModelConfig(), TrainConfig(max_steps=1, **TINY), weights)
        rep = training.run_comparison("init_strategy", arms, (train, test))
        assert [name for name, _ in rep.rows] == ["Random initialization", "Pre-trained"]
        assert "Method" in rep.to_table()

    def test_mismatched_batch_size(self, tiny):
        arms = [(ModelConfig(use_afm=False), TrainConfig(batch_size=4)),
                (ModelConfig(use_afm=True), TrainConfig(batch_size=8))]
        with pytest.raises(ValidationError, match="batch_size"):
            training.run_comparison("afm_ablation", arms, (tiny, tiny))

    def test_extra_model_difference(self, tiny):
        arms = [(ModelConfig(use_afm=False, num_classes=5), TrainConfig()),
                (ModelConfig(use_afm=True), TrainConfig())]
        with pytest.raises(ValidationError, match="num_classes"):
            training.run_comparison("afm_ablation", arms, (tiny, tiny))

    def test_arms_must_differ(self, tiny):
        arms = [(ModelConfig(), TrainConfig()), (ModelConfig(), TrainConfig())]
        with pytest.raises(ValidationError):
            training.run_comparison("afm_ablation", arms, (tiny, tiny))

    def test_unknown_protocol(self):
        with pytest.raises(ConfigError):
            training.comparison_arms("unet", ModelConfig(), TrainConfig())
