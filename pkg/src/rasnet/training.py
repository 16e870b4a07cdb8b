"""Adam training with step-decay learning rate, checkpoints, and arm comparisons."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch

from . import data
from .errors import CheckpointError, ConfigError, NonFiniteLossError, ValidationError
from .losses import LossConfig, combined_loss
from .metrics import evaluate_dataset, format_table
from .model import ModelConfig, RASNet, build_model

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_initial: float = 3e-4
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 30
    alpha: float = 0.3
    max_steps: int = 1000
    seed: int = 0
    image_size: tuple = data.DEFAULT_SIZE  # width, height
    eval_every: int = 0
    early_stopping_patience: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.lr_initial > 0:
            raise ConfigError("lr_initial", "must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor", "must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every", "must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps", "must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha", "must be >= 0")
        if len(self.image_size) != 2 or any(v % 32 for v in self.image_size):
            raise ConfigError("image_size", "must be (width, height), each divisible by 32")

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def lr_at_step(config: TrainConfig, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr_initial * config.lr_decay_factor ** (step // config.lr_decay_every)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def to_jsonl(self):
        lines = [json.dumps({"kind": "step", **r}) for r in self.steps]
        lines += [json.dumps({"kind": "eval", **r}) for r in self.evals]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text):
        h = cls()
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                kind = rec.pop("kind")
                (h.steps if kind == "step" else h.evals).append(rec)
        return h

    def losses(self):
        return [r["total"] for r in self.steps]


# -- checkpoints ----------------------------------------------------------------

def config_hash(model_config: ModelConfig, train_config: TrainConfig | None = None):
    blob = {"model": model_config.to_dict(), "train": train_config.to_dict() if train_config else None}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model: RASNet, optimizer_state, step, path, train_config=None):
    """Write ``path`` (tensors) and ``path.json`` (metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    torch.save({
        "model": model.state_dict(),
        "optimizer": optimizer_state,
        "step": int(step),
        "model_digest": cfg.digest(),
        "rng": torch.get_rng_state(),
    }, path)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "num_classes": cfg.num_classes,
        "step": int(step),
        "model_digest": cfg.digest(),
        "source_config_hash": config_hash(cfg, train_config),
        "train_config": train_config.to_dict() if train_config else None,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


@dataclass
class ResumableState:
    model_config: ModelConfig
    train_config: Optional[TrainConfig]
    model_state: dict
    optimizer_state: Optional[dict]
    step: int
    rng_state: Optional[torch.Tensor]
    meta: dict

    def build_model(self):
        # pretrained weights are already inside model_state
        model = RASNet(replace(self.model_config, encoder_init="random", encoder_weights=None))
        model.config = self.model_config
        model.load_state_dict(self.model_state)
        return model


def load_checkpoint(path, expect: ModelConfig | None = None) -> ResumableState:
    path = Path(path)
    side = _sidecar(path)
    if not path.is_file() or not side.is_file():
        raise CheckpointError(f"checkpoint or its metadata is missing: {path}")
    try:
        meta = json.loads(side.read_text())
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {meta.get('format_version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    cfg = ModelConfig(**meta["model_config"])
    if blob.get("model_digest") != meta.get("model_digest") or cfg.digest() != meta.get("model_digest"):
        raise CheckpointError(f"{path}: tensor file and metadata disagree on the model config")
    if expect is not None and expect.digest() != cfg.digest():
        raise CheckpointError(
            f"checkpoint {path} is incompatible: saved config {cfg.to_dict()} vs requested {expect.to_dict()}"
        )
    tc = TrainConfig(**meta["train_config"]) if meta.get("train_config") else None
    return ResumableState(cfg, tc, blob["model"], blob.get("optimizer"), blob["step"], blob.get("rng"), meta)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RASNet
    optimizer: torch.optim.Optimizer
    history: TrainHistory
    step: int
    checkpoint: Optional[Path] = None


class _EpochPlan:
    """Seeded batch order per epoch, so any step maps to the same batch after resume."""

    def __init__(self, index, batch_size, seed):
        self.index, self.batch_size, self.seed = index, batch_size, seed
        self.per_epoch = -(-len(index) // batch_size)
        self._epoch, self._batches = None, None

    def positions(self, step):
        epoch, k = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._epoch = epoch
            self._batches = list(data.make_batches(self.index, self.batch_size, True, self.seed + epoch))
        return self._batches[k]


def evaluate_index(model, index, image_size=data.DEFAULT_SIZE, batch_size=8, per_frame=False, workers=1):
    batches = data.iter_batches(index, batch_size, shuffle=False, target_size=image_size, workers=workers)
    return evaluate_dataset(model, batches, index.class_names, per_frame=per_frame)


def train(model_config: ModelConfig, train_config: TrainConfig, dataset, out_dir=None,
          eval_dataset=None, resume: ResumableState | None = None, cache=True) -> TrainResult:
    """Minimise the combined loss with Adam for ``train_config.max_steps`` steps.

    Writes ``checkpoint.pt`` (+ ``.json``) and ``history.jsonl`` to ``out_dir``
    when given. ``resume`` continues a run from a saved state; the batch order
    depends only on the seed and step, so a resumed run replays the same data.
    """
    tc = train_config
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    loss_cfg = LossConfig(alpha=tc.alpha)
    if resume is not None:
        model = resume.build_model()
        start = resume.step
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
    else:
        model = build_model(model_config, seed=tc.seed)
        start = 0
    optimizer = torch.optim.Adam(model.parameters(), lr=lr_at_step(tc, start))
    if resume is not None and resume.optimizer_state is not None:
        optimizer.load_state_dict(resume.optimizer_state)

    plan = _EpochPlan(dataset, tc.batch_size, tc.seed)
    samples = data.SampleCache(dataset, tc.image_size) if cache else None
    history = TrainHistory()
    best, since_best = None, 0
    model.train()
    step = start
    while step < tc.max_steps:
        positions = plan.positions(step)
        if samples is not None:
            images, masks = samples.batch(positions)
        else:
            images, masks = data.load_batch(dataset, positions, tc.image_size, tc.workers)
        lr = lr_at_step(tc, step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        loss = combined_loss(model(images), masks, loss_cfg)
        if not torch.isfinite(loss.total):
            frames = [dataset.keys()[p] for p in positions]
            err = NonFiniteLossError(step, frames, loss.as_floats())
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                (Path(out_dir) / "nonfinite.json").write_text(
                    json.dumps({"step": step, "frames": frames, "loss": loss.as_floats()}, indent=2))
            raise err
        optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        optimizer.step()
        history.steps.append({"step": step, "lr": lr, **loss.as_floats()})
        step += 1
        if step % 50 == 0:
            log.info("step %d lr %.3g loss %.4f", step, lr, history.steps[-1]["total"])
        if tc.eval_every and eval_dataset is not None and step % tc.eval_every == 0:
            rep = evaluate_index(model, eval_dataset, tc.image_size, tc.batch_size)
            history.evals.append({"step": step, "mean_dice": rep.mean_dice, "mean_iou": rep.mean_iou})
            model.train()
            if tc.early_stopping_patience is not None and rep.mean_dice is not None:
                if best is None or rep.mean_dice > best:
                    best, since_best = rep.mean_dice, 0
                else:
                    since_best += 1
                    if since_best >= tc.early_stopping_patience:
                        log.info("early stop at step %d", step)
                        break

    model.eval()
    result = TrainResult(model, optimizer, history, step)
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.checkpoint = save_checkpoint(model, optimizer.state_dict(), step, out_dir / "checkpoint.pt", tc)
        (out_dir / "history.jsonl").write_text(history.to_jsonl())
    return result


# -- comparisons ---------------------------------------------------------------------

PROTOCOLS = {
    "afm_ablation": ("use_afm", {False: "RASNet without AFM", True: "RASNet"}),
    "init_strategy": ("encoder_init", {"random": "Random initialization", "pretrained": "Pre-trained"}),
}


def comparison_arms(protocol, model_config: ModelConfig, train_config: TrainConfig, encoder_weights=None):
    """Both arms of ``protocol`` from one base config, in report row order."""
    if protocol not in PROTOCOLS:
        raise ConfigError("protocol", f"unknown protocol {protocol!r}; choose from {sorted(PROTOCOLS)}")
    if protocol == "afm_ablation":
        return [(replace(model_config, use_afm=False), train_config),
                (replace(model_config, use_afm=True), train_config)]
    weights = encoder_weights or model_config.encoder_weights
    return [(replace(model_config, encoder_init="random", encoder_weights=None), train_config),
            (replace(model_config, encoder_init="pretrained", encoder_weights=weights), train_config)]


def _check_arms(protocol, arms):
    varied, _ = PROTOCOLS[protocol]
    if len(arms) != 2:
        raise ValidationError("a comparison needs exactly two arms")
    (m0, t0), (m1, t1) = arms
    if t0.to_dict() != t1.to_dict():
        diff = sorted(k for k, v in t0.to_dict().items() if t1.to_dict()[k] != v)
        raise ValidationError(f"arms differ in training fields {diff}; only {varied} may vary")
    ignore = {varied} | ({"encoder_weights"} if varied == "encoder_init" else set())
    d0, d1 = m0.to_dict(), m1.to_dict()
    diff = sorted(k for k in d0 if k not in ignore and d0[k] != d1[k])
    if diff:
        raise ValidationError(f"arms differ in model fields {diff}; only {varied} may vary")
    if d0[varied] == d1[varied]:
        raise ValidationError(f"arms do not differ in {varied}")


@dataclass
class ComparisonReport:
    protocol: str
    rows: list  # (method name, MetricsReport)

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "rows": [{"method": name, "mean_dice": r.mean_dice, "mean_iou": r.mean_iou,
                      "per_class": r.to_dict()["per_class"]} for name, r in self.rows],
        }

    def to_table(self):
        return format_table(("Method", "Mean Dice(%)", "Mean IOU(%)"),
                            [(name, r.mean_dice, r.mean_iou) for name, r in self.rows])

    def second_arm_not_worse(self):
        (_, a), (_, b) = self.rows
        if a.mean_dice is None or b.mean_dice is None:
            return None
        return b.mean_dice >= a.mean_dice


def run_comparison(protocol, arms, dataset, out_dir=None) -> ComparisonReport:
    """Train each arm under the same seed and data order; evaluate on the held-out split.

    ``dataset`` is a ``(train, test)`` pair of indices.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError("protocol", f"unknown protocol {protocol!r}")
    _check_arms(protocol, arms)
    train_index, test_index = dataset
    varied, names = PROTOCOLS[protocol]
    rows = []
    for model_cfg, train_cfg in arms:
        name = names[getattr(model_cfg, varied)]
        arm_dir = Path(out_dir) / name.replace(" ", "_") if out_dir else None
        result = train(model_cfg, train_cfg, train_index, out_dir=arm_dir)
        rows.append((name, evaluate_index(result.model, test_index, train_cfg.image_size, train_cfg.batch_size)))
    report = ComparisonReport(protocol, rows)
    if out_dir is not None:
        Path(out_dir, "comparison.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        Path(out_dir, "comparison.txt").write_text(report.to_table() + "\n")
    return report
