"""``rasnet`` command line: train, eval, predict, compare, synth, validate."""

from __future__ import annotations

import hashlib
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import click
import numpy as np
import torch
import yaml
from PIL import Image

from . import data, training
from .errors import RASNetError, ValidationError
from .model import ModelConfig
from .training import TrainConfig

log = logging.getLogger("rasnet")

OVERLAY_OPACITY = 0.5
# fixed per class id, background black
COLOR_TABLE = {
    0: (0, 0, 0),
    1: (230, 25, 75),
    2: (60, 180, 75),
    3: (255, 225, 25),
    4: (0, 130, 200),
    5: (245, 130, 48),
    6: (145, 30, 180),
    7: (70, 240, 240),
}


# -- config -------------------------------------------------------------------

@dataclass
class RunConfig:
    """Top-level config file schema (YAML)::

        dataset_root: path          # EndoVis layout
        out_dir: runs               # run directories are created under here
        model: {num_classes, use_afm, encoder_init, encoder_weights, decoder_channels}
        train: {batch_size, lr_initial, lr_decay_factor, lr_decay_every, alpha,
                max_steps, seed, image_size, eval_every, early_stopping_patience, workers}
        split: {test: [{sequence, start, end}, ...]}   # optional; else manifest split
    """

    dataset_root: str | None = None
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: dict | None = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        model = _section(ModelConfig, d.pop("model", None), "model")
        train = _section(TrainConfig, d.pop("train", None), "train")
        return cls(model=model, train=train, **d)

    def to_dict(self):
        return {"dataset_root": self.dataset_root, "out_dir": self.out_dir,
                "model": self.model.to_dict(), "train": self.train.to_dict(), "split": self.split}


def _section(kind, values, name):
    values = dict(values or {})
    allowed = {f.name for f in fields(kind)}
    unknown = set(values) - allowed
    if unknown:
        raise ValidationError(f"{name}: unknown keys {sorted(unknown)}")
    try:
        return kind(**values)
    except RASNetError as exc:
        raise ValidationError(f"{name}.{exc}") from exc
    except TypeError as exc:
        raise ValidationError(f"{name}: {exc}") from exc


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not valid YAML: {exc}") from exc
    return RunConfig.from_dict(raw)


def _override(cfg: RunConfig, **kw):
    """Apply command-line flags on top of the config file (flags win)."""
    m, t = cfg.model.to_dict(), cfg.train.to_dict()
    for key, value in kw.items():
        if value is None:
            continue
        if key in ("dataset_root", "out_dir"):
            setattr(cfg, key, str(value))
        elif key in m:
            m[key] = value
        else:
            t[key] = value
    cfg.model = _section(ModelConfig, m, "model")
    cfg.train = _section(TrainConfig, t, "train")
    return cfg


def _make_run_dir(base, tag):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(base) / f"{tag}-{stamp}"
    n = 1
    while run.exists():
        n += 1
        run = Path(base) / f"{tag}-{stamp}-{n}"
    run.mkdir(parents=True)
    return run


def _snapshot(run_dir, cfg: RunConfig):
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    (run_dir / "config.resolved.yaml").write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _dataset_split(cfg: RunConfig):
    if not cfg.dataset_root:
        raise ValidationError("dataset_root is not set (config key or --dataset-root)")
    index = data.load_dataset(cfg.dataset_root)
    if cfg.split is not None:
        return data.split(index, data.SplitSpec.from_dict(cfg.split))
    return data.manifest_split(index)


def load_model(checkpoint):
    state = training.load_checkpoint(checkpoint)
    model = state.build_model()
    model.eval()
    size = tuple(state.train_config.image_size) if state.train_config else data.DEFAULT_SIZE
    return model, size


# -- rendering ------------------------------------------------------------------

def colorize(mask):
    palette = np.zeros((256, 3), np.uint8)
    for cid, rgb in COLOR_TABLE.items():
        palette[cid] = rgb
    return palette[np.asarray(mask, dtype=np.uint8)]


def overlay(image: Image.Image, mask, opacity=OVERLAY_OPACITY):
    """Blend class colours into ``image`` wherever ``mask`` is foreground."""
    base = np.asarray(image.convert("RGB"), dtype=np.float32)
    colors = colorize(mask).astype(np.float32)
    fg = (np.asarray(mask) > 0)[..., None]
    out = np.where(fg, (1 - opacity) * base + opacity * colors, base)
    return Image.fromarray(np.round(out).astype(np.uint8), "RGB")


# -- commands -----------------------------------------------------------------------

class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except RASNetError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(2)


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """RASNet surgical instrument segmentation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


def _train_flags(f):
    f = click.option("--batch-size", type=int)(f)
    f = click.option("--max-steps", type=int)(f)
    f = click.option("--encoder-init", type=click.Choice(["pretrained", "random"]))(f)
    f = click.option("--use-afm/--no-afm", default=None)(f)
    f = click.option("--out-dir", type=click.Path(file_okay=False))(f)
    f = click.option("--dataset-root", type=click.Path(file_okay=False))(f)
    f = click.option("--seed", type=int)(f)
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)(f)
    return f


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
def validate(config_path):
    """Parse and validate a config file."""
    cfg = load_config(config_path)
    click.echo(yaml.safe_dump(cfg.to_dict(), sort_keys=False), nl=False)


@main.command("train")
@_train_flags
def cmd_train(config_path, seed, dataset_root, out_dir, use_afm, encoder_init, max_steps, batch_size):
    """Train a model; writes checkpoint, history and resolved config to a run directory."""
    cfg = _override(load_config(config_path), seed=seed, dataset_root=dataset_root, out_dir=out_dir,
                    use_afm=use_afm, encoder_init=encoder_init, max_steps=max_steps, batch_size=batch_size)
    train_index, test_index = _dataset_split(cfg)
    run_dir = _make_run_dir(cfg.out_dir, "train")
    _snapshot(run_dir, cfg)
    result = training.train(cfg.model, cfg.train, train_index, out_dir=run_dir,
                            eval_dataset=test_index if len(test_index) else None)
    click.echo(f"run directory: {run_dir}")
    click.echo(f"checkpoint: {result.checkpoint}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--dataset-root", type=click.Path(file_okay=False), required=True)
@click.option("--split", "which", type=click.Choice(["test", "train", "all"]), default="test", show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="runs", show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--per-frame", is_flag=True, help="Include per-frame counts in the JSON report.")
def cmd_eval(checkpoint, dataset_root, which, out_dir, batch_size, per_frame):
    """Evaluate a checkpoint; writes report.json and report.txt."""
    model, size = load_model(checkpoint)
    index = data.load_dataset(dataset_root)
    if which != "all":
        train_index, test_index = data.manifest_split(index)
        index = test_index if which == "test" else train_index
    report = training.evaluate_index(model, index, size, batch_size, per_frame=per_frame)
    run_dir = _make_run_dir(out_dir, "eval")
    (run_dir / "report.json").write_text(report.to_json(indent=2) + "\n")
    (run_dir / "report.txt").write_text(report.to_table() + "\n")
    (run_dir / "eval.yaml").write_text(yaml.safe_dump(
        {"checkpoint": str(checkpoint), "dataset_root": str(dataset_root), "split": which,
         "frames": len(index)}, sort_keys=False))
    click.echo(report.to_table())
    click.echo(f"run directory: {run_dir}")


@main.command("predict")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.argument("image_path", type=click.Path(dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
@click.option("--overlay", "overlay_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the image blended with class colours here.")
def cmd_predict(checkpoint, image_path, out_path, overlay_path):
    """Write the class-id mask for one image at its source resolution."""
    model, size = load_model(checkpoint)
    try:
        src = Image.open(image_path)
        src.load()
    except OSError as exc:
        raise ValidationError(f"cannot decode {image_path}: {exc}") from exc
    if src.mode not in ("RGB", "RGBA"):
        raise ValidationError(f"{image_path}: expected an RGB image, got mode {src.mode}")
    src = src.convert("RGB")
    x = data.normalize(src.resize(size, Image.BILINEAR)).unsqueeze(0)
    with torch.no_grad():
        pred = model(x).argmax(1)[0].numpy().astype(np.uint8)
    mask = data.resize_mask(pred, src.size)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask, "L").save(out_path)
    if overlay_path:
        Path(overlay_path).parent.mkdir(parents=True, exist_ok=True)
        overlay(src, mask).save(overlay_path)
    click.echo(out_path)


@main.command("compare")
@click.option("--protocol", type=click.Choice(sorted(training.PROTOCOLS)), required=True)
@_train_flags
@click.option("--encoder-weights", type=click.Path(dir_okay=False), default=None,
              help="ResNet-50 weights for the pre-trained arm (init_strategy).")
def cmd_compare(protocol, config_path, seed, dataset_root, out_dir, use_afm, encoder_init,
                max_steps, batch_size, encoder_weights):
    """Train both arms of a protocol and write the two-row comparison report."""
    cfg = _override(load_config(config_path), seed=seed, dataset_root=dataset_root, out_dir=out_dir,
                    use_afm=use_afm, encoder_init=encoder_init, max_steps=max_steps, batch_size=batch_size)
    split = _dataset_split(cfg)
    run_dir = _make_run_dir(cfg.out_dir, f"compare-{protocol}")
    _snapshot(run_dir, cfg)
    arms = training.comparison_arms(protocol, cfg.model, cfg.train, encoder_weights)
    report = training.run_comparison(protocol, arms, split, out_dir=run_dir)
    click.echo(report.to_table())
    verdict = report.second_arm_not_worse()
    click.echo(f"{report.rows[1][0]} >= {report.rows[0][0]} (mean Dice): {verdict}")
    click.echo(f"run directory: {run_dir}")


@main.command("synth")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--frames", type=int, default=20, show_default=True)
@click.option("--size", type=(int, int), default=(64, 64), show_default=True, help="WIDTH HEIGHT")
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_synth(out_dir, frames, size, seed):
    """Write a synthetic shapes dataset in the EndoVis layout."""
    index = data.synthesize_toy_dataset(out_dir, frames, size, seed)
    click.echo(f"{len(index)} frames written to {out_dir}")


if __name__ == "__main__":
    sys.exit(main())
