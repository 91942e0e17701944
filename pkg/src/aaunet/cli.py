"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (e.g. training aborted on a
non-finite loss), 2 usage or configuration errors.  Every command echoes its
effective configuration to ``effective_config.json`` in its output directory.

Overlay palette: ICH red, SDH blue, SAH yellow, EDH green, CSDH magenta,
Pneumocranium cyan, IVH orange.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import torch

from .ablation import run_ablation
from .checkpoint import load_model_checkpoint
from .dataset import generate_dataset, iter_stacks, load_case
from .errors import AAUNetError, ConfigError, TrainingAborted
from .model import predict_mask
from .overlays import save_alpha_png, save_mask_png, save_overlay_png
from .train import TrainConfig, evaluate_on_split, train


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _echo_config(out_dir, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _apply_overrides(cfg_dict, overrides):
    """Apply dotted-path overrides like model.num_classes=4 to a config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        node = cfg_dict
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"--set: unknown config path '{key}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"--set: unknown config key '{key}'")
        node[parts[-1]] = json.loads(raw)
    return cfg_dict


def _load_train_config(config_path, overrides=(), space=None, channel=None):
    cfg_dict = TrainConfig().to_dict()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        user = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(user) - set(cfg_dict)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in user.items():
            if isinstance(cfg_dict[key], dict) and isinstance(value, dict):
                sub_unknown = set(value) - set(cfg_dict[key])
                if sub_unknown:
                    raise ConfigError(f"unknown config keys under '{key}': {sorted(sub_unknown)}")
                cfg_dict[key].update(value)
            else:
                cfg_dict[key] = value
    cfg_dict = _apply_overrides(cfg_dict, overrides)
    if space is not None:
        cfg_dict["model"]["use_space_attention"] = space
    if channel is not None:
        cfg_dict["model"]["use_channel_attention"] = channel
    return TrainConfig.from_dict(cfg_dict)


@click.group()
def main():
    """All-attention U-Net: synthetic phantom data, training, evaluation."""


@main.command("generate-data")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--cases", type=int, default=51, show_default=True)
@click.option("--size", type=int, default=128, show_default=True)
@click.option("--out", required=True, type=click.Path())
def cmd_generate_data(seed, cases, size, out):
    """Generate a synthetic phantom dataset with a patient-level split."""
    try:
        manifest = generate_dataset(seed, cases, size, out)
    except AAUNetError as exc:
        _fail(2, str(exc))
    _echo_config(out, {"command": "generate-data", "seed": seed, "cases": cases, "size": size})
    click.echo(json.dumps({
        "cases": len(manifest.cases),
        "split_sizes": {s: len(manifest.split_cases(s)) for s in ("train", "val", "test")},
        "fraction_lesion_free": manifest.fraction_lesion_free,
    }))


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON config mirroring TrainConfig; unknown keys are rejected.")
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--no-space-attn", "no_space", is_flag=True, default=False)
@click.option("--no-channel-attn", "no_channel", is_flag=True, default=False)
@click.option("--resume", "resume_from", type=click.Path(), default=None)
@click.option("--set", "overrides", multiple=True,
              help="Override any config field by dotted path, e.g. --set max_steps=200")
def cmd_train(config_path, data_root, out, no_space, no_channel, resume_from, overrides):
    """Train on a generated dataset; prints the test-split DiceReport JSON."""
    try:
        cfg = _load_train_config(config_path, overrides,
                                 space=False if no_space else None,
                                 channel=False if no_channel else None)
        if not (Path(data_root) / "manifest.json").exists():
            raise FileNotFoundError(f"manifest not found: {Path(data_root) / 'manifest.json'}")
    except (AAUNetError, FileNotFoundError, json.JSONDecodeError) as exc:
        _fail(2, str(exc))
    _echo_config(out, {"command": "train", "data": str(data_root), "config": cfg.to_dict()})
    try:
        result = train(cfg, data_root, out, resume_from=resume_from)
    except TrainingAborted as exc:
        _fail(1, str(exc))
    except AAUNetError as exc:
        _fail(2, str(exc))
    ckpt = result.best_checkpoint or result.last_checkpoint
    model, _, _ = load_model_checkpoint(ckpt)
    try:
        report = evaluate_on_split(model, data_root, "test",
                                   config_echo={"checkpoint": ckpt, "split": "test"})
        click.echo(report.to_json(indent=2))
    except ConfigError:
        click.echo(json.dumps({"note": "no test split in dataset", "checkpoint": ckpt}))


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test",
              show_default=True)
def cmd_eval(checkpoint, data_root, split):
    """Evaluate a checkpoint on one split; prints the DiceReport JSON."""
    try:
        model, header, _ = load_model_checkpoint(checkpoint)
        report = evaluate_on_split(model, data_root, split, config_echo={
            "checkpoint": str(checkpoint), "split": split,
            "model_config": header["model_config"],
        })
    except (AAUNetError, FileNotFoundError) as exc:
        _fail(2, str(exc))
    click.echo(report.to_json(indent=2))


@main.command("predict")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--case", "case_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
def cmd_predict(checkpoint, case_dir, out):
    """Write per-slice predicted masks, RGB overlays and, when space
    attention is enabled, grayscale attention maps.

    Overlay palette: ICH red (255,0,0), SDH blue (0,0,255), SAH yellow
    (255,255,0), EDH green (0,200,0), CSDH magenta (255,0,255),
    Pneumocranium cyan (0,255,255), IVH orange (255,165,0).
    """
    try:
        model, header, _ = load_model_checkpoint(checkpoint)
        case = load_case(case_dir)
    except (AAUNetError, FileNotFoundError) as exc:
        _fail(2, str(exc))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, {"command": "predict", "checkpoint": str(checkpoint),
                       "case": str(case_dir), "model_config": header["model_config"]})
    with_attention = model.cfg.use_space_attention
    model.eval()
    with torch.no_grad():
        for i, (stack, _) in enumerate(iter_stacks(case)):
            x = torch.from_numpy(stack[None])
            if with_attention:
                logits, alphas = model(x, return_attention=True)
                for level, alpha in enumerate(alphas):
                    save_alpha_png(out / f"alpha_{i:03d}_g{level}.png", alpha[0, 0].numpy())
            else:
                logits = model(x)
            mask = predict_mask(logits)[0]
            save_mask_png(out / f"pred_{i:03d}.png", mask)
            save_overlay_png(out / f"overlay_{i:03d}.png", case.images[i], mask)
    click.echo(json.dumps({"slices": case.n_slices, "out": str(out)}))


@main.command("inspect")
@click.option("--checkpoint", required=True, type=click.Path())
def cmd_inspect(checkpoint):
    """Print the config echo plus parameter names, shapes and total count."""
    try:
        model, header, _ = load_model_checkpoint(checkpoint)
    except (AAUNetError, FileNotFoundError) as exc:
        _fail(2, str(exc))
    params = [{"name": n, "shape": list(p.shape)} for n, p in model.named_parameters()]
    click.echo(json.dumps({
        "model_config": header["model_config"],
        "train": header.get("train", {k: v for k, v in header.items() if k != "model_config"}),
        "parameters": params,
        "parameter_count": model.parameter_count(),
    }, indent=2))


@main.command("ablation")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--set", "overrides", multiple=True)
def cmd_ablation(config_path, data_root, out, overrides):
    """Train all four attention variants and write comparison tables."""
    try:
        cfg = _load_train_config(config_path, overrides)
        if not (Path(data_root) / "manifest.json").exists():
            raise FileNotFoundError(f"manifest not found: {Path(data_root) / 'manifest.json'}")
    except (AAUNetError, FileNotFoundError, json.JSONDecodeError) as exc:
        _fail(2, str(exc))
    _echo_config(out, {"command": "ablation", "data": str(data_root), "config": cfg.to_dict()})
    try:
        reports = run_ablation(cfg, data_root, out)
    except TrainingAborted as exc:
        _fail(1, str(exc))
    except AAUNetError as exc:
        _fail(2, str(exc))
    click.echo(json.dumps({v: r.per_class for v, r in reports.items()}, indent=2))


if __name__ == "__main__":
    main()
