"""Four-variant ablation (base / +space / +channel / +both attention) with a
published-reference comparison table.

The reference rows are Dice scores reported on a private hospital dataset and
are embedded for orientation only; they are not reproducible from the
synthetic benchmark and are labeled as such in every emitted table.
"""

from __future__ import annotations

import copy
import json
from dataclasses import replace
from pathlib import Path

from .metrics import LESION_NAMES
from .train import TrainConfig, evaluate_on_split, train

VARIANT_FLAGS = {
    "RSU": (False, False),
    "RSU+S": (True, False),
    "RSU+C": (False, True),
    "RSU+SC": (True, True),
}

REFERENCE_LABEL = "paper (private data, not reproducible)"

# Published per-lesion Dice for the four attention variants.
REFERENCE_DICE = {
    "RSU": {"ICH": 0.914, "SDH": 0.8, "SAH": 0.45, "EDH": 0.74,
            "CSDH": 0.877, "Pneumocranium": 0.68, "IVH": 0.82},
    "RSU+S": {"ICH": 0.9318, "SDH": 0.78, "SAH": 0.39, "EDH": 0.63,
              "CSDH": 0.905, "Pneumocranium": 0.634, "IVH": 0.792},
    "RSU+C": {"ICH": 0.932, "SDH": 0.777, "SAH": 0.53, "EDH": 0.779,
              "CSDH": 0.843, "Pneumocranium": 0.743, "IVH": 0.868},
    "RSU+SC": {"ICH": 0.924, "SDH": 0.82, "SAH": 0.567, "EDH": 0.816,
               "CSDH": 0.906, "Pneumocranium": 0.71, "IVH": 0.858},
}


def variant_config(base_cfg: TrainConfig, variant: str) -> TrainConfig:
    space, channel = VARIANT_FLAGS[variant]
    cfg = copy.deepcopy(base_cfg)
    cfg.model = replace(cfg.model, use_space_attention=space, use_channel_attention=channel)
    return cfg


def run_ablation(base_cfg: TrainConfig, data_root, out_dir) -> dict:
    """Train all four variants under the same seed and budget, evaluate each
    best checkpoint on the test split, and write JSON + markdown tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    for variant in VARIANT_FLAGS:
        cfg = variant_config(base_cfg, variant)
        result = train(cfg, data_root, out_dir / variant.replace("+", "_"))
        from .checkpoint import load_model_checkpoint

        ckpt = result.best_checkpoint or result.last_checkpoint
        model, _, _ = load_model_checkpoint(ckpt)
        reports[variant] = evaluate_on_split(
            model, data_root, "test",
            config_echo={"variant": variant, "seed": cfg.seed, "steps": cfg.max_steps},
        )
    write_tables(reports, out_dir)
    return reports


def write_tables(reports: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    payload = {
        "trained": {v: r.to_dict() for v, r in reports.items()},
        "reference": {"label": REFERENCE_LABEL, "per_class": REFERENCE_DICE},
    }
    (out_dir / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    (out_dir / "ablation.md").write_text(format_markdown(reports), encoding="utf-8")


def _fmt(v):
    return "n/a" if v is None else f"{v:.3f}"


def format_markdown(reports: dict) -> str:
    lines = [
        "| Network | " + " | ".join(LESION_NAMES) + " |",
        "|" + "---|" * (len(LESION_NAMES) + 1),
    ]
    for variant, report in reports.items():
        cells = [_fmt(report.per_class.get(name)) for name in LESION_NAMES]
        lines.append(f"| {variant} | " + " | ".join(cells) + " |")
    for variant, row in REFERENCE_DICE.items():
        cells = [_fmt(row[name]) for name in LESION_NAMES]
        lines.append(f"| {variant} [{REFERENCE_LABEL}] | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
