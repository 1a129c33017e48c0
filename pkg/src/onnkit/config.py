"""Flat ``key = value`` run configuration with typed defaults."""

from __future__ import annotations

import difflib
from pathlib import Path

from .errors import ConfigError

# Every recognised key with its default; the default's type is the key's type.
DEFAULTS = {
    # run
    "seed": 0,
    "deterministic": False,
    "threads": 1,
    "out": "runs/default",
    # data
    "dataset": "mnist",
    "mnist_dir": "",
    "cifar_train": "",
    "cifar_test": "",
    "n_train": 10000,
    "n_test": 2000,
    "seg_resolution": 64,
    # frontend design
    "surface_h_mm": 7.0,
    "surface_w_mm": 13.0,
    "kernel_size_mm": 2.0,
    "min_spacing_mm": 1.0,
    "kernel_px": 7,
    "hidden": "32",
    "parameterization": "standard",
    # performance estimate
    "est_train": 1000,
    "est_test": 500,
    "ref_kind": "analytic_fc",
    "ref_depth": 3,
    "width_scale": 1.0,
    "n_seeds": 4,
    "lambda_grid": "",
    "val_fraction": 0.2,
    # teacher
    "teacher_hidden": 64,
    "teacher_width": 12,
    "teacher_epochs": 5,
    "teacher_lr": 1e-3,
    # student training
    "strategy": "ntkd",
    "alpha": 1.0,
    "beta": 1.0,
    "temperature": 4.0,
    "epochs": 5,
    "batch_size": 64,
    "lr": 1e-3,
    "optimizer": "adam",
    "ntk_normalization": "trace",
    "scalarization": "sum_outputs",
    # fabrication
    "alpha_cal": 0.8,
    "beta_cal": 1.0,
    "shift_x": 1,
    "shift_y": 1,
    "delta_sigma": 0.1,
    "epsilon_sigma": 0.01,
    "fab_seed": 0,
    "nonnegative_kernels": False,
    # compensation
    "comp_strategy": "ntkd",
    "comp_fraction": 0.1,
    "comp_epochs": 5,
    "comp_lr": 1e-3,
    "comp_beta": 1.0,
    # ablation
    "ablate_kernels": "8,64,256",
    "ablate_train": 2000,
    "ablate_test": 1000,
    "ablate_epochs": 8,
    "ablate_lrs": "1e-4,3e-4,1e-3",
    # analyses
    "spectrum_samples": 3000,
    "scaling_widths": "16,64,256,1024",
    "scaling_trials": 20,
    "delta_norm": 1.0,
    "energy_per_mac_j": 2.01e-3 / 65e6,
    "energy_per_capture_j": 3.82e-3,
    "digital_capture_j": 2.36e-3,
}

CHOICES = {
    "dataset": ("mnist", "cifar10", "synthetic_seg"),
    "parameterization": ("standard", "ntk"),
    "ref_kind": ("auto", "analytic_fc", "monte_carlo", "random_conv"),
    "strategy": ("e2e", "kd", "ntkd"),
    "comp_strategy": ("e2e", "kd", "ntkd"),
    "optimizer": ("sgd", "adam"),
    "ntk_normalization": ("trace", "frobenius", "none"),
    "scalarization": ("sum_outputs", "mean_outputs", "projected_outputs", "label_outputs"),
}


def _nearest(key: str) -> str:
    near = difflib.get_close_matches(key, DEFAULTS, n=1, cutoff=0.0)
    return near[0] if near else ""


def _convert(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None
    if key in CHOICES and text not in CHOICES[key]:
        raise ConfigError(f"{key}: {text!r} is not one of {', '.join(CHOICES[key])}")
    return text


def parse_assignment(line: str, where: str = "") -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}expected 'key = value', got {line!r}")
    key, value = line.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"{where}unknown config key {key!r} (did you mean {_nearest(key)!r}?)")
    return key, value


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, f"{source}:{lineno}: ")
        values[key] = _convert(key, value)
    return values


def resolve(config_path=None, overrides=(), **flags) -> dict:
    """Defaults, then the file, then ``--set`` overrides, then explicit CLI flags."""
    cfg = dict(DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        cfg.update(parse_text(path.read_text(), str(path)))
    for item in overrides:
        key, value = parse_assignment(item, "--set: ")
        cfg[key] = _convert(key, value)
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    if cfg["threads"] == 1:
        cfg["deterministic"] = True
    return cfg


def dump(cfg: dict) -> str:
    lines = []
    for key in DEFAULTS:
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]
