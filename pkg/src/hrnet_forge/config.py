"""Run configuration: a flat, commented ``key = value`` text format.

Keys are dot-namespaced (``net.width``, ``opt.lr``, ``aug.flip``), values are
typed, and the canonical rendering (sorted keys, one per line) is the basis
of the 64-bit FNV-1a config digest stored in checkpoints.  Parsing the
canonical rendering reproduces the config exactly.

``load_config`` accepts either a file path or the name of a built-in preset.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .tensor import ConfigError
from .topology import HEADS, NetworkConfig

TASKS = ("segmentation", "landmarks", "classification", "pyramid")

_TASK_HEADS = {
    "segmentation": ("v1", "v1h", "v2"),
    "landmarks": ("v1", "v1h", "v2"),
    "classification": ("cls_c", "cls_ci", "cls_cii"),
    "pyramid": ("v2p",),
}


# ---------------------------------------------------------------------------
# typed value converters (parse string <-> render string)


def _parse_int(s):
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected integer, got {s!r}")


def _parse_float(s):
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected number, got {s!r}")


def _parse_bool(s):
    if s == "true":
        return True
    if s == "false":
        return False
    raise ConfigError(f"expected true|false, got {s!r}")


def _parse_size(s):
    parts = s.split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected HxW, got {s!r}")
    return (_parse_int(parts[0]), _parse_int(parts[1]))


def _parse_ints(s):
    return tuple(_parse_int(p.strip()) for p in s.split(","))


_TYPES = {
    "int": (_parse_int, str),
    "float": (_parse_float, lambda v: repr(float(v))),
    "bool": (_parse_bool, lambda v: "true" if v else "false"),
    "str": (lambda s: s, str),
    "size": (_parse_size, lambda v: f"{v[0]}x{v[1]}"),
    "ints": (_parse_ints, lambda v: ",".join(str(i) for i in v)),
    "optsize": (lambda s: None if s == "none" else _parse_size(s),
                lambda v: "none" if v is None else f"{v[0]}x{v[1]}"),
    "optstr": (lambda s: None if s == "none" else s,
               lambda v: "none" if v is None else v),
}


@dataclass
class RunConfig:
    task: str = "segmentation"
    seed: int = 0
    precision: str = "verify"

    net_width: int = 18
    net_head: str = "v2"
    net_num_outputs: int = 19
    net_input_size: tuple = (224, 224)
    net_in_channels: int = 3
    net_stage_blocks: tuple = (1, 4, 3)
    net_units_per_branch: int = 4
    net_stage1_units: int = 4
    net_stage1_bottleneck_width: int = 64
    net_pyramid_levels: int = 5
    net_fusion_upsample: str = "nearest"
    net_head_upsample: str = "bilinear"

    opt_lr: float = 0.01
    opt_momentum: float = 0.9
    opt_weight_decay: float = 0.0005
    opt_nesterov: bool = False
    opt_schedule: str = "poly"
    opt_power: float = 0.9
    opt_milestones: tuple = (30, 50)
    opt_factor: float = 0.1
    opt_batch_size: int = 4
    opt_iters: int = 2000
    opt_epoch_iters: int = 0  # 0: derive from data.count / batch size

    data_kind: str = "synthetic"
    data_dir: str | None = None
    data_count: int = 48
    data_classes: int = 19
    data_landmarks: int = 5
    data_sigma: float = 1.5
    data_noise: float = 0.0

    aug_flip: float = 0.0
    aug_scale_min: float = 1.0
    aug_scale_max: float = 1.0
    aug_rotate: float = 0.0
    aug_crop: tuple | None = None

    train_log_every: int = 100
    train_checkpoint_every: int = 1000

    eval_alpha: float = 0.1
    eval_decode_offset: float = 0.0

    # ------------------------------------------------------------------

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            width=self.net_width,
            head=self.net_head,
            num_outputs=self.net_num_outputs,
            input_size=self.net_input_size,
            in_channels=self.net_in_channels,
            stage_blocks=self.net_stage_blocks,
            units_per_branch=self.net_units_per_branch,
            stage1_units=self.net_stage1_units,
            stage1_bottleneck_width=self.net_stage1_bottleneck_width,
            pyramid_levels=self.net_pyramid_levels,
            fusion_upsample=self.net_fusion_upsample,
            head_upsample=self.net_head_upsample,
        )

    def validate(self) -> "RunConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown task {self.task!r} (expected one of {TASKS})")
        if self.net_head not in HEADS:
            raise ConfigError(f"net.head: unknown head {self.net_head!r}")
        if self.net_head not in _TASK_HEADS[self.task]:
            raise ConfigError(
                f"net.head: head {self.net_head!r} does not produce outputs for "
                f"task {self.task!r} (expected one of {_TASK_HEADS[self.task]})")
        if self.precision not in ("verify", "fast"):
            raise ConfigError(f"precision: expected verify|fast, got {self.precision!r}")
        if self.opt_schedule not in ("poly", "step", "const"):
            raise ConfigError(f"opt.schedule: expected poly|step|const, got {self.opt_schedule!r}")
        if self.data_kind not in ("synthetic", "dir"):
            raise ConfigError(f"data.kind: expected synthetic|dir, got {self.data_kind!r}")
        if self.data_kind == "dir" and not self.data_dir:
            raise ConfigError("data.dir: required when data.kind = dir")
        for key, val in (("opt.lr", self.opt_lr), ("opt.batch_size", self.opt_batch_size),
                         ("opt.iters", self.opt_iters), ("data.count", self.data_count),
                         ("data.classes", self.data_classes),
                         ("data.landmarks", self.data_landmarks),
                         ("data.sigma", self.data_sigma), ("eval.alpha", self.eval_alpha)):
            if val <= 0:
                raise ConfigError(f"{key}: must be positive, got {val}")
        if not 0.0 <= self.aug_flip <= 1.0:
            raise ConfigError(f"aug.flip: probability outside [0, 1]: {self.aug_flip}")
        if not 0.0 < self.aug_scale_min <= self.aug_scale_max:
            raise ConfigError(
                f"aug.scale_min/aug.scale_max: need 0 < min <= max, got "
                f"{self.aug_scale_min}/{self.aug_scale_max}")
        if self.data_noise < 0:
            raise ConfigError(f"data.noise: must be >= 0, got {self.data_noise}")
        if self.data_kind == "synthetic":
            if self.task == "segmentation" and self.net_num_outputs != self.data_classes:
                raise ConfigError(
                    f"net.num_outputs: {self.net_num_outputs} does not match "
                    f"data.classes {self.data_classes} for synthetic segmentation")
            if self.task == "landmarks" and self.net_num_outputs != self.data_landmarks:
                raise ConfigError(
                    f"net.num_outputs: {self.net_num_outputs} does not match "
                    f"data.landmarks {self.data_landmarks} for synthetic landmarks")
            if self.task == "classification" and self.net_num_outputs != self.data_classes:
                raise ConfigError(
                    f"net.num_outputs: {self.net_num_outputs} does not match "
                    f"data.classes {self.data_classes} for synthetic classification")
        self.network().validate()
        return self


def _field_types():
    table = {}
    for f in fields(RunConfig):
        key = f.name.replace("_", ".", 1) if "_" in f.name else f.name
        if f.name == "net_input_size":
            typ = "size"
        elif f.name == "aug_crop":
            typ = "optsize"
        elif f.name == "data_dir":
            typ = "optstr"
        elif f.name in ("net_stage_blocks", "opt_milestones"):
            typ = "ints"
        elif f.type in ("int", int):
            typ = "int"
        elif f.type in ("float", float):
            typ = "float"
        elif f.type in ("bool", bool):
            typ = "bool"
        else:
            typ = "str"
        table[key] = (f.name, typ)
    return table


_FIELDS = _field_types()


def from_items(items: dict) -> RunConfig:
    """Build and validate a RunConfig from raw key -> value-string pairs."""
    cfg = RunConfig()
    for key, raw in items.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, typ = _FIELDS[key]
        parse, _ = _TYPES[typ]
        try:
            setattr(cfg, attr, parse(raw))
        except ConfigError as e:
            raise ConfigError(f"{key}: {e}") from None
    return cfg.validate()


def parse_config(text: str) -> RunConfig:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in items:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        items[key] = raw
    return from_items(items)


def render_config(cfg: RunConfig) -> str:
    """Canonical text: sorted keys, one 'key = value' per line."""
    lines = []
    for key in sorted(_FIELDS):
        attr, typ = _FIELDS[key]
        _, render = _TYPES[typ]
        lines.append(f"{key} = {render(getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def config_digest(cfg: RunConfig) -> int:
    return fnv1a64(render_config(cfg).encode("utf-8"))


# ---------------------------------------------------------------------------
# built-in presets (value strings go through the same parser as files)

_SEG_FULL = {
    "task": "segmentation", "net.head": "v2", "net.num_outputs": "19",
    "net.input_size": "1024x2048", "data.classes": "19",
    "opt.lr": "0.01", "opt.weight_decay": "0.0005", "opt.schedule": "poly",
    "aug.flip": "0.5", "aug.scale_min": "0.5", "aug.scale_max": "2.0",
    "aug.crop": "512x1024",
}

_CLS_FULL = {
    "task": "classification", "net.num_outputs": "1000", "data.classes": "1000",
    "net.input_size": "224x224", "opt.lr": "0.1", "opt.weight_decay": "0.0001",
    "opt.nesterov": "true", "opt.schedule": "step", "opt.milestones": "30,60,90",
    "opt.factor": "0.1", "aug.flip": "0.5",
}

PRESETS = {
    "tiny-seg": {
        "task": "segmentation", "net.width": "4", "net.head": "v2",
        "net.num_outputs": "2", "net.input_size": "32x32",
        "net.stage_blocks": "1,1,1", "net.units_per_branch": "1",
        "net.stage1_units": "1", "data.classes": "2", "data.count": "48",
        "opt.lr": "0.05", "opt.weight_decay": "0.0001", "opt.batch_size": "6",
        "opt.iters": "2000", "aug.flip": "0.5", "train.log_every": "100",
    },
    "tiny-seg-v1": {
        "task": "segmentation", "net.width": "4", "net.head": "v1",
        "net.num_outputs": "2", "net.input_size": "32x32",
        "net.stage_blocks": "1,1,1", "net.units_per_branch": "1",
        "net.stage1_units": "1", "data.classes": "2", "data.count": "48",
        "opt.lr": "0.05", "opt.weight_decay": "0.0001", "opt.batch_size": "6",
        "opt.iters": "2000", "aug.flip": "0.5", "train.log_every": "100",
    },
    "tiny-lmk": {
        "task": "landmarks", "net.width": "8", "net.head": "v2",
        "net.num_outputs": "5", "net.input_size": "64x64",
        "net.stage_blocks": "1,1,1", "net.units_per_branch": "1",
        "net.stage1_units": "1", "net.stage1_bottleneck_width": "32",
        "data.landmarks": "5", "data.count": "32",
        "data.sigma": "1.5", "opt.lr": "0.25", "opt.weight_decay": "0.00001",
        "opt.batch_size": "4", "opt.iters": "2000", "train.log_every": "100",
    },
    "tiny-cls": {
        "task": "classification", "net.width": "4", "net.head": "cls_c",
        "net.num_outputs": "3", "net.input_size": "32x32",
        "net.stage_blocks": "1,1,1", "net.units_per_branch": "1",
        "net.stage1_units": "1", "data.classes": "3", "data.count": "48",
        "opt.lr": "0.02", "opt.weight_decay": "0.0001", "opt.batch_size": "4",
        "opt.iters": "600", "aug.flip": "0.5", "train.log_every": "100",
    },
    "w48-seg": dict(_SEG_FULL, **{"net.width": "48"}),
    "w40-seg": dict(_SEG_FULL, **{"net.width": "40"}),
    "w18-lmk": {
        "task": "landmarks", "net.width": "18", "net.head": "v2",
        "net.num_outputs": "98", "net.input_size": "256x256",
        "data.landmarks": "98", "opt.lr": "0.0001", "opt.schedule": "step",
        "opt.milestones": "30,50", "opt.factor": "0.1", "aug.flip": "0.5",
        "aug.scale_min": "0.75", "aug.scale_max": "1.25", "aug.rotate": "30",
    },
    "w18-cls": dict(_CLS_FULL, **{"net.width": "18", "net.head": "cls_c"}),
    "w30-cls": dict(_CLS_FULL, **{"net.width": "30", "net.head": "cls_c"}),
    "w40-cls": dict(_CLS_FULL, **{"net.width": "40", "net.head": "cls_c"}),
    "w27-ci": dict(_CLS_FULL, **{"net.width": "27", "net.head": "cls_ci"}),
    "w25-cii": dict(_CLS_FULL, **{"net.width": "25", "net.head": "cls_cii"}),
    "w18-pyr": {
        "task": "pyramid", "net.width": "18", "net.head": "v2p",
        "net.input_size": "224x224",
    },
    "w32-pyr": {
        "task": "pyramid", "net.width": "32", "net.head": "v2p",
        "net.input_size": "224x224",
    },
}


def load_config(path_or_preset: str) -> RunConfig:
    if path_or_preset in PRESETS:
        return from_items(PRESETS[path_or_preset])
    if os.path.exists(path_or_preset):
        with open(path_or_preset, "r", encoding="utf-8") as f:
            return parse_config(f.read())
    raise ConfigError(
        f"config {path_or_preset!r} is neither a file nor a preset "
        f"(presets: {', '.join(sorted(PRESETS))})")
