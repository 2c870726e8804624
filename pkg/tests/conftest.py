"""Shared builders for the test suite: tiny network instances and presets."""
import dataclasses

from hrnet_forge.config import load_config
from hrnet_forge.layers import BuildCtx
from hrnet_forge.topology import Network, NetworkConfig


def tiny_config(**overrides) -> NetworkConfig:
    """Smallest legal four-branch network (C=4, 32x32, one block everywhere)."""
    base = dict(width=4, head="v2", num_outputs=3, input_size=(32, 32),
                stage_blocks=(1, 1, 1), units_per_branch=1, stage1_units=1,
                stage1_bottleneck_width=16)
    base.update(overrides)
    return NetworkConfig(**base)


def tiny_network(precision="verify", seed=0, **overrides) -> Network:
    return Network(tiny_config(**overrides), precision=precision, seed=seed)


def preset(name, **overrides):
    """Load a built-in run config, optionally with field overrides."""
    cfg = load_config(name)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides).validate()
    return cfg


def build_ctx(precision="verify", seed=0) -> BuildCtx:
    return BuildCtx(precision, seed)
