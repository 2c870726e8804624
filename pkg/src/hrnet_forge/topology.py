"""Backbone construction: stem, first stage, multi-resolution stages.

The network keeps up to four parallel branches; branch ``r`` runs at 1/2^(r+2)
of the input resolution with ``C * 2^r`` channels.  Each stage repeats blocks
of per-branch residual units followed by a full cross-resolution fusion, and
each stage boundary adds one branch at the next lower resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (BasicUnit, BatchNorm, BottleneckUnit, BuildCtx, Conv2d,
                     CostEntry, Layer, ReLU, Sequential, Upsample, conv_bn)
from .tensor import ConfigError, ShapeError, check_feature_map

HEADS = ("v1", "v1h", "v2", "v2p", "cls_c", "cls_ci", "cls_cii")


@dataclass
class NetworkConfig:
    """Declarative description of one network instance.

    ``width`` is the channel count C of the highest-resolution branch;
    branch r has C·2^r channels.  ``stage_blocks`` are the block counts of
    stages 2-4 (each block = per-branch unit chains + one fusion).
    """
    width: int = 18
    head: str = "v2"
    num_outputs: int = 19           # classes or landmarks
    input_size: tuple = (224, 224)  # (H, W)
    in_channels: int = 3
    stage_blocks: tuple = (1, 4, 3)
    units_per_branch: int = 4
    stage1_units: int = 4
    stage1_bottleneck_width: int = 64
    pyramid_levels: int = 5
    fusion_upsample: str = "nearest"
    head_upsample: str = "bilinear"

    def validate(self) -> "NetworkConfig":
        if self.width < 1:
            raise ConfigError(f"network.width: must be >= 1, got {self.width}")
        if self.head not in HEADS:
            raise ConfigError(f"network.head: unknown head {self.head!r} (expected one of {HEADS})")
        if self.num_outputs < 1:
            raise ConfigError(f"network.num_outputs: must be >= 1, got {self.num_outputs}")
        h, w = self.input_size
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ConfigError(f"network.input_size: {h}x{w} must be a multiple of 32x32")
        if len(self.stage_blocks) != 3 or any(b < 1 for b in self.stage_blocks):
            raise ConfigError(f"network.stage_blocks: need three counts >= 1, got {self.stage_blocks}")
        if self.units_per_branch < 1:
            raise ConfigError("network.units_per_branch: must be >= 1")
        if self.stage1_units < 1:
            raise ConfigError("network.stage1_units: must be >= 1")
        if self.stage1_bottleneck_width < 1:
            raise ConfigError("network.stage1_bottleneck_width: must be >= 1")
        if self.head == "v2p":
            if self.pyramid_levels < 1:
                raise ConfigError("network.pyramid_levels: must be >= 1")
            deepest = 2 ** (self.pyramid_levels + 1)
            if h < deepest or w < deepest:
                raise ConfigError(
                    f"network.input_size: {h}x{w} too small for {self.pyramid_levels} "
                    f"pyramid levels (needs >= {deepest})")
        if self.fusion_upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"network.fusion_upsample: {self.fusion_upsample!r}")
        if self.head_upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"network.head_upsample: {self.head_upsample!r}")
        return self

    def branch_width(self, r: int) -> int:
        return self.width * (1 << r)

    def branch_size(self, r: int) -> tuple:
        h, w = self.input_size
        f = 1 << (r + 2)
        return (h // f, w // f)


class BranchLayer:
    """Node operating on the list of active branch maps."""

    def __init__(self, ctx: BuildCtx, leaf: str):
        self.name = ctx.name(leaf)
        self.stage = ctx.stage
        self.branch = ctx.branch

    def params(self):
        return []

    def forward(self, xs: list, train: bool = False) -> list:
        raise NotImplementedError

    def backward(self, gys: list) -> list:
        raise NotImplementedError

    def cost(self, in_shapes: list):
        raise NotImplementedError


def _down_chain(ctx, leaf, r_in, r_out, w_in, w_out) -> Sequential:
    """Stride-2 3x3 conv-BN chain bridging r_in -> r_out (r_out > r_in).

    Intermediate convs keep the source width with a ReLU between units; the
    final conv maps to the target width with no ReLU (activation happens
    after the fusion sum)."""
    gap = r_out - r_in
    with ctx.scoped(leaf) as c:
        children = []
        for step in range(gap):
            last = step == gap - 1
            cout = w_out if last else w_in
            children.append(conv_bn(c, f"down{step}", w_in, cout, 3, stride=2, act=not last))
    return Sequential(ctx, leaf, children)


def _up_adapter(ctx, leaf, r_in, r_out, w_in, w_out, mode) -> Sequential:
    """1x1 conv-BN width mapping at the source resolution, then upsampling."""
    gap = r_in - r_out
    with ctx.scoped(leaf) as c:
        children = [Conv2d(c, "conv", w_in, w_out, 1),
                    BatchNorm(c, "bn", w_out),
                    Upsample(c, "up", 1 << gap, mode)]
    return Sequential(ctx, leaf, children)


class FusionBlock(BranchLayer):
    """Cross-resolution exchange: every output branch sums adapted
    contributions from every input branch (identity on the diagonal,
    strided conv chains downward, 1x1 conv + upsampling upward), then ReLU.

    The sum always reduces in ascending input-branch order so results are
    independent of any internal parallelism.
    """

    def __init__(self, ctx, leaf, res_in: list[int], res_out: list[int],
                 width_of, upsample_mode="nearest", final_relu=True, adapters=None):
        super().__init__(ctx, leaf)
        self.res_in = list(res_in)
        self.res_out = list(res_out)
        self.final_relu = final_relu
        self.adapters = {}
        with ctx.scoped(leaf) as c:
            if adapters is not None:
                self.adapters = dict(adapters)
            else:
                for r_o in self.res_out:
                    for r_i in self.res_in:
                        if r_i == r_o:
                            self.adapters[(r_i, r_o)] = None
                        elif r_i < r_o:
                            self.adapters[(r_i, r_o)] = _down_chain(
                                c, f"b{r_i}_to_b{r_o}", r_i, r_o, width_of(r_i), width_of(r_o))
                        else:
                            self.adapters[(r_i, r_o)] = _up_adapter(
                                c, f"b{r_i}_to_b{r_o}", r_i, r_o, width_of(r_i), width_of(r_o),
                                upsample_mode)
            self.relus = {r_o: ReLU(c, f"b{r_o}_relu") for r_o in self.res_out} \
                if final_relu else {}

    def params(self):
        out = []
        for r_o in self.res_out:
            for r_i in self.res_in:
                a = self.adapters[(r_i, r_o)]
                if a is not None:
                    out.extend(a.params())
        return out

    def forward(self, xs, train=False):
        if len(xs) != len(self.res_in):
            raise ShapeError(f"{self.name}: got {len(xs)} branches, expected {len(self.res_in)}")
        ys = []
        for r_o in self.res_out:
            acc = None
            for idx, r_i in enumerate(self.res_in):
                a = self.adapters[(r_i, r_o)]
                v = xs[idx] if a is None else a.forward(xs[idx], train)
                acc = v if acc is None else acc + v
            if len(self.res_in) == 1 and self.adapters[(self.res_in[0], r_o)] is None:
                acc = acc.copy()  # do not alias the input map
            ys.append(self.relus[r_o].forward(acc, train) if self.final_relu else acc)
        return ys

    def backward(self, gys):
        gxs = [None] * len(self.res_in)
        for o_idx, r_o in enumerate(self.res_out):
            g = self.relus[r_o].backward(gys[o_idx]) if self.final_relu else gys[o_idx]
            for i_idx, r_i in enumerate(self.res_in):
                a = self.adapters[(r_i, r_o)]
                gi = g if a is None else a.backward(g)
                gxs[i_idx] = gi.copy() if gxs[i_idx] is None else gxs[i_idx] + gi
        return gxs

    def cost(self, in_shapes):
        entries, out_shapes = [], []
        for r_o in self.res_out:
            shape_o = None
            for idx, r_i in enumerate(self.res_in):
                a = self.adapters[(r_i, r_o)]
                if a is None:
                    s = in_shapes[idx]
                else:
                    es, s = a.cost(in_shapes[idx])
                    entries.extend(es)
                if shape_o is None:
                    shape_o = s
                elif s != shape_o:
                    raise ShapeError(f"{self.name}: fused shapes disagree: {s} vs {shape_o}")
            out_shapes.append(shape_o)
        return entries, out_shapes


def plain_dense_fusion(ctx, leaf, widths_in: list[int], widths_out: list[int],
                       kernel=3) -> FusionBlock:
    """Test-only fusion where every (input, output) pair is a bare convolution
    (no norm, no activation) at equal resolution, and no final ReLU.  This is
    the construction whose output must equal one regular convolution over the
    concatenated subsets with the block weight matrix."""
    adapters = {}
    with ctx.scoped(leaf) as c:
        for o, w_o in enumerate(widths_out):
            for i, w_i in enumerate(widths_in):
                adapters[(i, o)] = Conv2d(c, f"s{i}_to_s{o}", w_i, w_o, kernel)
    fb = FusionBlock(ctx, leaf, list(range(len(widths_in))), list(range(len(widths_out))),
                     width_of=None, final_relu=False, adapters=adapters)
    return fb


class ParallelUnits(BranchLayer):
    """Per-branch residual-unit chains (the group-convolution half of a block)."""

    def __init__(self, ctx, leaf, res: list[int], width_of, units: int):
        super().__init__(ctx, leaf)
        self.res = list(res)
        self.chains = []
        with ctx.scoped(leaf) as c:
            for r in self.res:
                with c.scoped(f"branch{r}", branch=f"b{r}") as cb:
                    units_list = [BasicUnit(cb, f"unit{u}", width_of(r)) for u in range(units)]
                self.chains.append(Sequential(c, f"branch{r}", units_list))

    def params(self):
        out = []
        for ch in self.chains:
            out.extend(ch.params())
        return out

    def forward(self, xs, train=False):
        return [ch.forward(x, train) for ch, x in zip(self.chains, xs)]

    def backward(self, gys):
        return [ch.backward(g) for ch, g in zip(self.chains, gys)]

    def cost(self, in_shapes):
        entries, outs = [], []
        for ch, s in zip(self.chains, in_shapes):
            es, o = ch.cost(s)
            entries.extend(es)
            outs.append(o)
        return entries, outs


class MultiBranchBlock(BranchLayer):
    def __init__(self, ctx, leaf, res: list[int], cfg: NetworkConfig):
        super().__init__(ctx, leaf)
        with ctx.scoped(leaf) as c:
            self.units = ParallelUnits(c, "units", res, cfg.branch_width, cfg.units_per_branch)
            self.fusion = FusionBlock(c, "fuse", res, res, cfg.branch_width,
                                      upsample_mode=cfg.fusion_upsample)

    def params(self):
        return self.units.params() + self.fusion.params()

    def forward(self, xs, train=False):
        return self.fusion.forward(self.units.forward(xs, train), train)

    def backward(self, gys):
        return self.units.backward(self.fusion.backward(gys))

    def cost(self, in_shapes):
        e1, mid = self.units.cost(in_shapes)
        e2, out = self.fusion.cost(mid)
        return e1 + e2, out


class Transition(BranchLayer):
    """Stage boundary: existing branches pass through unchanged (their widths
    never change here), and one new branch appears at the next lower
    resolution via a stride-2 3x3 conv-BN-ReLU from the current lowest."""

    def __init__(self, ctx, leaf, res_in: list[int], width_of):
        super().__init__(ctx, leaf)
        self.n_in = len(res_in)
        new_r = res_in[-1] + 1
        with ctx.scoped(leaf) as c:
            with c.scoped(f"new_b{new_r}", branch=f"b{new_r}") as cn:
                self.new_branch = conv_bn(cn, "conv", width_of(new_r - 1), width_of(new_r),
                                          3, stride=2)

    def params(self):
        return self.new_branch.params()

    def forward(self, xs, train=False):
        return list(xs) + [self.new_branch.forward(xs[-1], train)]

    def backward(self, gys):
        gxs = list(gys[:self.n_in])
        gxs[-1] = gxs[-1] + self.new_branch.backward(gys[self.n_in])
        return gxs

    def cost(self, in_shapes):
        es, new_shape = self.new_branch.cost(in_shapes[-1])
        return es, list(in_shapes) + [new_shape]


def build_stem(ctx, cfg: NetworkConfig) -> Sequential:
    """Two stride-2 3x3 conv-BN-ReLU units: input resolution -> 1/4, 64 ch."""
    h, w = cfg.input_size
    if h % 4 or w % 4:
        raise ConfigError(f"network.input_size: {h}x{w} not divisible by 4")
    with ctx.scoped("stem", stage="stem") as c:
        children = [conv_bn(c, "unit1", cfg.in_channels, 64, 3, stride=2),
                    conv_bn(c, "unit2", 64, 64, 3, stride=2)]
    return Sequential(ctx, "stem", children)


def build_stage1(ctx, cfg: NetworkConfig) -> Sequential:
    """Bottleneck residual units at 1/4 resolution, then a 3x3 conv-BN-ReLU
    reducing the 4x-expanded width down to C for the branch stages."""
    mid = cfg.stage1_bottleneck_width
    expanded = 4 * mid
    with ctx.scoped("stage1", stage="stage1") as c:
        units: list[Layer] = []
        cin = 64
        for u in range(cfg.stage1_units):
            units.append(BottleneckUnit(c, f"unit{u}", cin, mid, expanded))
            cin = expanded
        units.append(conv_bn(c, "reduce", expanded, cfg.width, 3))
    return Sequential(ctx, "stage1", units)


def build_branch_units(ctx, branch_width: int, count: int) -> Sequential:
    """A chain of `count` two-conv residual units at constant width."""
    if count < 1:
        raise ConfigError("unit count must be >= 1")
    with ctx.scoped("units") as c:
        units = [BasicUnit(c, f"unit{u}", branch_width) for u in range(count)]
    return Sequential(ctx, "units", units)


def build_fusion(ctx, res_in: list[int], res_out: list[int], cfg: NetworkConfig) -> FusionBlock:
    if not res_in or not res_out:
        raise ConfigError("fusion needs non-empty input and output branch sets")
    return FusionBlock(ctx, "fuse", res_in, res_out, cfg.branch_width,
                       upsample_mode=cfg.fusion_upsample)


def build_transition(ctx, stage_index: int, cfg: NetworkConfig) -> Transition:
    if stage_index not in (2, 3, 4):
        raise ConfigError(f"transition stage_index must be 2, 3 or 4, got {stage_index}")
    res_in = list(range(stage_index - 1))
    with ctx.scoped("", stage=f"transition{stage_index}") as c:
        return Transition(c, f"transition{stage_index}", res_in, cfg.branch_width)


class Network:
    """Instantiated graph: stem → stage1 → alternating transitions and
    multi-resolution stages → head.  Deterministic per (config, seed)."""

    def __init__(self, cfg: NetworkConfig, precision: str = "fast", seed: int = 0):
        from .heads import build_head
        cfg.validate()
        self.config = cfg
        self.precision = precision
        self.seed = seed
        ctx = BuildCtx(precision, seed)
        self.stem = build_stem(ctx, cfg)
        self.stage1 = build_stage1(ctx, cfg)
        self.flow: list[BranchLayer] = []
        for stage_index, blocks in zip((2, 3, 4), cfg.stage_blocks):
            self.flow.append(build_transition(ctx, stage_index, cfg))
            res = list(range(stage_index))
            with ctx.scoped(f"stage{stage_index}", stage=f"stage{stage_index}") as c:
                for b in range(blocks):
                    self.flow.append(MultiBranchBlock(c, f"block{b}", res, cfg))
        with ctx.scoped("head", stage="head") as c:
            self.head = build_head(c, cfg)
        self._branch_cache = None

    # -- parameters ---------------------------------------------------------

    def params(self):
        out = self.stem.params() + self.stage1.params()
        for blk in self.flow:
            out.extend(blk.params())
        out.extend(self.head.params())
        return out

    def named_params(self):
        return [(p.name, p) for p in self.params()]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def state_arrays(self) -> dict:
        """Live views of everything a checkpoint must carry: parameters plus
        batch-norm running statistics, keyed by layer-path names."""
        from .layers import iter_batchnorms
        out = {p.name: p.data for p in self.params()}
        for bn in iter_batchnorms(self):
            out[bn.name + ".running_mean"] = bn.running_mean
            out[bn.name + ".running_var"] = bn.running_var
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        """Copy checkpoint tensors in place; extra keys (optimizer state) are
        ignored, missing or mis-shaped ones are hard errors."""
        own = self.state_arrays()
        missing = [k for k in own if k not in arrays]
        if missing:
            raise ConfigError(
                f"checkpoint is missing {len(missing)} tensor(s), first: {missing[0]!r}")
        for name, dst in own.items():
            src = arrays[name]
            if tuple(src.shape) != tuple(dst.shape):
                raise ConfigError(
                    f"checkpoint tensor {name!r} has shape {tuple(src.shape)}, "
                    f"expected {tuple(dst.shape)}")
            dst[...] = src.astype(dst.dtype, copy=False)

    # -- execution ----------------------------------------------------------

    def forward(self, x, train: bool = False):
        """Returns {"branches": [4 maps], "head": head output}."""
        x = check_feature_map(x, "network input")
        h, w = self.config.input_size
        if x.shape[1] != self.config.in_channels or x.shape[2] != h or x.shape[3] != w:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match config "
                f"({self.config.in_channels}, {h}, {w})")
        y = self.stage1.forward(self.stem.forward(x, train), train)
        xs = [y]
        for blk in self.flow:
            xs = blk.forward(xs, train)
        self._branch_cache = [b.shape for b in xs]
        return {"branches": xs, "head": self.head.forward(xs, train)}

    def backward(self, head_grad):
        """Backpropagate from the head output gradient through the whole net."""
        gxs = self.head.backward(head_grad)
        for blk in reversed(self.flow):
            gxs = blk.backward(gxs)
        g = self.stage1.backward(gxs[0])
        return self.stem.backward(g)

    # -- static analysis ----------------------------------------------------

    def cost_entries(self, input_size=None, batch: int = 1):
        h, w = input_size if input_size is not None else self.config.input_size
        shape = (batch, self.config.in_channels, h, w)
        entries, shape = self.stem.cost(shape)
        es, shape = self.stage1.cost(shape)
        entries.extend(es)
        shapes = [shape]
        for blk in self.flow:
            es, shapes = blk.cost(shapes)
            entries.extend(es)
        es, _ = self.head.cost(shapes)
        entries.extend(es)
        return entries

    def branch_shapes(self, input_size=None, batch: int = 1):
        h, w = input_size if input_size is not None else self.config.input_size
        shape = (batch, self.config.in_channels, h, w)
        _, shape = self.stem.cost(shape)
        _, shape = self.stage1.cost(shape)
        shapes = [shape]
        for blk in self.flow:
            _, shapes = blk.cost(shapes)
        return shapes

    def head_shape(self, input_size=None, batch: int = 1):
        shapes = self.branch_shapes(input_size, batch)
        _, out = self.head.cost(shapes)
        return out
