"""Output heads mapping the four-resolution branch set to task outputs.

* ``v1``   — 1x1 classifier on the highest-resolution branch only.
* ``v1h``  — 1x1 expansion of branch 0 to 15C, then the classifier.
* ``v2``   — upsample branches 1-3 to 1/4 resolution, concatenate to 15C,
  mix with a 1x1 conv, classify.  Logits stay at 1/4 resolution; callers
  upsample x4 for dense prediction against full-resolution labels.
* ``v2p``  — the v2 mix reduced to 256 channels, then a pyramid of average-
  pooled levels (halving resolution each step), all 256-channel.
* ``cls_c``   — per-branch bottlenecks to (128, 256, 512, 1024), three
  stride-2 downsample-add steps, 1x1 to a 2048-d embedding, pool, classify.
* ``cls_ci``  — per-branch global pooling concatenated to a 15C embedding.
* ``cls_cii`` — per-branch stride-2 width-doubling bottlenecks down to 1/32,
  concatenated and mixed to a 2048-d embedding.
"""
from __future__ import annotations

import numpy as np

from .layers import (AvgPool, BatchNorm, BottleneckUnit, BuildCtx, Conv2d,
                     Flatten, GlobalAvgPool, Linear, ReLU, Sequential,
                     Upsample, conv_bn)
from .tensor import ConfigError, ShapeError


class Head:
    """Base: consumes the list of four branch maps, produces the task output."""

    def __init__(self, ctx: BuildCtx, leaf: str):
        self.name = ctx.name(leaf)
        self.stage = ctx.stage
        self.branch = ctx.branch

    def params(self):
        return []

    def forward(self, xs: list, train: bool = False):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def cost(self, in_shapes: list):
        raise NotImplementedError

    def _expect_branches(self, xs, n=4):
        if len(xs) != n:
            raise ShapeError(f"{self.name}: expected {n} branches, got {len(xs)}")


class HeadV1(Head):
    """Linear classifier (1x1 conv, with bias) on branch 0 only."""

    def __init__(self, ctx, cfg):
        super().__init__(ctx, "v1")
        with ctx.scoped("v1") as c:
            self.classifier = Conv2d(c, "classifier", cfg.width, cfg.num_outputs, 1, bias=True)

    def params(self):
        return self.classifier.params()

    def forward(self, xs, train=False):
        self._expect_branches(xs)
        self._in_shapes = [x.shape for x in xs]
        return self.classifier.forward(xs[0], train)

    def backward(self, gy):
        g0 = self.classifier.backward(gy)
        zeros = [np.zeros(s, dtype=g0.dtype) for s in self._in_shapes[1:]]
        return [g0] + zeros

    def cost(self, in_shapes):
        return self.classifier.cost(in_shapes[0])


class HeadV1h(Head):
    """Branch 0 expanded to 15C by a 1x1 conv-BN-ReLU, then the classifier."""

    def __init__(self, ctx, cfg):
        super().__init__(ctx, "v1h")
        mix_width = 15 * cfg.width
        with ctx.scoped("v1h") as c:
            self.expand = conv_bn(c, "expand", cfg.width, mix_width, 1)
            self.classifier = Conv2d(c, "classifier", mix_width, cfg.num_outputs, 1, bias=True)

    def params(self):
        return self.expand.params() + self.classifier.params()

    def forward(self, xs, train=False):
        self._expect_branches(xs)
        self._in_shapes = [x.shape for x in xs]
        return self.classifier.forward(self.expand.forward(xs[0], train), train)

    def backward(self, gy):
        g0 = self.expand.backward(self.classifier.backward(gy))
        zeros = [np.zeros(s, dtype=g0.dtype) for s in self._in_shapes[1:]]
        return [g0] + zeros

    def cost(self, in_shapes):
        entries, s = self.expand.cost(in_shapes[0])
        es, s = self.classifier.cost(s)
        return entries + es, s


class _MixedRepresentation:
    """Shared v2/v2p front: upsample branches 1-3 to 1/4 resolution,
    concatenate to 15C, and mix with a 1x1 conv-BN-ReLU (still 15C)."""

    def __init__(self, ctx, cfg):
        self.widths = [cfg.branch_width(r) for r in range(4)]
        self.mix_width = sum(self.widths)  # = 15C
        self.ups = [Upsample(ctx, f"up_b{r}", 1 << r, cfg.head_upsample) for r in (1, 2, 3)]
        self.mix = conv_bn(ctx, "mix", self.mix_width, self.mix_width, 1)

    def params(self):
        return self.mix.params()

    def forward(self, xs, train=False):
        maps = [xs[0]] + [up.forward(x, train) for up, x in zip(self.ups, xs[1:])]
        ref = maps[0].shape[2:]
        for m in maps[1:]:
            if m.shape[2:] != ref:
                raise ShapeError(f"mixed representation: upsampled size {m.shape[2:]} != {ref}")
        cat = np.concatenate(maps, axis=1)
        return self.mix.forward(cat, train)

    def backward(self, gmixed):
        gcat = self.mix.backward(gmixed)
        gxs, off = [], 0
        for r, w in enumerate(self.widths):
            piece = gcat[:, off:off + w]
            gxs.append(piece.copy() if r == 0 else self.ups[r - 1].backward(piece))
            off += w
        return gxs

    def cost(self, in_shapes):
        entries = []
        n, c0, h, w = in_shapes[0]
        for up, s in zip(self.ups, in_shapes[1:]):
            es, out = up.cost(s)
            entries.extend(es)
            if out[2:] != (h, w):
                raise ShapeError("mixed representation: branch sizes inconsistent")
        cat_shape = (n, self.mix_width, h, w)
        es, out = self.mix.cost(cat_shape)
        return entries + es, out


class HeadV2(Head):
    """Concatenated multi-resolution representation with a 1x1 classifier.

    Output logits are at 1/4 of the input resolution for both dense tasks;
    segmentation callers upsample them x4, landmark regression consumes the
    1/4-resolution maps directly.
    """

    def __init__(self, ctx, cfg):
        super().__init__(ctx, "v2")
        with ctx.scoped("v2") as c:
            self.mixed = _MixedRepresentation(c, cfg)
            self.classifier = Conv2d(c, "classifier", self.mixed.mix_width,
                                     cfg.num_outputs, 1, bias=True)

    def params(self):
        return self.mixed.params() + self.classifier.params()

    def forward(self, xs, train=False):
        self._expect_branches(xs)
        return self.classifier.forward(self.mixed.forward(xs, train), train)

    def backward(self, gy):
        return self.mixed.backward(self.classifier.backward(gy))

    def cost(self, in_shapes):
        entries, s = self.mixed.cost(in_shapes)
        es, s = self.classifier.cost(s)
        return entries + es, s


class HeadV2p(Head):
    """Feature pyramid: v2 mix -> 1x1 conv-BN-ReLU to 256 channels -> levels
    produced by repeated 2x2 stride-2 average pooling.  Level k+1 is exactly
    avg_pool(level k); all levels have 256 channels."""

    PYRAMID_CHANNELS = 256

    def __init__(self, ctx, cfg):
        super().__init__(ctx, "v2p")
        self.levels = cfg.pyramid_levels
        with ctx.scoped("v2p") as c:
            self.mixed = _MixedRepresentation(c, cfg)
            self.reduce = conv_bn(c, "reduce", self.mixed.mix_width, self.PYRAMID_CHANNELS, 1)
            self.pools = [AvgPool(c, f"pool{k}", 2, 2) for k in range(self.levels - 1)]

    def params(self):
        return self.mixed.params() + self.reduce.params()

    def forward(self, xs, train=False):
        self._expect_branches(xs)
        top = self.reduce.forward(self.mixed.forward(xs, train), train)
        maps = [top]
        for pool in self.pools:
            maps.append(pool.forward(maps[-1], train))
        return maps

    def backward(self, gys):
        if len(gys) != self.levels:
            raise ShapeError(f"{self.name}: expected {self.levels} level gradients")
        g = gys[-1]
        for k in range(self.levels - 2, -1, -1):
            g = gys[k] + self.pools[k].backward(g)
        return self.mixed.backward(self.reduce.backward(g))

    def cost(self, in_shapes):
        entries, s = self.mixed.cost(in_shapes)
        es, s = self.reduce.cost(s)
        entries.extend(es)
        shapes = [s]
        for pool in self.pools:
            es, s = pool.cost(s)
            entries.extend(es)
            shapes.append(s)
        return entries, shapes

    def level_names(self):
        # pyramid levels named from 1/4 resolution downward
        return [f"p{k + 2}" for k in range(self.levels)]


class ClsHeadC(Head):
    """Classification head: widen each branch with a bottleneck, merge top-down
    with stride-2 conv-BN-ReLU + add, lift to a 2048-d embedding, pool and
    classify.  The embedding width is 2048 for every C."""

    EMBED = 2048
    BRANCH_OUT = (128, 256, 512, 1024)
    BRANCH_MID = (32, 64, 128, 256)

    def __init__(self, ctx, cfg):
        super().__init__(ctx, "cls_c")
        self.embedding_dim = self.EMBED
        with ctx.scoped("cls_c") as c:
            self.incre = [
                BottleneckUnit(c, f"widen_b{r}", cfg.branch_width(r),
                               self.BRANCH_MID[r], self.BRANCH_OUT[r])
                for r in range(4)
            ]
            self.down = [
                conv_bn(c, f"down{r}", self.BRANCH_OUT[r], self.BRANCH_OUT[r + 1], 3, stride=2)
                for r in range(3)
            ]
            self.final = conv_bn(c, "embed", self.BRANCH_OUT[3], self.EMBED, 1)
            self.gap = GlobalAvgPool(c, "gap")
            self.flatten = Flatten(c, "flatten")
            self.fc = Linear(c, "fc", self.EMBED, cfg.num_outputs, bias=True)

    def params(self):
        out = []
        for m in self.incre + self.down + [self.final, self.fc]:
            out.extend(m.params())
        return out

    def forward(self, xs, train=False):
        self._expect_branches(xs)
        y = self.incre[0].forward(xs[0], train)
        for r in range(1, 4):
            y = self.incre[r].forward(xs[r], train) + self.down[r - 1].forward(y, train)
        y = self.final.forward(y, train)
        y = self.flatten.forward(self.gap.forward(y, train), train)
        return self.fc.forward(y, train)

    def backward(self, gy):
        g = self.gap.backward(self.flatten.backward(self.fc.backward(gy)))
        g = self.final.backward(g)
        gxs = [None] * 4
        for r in range(3, 0, -1):
            gxs[r] = self.incre[r].backward(g)
            g = self.down[r - 1].backward(g)
        gxs[0] = self.incre[0].backward(g)
        return gxs

    def cost(self, in_shapes):
        entries = []
        es, y = self.incre[0].cost(in_shapes[0])
        entries.extend(es)
        for r in range(1, 4):
            es, s_incre = self.incre[r].cost(in_shapes[r])
            entries.extend(es)
            es, y = self.down[r - 1].cost(y)
            entries.extend(es)
            if s_incre != y:
                raise ShapeError(f"{self.name}: add shapes disagree {s_incre} vs {y}")
        for m in (self.final, self.gap, self.flatten, self.fc):
            es, y = m.cost(y)
            entries.extend(es)
        return entries, y


class ClsHeadCi(Head):
    """Per-branch global average pooling concatenated into a 15C embedding."""

    def __init__(self, ctx, cfg):
        super().__init__(ctx, "cls_ci")
        self.widths = [cfg.branch_width(r) for r in range(4)]
        self.embedding_dim = sum(self.widths)
        with ctx.scoped("cls_ci") as c:
            self.gaps = [GlobalAvgPool(c, f"gap_b{r}") for r in range(4)]
            self.flats = [Flatten(c, f"flat_b{r}") for r in range(4)]
            self.fc = Linear(c, "fc", self.embedding_dim, cfg.num_outputs, bias=True)

    def params(self):
        return self.fc.params()

    def forward(self, xs, train=False):
        self._expect_branches(xs)
        pieces = [f.forward(g.forward(x, train), train)
                  for f, g, x in zip(self.flats, self.gaps, xs)]
        return self.fc.forward(np.concatenate(pieces, axis=1), train)

    def backward(self, gy):
        gcat = self.fc.backward(gy)
        gxs, off = [], 0
        for r, w in enumerate(self.widths):
            piece = gcat[:, off:off + w]
            gxs.append(self.gaps[r].backward(self.flats[r].backward(piece)))
            off += w
        return gxs

    def cost(self, in_shapes):
        entries = []
        n = in_shapes[0][0]
        for r in range(4):
            es, s = self.gaps[r].cost(in_shapes[r])
            entries.extend(es)
            es, _ = self.flats[r].cost(s)
            entries.extend(es)
        es, out = self.fc.cost((n, self.embedding_dim))
        return entries + es, out


class ClsHeadCii(Head):
    """Every branch descends to 1/32 resolution through stride-2 bottlenecks
    that double the width each step (branch r needs 3-r steps, ending at 8C);
    the concatenated 32C map is mixed by a 1x1 conv-BN-ReLU into a 2048-d
    embedding, then pooled and classified."""

    EMBED = 2048

    def __init__(self, ctx, cfg):
        super().__init__(ctx, "cls_cii")
        self.embedding_dim = self.EMBED
        self.cat_width = 4 * cfg.branch_width(3)  # 4 branches, each at 8C
        with ctx.scoped("cls_cii") as c:
            self.chains = []
            for r in range(4):
                steps = []
                w = cfg.branch_width(r)
                with c.scoped(f"branch{r}", branch=f"b{r}") as cb:
                    for s in range(3 - r):
                        steps.append(BottleneckUnit(cb, f"down{s}", w, max(w // 2, 1),
                                                    2 * w, stride=2))
                        w *= 2
                self.chains.append(Sequential(c, f"branch{r}", steps))
            self.mix = conv_bn(c, "embed", self.cat_width, self.EMBED, 1)
            self.gap = GlobalAvgPool(c, "gap")
            self.flatten = Flatten(c, "flatten")
            self.fc = Linear(c, "fc", self.EMBED, cfg.num_outputs, bias=True)

    def params(self):
        out = []
        for m in self.chains + [self.mix, self.fc]:
            out.extend(m.params())
        return out

    def forward(self, xs, train=False):
        self._expect_branches(xs)
        maps = [ch.forward(x, train) for ch, x in zip(self.chains, xs)]
        ref = maps[0].shape[2:]
        for m in maps[1:]:
            if m.shape[2:] != ref:
                raise ShapeError(f"{self.name}: branch sizes disagree at 1/32")
        self._split = [m.shape[1] for m in maps]
        cat = np.concatenate(maps, axis=1)
        y = self.mix.forward(cat, train)
        y = self.flatten.forward(self.gap.forward(y, train), train)
        return self.fc.forward(y, train)

    def backward(self, gy):
        g = self.gap.backward(self.flatten.backward(self.fc.backward(gy)))
        gcat = self.mix.backward(g)
        gxs, off = [], 0
        for ch, w in zip(self.chains, self._split):
            piece = gcat[:, off:off + w]
            gxs.append(ch.backward(piece) if ch.children else piece.copy())
            off += w
        return gxs

    def cost(self, in_shapes):
        entries, shapes = [], []
        for ch, s in zip(self.chains, in_shapes):
            es, o = ch.cost(s)
            entries.extend(es)
            shapes.append(o)
        n = shapes[0][0]
        cat_shape = (n, sum(s[1] for s in shapes), *shapes[0][2:])
        es, y = self.mix.cost(cat_shape)
        entries.extend(es)
        for m in (self.gap, self.flatten, self.fc):
            es, y = m.cost(y)
            entries.extend(es)
        return entries, y


_HEAD_CLASSES = {
    "v1": HeadV1,
    "v1h": HeadV1h,
    "v2": HeadV2,
    "v2p": HeadV2p,
    "cls_c": ClsHeadC,
    "cls_ci": ClsHeadCi,
    "cls_cii": ClsHeadCii,
}


def build_head(ctx, cfg) -> Head:
    try:
        cls = _HEAD_CLASSES[cfg.head]
    except KeyError:
        raise ConfigError(f"network.head: unknown head {cfg.head!r}")
    return cls(ctx, cfg)
