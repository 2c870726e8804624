"""Modified-stem ResNet-50 used to calibrate the GFLOP reporting constant.

This is the torchvision-style bottleneck ResNet (stride on the 3x3 conv of
each downsampling unit) with its 7x7 stem replaced by two stride-2 3x3
conv-BN-ReLU units and the stem max-pool dropped, so stage 1 still enters at
1/4 resolution.  Only the static cost interface matters here; forward works
too since it is assembled from the same layers as everything else.
"""
from __future__ import annotations

from .layers import (BottleneckUnit, BuildCtx, Flatten, GlobalAvgPool, Linear,
                     Sequential, conv_bn)

STAGES = ((64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2))


class ResNet50:
    def __init__(self, num_classes: int = 1000, precision: str = "fast", seed: int = 0):
        ctx = BuildCtx(precision, seed)
        self.num_classes = num_classes
        self.input_size = (224, 224)
        with ctx.scoped("stem", stage="stem") as c:
            stem = [conv_bn(c, "unit1", 3, 64, 3, stride=2),
                    conv_bn(c, "unit2", 64, 64, 3, stride=2)]
        self.stem = Sequential(ctx, "stem", stem)
        self.stages = []
        cin = 64
        for idx, (mid, cout, blocks, stride) in enumerate(STAGES, start=1):
            with ctx.scoped(f"layer{idx}", stage=f"layer{idx}") as c:
                units = []
                for b in range(blocks):
                    units.append(BottleneckUnit(c, f"unit{b}", cin, mid, cout,
                                                stride=stride if b == 0 else 1))
                    cin = cout
            self.stages.append(Sequential(ctx, f"layer{idx}", units))
        with ctx.scoped("head", stage="head") as c:
            self.gap = GlobalAvgPool(c, "gap")
            self.flatten = Flatten(c, "flatten")
            self.fc = Linear(c, "fc", 2048, num_classes, bias=True)

    def params(self):
        out = self.stem.params()
        for s in self.stages:
            out.extend(s.params())
        out.extend(self.fc.params())
        return out

    def forward(self, x, train: bool = False):
        y = self.stem.forward(x, train)
        for s in self.stages:
            y = s.forward(y, train)
        return self.fc.forward(self.flatten.forward(self.gap.forward(y, train), train), train)

    def cost_entries(self, input_size=None, batch: int = 1):
        h, w = input_size if input_size is not None else self.input_size
        shape = (batch, 3, h, w)
        entries, shape = self.stem.cost(shape)
        for s in self.stages:
            es, shape = s.cost(shape)
            entries.extend(es)
        for m in (self.gap, self.flatten, self.fc):
            es, shape = m.cost(shape)
            entries.extend(es)
        return entries
