"""Graph nodes: parameterized layers with forward, backward, and static views.

Every layer supports three consistent views of the same computation:

* ``forward(x, train)`` / ``backward(gy)`` — run the kernel and accumulate
  parameter gradients (backward requires the matching forward's cache);
* ``params()`` — the instantiated parameter tensors, in deterministic order;
* ``cost(in_shape)`` — static shape/parameter/MAC analysis that never touches
  the arrays, used by the cost model and verified against ``params()``.

Layers are pure with respect to their inputs; the only per-call mutable state
is the forward cache (single-owner, overwritten by the next forward) and the
batch-norm running buffers in train mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .tensor import ShapeError, Tensor, assert_finite


@dataclass
class CostEntry:
    """One row of the static cost report."""
    layer: str
    stage: str
    branch: str
    params: int
    macs: int


class BuildCtx:
    """Threads dtype, finiteness checking, RNG and name/tag scopes through
    network construction so two builds from one config are identical."""

    def __init__(self, precision: str = "fast", seed: int = 0):
        from .tensor import dtype_for
        self.precision = precision
        self.dtype = dtype_for(precision)
        self.check = precision == "verify"
        self.rng = np.random.default_rng(np.random.PCG64(seed))
        self._scope: list[str] = []
        self.stage = ""
        self.branch = ""

    def name(self, leaf: str) -> str:
        return ".".join(self._scope + [leaf]) if self._scope else leaf

    class _Scope:
        def __init__(self, ctx, part, stage, branch):
            self.ctx, self.part = ctx, part
            self.stage, self.branch = stage, branch

        def __enter__(self):
            if self.part:
                self.ctx._scope.append(self.part)
            self.prev = (self.ctx.stage, self.ctx.branch)
            if self.stage is not None:
                self.ctx.stage = self.stage
            if self.branch is not None:
                self.ctx.branch = self.branch
            return self.ctx

        def __exit__(self, *exc):
            if self.part:
                self.ctx._scope.pop()
            self.ctx.stage, self.ctx.branch = self.prev

    def scoped(self, part: str, stage: str | None = None, branch: str | None = None):
        return BuildCtx._Scope(self, part, stage, branch)


class Layer:
    """Single-stream node: one input map, one output map."""

    def __init__(self, ctx: BuildCtx, leaf: str):
        self.name = ctx.name(leaf)
        self.stage = ctx.stage
        self.branch = ctx.branch
        self.check = ctx.check
        self._cache = None

    def params(self) -> list[Tensor]:
        return []

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def param_count(self) -> int:
        return 0

    def macs(self, in_shape: tuple) -> int:
        return 0

    def cost(self, in_shape: tuple):
        out = self.out_shape(in_shape)
        return [CostEntry(self.name, self.stage, self.branch,
                          self.param_count(), self.macs(in_shape))], out

    def _need_cache(self):
        if self._cache is None:
            raise ShapeError(f"backward before forward in layer {self.name!r}")
        return self._cache

    def _post(self, arr, what: str):
        if self.check:
            assert_finite(arr, f"{self.name} ({what})")
        return arr


class Conv2d(Layer):
    def __init__(self, ctx, leaf, cin, cout, kernel, stride=1, padding=None, bias=False):
        super().__init__(ctx, leaf)
        kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        if padding is None:
            padding = (kernel[0] // 2, kernel[1] // 2)
        padding = (padding, padding) if isinstance(padding, int) else tuple(padding)
        self.cin, self.cout = cin, cout
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = cin * kernel[0] * kernel[1]
        w = ctx.rng.standard_normal((cout, cin, *kernel)) * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(w.astype(ctx.dtype), self.name + ".weight", "conv_weight")
        self.bias = Tensor(np.zeros(cout, dtype=ctx.dtype), self.name + ".bias", "bias") if bias else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, train=False):
        y, cols = K.conv2d_forward(x, self.weight.data,
                                   self.bias.data if self.bias is not None else None,
                                   self.stride, self.padding)
        self._cache = (cols, x.shape)
        return self._post(y, "forward")

    def backward(self, gy):
        cols, x_shape = self._need_cache()
        gx, gw, gb = K.conv2d_backward(cols, x_shape, self.weight.data, gy,
                                       self.stride, self.padding,
                                       has_bias=self.bias is not None)
        self.weight.add_grad(gw)
        if self.bias is not None:
            self.bias.add_grad(gb)
        return self._post(gx, "backward")

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.cin:
            raise ShapeError(f"{self.name}: input has {c} channels, expected {self.cin}")
        oh = K.conv_out_size(h, self.kernel[0], self.stride[0], self.padding[0])
        ow = K.conv_out_size(w, self.kernel[1], self.stride[1], self.padding[1])
        return (n, self.cout, oh, ow)

    def param_count(self):
        kh, kw = self.kernel
        return self.cout * self.cin * kh * kw + (self.cout if self.bias is not None else 0)

    def macs(self, in_shape):
        n, cout, oh, ow = self.out_shape(in_shape)
        return self.kernel[0] * self.kernel[1] * self.cin * cout * oh * ow * n


class BatchNorm(Layer):
    def __init__(self, ctx, leaf, channels, momentum=0.1, eps=1e-5):
        super().__init__(ctx, leaf)
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(channels, dtype=ctx.dtype), self.name + ".gamma", "bn_gamma")
        self.beta = Tensor(np.zeros(channels, dtype=ctx.dtype), self.name + ".beta", "bn_beta")
        # running stats are state, not parameters (excluded from counts)
        self.running_mean = np.zeros(channels, dtype=ctx.dtype)
        self.running_var = np.ones(channels, dtype=ctx.dtype)

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train=False):
        y, cache = K.batch_norm_forward(x, self.gamma.data, self.beta.data,
                                        self.running_mean, self.running_var,
                                        self.momentum, self.eps, training=train)
        self._cache = cache
        return self._post(y, "forward")

    def backward(self, gy):
        gx, ggamma, gbeta = K.batch_norm_backward(self._need_cache(), gy)
        self.gamma.add_grad(ggamma)
        self.beta.add_grad(gbeta)
        return self._post(gx, "backward")

    def out_shape(self, in_shape):
        if in_shape[1] != self.channels:
            raise ShapeError(f"{self.name}: {in_shape[1]} channels, expected {self.channels}")
        return in_shape

    def param_count(self):
        return 2 * self.channels


class ReLU(Layer):
    def forward(self, x, train=False):
        self._cache = x
        return K.relu(x)

    def backward(self, gy):
        return K.relu_backward(self._need_cache(), gy)

    def out_shape(self, in_shape):
        return in_shape


class Upsample(Layer):
    def __init__(self, ctx, leaf, factor, mode):
        super().__init__(ctx, leaf)
        self.factor, self.mode = factor, mode

    def forward(self, x, train=False):
        self._cache = x.shape
        return self._post(K.upsample(x, self.factor, self.mode), "forward")

    def backward(self, gy):
        return K.upsample_backward(gy, self._need_cache(), self.factor, self.mode)

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, c, h * self.factor, w * self.factor)


class AvgPool(Layer):
    def __init__(self, ctx, leaf, kernel, stride):
        super().__init__(ctx, leaf)
        self.kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)

    def forward(self, x, train=False):
        self._cache = x.shape
        return K.avg_pool_forward(x, self.kernel, self.stride)

    def backward(self, gy):
        return K.avg_pool_backward(self._need_cache(), self.kernel, self.stride, gy)

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if self.kernel[0] > h or self.kernel[1] > w:
            raise ShapeError(f"{self.name}: pool kernel {self.kernel} larger than input {(h, w)}")
        oh = (h - self.kernel[0]) // self.stride[0] + 1
        ow = (w - self.kernel[1]) // self.stride[1] + 1
        return (n, c, oh, ow)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._cache = x.shape
        return K.global_avg_pool(x)

    def backward(self, gy):
        return K.global_avg_pool_backward(self._need_cache(), gy)

    def out_shape(self, in_shape):
        return (in_shape[0], in_shape[1], 1, 1)


class Flatten(Layer):
    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gy):
        return gy.reshape(self._need_cache())

    def out_shape(self, in_shape):
        n = in_shape[0]
        d = 1
        for s in in_shape[1:]:
            d *= s
        return (n, d)


class Linear(Layer):
    def __init__(self, ctx, leaf, din, dout, bias=True):
        super().__init__(ctx, leaf)
        self.din, self.dout = din, dout
        w = ctx.rng.standard_normal((dout, din)) * np.sqrt(2.0 / din)
        self.weight = Tensor(w.astype(ctx.dtype), self.name + ".weight", "linear_weight")
        self.bias = Tensor(np.zeros(dout, dtype=ctx.dtype), self.name + ".bias", "bias") if bias else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, train=False):
        self._cache = x
        return self._post(K.linear(x, self.weight.data,
                                   self.bias.data if self.bias is not None else None), "forward")

    def backward(self, gy):
        x = self._need_cache()
        gx, gw, gb = K.linear_backward(x, self.weight.data, gy, has_bias=self.bias is not None)
        self.weight.add_grad(gw)
        if self.bias is not None:
            self.bias.add_grad(gb)
        return self._post(gx, "backward")

    def out_shape(self, in_shape):
        if in_shape[1] != self.din:
            raise ShapeError(f"{self.name}: input dim {in_shape[1]}, expected {self.din}")
        return (in_shape[0], self.dout)

    def param_count(self):
        return self.dout * self.din + (self.dout if self.bias is not None else 0)

    def macs(self, in_shape):
        return in_shape[0] * self.din * self.dout


class Sequential(Layer):
    def __init__(self, ctx, leaf, children: list[Layer]):
        super().__init__(ctx, leaf)
        self.children = children

    def params(self):
        out = []
        for c in self.children:
            out.extend(c.params())
        return out

    def forward(self, x, train=False):
        for c in self.children:
            x = c.forward(x, train)
        return x

    def backward(self, gy):
        for c in reversed(self.children):
            gy = c.backward(gy)
        return gy

    def out_shape(self, in_shape):
        for c in self.children:
            in_shape = c.out_shape(in_shape)
        return in_shape

    def param_count(self):
        return sum(c.param_count() for c in self.children)

    def macs(self, in_shape):
        total = 0
        for c in self.children:
            total += c.macs(in_shape)
            in_shape = c.out_shape(in_shape)
        return total

    def cost(self, in_shape):
        entries = []
        for c in self.children:
            es, in_shape = c.cost(in_shape)
            entries.extend(es)
        return entries, in_shape


def conv_bn(ctx, leaf, cin, cout, kernel, stride=1, act=True) -> Sequential:
    """The conv → batch-norm (→ ReLU) unit used everywhere in the backbone;
    the convolution carries no bias because the norm immediately absorbs it."""
    with ctx.scoped(leaf) as c:
        children = [Conv2d(c, "conv", cin, cout, kernel, stride),
                    BatchNorm(c, "bn", cout)]
        if act:
            children.append(ReLU(c, "relu"))
    return Sequential(ctx, leaf, children)


class BasicUnit(Layer):
    """Residual unit of the multi-resolution branches: two 3x3 convolutions
    with an identity skip (width and resolution preserved)."""

    def __init__(self, ctx, leaf, width):
        super().__init__(ctx, leaf)
        with ctx.scoped(leaf) as c:
            self.conv1 = Conv2d(c, "conv1", width, width, 3)
            self.bn1 = BatchNorm(c, "bn1", width)
            self.relu1 = ReLU(c, "relu1")
            self.conv2 = Conv2d(c, "conv2", width, width, 3)
            self.bn2 = BatchNorm(c, "bn2", width)
            self.relu_out = ReLU(c, "relu_out")

    def _children(self):
        return [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2, self.relu_out]

    def params(self):
        out = []
        for c in self._children():
            out.extend(c.params())
        return out

    def forward(self, x, train=False):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        return self.relu_out.forward(h + x, train)

    def backward(self, gy):
        gs = self.relu_out.backward(gy)
        g = self.conv2.backward(self.bn2.backward(gs))
        g = self.conv1.backward(self.bn1.backward(self.relu1.backward(g)))
        return g + gs

    def out_shape(self, in_shape):
        return self.bn2.out_shape(self.conv2.out_shape(self.conv1.out_shape(in_shape)))

    def param_count(self):
        return sum(c.param_count() for c in self._children())

    def macs(self, in_shape):
        mid = self.conv1.out_shape(in_shape)
        return self.conv1.macs(in_shape) + self.conv2.macs(mid)

    def cost(self, in_shape):
        entries = []
        shape = in_shape
        for c in self._children():
            es, shape = c.cost(shape)
            entries.extend(es)
        return entries, shape


class BottleneckUnit(Layer):
    """1x1 reduce → 3x3 → 1x1 expand residual unit with optional projection
    shortcut (used by the first stage and the classification head)."""

    def __init__(self, ctx, leaf, cin, mid, cout, stride=1, project=None):
        super().__init__(ctx, leaf)
        if project is None:
            project = (cin != cout) or (stride != 1)
        with ctx.scoped(leaf) as c:
            self.conv1 = Conv2d(c, "conv1", cin, mid, 1)
            self.bn1 = BatchNorm(c, "bn1", mid)
            self.relu1 = ReLU(c, "relu1")
            self.conv2 = Conv2d(c, "conv2", mid, mid, 3, stride)
            self.bn2 = BatchNorm(c, "bn2", mid)
            self.relu2 = ReLU(c, "relu2")
            self.conv3 = Conv2d(c, "conv3", mid, cout, 1)
            self.bn3 = BatchNorm(c, "bn3", cout)
            self.relu_out = ReLU(c, "relu_out")
            if project:
                self.proj_conv = Conv2d(c, "proj_conv", cin, cout, 1, stride)
                self.proj_bn = BatchNorm(c, "proj_bn", cout)
            else:
                if cin != cout or stride != 1:
                    raise ShapeError(f"{self.name}: identity shortcut needs matching shape")
                self.proj_conv = self.proj_bn = None

    def _children(self):
        main = [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2,
                self.relu2, self.conv3, self.bn3, self.relu_out]
        if self.proj_conv is not None:
            main += [self.proj_conv, self.proj_bn]
        return main

    def params(self):
        out = []
        for c in self._children():
            out.extend(c.params())
        return out

    def forward(self, x, train=False):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.relu2.forward(self.bn2.forward(self.conv2.forward(h, train), train), train)
        h = self.bn3.forward(self.conv3.forward(h, train), train)
        if self.proj_conv is not None:
            skip = self.proj_bn.forward(self.proj_conv.forward(x, train), train)
        else:
            skip = x
        return self.relu_out.forward(h + skip, train)

    def backward(self, gy):
        gs = self.relu_out.backward(gy)
        g = self.conv3.backward(self.bn3.backward(gs))
        g = self.conv2.backward(self.bn2.backward(self.relu2.backward(g)))
        g = self.conv1.backward(self.bn1.backward(self.relu1.backward(g)))
        if self.proj_conv is not None:
            g = g + self.proj_conv.backward(self.proj_bn.backward(gs))
        else:
            g = g + gs
        return g

    def out_shape(self, in_shape):
        s = self.conv1.out_shape(in_shape)
        s = self.conv2.out_shape(s)
        return self.conv3.out_shape(s)

    def param_count(self):
        return sum(c.param_count() for c in self._children())

    def macs(self, in_shape):
        total = self.conv1.macs(in_shape)
        s = self.conv1.out_shape(in_shape)
        total += self.conv2.macs(s)
        s = self.conv2.out_shape(s)
        total += self.conv3.macs(s)
        if self.proj_conv is not None:
            total += self.proj_conv.macs(in_shape)
        return total

    def cost(self, in_shape):
        entries = []
        shape = in_shape
        for c in [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2,
                  self.relu2, self.conv3, self.bn3]:
            es, shape = c.cost(shape)
            entries.extend(es)
        if self.proj_conv is not None:
            es, pshape = self.proj_conv.cost(in_shape)
            entries.extend(es)
            es, pshape = self.proj_bn.cost(pshape)
            entries.extend(es)
        es, shape = self.relu_out.cost(shape)
        entries.extend(es)
        return entries, shape


def collect_params(layers) -> list[Tensor]:
    out = []
    for l in layers:
        out.extend(l.params())
    return out


def iter_module_tree(root):
    """Depth-first walk over package objects reachable from ``root``,
    yielding every Layer exactly once in construction order."""
    seen = set()

    def walk(obj):
        if id(obj) in seen:
            return
        seen.add(id(obj))
        if isinstance(obj, Layer):
            yield obj
        if isinstance(obj, (list, tuple)):
            for item in obj:
                yield from walk(item)
        elif isinstance(obj, dict):
            for item in obj.values():
                yield from walk(item)
        elif type(obj).__module__.startswith("hrnet_forge") and hasattr(obj, "__dict__"):
            for item in vars(obj).values():
                yield from walk(item)

    yield from walk(root)


def iter_batchnorms(root):
    for layer in iter_module_tree(root):
        if isinstance(layer, BatchNorm):
            yield layer
