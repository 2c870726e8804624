"""Command-line entry point.

Commands: describe, cost, gradcheck, train, eval, gen-data.  Exit codes:
0 success, 1 usage/config error, 2 numerical failure, 3 I/O error.

`HRNET_FORGE_THREADS` caps BLAS/kernel parallelism; it is applied before
numpy is imported, so this module keeps all heavy imports inside functions.
"""
from __future__ import annotations

import argparse
import os
import sys

_thread_limiter = None  # keeps the threadpoolctl controller alive


def _setup_threads() -> None:
    global _thread_limiter
    cap = os.environ.get("HRNET_FORGE_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise _Usage(f"HRNET_FORGE_THREADS must be a positive integer, got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)
    import threadpoolctl
    _thread_limiter = threadpoolctl.threadpool_limits(limits=int(cap))


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hrnet-forge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, size=False, out=False):
        sp.add_argument("--config", default="tiny-seg",
                        help="config file path or preset name")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--precision", choices=("verify", "fast"), default=None,
                        help="override config precision")
        if size:
            sp.add_argument("--size", default=None, metavar="HxW",
                            help="override network input size")
        if out:
            sp.add_argument("--out", default=None, metavar="DIR",
                            help="directory for output artifacts")

    sp = sub.add_parser("describe", help="print topology and shapes")
    common(sp, size=True)
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("cost", help="static parameter/FLOP report")
    common(sp, size=True, out=True)
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("gradcheck", help="finite-difference check on a tiny network")
    common(sp)
    sp.add_argument("--tensors", type=int, default=8, help="parameter tensors to probe")
    sp.add_argument("--coords", type=int, default=8, help="coordinates per tensor")
    sp.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("train", help="run the training loop")
    common(sp, out=True)
    sp.add_argument("--resume", default=None, metavar="CKPT",
                    help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, out=True)
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--data", default=None, metavar="DIR",
                    help="evaluate on an image directory instead of the config dataset")
    sp.add_argument("--flip-eval", action="store_true",
                    help="average predictions over horizontal flips")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    common(sp, out=True)
    sp.set_defaults(func=cmd_gen_data)
    return p


def _load(args, need_size=False):
    from .config import load_config
    from .tensor import ConfigError
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    if need_size and getattr(args, "size", None):
        parts = args.size.split("x")
        if len(parts) != 2 or not all(s.isdigit() for s in parts):
            raise ConfigError(f"--size expects HxW, got {args.size!r}")
        cfg.net_input_size = (int(parts[0]), int(parts[1]))
    return cfg.validate()


def _is_resnet(args) -> bool:
    return args.config == "r50"


def _resnet_model(args):
    from .resnet import ResNet50
    size = (224, 224)
    if getattr(args, "size", None):
        h, w = args.size.split("x")
        size = (int(h), int(w))
    return ResNet50(), size


def cmd_describe(args) -> int:
    if _is_resnet(args):
        from .costmodel import report
        model, size = _resnet_model(args)
        rep = report(model, size)
        print("resnet-50 (two-conv stem)")
        print(rep.render_text(), end="")
        return 0
    from .config import config_digest, render_config
    from .costmodel import report
    from .topology import Network
    cfg = _load(args, need_size=True)
    net = Network(cfg.network(), cfg.precision, cfg.seed)
    print(f"config digest {config_digest(cfg):#018x}")
    print(f"task {cfg.task}, head {cfg.net_head}, width {cfg.net_width}, "
          f"input {cfg.net_input_size[0]}x{cfg.net_input_size[1]}")
    print("branch outputs:")
    for shape in net.branch_shapes():
        print(f"  ({shape[1]}, {shape[2]}, {shape[3]})")
    head = net.head_shape()
    if isinstance(head, list):
        print("pyramid outputs:")
        for name, shape in zip(net.head.level_names(), head):
            print(f"  {name}: ({shape[1]}, {shape[2]}, {shape[3]})")
    else:
        print(f"head output: {tuple(head[1:])}")
    rep = report(net, cfg.net_input_size)
    print(rep.render_text(), end="")
    print("--- config ---")
    print(render_config(cfg), end="")
    return 0


def cmd_cost(args) -> int:
    from .costmodel import report
    if _is_resnet(args):
        model, size = _resnet_model(args)
        rep = report(model, size)
    else:
        from .topology import Network
        cfg = _load(args, need_size=True)
        model = Network(cfg.network(), cfg.precision, cfg.seed)
        rep = report(model, cfg.net_input_size)
    print(rep.render_text(), end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "cost.tsv"), "w") as f:
            f.write(rep.render_tsv())
        with open(os.path.join(args.out, "cost.txt"), "w") as f:
            f.write(rep.render_text())
        print(f"wrote {args.out}/cost.tsv and cost.txt")
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import kernels as K
    from .config import load_config
    from .gradcheck import GradCheckReport, check_tensor
    from .topology import Network

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.precision = "verify"
    cfg.validate()
    net = Network(cfg.network(), "verify", cfg.seed)
    rng = np.random.default_rng([cfg.seed, 77])
    h, w = cfg.net_input_size
    x = rng.standard_normal((2, cfg.net_in_channels, h, w))
    labels = rng.integers(0, cfg.net_num_outputs, (2, h, w))

    def loss_fn():
        out = net.forward(x, train=True)["head"]
        if isinstance(out, list):  # pyramid: probe with a quadratic pseudo-loss
            loss = sum(K.mse_loss(level, np.zeros_like(level))[0] for level in out)
            return loss, [K.mse_loss(level, np.zeros_like(level))[1] for level in out]
        if out.ndim == 2:  # classification logits
            return K.softmax_cross_entropy(out, labels[:, 0, 0])
        up = K.upsample(out, 4, "bilinear")
        loss, g_up = K.softmax_cross_entropy(up, labels)
        return loss, K.upsample_backward(g_up, out.shape, 4, "bilinear")

    loss, head_grad = loss_fn()
    net.zero_grads()
    net.backward(head_grad)
    params = net.params()
    picks = rng.choice(len(params), size=min(args.tensors, len(params)), replace=False)
    report = GradCheckReport()
    for idx in sorted(picks):
        p = params[idx]
        analytic = p.grad.copy()
        if args.corrupt:
            analytic *= 1.5
        err, n = check_tensor(lambda: loss_fn()[0], p.data, analytic,
                              rng=rng, coords=args.coords)
        report.merge(p.name, err, n)
    status = "PASS" if report.passed(1e-3) else "FAIL"
    print(f"gradcheck {status}: max relative error {report.max_error:.3e} "
          f"({report.coords_checked} coordinates, worst {report.worst})")
    return 0 if status == "PASS" else 2


def cmd_train(args) -> int:
    from .train import run_training
    cfg = _load(args)
    out_dir = args.out or "run"
    result = run_training(cfg, out_dir, resume=args.resume)
    for key in sorted(result.metrics):
        print(f"final {key} = {result.metrics[key]:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    from .synthetic import load_dataset
    from .train import run_eval
    cfg = _load(args)
    dataset = load_dataset(args.data, cfg.task) if args.data else None
    results = run_eval(cfg, args.ckpt, out_dir=args.out,
                       flip_average=args.flip_eval, dataset=dataset)
    for key in sorted(results):
        print(f"{key} = {results[key]:.6f}")
    return 0


def cmd_gen_data(args) -> int:
    from .tensor import ConfigError
    from .synthetic import dataset_from_config, save_dataset
    cfg = _load(args)
    if not args.out:
        raise ConfigError("gen-data requires --out DIR")
    ds = dataset_from_config(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} {cfg.task} samples to {args.out}")
    return 0


def main(argv=None) -> int:
    try:
        _setup_threads()
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:  # --help exits 0; argparse usage errors go through _Usage
            return 0 if e.code == 0 else 1
        from .tensor import ConfigError, NumericalError, ShapeError
        try:
            return args.func(args)
        except (ConfigError, ShapeError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
        except NumericalError as e:
            print(f"numerical error: {e}", file=sys.stderr)
            return 2
        except OSError as e:
            print(f"I/O error: {e}", file=sys.stderr)
            return 3
    except _Usage as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
