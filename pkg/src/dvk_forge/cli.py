"""Command-line entry point: ``dvk-forge <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import struct
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _int_list(s):
    try:
        vals = [int(v) for v in s.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="BLAS/FFT worker threads (default: $DVK_FORGE_THREADS or 1)")

    p = _Parser(prog="dvk-forge", description="Dose-voxel-kernel estimation toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", parents=[common], help="write a synthetic density/dose dataset")
    g.add_argument("--per-class", type=_positive_int, default=20)
    g.add_argument("--classes", default="bone,lung,kidney,liver,spleen")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", type=float, default=0.7, help="train fraction (shuffle, then split)")
    g.add_argument("--mix-prob", type=float, default=0.0, help="chance of a second-tissue inclusion")
    g.add_argument("--center-fraction", type=float, default=0.6)
    g.add_argument("--noise", type=float, default=0.0, help="relative noise on deposition weights")
    g.add_argument("--low", type=float, default=0.1)
    g.add_argument("--high", type=float, default=0.9)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train the U-Net")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value training config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="per-tissue IoU/MAE/MSE report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--splits", default="train,val")
    e.add_argument("--out", help="report CSV (a PNG is written next to it)")

    pr = sub.add_parser("predict", parents=[common], help="density kernel(s) -> dose kernel(s)")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help="DVKT of shape (9,9,9) or (N,9,9,9)")
    pr.add_argument("--out", required=True)
    pr.add_argument("--normalized", action="store_true",
                    help="input is already normalised and output stays normalised")

    d = sub.add_parser("dose-convolve", parents=[common], help="decay map convolved with a DVK")
    d.add_argument("--decays", required=True)
    d.add_argument("--kernel", required=True)
    d.add_argument("--method", choices=("direct", "fft"), default="fft")
    d.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--instances", type=_positive_int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-5)

    ps = sub.add_parser("pca-scree", parents=[common], help="PCA of dataset kernels, scree export")
    ps.add_argument("--data", required=True, help="dataset directory or an (n, d) DVKT matrix")
    ps.add_argument("--field", choices=("density", "dose"), default="density")
    ps.add_argument("--out", required=True, help="scree CSV (a PNG is written next to it)")

    b = sub.add_parser("bench", parents=[common], help="direct vs fft convolution timings")
    b.add_argument("--sizes", type=_int_list, default=[16, 24, 32])
    b.add_argument("--kernel-size", type=_positive_int, default=9)
    b.add_argument("--repeat", type=_positive_int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="timing CSV (a PNG is written next to it)")

    i = sub.add_parser("inspect", parents=[common], help="dump a DVKT or DVKC header")
    i.add_argument("path")
    return p


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DVK_FORGE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"DVK_FORGE_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("DVK_FORGE_THREADS must be >= 1")
        return n
    return 1


def _write_rows(rows, path=None):
    out = open(path, "w", newline="") if path else sys.stdout
    try:
        csv.writer(out, lineterminator="\n").writerows(rows)
    finally:
        if path:
            out.close()


# -- subcommands ---------------------------------------------------------------------


def cmd_generate(args):
    from .dosimetry import TISSUES, generate_dataset

    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    unknown = [c for c in classes if c not in TISSUES]
    if unknown:
        raise UsageError(f"unknown tissue class(es): {', '.join(unknown)}")
    if not 0 < args.split < 1:
        raise UsageError("--split must lie in (0, 1)")
    path = generate_dataset(args.per_class, classes, args.seed, args.out, split=args.split, mix_prob=args.mix_prob,
                            center_fraction=args.center_fraction, rel_noise=args.noise, a=args.low, b=args.high)
    print(f"wrote {args.per_class * len(classes)} samples, manifest {path}")


def _train_config(args):
    from .unet import TrainConfig, parse_config

    text = Path(args.config).read_text() if args.config else ""
    extra = []
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        extra.append(item)
    if args.seed is not None:
        extra.append(f"seed = {args.seed}")
    return parse_config(text + "\n" + "\n".join(extra), TrainConfig())


def cmd_train(args):
    from . import plotting
    from .dosimetry import load_dataset
    from .unet import EpochRecord, build_unet, save_checkpoint, train, write_epoch_log

    cfg = _train_config(args)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = build_unet(cfg.unet_spec())

    def report(rec: EpochRecord):
        if not args.quiet:
            print(f"epoch {rec.epoch:4d}  lr {rec.lr:.3g}  loss {rec.train_loss:.5f}/{rec.val_loss:.5f}  "
                  f"iou {rec.train_iou:.4f}/{rec.val_iou:.4f}", flush=True)

    ckpt, records = train(net, ds, cfg, on_epoch=report)
    save_checkpoint(ckpt, out / "best.dvkc")
    write_epoch_log(records, out / "epoch_log.csv")
    plotting.epoch_curves(records, out / "epoch_log.png")
    print(f"best epoch {ckpt.epoch} (val loss {ckpt.best_val_loss:.6g}); wrote {out / 'best.dvkc'}")


def _load_net(path):
    from .unet import load_checkpoint, network_from_checkpoint

    ckpt = load_checkpoint(path)
    return ckpt, network_from_checkpoint(ckpt)


def cmd_eval(args):
    from . import plotting
    from .dosimetry import load_dataset
    from .unet import evaluate

    ckpt, net = _load_net(args.checkpoint)
    ds = load_dataset(args.data)
    splits = [s for s in args.splits.split(",") if s]
    missing = [s for s in splits if s not in set(ds.splits)]
    if missing:
        raise UsageError(f"dataset has no split(s) {missing}")
    report = evaluate(net, ds, splits)
    rows = report.table()
    _write_rows(rows)
    if args.out:
        _write_rows(rows, args.out)
        plotting.eval_bars(report, Path(args.out).with_suffix(".png"))


def cmd_predict(args):
    from .tensor import apply_normalization, denormalize, read_tensor, write_tensor
    from .unet import checkpoint_norms, predict

    ckpt, net = _load_net(args.checkpoint)
    x = read_tensor(args.input)
    if not args.normalized:
        norms = checkpoint_norms(ckpt).get("train")
        if norms is None:
            raise UsageError("checkpoint stores no train-split normalisation; pass --normalized")
        x = apply_normalization(x, norms["density"])
    y = predict(net, x)
    if not args.normalized:
        y = denormalize(y, norms["dose"])
    write_tensor(args.out, y)
    print(f"wrote {args.out} {y.shape}")


def cmd_dose_convolve(args):
    from .dosimetry import convolve3d_direct, convolve3d_fft
    from .tensor import read_tensor, write_tensor

    a, k = read_tensor(args.decays), read_tensor(args.kernel)
    dose = (convolve3d_fft if args.method == "fft" else convolve3d_direct)(a, k)
    write_tensor(args.out, dose)
    print(f"wrote {args.out} {dose.shape} total {dose.sum():.6g}")


def cmd_gradcheck(args):
    from .gradcheck import gradient_suite

    results = gradient_suite(args.instances, args.seed)
    _write_rows([["case", "instances", "max_rel_error", "status"]] +
                [[r.name, r.instances, f"{r.max_error:.3e}", "ok" if r.ok(args.tol) else "FAIL"] for r in results])
    return EXIT_OK if all(r.ok(args.tol) for r in results) else EXIT_NUMERIC


def cmd_pca_scree(args):
    from . import plotting
    from .dosimetry import load_dataset
    from .pca import pca_fit, scree_export
    from .tensor import read_tensor

    src = Path(args.data)
    if src.is_dir():
        ds = load_dataset(src)
        x = getattr(ds, args.field).reshape(len(ds), -1)
    else:
        x = read_tensor(src)
        if x.ndim != 2:
            x = x.reshape(x.shape[0], -1)
    res = pca_fit(x)
    path = scree_export(res, args.out)
    plotting.scree(res.fractions, Path(args.out).with_suffix(".png"))
    top = ", ".join(f"{f:.4f}" for f in res.fractions[:5])
    print(f"{x.shape[1]} components from {x.shape[0]} samples in {res.sweeps} sweeps; leading fractions {top}")
    print(f"wrote {path}")


def cmd_bench(args):
    from . import plotting
    from .dosimetry import convolve3d_direct, convolve3d_fft

    if args.kernel_size % 2 == 0:
        raise UsageError("--kernel-size must be odd")
    rng = np.random.default_rng(args.seed)
    k = rng.random((args.kernel_size,) * 3)
    rows = [["size", "direct_s", "fft_s", "max_rel_diff"]]
    direct_t, fft_t = [], []
    for n in args.sizes:
        a = rng.random((n, n, n))
        best = {}
        for name, fn in (("direct", convolve3d_direct), ("fft", convolve3d_fft)):
            times = []
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                out = fn(a, k)
                times.append(time.perf_counter() - t0)
            best[name] = (min(times), out)
        diff = np.abs(best["fft"][1] - best["direct"][1]).max() / np.abs(best["direct"][1]).max()
        direct_t.append(best["direct"][0])
        fft_t.append(best["fft"][0])
        rows.append([n, f"{best['direct'][0]:.6f}", f"{best['fft'][0]:.6f}", f"{diff:.3e}"])
    _write_rows(rows)
    if args.out:
        _write_rows(rows, args.out)
        plotting.bench_times(args.sizes, direct_t, fft_t, Path(args.out).with_suffix(".png"))


def cmd_inspect(args):
    from .errors import FormatError
    from .tensor import decode_header
    from .unet import read_checkpoint_header

    buf = Path(args.path).read_bytes()
    magic = buf[:4]
    if magic == b"DVKT":
        shape, off = decode_header(buf)
        print(json.dumps({"format": "DVKT", "version": buf[4], "dtype": "f64le", "rank": len(shape),
                          "shape": list(shape), "payload_bytes": len(buf) - off}))
    elif magic == b"DVKC":
        version, header, off = read_checkpoint_header(buf)
        blocks = []
        while off < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + nlen].decode("utf-8")
            shape, poff = decode_header(buf, off + 2 + nlen)
            blocks.append({"name": name, "shape": list(shape)})
            off = poff + 8 * int(np.prod(shape))
        print(json.dumps({"format": "DVKC", "version": version, "header": header, "blocks": blocks}, indent=1))
    else:
        raise FormatError(f"{args.path}: unknown magic {magic!r}")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "dose-convolve": cmd_dose_convolve,
    "gradcheck": cmd_gradcheck,
    "pca-scree": cmd_pca_scree,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def run(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .errors import DvkError, NumericalError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        n = _threads(args)
        with threadpool_limits(limits=n):
            code = COMMANDS[args.command](args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"dvk-forge {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dvk-forge {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DvkError, OSError, UnicodeDecodeError) as exc:
        print(f"dvk-forge {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"dvk-forge {args.command}: invalid value: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv=None):
    try:
        code = run(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
    sys.exit(code)


if __name__ == "__main__":
    main()
