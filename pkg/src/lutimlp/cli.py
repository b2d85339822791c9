"""``lutimlp`` command line.

Exit status is 0 on success, 1 for bad input (flags, files, data) and 2
for anything unexpected. Errors print one line on stderr.
"""

import argparse
import contextlib
import csv
import logging
import sys

import numpy as np

from . import bench, se3
from .dataio import (
    SHAPES,
    FormatError,
    load_folder,
    read_lut,
    read_xyz,
    synth_dataset,
    write_lut,
)
from .lattice import Lattice3
from .mlp import tabulate
from .registration import JACOBIAN_MODES, RegistrationConfig, RegistrationError, register
from .training import (
    VARIANTS,
    TrainConfig,
    Trainer,
    TrainingError,
    evaluate,
    load_model,
    run_ablation,
    save_model,
)

log = logging.getLogger("lutimlp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bounds(s):
    try:
        lo, hi = (float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {s!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError("bounds need LO < HI")
    return lo, hi


def _load_data(args, seed):
    if args.data == "synth":
        classes = args.classes.split(",")
        train = synth_dataset(classes, args.per_class, args.points, seed)
        test = synth_dataset(classes, args.test_per_class, args.points, seed + 1000)
        return train, test, classes
    train, classes = load_folder(args.data, "train", args.points, seed)
    try:
        test, _ = load_folder(args.data, "test", args.points, seed + 1)
    except ValueError:
        test = []
    return train, test, classes


def _write_rows(path, rows, fields):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# -- commands -------------------------------------------------------------------

def cmd_train(args):
    lo, hi = args.bounds
    cfg = TrainConfig(
        variant=args.variant,
        d=args.d,
        k=args.k,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        tv_p=None if args.tv == "none" else int(args.tv),
        tv_weight=args.tv_weight,
        batch_size=args.batch_size,
        lo=lo,
        hi=hi,
    )
    train, test, classes = _load_data(args, args.seed)
    trainer = Trainer(cfg, len(classes))
    rows = []

    def on_epoch(row):
        rows.append(row)
        print(f"epoch {row['epoch']} loss {row['loss']:.4f}" + (f" acc {row['test_acc']:.4f}" if "test_acc" in row else ""))

    trainer.fit(train, test or None, on_epoch=on_epoch)
    save_model(args.out, trainer.model, {"classes": classes})
    metrics = args.metrics or args.out + ".csv"
    _write_rows(metrics, rows, ["epoch", "loss", "lr", "test_acc"])
    if test:
        print(f"final accuracy {evaluate(trainer.model, test):.4f}")
    print(f"wrote {args.out} and {metrics}")


def cmd_classify(args):
    model, meta = load_model(args.checkpoint)
    classes = meta.get("classes") or [str(i) for i in range(model.n_classes)]
    for path in args.inputs:
        cloud = read_xyz(path)
        pred = int(model.predict(cloud.points[None])[0])
        print(f"{path}\t{classes[pred]}")


def _embedder(args):
    if args.lut:
        return read_lut(args.lut)
    model, _ = load_model(args.checkpoint)
    if model.cfg.variant == "mlp":
        return model.embed_mlp
    return model.lut()


def _ground_truth(path):
    vals = np.loadtxt(path, dtype=np.float64).ravel()
    if vals.size == 6:
        return se3.exp(vals)
    if vals.size == 16:
        g = vals.reshape(4, 4)
        se3.check_rigid(g, tol=1e-6)
        return g
    raise FormatError(f"{path}: expected a 6-value twist or a 4x4 matrix, got {vals.size} values")


def cmd_register(args):
    emb = _embedder(args)
    src, tgt = read_xyz(args.source), read_xyz(args.target)
    gt = _ground_truth(args.ground_truth) if args.ground_truth else None
    cfg = RegistrationConfig(max_iters=args.iters, jacobian_mode=args.jacobian, t=args.t)
    res = register(emb, src, tgt, cfg)
    print("G =")
    for row in res.g:
        print("  " + " ".join(f"{v: .9f}" for v in row))
    for i, r in enumerate(res.residual_norms):
        print(f"iter {i} residual {r:.6e}")
    print(f"final residual {res.final_residual:.6e} converged {res.converged} iterations {res.iterations}")
    if gt is not None:
        rot, trans = se3.pose_error(res.g, gt)
        print(f"rotation error {rot:.6f} deg translation error {trans:.6e}")


def cmd_bench(args):
    rows = bench.run_bench(ds=args.d, k=args.k, points=args.points, repeats=args.repeats, seed=args.seed)
    text = bench.to_text(rows)
    print(text, end="")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(bench.to_csv(rows))


def cmd_export_lut(args):
    model, _ = load_model(args.checkpoint)
    lo, hi = args.bounds or (model.cfg.lo, model.cfg.hi)
    lattice = Lattice3(args.d, (lo,) * 3, (hi,) * 3)
    if model.embed_mlp is None:
        if args.d != model.lattice.d or (lo, hi) != (model.cfg.lo, model.cfg.hi):
            raise ValueError("a direct-table checkpoint can only be exported on its own lattice")
        lut = model.lut()
    else:
        lut = tabulate(model.embed_mlp, lattice)
    write_lut(args.out, lut)
    print(f"wrote {args.out}: d={lattice.d} k={lut.k} payload {lut.data.astype(np.float32).nbytes} bytes")


def cmd_inspect_lut(args):
    lut = read_lut(args.lut)
    d = lut.lattice.d
    if not 0 <= args.channel < lut.k:
        raise ValueError(f"channel {args.channel} out of range [0, {lut.k})")
    if not 0 <= args.z < d:
        raise ValueError(f"z index {args.z} out of range [0, {d})")
    sl = lut.data[:, :, args.z, args.channel]  # rows are x, columns are y
    out = open(args.out, "w", newline="") if args.out else contextlib.nullcontext(sys.stdout)
    with out as f:
        w = csv.writer(f, lineterminator="\n")
        for row in sl:
            w.writerow([repr(float(v)) for v in row])


def cmd_ablation(args):
    classes = args.classes.split(",")
    per_seed = []
    for seed in args.seeds:
        train = synth_dataset(classes, args.per_class, args.points, seed)
        test = synth_dataset(classes, args.test_per_class, args.points, seed + 1000)
        base = TrainConfig(epochs=args.epochs, seed=seed, k=args.k)
        rows = run_ablation(train, test, ds=tuple(args.d), variants=tuple(args.variants), base=base,
                            on_row=lambda r, s=seed: print(f"seed {s} {r['variant']} d={r['d']} acc={r['accuracy']:.4f}"))
        per_seed.append(rows)
    table = []
    for i, row in enumerate(per_seed[0]):
        accs = [rows[i]["accuracy"] for rows in per_seed]
        table.append({"variant": row["variant"], "d": row["d"] if row["d"] is not None else "",
                      "accuracy": float(np.mean(accs)), "per_seed": " ".join(f"{a:.4f}" for a in accs)})
    print("variant           d    mean_acc  per_seed")
    for r in table:
        print(f"{r['variant']:<17} {str(r['d']):<4} {r['accuracy']:.4f}    {r['per_seed']}")
    if args.csv:
        _write_rows(args.csv, table, ["variant", "d", "accuracy", "per_seed"])


# -- parser ---------------------------------------------------------------------

def _data_flags(p):
    p.add_argument("--data", default="synth", help="'synth' or a <class>/<split>/ folder tree")
    p.add_argument("--classes", default="sphere,cube,cylinder,torus", help=f"synthetic classes from {','.join(SHAPES)}")
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--points", type=int, default=256)


def build_parser():
    parser = _Parser(prog="lutimlp", description="Tabulated point embeddings: training, registration, benchmarks.")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a classifier variant")
    p.add_argument("--variant", choices=VARIANTS, default="luti_mlp_e2e")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tv", choices=("none", "1", "2"), default="none", help="TV norm for direct tables")
    p.add_argument("--tv-weight", type=float, default=1.0)
    p.add_argument("--bounds", type=_bounds, default=(-1.0, 1.0), metavar="LO,HI")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--metrics", help="per-epoch CSV (default: <out>.csv)")
    _data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="predict classes of XYZ clouds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("register", help="estimate the pose taking --source onto --target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--lut")
    src.add_argument("--checkpoint")
    p.add_argument("--jacobian", choices=JACOBIAN_MODES, default="approx")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--t", type=float, default=1e-2, help="finite-difference step")
    p.add_argument("--ground-truth", help="file with a 6-value twist or a 4x4 matrix")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("bench", help="time embeddings and Jacobians")
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--d", type=int, nargs="+", default=[8, 16])
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-lut", help="tabulate a checkpoint's network")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--bounds", type=_bounds, default=None, metavar="LO,HI", help="default: training bounds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_lut)

    p = sub.add_parser("inspect-lut", help="dump one channel of one z-slice as CSV")
    p.add_argument("--lut", required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--z", type=int, default=0, help="node index along z")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_lut)

    p = sub.add_parser("ablation", help="accuracy of each variant at each lattice size")
    p.add_argument("--d", type=int, nargs="+", default=[4, 8, 16])
    p.add_argument("--variants", nargs="+", choices=VARIANTS[1:], default=["luti_mlp_e2e", "lut_mlp_approx", "luti_mlp_approx"])
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    p.add_argument("--csv")
    _data_flags(p)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        limit = contextlib.nullcontext()
        if args.threads:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(args.threads)
        with limit:
            args.func(args)
    except UsageError as exc:
        print(f"lutimlp: usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FormatError, RegistrationError, TrainingError, np.linalg.LinAlgError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"lutimlp: error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"lutimlp: internal error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 2
    return 0
