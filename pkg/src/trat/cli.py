"""Command line: train, eval, landscape, gradcheck, data.

Exit codes: 0 ok, 1 usage or config error, 2 verification failure,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as config_lib
from . import data as data_lib
from . import gradcheck
from . import model as model_lib
from .attacks import eval_attack, transfer_eval
from .autodiff import inject_fault
from .landscape import input_surface, weight_sharpness
from .ndarray import Rng
from .trainer import MetricsRow, NumericAbort, evaluate, train, write_metrics

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_datasets(cfg: config_lib.RunConfig) -> tuple[data_lib.Dataset, data_lib.Dataset]:
    d = cfg["data"]
    kind = d["dataset"]
    if kind == "moons":
        full = data_lib.two_moons(d["n"], float(d["noise"]), d["seed"])
    elif kind == "blobs":
        full = data_lib.gaussian_blobs(d["n"], d["centers"], float(d["blob_std"]), d["seed"])
    elif kind == "idx":
        if not d["images"] or not d["labels"]:
            raise UsageError("data.images and data.labels are required for dataset = \"idx\"")
        full = data_lib.idx_load(d["images"], d["labels"], d["num_classes"])
        if d["test_images"]:
            test = data_lib.idx_load(d["test_images"], d["test_labels"], d["num_classes"])
            return full.subset(slice(None), "train"), test.subset(slice(None), "test")
    else:
        raise UsageError(f"unknown dataset {kind!r}; expected moons, blobs or idx")
    return data_lib.train_test_split(full, float(d["test_fraction"]), d["seed"])


def _load_config(path, seed):
    cfg = config_lib.load(path)
    return cfg.with_seed(seed)


def _load_ckpt(path):
    if not os.path.isfile(path):
        raise UsageError(f"checkpoint not found: {path}")
    return model_lib.load(path)


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = args.out or cfg["output"]["dir"]
    tcfg = cfg.train()
    train_ds, test_ds = build_datasets(cfg)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.toml"), "w", encoding="utf-8", newline="\n") as f:
        f.write(cfg.to_toml())
    try:
        result = train(train_ds, tcfg, test_ds, out_dir=out)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    last = [r for r in result.metrics if r.split == "test"]
    best = result.best(tcfg.eval_attacks[0]) if tcfg.eval_attacks else None
    print(f"wrote {out}/final.ckpt and {len(result.checkpoints)} checkpoints")
    if last:
        r = last[-1]
        print(f"final epoch {r.epoch}: clean {r.clean_acc:.4f}" +
              (f" {r.attack} {r.robust_acc:.4f}" if r.robust_acc is not None else ""))
    if best is not None:
        print(f"best {best.attack}: epoch {best.epoch} clean {best.clean_acc:.4f} robust {best.robust_acc:.4f}")
    return EXIT_OK


def _parse_attacks(text: str | None, default) -> list[str]:
    if text is None:
        return list(default)
    names = [t.strip() for t in text.split(",") if t.strip()]
    for n in names:
        eval_attack(n, config_lib.AttackConfig())  # validate early
    return names


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.seed)
    net = _load_ckpt(args.checkpoint)
    _, test_ds = build_datasets(cfg)
    attacks = _parse_attacks(args.attacks, cfg["train"]["eval_attacks"])
    base = replace(cfg.attack(), loss_kind="cross_entropy")
    if args.epsilon is not None:
        base = replace(base, epsilon=args.epsilon)
    seed = cfg["train"]["seed"]
    if args.surrogate:
        surrogate = _load_ckpt(args.surrogate)
        rows = []
        for i, name in enumerate(attacks):
            res = transfer_eval(surrogate, net, test_ds.inputs, test_ds.labels, eval_attack(name, base),
                                Rng(seed).child(i))
            rows.append(MetricsRow(0, test_ds.split, res["clean_acc"], res["robust_acc"], f"transfer-{name}"))
        if not attacks:
            rows = evaluate(net, test_ds, [], base, seed)
    else:
        rows = evaluate(net, test_ds, attacks, base, seed)
    for r in rows:
        robust = "" if r.robust_acc is None else f" {r.attack} {r.robust_acc:.4f}"
        print(f"{r.split}: clean {r.clean_acc:.4f}{robust}")
    path = args.metrics or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval.csv")
    write_metrics(rows, path, append=True)
    return EXIT_OK


def _landscape_sample(args, cfg, net):
    if args.input == "idx":
        images = args.images or cfg["data"]["images"]
        labels = args.labels or cfg["data"]["labels"]
        if not images or not labels:
            raise UsageError("--input idx needs --images and --labels (or data.images / data.labels)")
        ds = data_lib.idx_load(images, labels, cfg["data"]["num_classes"])
    else:
        _, ds = build_datasets(cfg)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} outside [0, {len(ds)})")
    return ds


def cmd_landscape(args) -> int:
    cfg = _load_config(args.config, args.seed)
    net = _load_ckpt(args.checkpoint)
    ds = _landscape_sample(args, cfg, net)
    seed = cfg["train"]["seed"]
    if args.mode == "input":
        axis = np.linspace(-args.range, args.range, args.steps)
        clamp = tuple(cfg["attack"]["clamp_range"]) or ((0.0, 1.0) if ds.is_image else None)
        grid = input_surface(net, ds.inputs[args.index], int(ds.labels[args.index]), axis, axis, seed, clamp)
        if args.out:
            grid.to_csv(args.out)
        else:
            sys.stdout.write("# meta " + " ".join(f"{k}={v}" for k, v in grid.meta.items()) + "\nx,y,loss\n")
            for i, x in enumerate(grid.xs):
                for j, y in enumerate(grid.ys):
                    sys.stdout.write(f"{x:.17g},{y:.17g},{grid.loss[i, j]:.17g}\n")
        return EXIT_OK
    n = min(len(ds), args.batch)
    stats = weight_sharpness(net, ds.inputs[:n], ds.labels[:n], args.sigma, args.samples, seed)
    text = json.dumps(stats, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            report = gradcheck.run_all(args.size, seed)
    else:
        report = gradcheck.run_all(args.size, seed)
    failed = []
    for suite, checks in report.items():
        worst = max(checks, key=lambda c: c.error / c.tolerance)
        print(f"[{suite}] {len(checks)} checks, worst {worst.name}: {worst.error:.3e} (tol {worst.tolerance:g})")
        failed += [c for c in checks if not c.ok]
    for c in failed:
        print(f"FAIL {c.suite}/{c.name}: {c.error:.3e} >= {c.tolerance:g}")
    if failed:
        return EXIT_VERIFY
    print("all checks passed")
    return EXIT_OK


def cmd_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.action == "moons":
        ds = data_lib.two_moons(args.n, args.noise, seed)
        out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
        try:
            out.write("x0,x1,label\n")
            for (a, b), y in zip(ds.inputs, ds.labels):
                out.write(f"{a:.17g},{b:.17g},{y}\n")
        finally:
            if args.out:
                out.close()
        return EXIT_OK
    if not args.images or not args.labels:
        raise UsageError("idx-info needs --images and --labels")
    ds = data_lib.idx_load(args.images, args.labels)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    print(f"{len(ds)} images of shape {ds.inputs.shape[1:]}; labels per class {counts.tolist()}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trat", description="Adversarial training with Taylor-expanded weight noise.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides output.dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="clean / robust accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--attacks", help='comma list, e.g. "pgd20,cw20"; "" for clean only')
    e.add_argument("--surrogate", help="craft examples on this checkpoint (transfer attack)")
    e.add_argument("--epsilon", type=float, help="override attack.epsilon")
    e.add_argument("--metrics", help="CSV to append to (default: eval.csv beside the checkpoint)")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    ls = sub.add_parser("landscape", help="input loss surface or weight sharpness")
    ls.add_argument("checkpoint")
    ls.add_argument("--config", default="presets/moons-trades.toml")
    ls.add_argument("--input", choices=("idx", "moons-sample"), default="moons-sample")
    ls.add_argument("--mode", choices=("input", "weight"), default="input")
    ls.add_argument("--images")
    ls.add_argument("--labels")
    ls.add_argument("--index", type=int, default=0)
    ls.add_argument("--steps", type=int, default=41)
    ls.add_argument("--range", type=float, default=0.1)
    ls.add_argument("--sigma", type=float, default=0.01)
    ls.add_argument("--samples", type=int, default=200)
    ls.add_argument("--batch", type=int, default=300, help="evaluation batch size for --mode weight")
    ls.add_argument("--out")
    ls.add_argument("--seed", type=int)
    ls.set_defaults(func=cmd_landscape)

    g = sub.add_parser("gradcheck", help="finite-difference verification suites")
    g.add_argument("--size", choices=tuple(gradcheck.SIZES), default="small")
    g.add_argument("--seed", type=int)
    g.add_argument("--inject-fault", choices=("relu-sign",), help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("data", help="dataset utilities")
    d.add_argument("action", choices=("moons", "idx-info"))
    d.add_argument("--n", type=int, default=1000)
    d.add_argument("--noise", type=float, default=0.1)
    d.add_argument("--images")
    d.add_argument("--labels")
    d.add_argument("--out")
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_data)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except config_lib.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, model_lib.CheckpointError, data_lib.IdxError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
