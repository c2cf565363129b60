"""``scinets`` command line: one subcommand per pipeline stage.

Heavy outputs go to files; stdout carries ``key=value`` summary lines.
Failures print one ``error[<kind>]: <message>`` line on stderr and exit with
1 (usage), 2 (config/validation) or 3 (runtime: numerical or I/O).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, NumericalError, ScinetsError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
MANIFEST = "run_manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, doc):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _spec_from(doc, seed=None):
    """Accept either a serialized ArchSpec or a builder config document."""
    from .builders import build
    from .graph import ArchSpec, check

    if isinstance(doc, dict) and "nodes" in doc and "edges" in doc:
        spec = ArchSpec.from_dict(doc)
        check(spec)
        return spec
    return build(doc, seed)


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, [])]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {' '.join(missing)}")


def _out_dir(args):
    _need(args, "out")
    os.makedirs(args.out, exist_ok=True)
    return args.out


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args, run):
    from .data import make_shapes_dataset, save_dataset

    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    ds = make_shapes_dataset(args.n, args.tile, args.noise, seed)
    save_dataset(out, ds)
    run["outputs"] += ["images.dltn", "labels.dltn", "classes.dltn", "manifest.json"]
    if args.png:
        from .plots import tile_grid

        tile_grid(ds.images[: args.png], os.path.join(out, "tiles.png"))
        run["outputs"].append("tiles.png")
    counts = ds.manifest["class_counts"]
    print(f"tiles={len(ds)}")
    print("class_counts=" + ",".join(f"{k}:{v}" for k, v in counts.items()))


def cmd_build(args, run):
    from .graph import param_count, to_dot

    _need(args, "config")
    doc = _read_json(args.config)
    spec = _spec_from(doc, args.seed)
    run["config"] = doc
    pc = param_count(spec)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        spec.save(os.path.join(args.out, "arch.json"))
        with open(os.path.join(args.out, "arch.dot"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(to_dot(spec))
        run["outputs"] += ["arch.json", "arch.dot"]
    print(f"arch={spec.metadata.get('builder', 'custom')}")
    print(f"nodes={len(spec.nodes)} edges={len(spec.edges)}")
    print(f"params={pc.total}")
    print(f"non_trainable={pc.non_trainable}")


def cmd_graph(args, run):
    from .graph import to_dot

    _need(args, "config")
    doc = _read_json(args.config)
    spec = _spec_from(doc, args.seed)
    text = to_dot(spec)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        run["outputs"].append(args.out)
        run["manifest_dir"] = os.path.dirname(os.path.abspath(args.out))
        print(f"dot={args.out}")
    else:
        sys.stdout.write(text)
        run["manifest_dir"] = None


def cmd_train(args, run):
    from .data import load_dataset
    from .graph import ParamStore, param_count
    from .plots import loss_curves
    from .train import TrainConfig, prepare_data, save_checkpoint, train

    _need(args, "config", "arch", "data")
    out = _out_dir(args)
    doc = _read_json(args.config)
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = TrainConfig.from_dict(doc)
    arch_doc = _read_json(args.arch)
    spec = _spec_from(arch_doc, args.seed)
    run["config"] = {"train": cfg.to_dict(), "arch": arch_doc}
    ds = load_dataset(args.data)
    data = prepare_data(ds, cfg)
    params = ParamStore.init(spec, cfg.seed)
    log = (lambda line: print(line, file=sys.stderr)) if args.verbose else None
    hist, best = train(spec, params, data, cfg, log=log)
    prefix = os.path.join(out, "model")
    save_checkpoint(prefix, spec, best, {
        "train_config": cfg.to_dict(), "epoch": hist.best_epoch,
        "val_loss": hist.val_loss[hist.best_epoch], "metric": hist.metric[hist.best_epoch],
        "task": cfg.task, "binary": cfg.binary,
    })
    hist.to_csv(os.path.join(out, "history.csv"))
    loss_curves(hist, os.path.join(out, "loss.png"))
    run["outputs"] += ["model.dlsa", "model.json", "history.csv", "loss.png"]
    print(f"params={param_count(spec).total}")
    print(f"epochs_run={len(hist)}")
    print(f"best_epoch={hist.best_epoch}")
    print(f"val_loss={hist.val_loss[hist.best_epoch]:.6g}")
    print(f"{hist.metric_name}={hist.metric[hist.best_epoch]:.6g}")


def cmd_predict(args, run):
    from .autodiff import Tensor, softmax_channels
    from .data import load_dataset
    from .tensorfile import save_tensor
    from .train import load_checkpoint, predict

    _need(args, "checkpoint", "data")
    out = _out_dir(args)
    spec, params, meta = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    raw = predict(spec, params, ds.images, args.batch_size)
    if not np.all(np.isfinite(raw)):
        raise NumericalError("prediction produced non-finite values")
    if meta.get("task") == "reconstruction":
        name, arr = "recon.dltn", raw
    else:
        name, arr = "probs.dltn", softmax_channels(Tensor(raw)).data
    save_tensor(os.path.join(out, name), arr.astype(np.float32))
    run["outputs"].append(name)
    print(f"output={os.path.join(out, name)}")
    print("shape=" + "x".join(map(str, arr.shape)))


def _foreground(probs):
    """Probability of "not background" from a (N, C, H, W) class-probability stack."""
    return 1.0 - probs[:, 0]


def cmd_ensemble(args, run):
    from .ensemble import ensemble_stats, threshold_minus_std
    from .plots import ensemble_panels
    from .tensorfile import load_tensor, save_tensor

    _need(args, "models")
    out = _out_dir(args)
    fg = [_foreground(load_tensor(p).astype(np.float64)) for p in args.models]
    mean, std = ensemble_stats(fg)
    kept = threshold_minus_std(mean, std, args.tau)
    plain = mean > 0.5
    save_tensor(os.path.join(out, "mean.dltn"), mean.astype(np.float32))
    save_tensor(os.path.join(out, "std.dltn"), std.astype(np.float32))
    save_tensor(os.path.join(out, "mask.dltn"), kept.astype(np.uint8))
    save_tensor(os.path.join(out, "mean_mask.dltn"), plain.astype(np.uint8))
    ensemble_panels(mean, std, kept, os.path.join(out, "ensemble.png"))
    run["outputs"] += ["mean.dltn", "std.dltn", "mask.dltn", "mean_mask.dltn", "ensemble.png"]
    print(f"models={len(fg)}")
    print(f"tau={args.tau}")
    print(f"kept_pixels={int(kept.sum())}")
    print(f"mean_gt_half_pixels={int(plain.sum())}")
    print(f"kept_subset_of_mean={bool(not np.any(kept & ~plain))}")


def cmd_conformal(args, run):
    from .data import load_dataset, split_pixels
    from .ensemble import conformal_calibrate, conformal_predict, coverage
    from .tensorfile import load_tensor, save_tensor

    _need(args, "data")
    if not args.models or len(args.models) != 1:
        raise UsageError("conformal: pass exactly one probability file via --models")
    out = _out_dir(args)
    probs = load_tensor(args.models[0]).astype(np.float64)
    ds = load_dataset(args.data)
    if ds.labels is None:
        raise ConfigError("conformal needs a labeled dataset")
    labels = ds.binary_labels() if probs.shape[1] == 2 else ds.labels
    seed = 0 if args.seed is None else args.seed
    masks = split_pixels(labels, [args.cal_frac, 1 - args.cal_frac], seed, stratified=False)
    cal = conformal_calibrate(probs, labels, args.alpha, masks.train)
    sets = conformal_predict(probs, cal)
    cov = coverage(sets.sets, labels, masks.val)
    save_tensor(os.path.join(out, "sets.dltn"), sets.bitmask())
    doc = cal.to_dict()
    doc.update({"test_coverage": cov, "mean_set_size": sets.mean_size, "empty_sets": sets.empty,
                "n_test": int(masks.val.sum())})
    _write_json(os.path.join(out, "calibration.json"), doc)
    run["outputs"] += ["sets.dltn", "calibration.json"]
    print(f"qhat={cal.qhat:.6g}")
    print(f"n_cal={cal.n_cal}")
    print(f"coverage={cov:.6f}")
    print(f"mean_set_size={sets.mean_size:.6f}")


def pca_2d(z):
    """Project rows of ``z`` onto their top two principal axes (sign-fixed)."""
    zc = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(zc, full_matrices=False)
    vt = vt[:2]
    flip = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    proj = zc @ (vt * flip[:, None]).T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def cmd_latent(args, run):
    from .data import load_dataset
    from .graph import forward
    from .plots import latent_scatter
    from .train import load_checkpoint

    _need(args, "checkpoint", "data")
    out = _out_dir(args)
    spec, params, _ = load_checkpoint(args.checkpoint)
    node = spec.metadata.get("latent_node")
    if node is None:
        raise ConfigError("checkpoint architecture has no latent node (expected an autoencoder)")
    ds = load_dataset(args.data)
    zs = []
    for i in range(0, len(ds), args.batch_size):
        zs.append(forward(spec, params, ds.images[i:i + args.batch_size], until=node).data)
    z = np.concatenate(zs).reshape(len(ds), -1).astype(np.float64)
    proj = pca_2d(z)
    cls = ds.classes if ds.classes is not None else np.full(len(ds), -1)
    _write_csv(os.path.join(out, "latent.csv"), ["index", "class", *[f"z{k}" for k in range(z.shape[1])]],
               [[i, int(c), *map(repr, row.tolist())] for i, (c, row) in enumerate(zip(cls, z))])
    _write_csv(os.path.join(out, "pca.csv"), ["index", "class", "pc1", "pc2"],
               [[i, int(c), repr(float(p[0])), repr(float(p[1]))] for i, (c, p) in enumerate(zip(cls, proj))])
    names = None
    if ds.manifest and "class_names" in ds.manifest:
        names = ds.manifest["class_names"][1:]
    latent_scatter(proj, ds.classes, names, os.path.join(out, "latent.png"))
    run["outputs"] += ["latent.csv", "pca.csv", "latent.png"]
    print(f"tiles={len(ds)}")
    print(f"latent_len={z.shape[1]}")


# -- parser -----------------------------------------------------------------------

def _parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="scinets", description="Build, train and evaluate scientific segmentation networks.",
                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"scinets {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_, flags):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=None, help="random seed (u64)")
        for flag in flags:
            if flag == "config":
                sp.add_argument("--config", default=None, help="JSON config path")
            elif flag == "out":
                sp.add_argument("--out", default=None, help="output directory")
            elif flag == "data":
                sp.add_argument("--data", default=None, help="dataset directory")
            elif flag == "checkpoint":
                sp.add_argument("--checkpoint", default=None, help="checkpoint path (.dlsa/.json prefix)")
            elif flag == "batch":
                sp.add_argument("--batch-size", type=int, default=16, help="inference batch size")
        return sp

    g = add("gen-data", cmd_gen_data, "generate a synthetic shapes dataset", ["out"])
    g.add_argument("--n", type=int, default=100, help="number of tiles")
    g.add_argument("--tile", type=int, default=64, help="tile edge length in pixels")
    g.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma")
    g.add_argument("--png", type=int, default=0, help="render this many tiles to tiles.png")

    add("build", cmd_build, "construct an architecture and report its parameter count", ["config", "out"])
    add("graph", cmd_graph, "export an architecture as Graphviz DOT", ["config"]).add_argument(
        "--out", default=None, help="DOT output file (stdout when omitted)")

    t = add("train", cmd_train, "train a network on a dataset", ["config", "data", "out"])
    t.add_argument("--arch", default=None, help="builder config or ArchSpec JSON")
    t.add_argument("--epochs", type=int, default=None, help="override the config's epoch count")
    t.add_argument("--verbose", action="store_true", help="log each epoch to stderr")

    add("predict", cmd_predict, "run a checkpoint over a dataset", ["checkpoint", "data", "out", "batch"])

    e = add("ensemble", cmd_ensemble, "aggregate probability maps from several models", ["out"])
    e.add_argument("--models", nargs="+", default=None, help="probability files from predict")
    e.add_argument("--tau", type=float, default=0.5, help="keep pixels with mean - std > tau")

    c = add("conformal", cmd_conformal, "split-conformal prediction sets", ["data", "out"])
    c.add_argument("--models", nargs="+", default=None, help="one probability file from predict")
    c.add_argument("--alpha", type=float, default=0.1, help="miscoverage level")
    c.add_argument("--cal-frac", type=float, default=0.5, help="fraction of labeled pixels used to calibrate")

    add("latent", cmd_latent, "extract autoencoder latent vectors and a 2D PCA projection",
        ["checkpoint", "data", "out", "batch"])
    return p


def _exit_code(exc):
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, FormatError):
        return EXIT_RUNTIME
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_RUNTIME


def _fail(kind, message, code):
    line = " ".join(str(message).split())
    print(f"error[{kind}]: {line}", file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parser().parse_args(argv)
        if args.command is None:
            raise UsageError("scinets: a subcommand is required (see --help)")
    except UsageError as exc:
        return _fail(exc.kind, exc, EXIT_USAGE)

    from threadpoolctl import threadpool_limits

    try:
        threads = int(os.environ.get("DLSIA_THREADS", "1"))
        if threads < 1:
            raise ValueError
    except ValueError:
        return _fail("config", "DLSIA_THREADS must be a positive integer", EXIT_CONFIG)

    run = {"command": args.command, "argv": argv, "version": __version__, "seed": args.seed,
           "threads": threads, "inputs": {k: getattr(args, k) for k in
                                          ("config", "data", "checkpoint", "models", "arch")
                                          if getattr(args, k, None) is not None},
           "outputs": []}
    start = time.perf_counter()
    try:
        with threadpool_limits(limits=threads):
            args.func(args, run)
    except ScinetsError as exc:
        return _fail(exc.kind, exc, _exit_code(exc))
    except FileNotFoundError as exc:
        return _fail("io", f"{exc.filename}: file not found", EXIT_RUNTIME)
    except OSError as exc:
        return _fail("io", exc, EXIT_RUNTIME)
    except FloatingPointError as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)

    target = run.pop("manifest_dir", getattr(args, "out", None))
    if target:
        run["wall_time_s"] = time.perf_counter() - start
        _write_json(os.path.join(target, MANIFEST), run)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
