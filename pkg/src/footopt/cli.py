"""Command-line pipeline: bounds, sample, datagen, train, eval, optimize, compare.

Every command writes ``<command>_manifest.json`` into ``--out-dir`` before
any other output.  Exit codes: 0 success, 2 configuration or usage error,
3 data or model error, 4 infeasible problem.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import constraints, kinematics, optimizer, strategies, surrogate
from .exceptions import (DomainError, FootoptError, InfeasibleError, OracleError, PolicyError,
                         TrainingError, ValidationError)
from .geometry import DEFAULT_DURATIONS, ControlPolygon, sample

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 2, 3, 4

CONFIG_SECTIONS = ("durations", "n_samples", "leg", "safety", "bounds", "foot", "oracle", "training",
                   "optimization", "compare")


class UsageError(ValidationError):
    """Bad command-line or configuration input."""


class DataError(FootoptError):
    """Unreadable dataset, checkpoint or selection file."""


# -- config ----------------------------------------------------------------


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config section: {sorted(unknown)[0]}")
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def durations_of(cfg):
    return tuple(float(v) for v in cfg.get("durations", DEFAULT_DURATIONS))


def bounds_of(cfg):
    data = cfg.get("bounds")
    if data is None:
        return kinematics.paper_bounds()
    if isinstance(data, str):
        data = json.loads(Path(data).read_text())
    try:
        return kinematics.MotionBounds.from_dict(data)
    except KeyError as exc:
        raise UsageError(f"bounds missing field: {exc.args[0]}") from None


def policy_of(cfg):
    try:
        foot = constraints.FootSpec.from_dict(cfg.get("foot", {}))
    except TypeError as exc:
        raise UsageError(f"bad foot section: {exc}") from None
    return constraints.build_policy(foot, bounds_of(cfg), durations_of(cfg), int(cfg.get("n_samples", 200)))


def oracle_of(cfg, seed):
    data = dict(cfg.get("oracle", {}))
    data.setdefault("seed", seed)
    return surrogate.OracleParams.from_dict(data)


def opt_section(cfg):
    sec = dict(cfg.get("optimization", {}))
    known = {"objectives", "priority", "alpha", "beta", "pop_size", "generations", "a", "m",
             "columns", "fd_model", "fp_model"}
    unknown = set(sec) - known
    if unknown:
        raise UsageError(f"unknown optimization field: {sorted(unknown)[0]}")
    sec.setdefault("objectives", list(optimizer.DEFAULT_PRIORITY))
    sec.setdefault("priority", list(sec["objectives"]))
    sec.setdefault("alpha", 0.9)
    sec.setdefault("beta", 0.9)
    sec.setdefault("pop_size", 200)
    sec.setdefault("generations", 2000)
    sec.setdefault("a", strategies.DEFAULT_OPTIMAL_PREPRESSURE)
    sec.setdefault("m", strategies.DEFAULT_JITTER_THRESHOLD)
    sec.setdefault("columns", sec["objectives"][:2])
    return sec


# -- manifest --------------------------------------------------------------


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch is not None
            else _dt.datetime.now(_dt.timezone.utc))
    return when.replace(microsecond=0).isoformat()


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


class Run:
    """Bookkeeping for one command: declared outputs and the manifest."""

    def __init__(self, args, cfg, command, outputs, inputs=()):
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs = list(outputs)
        manifest = {
            "command": command,
            "config_hash": config_hash(cfg),
            "seed": args.seed,
            "inputs": {Path(p).name: sha256_file(p) for p in inputs if p is not None},
            "outputs": self.outputs,
            "versions": {"footopt": _version(), "numpy": np.__version__},
            "timestamps": {"started": _timestamp()},
        }
        self.write(f"{command}_manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    def path(self, name):
        return self.out / name

    def write(self, name, text):
        with open(self.out / name, "w", newline="") as fh:
            fh.write(text)

    def finish(self):
        missing = [o for o in self.outputs if not (self.out / o).exists()]
        if missing:
            raise DataError(f"declared output not produced: {missing[0]}")


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _require_file(path, what):
    if path is None:
        raise UsageError(f"{what} path is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_model(path, what):
    _require_file(path, what)
    try:
        return surrogate.load_checkpoint(path)
    except (ValidationError, OSError, UnicodeDecodeError) as exc:
        raise DataError(f"bad {what} checkpoint {path}: {exc}") from None


def _load_dataset(path, seed):
    _require_file(path, "dataset")
    try:
        return surrogate.Dataset.read_jsonl(path, seed=seed)
    except (ValidationError, OSError) as exc:
        raise DataError(f"bad dataset {path}: {exc}") from None


def _svg(fig):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "footopt"
    matplotlib.rcParams["svg.fonttype"] = "none"
    import matplotlib.pyplot as plt

    return plt


# -- commands --------------------------------------------------------------


def cmd_bounds(args, cfg):
    leg = kinematics.LegModel.from_dict(cfg["leg"]) if "leg" in cfg else kinematics.default_leg()
    safety = cfg.get("safety", {})
    s_p = float(safety.get("position", kinematics.DEFAULT_POSITION_SAFETY))
    s_v = float(safety.get("velocity", kinematics.DEFAULT_VELOCITY_SAFETY))
    run = Run(args, cfg, "bounds", ["bounds.json"], [args.config])
    b = kinematics.solve_bounds(leg, s_p, s_v, seed=args.seed, pop_size=args.pop_size, iterations=args.iterations)
    run.write("bounds.json", _dump(b.to_dict()))
    print(f"safety factors: position {s_p:.2f}, velocity {s_v:.2f}")
    print("raw position bound (x, z): ({:.3f}, {:.3f}) m".format(*b.raw_position))
    print("position bound (x, z):     ({:.3f}, {:.3f}) m".format(*b.position_bound))
    print("raw velocity bound (x, z): ({:.3f}, {:.3f}) m/s".format(*b.raw_velocity))
    print("velocity bound (x, z):     ({:.3f}, {:.3f}) m/s".format(*b.velocity_bound))
    run.finish()


def cmd_sample(args, cfg):
    if args.n < 1:
        raise UsageError("n must be at least 1")
    policy = policy_of(cfg)
    run = Run(args, cfg, "sample", ["climbable.jsonl"], [args.config])
    polys = constraints.sample_climbable(policy, args.n, seed=args.seed)
    run.write("climbable.jsonl", "".join(p.to_json() + "\n" for p in polys))
    print(f"sampled {len(polys)} climbable trajectories")
    run.finish()


def cmd_datagen(args, cfg):
    _require_file(args.set, "climbable set")
    try:
        polys = constraints.read_jsonl(args.set)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"bad climbable set {args.set}: {exc}") from None
    params = oracle_of(cfg, args.seed)
    run = Run(args, cfg, "datagen", ["dataset.jsonl"], [args.config, args.set])
    ds = surrogate.generate_dataset(polys, params, int(cfg.get("n_samples", 200)), seed=args.seed)
    ds.write_jsonl(run.path("dataset.jsonl"))
    print(f"generated {len(ds)} items")
    run.finish()


def _train_config(args, cfg):
    data = dict(cfg.get("training", {}))
    for key, attr in (("epochs", "epochs"), ("batch_size", "batch_size"), ("learning_rate", "lr"),
                      ("lr_decay", "lr_decay"), ("hidden_size", "hidden"), ("alpha", "alpha"),
                      ("gamma", "gamma"), ("loss", "loss"), ("clip_norm", "clip_norm")):
        val = getattr(args, attr, None)
        if val is not None:
            data[key] = val
    data["seed"] = args.seed
    return surrogate.TrainConfig.from_dict(data)


def _loss_svg(history):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, h in history.items():
        ax.plot(h["epoch"], h["train_loss"], label=f"{name} train")
        if h["val_loss"]:
            ax.plot(h["epoch"], h["val_loss"], "--", label=f"{name} validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    svg = _svg(fig)
    plt.close(fig)
    return svg


def cmd_train(args, cfg):
    ds = _load_dataset(args.dataset, args.seed)
    tc = _train_config(args, cfg)
    outputs = ["fd_model.json", "fp_model.json", "loss.csv", "loss.svg"]
    run = Run(args, cfg, "train", outputs, [args.config, args.dataset])
    frac = len(ds.train_idx) / len(ds)
    print(f"split: {len(ds.train_idx)} train / {len(ds.val_idx)} validation ({100 * frac:.1f}% train)")
    fd, fp, hist = surrogate.train(ds, tc)
    surrogate.save_checkpoint(fd, run.path("fd_model.json"), tc)
    surrogate.save_checkpoint(fp, run.path("fp_model.json"), tc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "fd_train", "fd_val", "fp_train", "fp_val"])
    hd, hp = hist["detachment"], hist["pre_pressure"]
    for k, ep in enumerate(hd["epoch"]):
        w.writerow([ep, repr(hd["train_loss"][k]), repr(hd["val_loss"][k]),
                    repr(hp["train_loss"][k]), repr(hp["val_loss"][k])])
    run.write("loss.csv", buf.getvalue())
    run.write("loss.svg", _loss_svg(hist))
    print(f"final validation loss: detachment {hd['val_loss'][-1]:.4f}, pre-pressure {hp['val_loss'][-1]:.4f}")
    run.finish()


def cmd_eval(args, cfg):
    ds = _load_dataset(args.dataset, args.seed)
    fd = _load_model(args.fd_model, "detachment model")
    fp = _load_model(args.fp_model, "pre-pressure model")
    tc = _train_config(args, cfg)
    run = Run(args, cfg, "eval", ["eval.csv"], [args.config, args.dataset, args.fd_model, args.fp_model])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "model", "loss"])
    for split in ("train", "val"):
        X, yd, yp = ds.arrays(split)
        for name, model, y in (("detachment", fd, yd), ("pre_pressure", fp, yp)):
            try:
                loss = surrogate.evaluate_loss(model, X, y, tc)
            except ValidationError as exc:
                raise DataError(f"model does not fit the dataset: {exc}") from None
            w.writerow([split, name, repr(loss)])
            print(f"{split:5s} {name:12s} {loss:.6f}")
    run.write("eval.csv", buf.getvalue())
    run.finish()


def _force_fn(args, sec):
    fd = _load_model(args.fd_model or sec.get("fd_model"), "detachment model")
    fp = _load_model(args.fp_model or sec.get("fp_model"), "pre-pressure model")
    return fd, fp


def cmd_optimize(args, cfg):
    sec = opt_section(cfg)
    if args.pop_size is not None:
        sec["pop_size"] = args.pop_size
    if args.generations is not None:
        sec["generations"] = args.generations
    policy = policy_of(cfg)
    rhs = optimizer.RhsConfig(tuple(sec["priority"]), float(sec["alpha"]), float(sec["beta"]))
    problem = optimizer.TrajectoryProblem(policy, None, tuple(sec["objectives"]),
                                          optimal_prepressure=float(sec["a"]),
                                          jitter_threshold=float(sec["m"]),
                                          pop_size=int(sec["pop_size"]), generations=int(sec["generations"]))
    optimizer._columns(rhs.priority, problem.objectives, len(problem.objectives))
    for c in sec["columns"]:
        optimizer._resolve_column(c, problem.objectives)
    if len(sec["columns"]) != 2:
        raise UsageError("optimization.columns must name exactly two objectives")
    if args.dry_run:
        for key, what in (("fd_model", "detachment model"), ("fp_model", "pre-pressure model")):
            _require_file(getattr(args, key) or sec.get(key), what)
        print(json.dumps({k: v for k, v in sec.items()}, sort_keys=True))
        print("configuration valid (dry run, nothing evaluated)")
        return
    fd, fp = _force_fn(args, sec)
    problem.forces = optimizer.surrogate_forces(fd, fp)
    outputs = ["front.csv", "front.svg", "selected.json", "selected.csv", "forces.csv"]
    inputs = [args.config, args.fd_model or sec.get("fd_model"), args.fp_model or sec.get("fp_model")]
    run = Run(args, cfg, "optimize", outputs, inputs)
    front, res = optimizer.optimize(problem, seed=args.seed)
    trace = []
    k = optimizer.rhs_select(front, rhs, trace=trace)
    optimizer.export_front(front, run.path("front.csv"), run.path("front.svg"), sec["columns"], selected=k)
    poly = front.polygons[k]
    traj = sample(poly, policy.n_samples)
    run.write("selected.json", _dump({
        "polygon": poly.to_dict(),
        "objectives": dict(zip(front.objectives, map(float, front.F[k]))),
        "front_index": k,
        "front_size": len(front),
        "problem_hash": front.problem_hash,
        "seed": args.seed,
        "rhs_trace": trace,
    }))
    run.write("selected.csv", traj.to_csv())
    pd = surrogate.predict(fd, traj)
    pp = surrogate.predict(fp, traj)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "detachment_force", "pre_pressure"])
    for row in zip(traj.times, pd, pp):
        w.writerow([repr(float(v)) for v in row])
    run.write("forces.csv", buf.getvalue())
    print(f"front size {len(front)}; selected row {k}: "
          + ", ".join(f"{n}={v:.4g}" for n, v in zip(front.objectives, front.F[k])))
    run.finish()


COMPARE_COLUMNS = ("Polynomial", "Cycloidal", "Random bezier", "Optimal")


def compare_metrics(trajs, fd, fp, a, m):
    """Per-trajectory (f_s1, peak pre-pressure, f_s7) under the given models."""
    out = []
    for tr in trajs:
        F = np.asarray(fd(tr))
        P = np.asarray(fp(tr))
        out.append((float(strategies.max_force_batch(F)), float(np.max(P)), float(strategies.jitter_batch(F, m))))
    return np.array(out)


def cmd_compare(args, cfg):
    sec = dict(cfg.get("compare", {}))
    osec = opt_section(cfg)
    _require_file(args.selected, "selected trajectory")
    try:
        data = json.loads(Path(args.selected).read_text())
        poly = ControlPolygon.from_dict(data["polygon"] if "polygon" in data else data)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"bad selected trajectory {args.selected}: {exc}") from None
    fd, fp = _force_fn(args, osec)
    chosen = args.baselines or sec.get("baselines") or list(bl.BASELINE_NAMES)
    bad = [c for c in chosen if c not in bl.BASELINE_NAMES]
    if bad:
        raise UsageError(f"unknown baseline {bad[0]!r}")
    random_count = int(sec.get("random_count", 50))
    policy = policy_of(cfg)
    run = Run(args, cfg, "compare", ["compare.csv", "compare.svg"],
              [args.config, args.selected, args.fd_model or osec.get("fd_model"),
               args.fp_model or osec.get("fp_model")])
    traj = sample(poly, policy.n_samples)
    groups = bl.matched_baselines(traj, policy, policy.n_samples, args.seed, random_count)
    groups = {k: v for k, v in groups.items() if k in chosen}
    groups["Optimal"] = [traj]
    params = oracle_of(cfg, args.seed)
    sources = {
        "surrogate": (lambda t: surrogate.predict(fd, t), lambda t: surrogate.predict(fp, t)),
        "oracle": (lambda t: surrogate.oracle_forces(t, params).detachment_force,
                   lambda t: surrogate.oracle_forces(t, params).pre_pressure),
    }
    cols = [c for c in COMPARE_COLUMNS if c in groups]
    table = {}
    for src, (f_d, f_p) in sources.items():
        for c in cols:
            table[src, c] = np.median(compare_metrics(groups[c], f_d, f_p, float(osec["a"]), float(osec["m"])), axis=0)
    metrics = ("max_detachment_force", "max_pre_pressure", "jitter_f_s7")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "source"] + cols)
    for src in sources:
        for k, name in enumerate(metrics):
            w.writerow([name, src] + [repr(float(table[src, c][k])) for c in cols])
    run.write("compare.csv", buf.getvalue())
    plt = _pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.5))
    x = np.arange(len(cols))
    for k, (ax, name) in enumerate(zip(axes, metrics)):
        for off, src in ((-0.2, "surrogate"), (0.2, "oracle")):
            ax.bar(x + off, [table[src, c][k] for c in cols], width=0.4, label=src)
        ax.set_xticks(x, cols, rotation=30, ha="right")
        ax.set_title(name)
    axes[0].legend()
    fig.tight_layout()
    run.write("compare.svg", _svg(fig))
    plt.close(fig)
    print(buf.getvalue(), end="")
    run.finish()


# -- parser ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="footopt", description="Adhesive-foot trajectory optimisation pipeline")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".", help="directory for all outputs")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("bounds", help="solve foot position and velocity bounds")
    s.add_argument("--pop-size", type=int, default=64)
    s.add_argument("--iterations", type=int, default=500)

    s = sub.add_parser("sample", help="sample the climbable trajectory set")
    s.add_argument("--n", type=int, default=1000)

    s = sub.add_parser("datagen", help="generate an oracle force dataset")
    s.add_argument("--set", required=True, help="climbable-set JSON-lines file")

    for name, helptext in (("train", "train the two force models"), ("eval", "evaluate trained models")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--dataset", required=True)
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--lr-decay", type=float)
        s.add_argument("--hidden", type=int)
        s.add_argument("--alpha", type=float)
        s.add_argument("--gamma", type=float)
        s.add_argument("--loss", choices=("dilate", "mse"))
        s.add_argument("--clip-norm", type=float)
        if name == "eval":
            s.add_argument("--fd-model", required=True)
            s.add_argument("--fp-model", required=True)

    s = sub.add_parser("optimize", help="NSGA-II search and RHS selection")
    s.add_argument("--fd-model")
    s.add_argument("--fp-model")
    s.add_argument("--pop-size", type=int)
    s.add_argument("--generations", type=int)
    s.add_argument("--dry-run", action="store_true", help="validate the configuration only")

    s = sub.add_parser("compare", help="compare the selected trajectory with baselines")
    s.add_argument("--selected", required=True)
    s.add_argument("--fd-model")
    s.add_argument("--fp-model")
    s.add_argument("--baselines", nargs="+", choices=bl.BASELINE_NAMES)
    return p


COMMANDS = {
    "bounds": cmd_bounds,
    "sample": cmd_sample,
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "optimize": cmd_optimize,
    "compare": cmd_compare,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    from threadpoolctl import threadpool_limits

    try:
        cfg = load_config(args.config)
        with threadpool_limits(args.threads):
            COMMANDS[args.command](args, cfg)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataError, OracleError, TrainingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValidationError, PolicyError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
