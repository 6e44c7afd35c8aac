"""Command-line entry point.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are
flag names (dashes or underscores) for that subcommand. Flags given on
the command line win over the file. A ``run.meta`` written by an earlier
run is also accepted as a config, which replays that run.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
``MINSIGHT_THREADS`` caps BLAS threads (default 1).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import warnings

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _version() -> str:
    from . import __version__

    return __version__


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 40x40, got {text!r}") from None
    return h, w


def _threads(text: str):
    if str(text) == "auto":
        return "auto"
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("threads must be a positive integer or 'auto'") from None
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be a positive integer or 'auto'")
    return n


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minsight", description="Fingertip force-map experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="JSON file of flag values (or a run.meta); flags override it")
        sp.add_argument("--seed", type=int, default=0, help="global seed")
        return sp

    sp = add("gen-data", "render a synthetic probing dataset")
    sp.add_argument("--locations", type=int, default=2000, help="number of probe locations")
    sp.add_argument("--depths", type=int, default=5, help="indentation depths per location (0.05 to 1.05 mm)")
    sp.add_argument("--width", type=int, default=82, help="stored image width (px)")
    sp.add_argument("--height", type=int, default=60, help="stored image height (px)")
    sp.add_argument("--supersample", type=int, default=2, help="render oversampling factor")
    sp.add_argument("--nodes", type=int, default=1350, help="surface node count")
    sp.add_argument("--node-seed", type=int, default=7, help="seed of the node sampling")
    sp.add_argument("--alpha", type=float, default=0.0005, help="layout shrink weight")
    sp.add_argument("--out", required=True, help="output dataset directory")

    sp = add("train", "train a network on a dataset")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--head", choices=("single", "dist-flat", "dist-grid"), default="single", help="output head")
    sp.add_argument("--tier", choices=("tiny", "small", "base"), default="small", help="network size")
    sp.add_argument("--scale", type=int, default=20, help="input scale in percent (1, 8, 20, 60, 100)")
    sp.add_argument("--epochs", type=int, default=60, help="training epochs")
    sp.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    sp.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    sp.add_argument("--train-fraction", type=float, default=0.8, help="fraction of locations used for training")
    sp.add_argument("--split-seed", type=int, default=0, help="seed of the location split")
    sp.add_argument("--out", required=True, help="output checkpoint (.mnsw)")

    sp = add("eval", "evaluate a checkpoint on the holdout split")
    sp.add_argument("--model", required=True, help="checkpoint file")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--train-fraction", type=float, default=0.8, help="fraction of locations used for training")
    sp.add_argument("--split-seed", type=int, default=0, help="seed of the location split")
    sp.add_argument("--all", action="store_true", help="evaluate on every sample instead of the holdout")
    sp.add_argument("--report", required=True, help="output metrics CSV")

    sp = add("sweep-res", "train one net per input scale and compare errors")
    sp.add_argument("--data", required=True, help="dataset directory, stored at the largest scale used")
    sp.add_argument("--scales", type=_csv_ints, default=[1, 8, 20, 60, 100], help="comma-separated scales")
    sp.add_argument("--tiers", default="tiny", help="comma-separated tiers")
    sp.add_argument("--epochs", type=int, default=30, help="training epochs per net")
    sp.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    sp.add_argument("--batch-size", type=int, default=32, help="minibatch size")
    sp.add_argument("--train-fraction", type=float, default=0.8, help="fraction of locations used for training")
    sp.add_argument("--split-seed", type=int, default=0, help="seed of the location split")
    sp.add_argument("--out", required=True, help="output CSV")

    sp = add("bench", "time single-frame inference")
    sp.add_argument("--model", help="checkpoint; without it the three tiers are timed untrained")
    sp.add_argument("--scale", type=int, default=20, help="input scale when no model is given")
    sp.add_argument("--threads", type=_threads, default=1, help="BLAS threads: a count or 'auto'")
    sp.add_argument("--warmup", type=int, default=100, help="untimed iterations")
    sp.add_argument("--reps", type=int, default=1000, help="timed iterations")
    sp.add_argument("--out", required=True, help="output CSV")

    sp = add("layout", "build the node-to-pixel force-map layout")
    sp.add_argument("--alpha", type=float, default=0.0005, help="shrink weight")
    sp.add_argument("--grid", type=_grid, default=(40, 40), help="grid size HxW")
    sp.add_argument("--nodes", type=int, default=1350, help="surface node count")
    sp.add_argument("--node-seed", type=int, default=7, help="seed of the node sampling")
    sp.add_argument("--smoothness", action="store_true", help="also write a smoothness report next to the layout")
    sp.add_argument("--out", required=True, help="output layout file")

    sp = add("servo", "closed-loop force servoing episode")
    sp.add_argument("--mode", choices=("oracle", "pipeline"), default="oracle", help="force source")
    sp.add_argument("--traj", choices=("hold", "sine"), default="hold", help="object motion")
    sp.add_argument("--duration", type=float, default=12.0, help="episode length (s)")
    sp.add_argument("--target", type=float, default=1.0, help="target force magnitude (N)")
    sp.add_argument("--kp", type=float, default=0.5, help="proportional gain per axis")
    sp.add_argument("--ki", type=float, default=2.0, help="integral gain per axis (1/s)")
    sp.add_argument("--no-feedforward", action="store_true", help="drop the feed-forward term")
    sp.add_argument("--vector-error", action="store_true", help="regulate the full force vector, not only its normal component")
    sp.add_argument("--mu", type=float, default=1.0, help="contact friction coefficient (0 for frictionless)")
    sp.add_argument("--model", help="single-head checkpoint (pipeline mode)")
    sp.add_argument("--data", help="dataset whose renderer the model was trained on (pipeline mode)")
    sp.add_argument("--out", required=True, help="output trace CSV")

    sp = add("palpate", "lump classification from press trajectories")
    sp.add_argument("--task", choices=("binary", "multi"), default="binary", help="classification task")
    sp.add_argument("--per-class", type=int, default=40, help="trajectories per class")
    sp.add_argument("--epochs", type=int, default=80, help="classifier epochs")
    sp.add_argument("--max-depth", type=float, default=2.0, help="press depth at the end of the ramp (mm)")
    sp.add_argument("--mode", choices=("oracle", "pipeline"), default="oracle", help="force-map source")
    sp.add_argument("--model", help="distribution-head checkpoint (pipeline mode)")
    sp.add_argument("--data", help="dataset whose renderer the model was trained on (pipeline mode)")
    sp.add_argument("--nodes", type=int, default=1350, help="surface node count (oracle mode)")
    sp.add_argument("--node-seed", type=int, default=7, help="seed of the node sampling (oracle mode)")
    sp.add_argument("--permuted", type=int, default=0, metavar="N", help="also train N permuted-label controls and report their mean")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices[name]
    raise KeyError(name)


def _read_config(path: str, sp: argparse.ArgumentParser) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    if isinstance(cfg, dict) and "config" in cfg and "command" in cfg:
        cfg = cfg["config"]
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    dests = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    out = {}
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest not in dests:
            raise UsageError(f"config file {path}: unknown key {key!r}")
        act = dests[dest]
        if act.type is not None and val is not None and not isinstance(val, (list, tuple)):
            val = act.type(val) if not isinstance(val, bool) else val
        elif act.dest == "grid" and isinstance(val, list):
            val = tuple(val)
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config file {path}: {key} must be one of {list(act.choices)}")
        out[dest] = val
    return out


def _config_arg(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_arg(argv)
    if path is not None and argv and argv[0] in COMMANDS:
        sp = _subparser(parser, argv[0])
        cfg = _read_config(path, sp)
        sp.set_defaults(**cfg)
        # values supplied by the file satisfy required flags
        for act in sp._actions:
            if act.dest in cfg:
                act.required = False
    return parser.parse_args(argv)


# ---------------------------------------------------------------- helpers


def _resolved(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    return json.loads(json.dumps(cfg, default=list))


def write_meta(args: argparse.Namespace, out_path: str) -> str:
    """``run.meta`` inside an output directory, or ``<file>.run.meta`` beside an output file."""
    if os.path.isdir(out_path):
        path = os.path.join(out_path, "run.meta")
    else:
        path = out_path + ".run.meta"
    meta = {
        "command": args.command,
        "config": _resolved(args),
        "version": _version(),
        "numpy": np.__version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _parent(path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _require(path, what: str, directory: bool = False) -> None:
    if path is None:
        raise UsageError(f"{what} is required")
    ok = os.path.isdir(path) if directory else os.path.isfile(path)
    if not ok:
        raise FileNotFoundError(f"{what} {path} not found")


def _nodes(n: int, seed: int):
    from .geometry import build_surface, sample_nodes

    s = build_surface()
    return s, sample_nodes(s, n, seed)


def _thread_limit():
    env = os.environ.get("MINSIGHT_THREADS", "1")
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"MINSIGHT_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("MINSIGHT_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    from .dataset import ProbeProtocol, generate, save
    from .embedding import build_layout

    if args.locations < 1 or args.depths < 1:
        raise UsageError("--locations and --depths must be positive")
    depths = tuple(float(d) for d in np.round(np.linspace(0.05, 1.05, args.depths), 10)) if args.depths > 1 else (0.05,)
    surface, nodes = _nodes(args.nodes, args.node_seed)
    layout = build_layout(nodes, alpha=args.alpha)
    proto = ProbeProtocol(n_locations=args.locations, depths=depths, seed=args.seed)
    ds = generate(surface, nodes, proto, w=args.width, h=args.height, supersample=args.supersample, layout=layout)
    save(ds, args.out)
    write_meta(args, args.out)


def _load_data(path):
    from .dataset import load

    _require(path, "dataset", directory=True)
    return load(path)


def cmd_train(args) -> None:
    from .dataset import split
    from .inference import NetConfig, TrainConfig, build_net, save_checkpoint, train

    ds = _load_data(args.data)
    try:
        ncfg = NetConfig(tier=args.tier, head=args.head, scale=args.scale, n_nodes=ds.force_maps.shape[1])
        tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 0 < args.train_fraction < 1:
        raise UsageError("--train-fraction must lie in (0, 1)")
    tr, te = split(ds, args.train_fraction, args.split_seed)
    net = build_net(ncfg, seed=args.seed)
    if args.head == "dist-grid":
        net.layout = ds.layout()
    net, curves = train(net, tr, te, tcfg)
    _parent(args.out)
    save_checkpoint(net, args.out)
    curves.to_csv(os.path.splitext(args.out)[0] + ".loss.csv")
    write_meta(args, args.out)


def _load_model(path):
    from .inference import load_checkpoint

    _require(path, "model")
    return load_checkpoint(path)


def cmd_eval(args) -> None:
    from .dataset import split
    from .evaluation import _predict_dataset, evaluate, plot_error_vs_magnitude, write_predictions

    net = _load_model(args.model)
    ds = _load_data(args.data)
    test = ds if args.all else split(ds, args.train_fraction, args.split_seed)[1]
    rep = evaluate(net, test)
    _parent(args.report)
    rep.to_csv(args.report)
    stem = os.path.splitext(args.report)[0]
    if net.config.head == "single":
        write_predictions(stem + ".pred.csv", _predict_dataset(net, test), np.asarray(test.labels, dtype=np.float64))
        plot_error_vs_magnitude(rep, stem + ".svg")
    write_meta(args, args.report)


def cmd_sweep_res(args) -> None:
    from .evaluation import plot_sweep, resolution_sweep, write_sweep_csv
    from .inference import SCALE_DIMS, TrainConfig

    bad = [s for s in args.scales if s not in SCALE_DIMS]
    if bad:
        raise UsageError(f"unsupported scales {bad}; choose from {sorted(SCALE_DIMS)}")
    tiers = [t for t in args.tiers.split(",") if t]
    ds = _load_data(args.data)
    need = max(SCALE_DIMS[s] for s in args.scales)
    if ds.image_size[0] < need[0] or ds.image_size[1] < need[1]:
        raise UsageError(f"dataset images are {ds.image_size}, scale {max(args.scales)} needs {need}")
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    rows = resolution_sweep(ds, args.scales, tiers, cfg, args.train_fraction, args.split_seed, args.seed)
    _parent(args.out)
    write_sweep_csv(rows, args.out)
    plot_sweep(rows, os.path.splitext(args.out)[0] + ".svg")
    write_meta(args, args.out)


def cmd_bench(args) -> None:
    from .evaluation import bench_latency, write_latency_csv
    from .inference import NetConfig

    if args.model:
        net = _load_model(args.model)
        configs, scale = {os.path.basename(args.model): net}, net.config.scale
    else:
        try:
            configs = {t: NetConfig(tier=t, scale=args.scale) for t in ("tiny", "small", "base")}
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        scale = args.scale
    threads = (None,) if args.threads == "auto" else (args.threads,)
    rows = bench_latency(configs, scale, warmup=args.warmup, reps=args.reps, threads=threads, seed=args.seed)
    _parent(args.out)
    write_latency_csv(rows, args.out)
    write_meta(args, args.out)


def cmd_layout(args) -> None:
    from .embedding import build_layout, save_layout, smoothness_score
    from .geometry import build_neighbor_graph

    h, w = args.grid
    if h * w < args.nodes:
        raise UsageError(f"grid {h}x{w} has fewer pixels than {args.nodes} nodes")
    _, nodes = _nodes(args.nodes, args.node_seed)
    lay = build_layout(nodes, grid_w=w, grid_h=h, alpha=args.alpha)
    _parent(args.out)
    save_layout(lay, args.out)
    if args.smoothness:
        score = smoothness_score(lay, build_neighbor_graph(nodes))
        with open(os.path.splitext(args.out)[0] + ".smoothness.csv", "w", encoding="utf-8") as fh:
            fh.write("alpha,grid_h,grid_w,n_nodes,smoothness\n")
            fh.write(f"{args.alpha:.9g},{h},{w},{args.nodes},{score:.9g}\n")
    write_meta(args, args.out)


def _pipeline_parts(args, head_ok):
    net = _load_model(args.model)
    if net.config.head not in head_ok:
        raise UsageError(f"--model must have a {' or '.join(head_ok)} head, got {net.config.head}")
    from .dataset import load, renderer_from_meta

    _require(args.data, "dataset (--data)", directory=True)
    meta = load(args.data).meta
    return (net, *renderer_from_meta(meta))


def cmd_servo(args) -> None:
    from .control import (
        DEFAULT_THETA0,
        Arm3R,
        OracleSensor,
        PipelineSensor,
        ServoGains,
        initial_world,
        run_episode,
    )

    if args.duration <= 0:
        raise UsageError("--duration must be positive")
    arm = Arm3R()
    if args.mu < 0:
        raise UsageError("--mu must be nonnegative")
    gains = ServoGains(
        kp=(args.kp,) * 3, ki=(args.ki,) * 3, f_target=args.target,
        feedforward=not args.no_feedforward, normal_only=not args.vector_error,
    )  # fmt: skip
    world = initial_world(arm, DEFAULT_THETA0, args.traj, mu=args.mu)
    if args.mode == "oracle":
        if args.model:
            raise UsageError("--model only applies to pipeline mode")
        sensor = OracleSensor(seed=args.seed)
    else:
        net, renderer, w, h, k = _pipeline_parts(args, ("single",))
        sensor = PipelineSensor(net, renderer, w, h, k)
    trace = run_episode(arm, world, gains, sensor, args.duration, DEFAULT_THETA0)
    _parent(args.out)
    trace.to_csv(args.out)
    write_meta(args, args.out)
    if trace.failed:
        raise RuntimeError("contact lost for more than 1 s; episode failed")


def cmd_palpate(args) -> None:
    from . import palpation as pp

    if args.per_class < 10:
        raise UsageError("--per-class must be at least 10")
    if args.permuted < 0:
        raise UsageError("--permuted must be nonnegative")
    depths = pp.depth_profile(max_depth=args.max_depth)
    if args.mode == "oracle":
        surface, nodes = _nodes(args.nodes, args.node_seed)
        pipeline = None
    else:
        net, renderer, w, h, k = _pipeline_parts(args, ("dist-flat", "dist-grid"))
        surface, nodes = renderer.surface, renderer.nodes
        pipeline = pp.NetMapSensor(net, renderer, w, h, k)

    trajs = pp.make_trajectories(args.task, args.per_class, nodes, surface, seed=args.seed, depths=depths, pipeline=pipeline)
    res = pp.train_classifier(trajs, args.task, split_seed=args.seed, seed=args.seed, epochs=args.epochs)
    os.makedirs(args.out, exist_ok=True)
    res.confusion_csv(os.path.join(args.out, "confusion.csv"))
    pp.force_traces_csv(trajs, os.path.join(args.out, "force_traces.csv"))
    rows = [("model", res)]
    if args.permuted:
        mean, runs = pp.permutation_control(trajs, args.task, args.permuted, split_seed=args.seed, seed=args.seed, epochs=args.epochs)
        rows += [(f"permuted_{i}", r) for i, r in enumerate(runs)]
        rows.append(("permuted_mean", pp.ClassifierResult(mean, runs[0].chance, None, float(np.mean([r.traj_accuracy for r in runs])), runs[0].n_train, runs[0].n_test)))
    with open(os.path.join(args.out, "accuracy.csv"), "w", encoding="utf-8") as fh:
        fh.write("run,task,step_accuracy,trajectory_accuracy,chance,chance_ratio,n_train,n_test\n")
        for name, r in rows:
            fh.write(
                f"{name},{args.task},{r.accuracy:.6f},{r.traj_accuracy:.6f},{r.chance:.6f},{r.chance_ratio:.6f},{r.n_train},{r.n_test}\n"
            )
    write_meta(args, args.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-res": cmd_sweep_res,
    "bench": cmd_bench,
    "layout": cmd_layout,
    "servo": cmd_servo,
    "palpate": cmd_palpate,
}


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except UsageError as exc:
        print(f"minsight: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse: usage errors and --help
        return int(exc.code or 0)

    from threadpoolctl import threadpool_limits

    from .inference import TrainingDiverged

    try:
        with threadpool_limits(limits=_thread_limit()), warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"minsight: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"minsight: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"minsight: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        print(f"minsight: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
