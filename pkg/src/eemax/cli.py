"""Command-line front end: ``eemax <subcommand> ...``.

Every subcommand writes a JSON manifest (resolved arguments, seed, output
paths, version) before doing any real work; ``eemax replay <manifest>``
re-runs it. Exit codes: 0 ok, 2 usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, chanmodel, inet, oracle, trainer

log = logging.getLogger("eemax")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None
    artifacts: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return path

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


# ------------------------------------------------------------------ config files


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys are flag names."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def _apply_config(parser, sub, args, argv):
    """Fill options from --config unless given explicitly on the command line."""
    if not getattr(args, "config", None):
        return args
    try:
        values = read_config_file(args.config)
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from e
    actions = {a.dest: a for a in sub._actions}
    given = {a.dest for a in sub._actions for s in a.option_strings if any(x == s or x.startswith(s + "=") for x in argv)}
    for k, v in values.items():
        if k not in actions or k in ("config", "help"):
            raise UsageError(f"unknown config key {k!r}")
        if k in given:
            continue
        act = actions[k]
        if isinstance(act, argparse._StoreTrueAction):
            val = v.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                val = act.type(v)
            except (TypeError, ValueError) as e:
                raise UsageError(f"bad value for {k}: {v!r}") from e
        else:
            val = v
        setattr(args, k, val)
    return args


# ------------------------------------------------------------------ helpers


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {s}")
    return v


def resolve_pmax(args, default=None):
    """Watts from --pmax-dbm / --pmax-dbw (mutually exclusive)."""
    dbm, dbw = getattr(args, "pmax_dbm", None), getattr(args, "pmax_dbw", None)
    if dbm is not None and dbw is not None:
        raise UsageError("--pmax-dbm and --pmax-dbw are mutually exclusive")
    if dbm is not None:
        return chanmodel.dbm_to_watt(dbm)
    if dbw is not None:
        return chanmodel.dbw_to_watt(dbw)
    return default


def _load(path):
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return chanmodel.load_dataset(path)


def _args_dict(args):
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


# ------------------------------------------------------------------ subcommands


def cmd_gen_data(args):
    p_max = resolve_pmax(args, chanmodel.ScenarioConfig().p_max)
    cfg = chanmodel.ScenarioConfig(num_users=args.users, num_bs=args.bs, p_max=p_max, rng_seed=args.seed,
                                   bs_positions=chanmodel.DEFAULT_BS_POSITIONS[: args.bs]
                                   if args.bs <= 4 else _grid_positions(args.bs))
    out = Path(args.out)
    RunManifest("gen-data", {**_args_dict(args), "p_max_watts": p_max, "scenario": cfg.to_dict()}, args.seed,
                {"dataset": str(out), "sidecar": str(chanmodel.sidecar(out))}).write(manifest_path(out))
    ds = chanmodel.generate_dataset(cfg, args.samples, split=args.split, seed=args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    chanmodel.save_dataset(ds, out)
    print(f"wrote {len(ds)} samples (I={cfg.num_users}, p_max={p_max:.6g} W) to {out}")
    return EXIT_OK


def _grid_positions(m):
    side = int(np.ceil(np.sqrt(m)))
    pts = [((c + 0.5) * 2.0 / side, (r + 0.5) * 2.0 / side) for r in range(side) for c in range(side)]
    return tuple(pts[:m])


def _train_config(args, base=None):
    base = base or trainer.TrainConfig()
    over = {
        "learning_rate": args.lr, "batch_size": args.batch, "smc": args.smc, "eps": args.eps,
        "delta_kappa": args.delta_kappa, "h": args.h, "h0": args.h0, "rho": args.rho,
        "optimizer": args.optimizer, "rng_seed": args.seed,
    }
    over = {k: v for k, v in over.items() if v is not None}
    if args.region_adapt:
        over["region_adaptation"] = True
    return replace(base, epochs=args.epochs, **over)


def cmd_train(args):
    out = Path(args.out_dir)
    ds = _load(args.data)
    test = _load(args.test_data) if args.test_data else None
    state = None
    if args.resume:
        if not (out / "state.json").exists():
            raise UsageError(f"--resume given but {out}/state.json does not exist")
        state, saved = trainer.load_state(out)
        cfg = _train_config(args, saved)
    else:
        cfg = _train_config(args)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    RunManifest("train", {**_args_dict(args), "train_config": asdict(cfg)}, cfg.rng_seed,
                {"metrics": str(metrics_path), "alpha": str(out / "alpha.ckpt"), "beta": str(out / "beta.ckpt"),
                 "state": str(out / "state.json")}).write(out / "manifest.json")

    rows = []

    def on_epoch(m):
        rows.append(m)
        if m.epoch % max(1, args.log_every) == 0:
            log.info("epoch %d  ee %.5f  H %.3f  pen %.3g  kappa %.4g  s %.4g",
                     m.epoch, m.mean_ee, m.mean_entropy, m.mean_penalty, m.kappa, m.s)

    try:
        res = trainer.train(ds, cfg, state, on_epoch)
    except trainer.NumericalAbort as e:
        trainer.write_metrics_csv(rows, metrics_path, append=args.resume)
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    trainer.write_metrics_csv(res.metrics, metrics_path, append=args.resume)
    trainer.save_state(res.state, cfg, out)
    why = "entropy below threshold" if res.stopped_by_entropy else "epoch cap"
    print(f"trained to epoch {res.state.epoch} ({why}); metrics in {metrics_path}")
    if test is not None:
        summary = trainer.evaluate(res.alpha, test, res.state.region.s)
        _write_eval_csv(out / "test_eval.csv", summary)
        print(f"test mean EE {summary.mean_ee:.6g} Mbit/J over {len(test)} samples")
    return EXIT_OK


def _checkpoint(path):
    path = Path(path)
    if path.is_dir():
        alpha = inet.load_checkpoint(path / "alpha.ckpt")
        s = json.loads((path / "state.json").read_text())["s"] if (path / "state.json").exists() else None
        return alpha, s
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return inet.load_checkpoint(path), None


def _write_eval_csv(path, summary, oracle_ee=None, oracle_p=None):
    if oracle_p is not None:
        oracle.write_results_csv(path, oracle_ee, oracle_p, summary.ee, summary.powers)
        return
    I = summary.powers.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "ee_net"] + [f"p_net_{i}" for i in range(I)])
        for n, (e, p) in enumerate(zip(summary.ee, summary.powers)):
            w.writerow([n, repr(float(e))] + [repr(float(x)) for x in p])


def cmd_eval(args):
    ds = _load(args.data)
    alpha, s = _checkpoint(args.checkpoint)
    out = Path(args.out)
    RunManifest("eval", _args_dict(args), None, {"results": str(out)}).write(manifest_path(out))
    ee_o = p_o = None
    if args.oracle:
        ee_o, p_o = oracle.read_results_csv(args.oracle)
        if p_o.shape != (len(ds), ds.config.num_users):
            raise UsageError(
                f"oracle results {args.oracle} cover {p_o.shape[0]} samples with I={p_o.shape[1] if p_o.size else 0}, "
                f"dataset has {len(ds)} samples with I={ds.config.num_users}"
            )
    summary = trainer.evaluate(alpha, ds, s, ee_o)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_eval_csv(out, summary, ee_o, p_o)
    msg = f"mean EE {summary.mean_ee:.6g} Mbit/J over {len(ds)} samples"
    if summary.mean_ratio is not None:
        msg += f"; mean ratio to oracle {summary.mean_ratio:.4f}"
    print(msg)
    return EXIT_OK


def cmd_oracle(args):
    ds = _load(args.data)
    I = ds.config.num_users
    p_max = resolve_pmax(args, ds.config.p_max)
    cfg = oracle.OracleConfig(grid_points=args.grid_points, starts=args.starts)
    if args.mode == "grid" and I > cfg.max_exhaustive_users:
        raise UsageError(
            f"grid mode refused: dataset has I={I} users and an exhaustive grid costs k^I evaluations; "
            f"use --mode multistart for I > {cfg.max_exhaustive_users}"
        )
    out = Path(args.out)
    RunManifest("oracle", {**_args_dict(args), "p_max_watts": p_max, "oracle_config": asdict(cfg)}, args.seed,
                {"results": str(out)}).write(manifest_path(out))
    res = oracle.solve_all(ds.gains(), p_max, args.mode, cfg, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    oracle.write_results_csv(out, [r.ee for r in res], np.array([r.p for r in res]))
    print(f"oracle ({res[0].mode if res else args.mode}) mean EE {np.mean([r.ee for r in res]):.6g} Mbit/J; wrote {out}")
    return EXIT_OK


def cmd_rastrigin(args):
    out = Path(args.out)
    cfg = replace(trainer.RastriginConfig(), seed=args.seed,
                  **({"iterations": args.iterations} if args.iterations is not None else {}))
    methods = ("box", "gd") if args.method == "both" else (args.method,)
    RunManifest("rastrigin", {**_args_dict(args), "rastrigin_config": asdict(cfg)}, args.seed,
                {"trace": str(out)}).write(manifest_path(out))
    tr = trainer.rastrigin_demo(args.n, cfg, methods)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = [("f_box", tr.box)] * ("box" in methods) + [("f_gd", tr.gd)] * ("gd" in methods)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [c for c, _ in cols])
        for it in range(cfg.iterations + 1):
            w.writerow([it] + [repr(float(v[it])) for _, v in cols])
    print("final " + ", ".join(f"{c}={v[-1]:.6g}" for c, v in cols))
    return EXIT_OK


def cmd_replay(args):
    m = RunManifest.read(args.manifest)
    argv = [m.subcommand]
    parser = build_parser()
    sub = _subparsers(parser)[m.subcommand]
    for act in sub._actions:
        if not act.option_strings or act.dest in ("help", "config"):
            continue
        v = m.config.get(act.dest)
        if v is None or v is False:
            continue
        flag = act.option_strings[-1]
        argv += [flag] if v is True else [flag, str(v)]
    return main(argv)


# ------------------------------------------------------------------ parser


def _add_pmax(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pmax-dbm", type=float, help="maximum transmit power in dBm")
    g.add_argument("--pmax-dbw", type=float, help="maximum transmit power in dBW")


def build_parser():
    parser = argparse.ArgumentParser(prog="eemax", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sp = parser.add_subparsers(dest="command", required=True)

    p = sp.add_parser("gen-data", help="generate a channel dataset")
    p.add_argument("--config", help="key=value file with defaults for these flags")
    p.add_argument("--users", type=_positive_int, default=7)
    p.add_argument("--bs", type=_positive_int, default=4)
    _add_pmax(p)
    p.add_argument("--samples", type=_nonneg_int, default=6000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    d = trainer.TrainConfig()
    p = sp.add_parser("train", help="train the alpha/beta networks")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--epochs", type=_nonneg_int, default=d.epochs)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=_positive_int)
    p.add_argument("--smc", type=_positive_int)
    p.add_argument("--eps", type=float)
    p.add_argument("--delta-kappa", type=float)
    p.add_argument("--h", type=_positive_int)
    p.add_argument("--h0", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--region-adapt", action="store_true")
    p.add_argument("--optimizer", choices=("adam", "sga"))
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the state in --out-dir")
    p.add_argument("--log-every", type=_positive_int, default=50)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sp.add_parser("eval", help="evaluate a trained alpha network")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True, help="training out-dir or an alpha .ckpt file")
    p.add_argument("--data", required=True)
    p.add_argument("--oracle", help="oracle results CSV for ratio columns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sp.add_parser("oracle", help="reference optimum per instance")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("grid", "multistart", "auto"), default="auto")
    p.add_argument("--grid-points", type=int)
    p.add_argument("--starts", type=_positive_int, default=64)
    _add_pmax(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sp.add_parser("rastrigin", help="box method vs gradient descent on Rastrigin")
    p.add_argument("--config")
    p.add_argument("--n", type=_positive_int, default=10)
    p.add_argument("--method", choices=("box", "gd", "both"), default="both")
    p.add_argument("--iterations", type=_nonneg_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rastrigin)

    p = sp.add_parser("replay", help="re-run a subcommand from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def _subparsers(parser):
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices
    return {}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args = _apply_config(parser, _subparsers(parser)[args.command], args, argv)
        return args.func(args)
    except UsageError as e:
        print(f"eemax {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, chanmodel.DatasetFormatError, oracle.OracleError, OSError) as e:
        print(f"eemax {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
