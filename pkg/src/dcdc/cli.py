"""``dcdc`` command line: gradcheck, count, train, dump, bench, selftest.

Settings come from an optional ``key = value`` file (``--config``) and
repeated ``--set key=value`` overrides; overrides win.  Every run prints the
resolved settings.  Exit codes: 0 success, 1 verification failure, 2 usage
error.  All files are written under ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import statistics
import sys
import time

import numpy as np

from . import analysis, config, gradcheck
from . import autodiff as A
from . import dynamic_ops as D
from .network import CONFIG_ALIASES, MODEL_KEYS, ModelSpec, build_model, small_spec, spec_from_kv
from .tensor import Rng
from .train import DataConfig, TrainConfig, TrainingDiverged, make_dataset, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
# dataset keys are spelled so they cannot collide with model/train keys
DATA_ALIASES = {"data_seed": "seed", "image_size": "size"}
DATA_KEYS = {"n_train", "n_val", "noise", "data_seed", "image_size"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out", default="out", help="output directory (default: out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcdc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="finite-difference and adjoint checks of every VJP")
    _common(p)
    p.add_argument("--op", action="append", default=[], help=f"restrict to op(s): {', '.join(gradcheck.OP_NAMES)}")
    p.add_argument("--tol", type=float, default=gradcheck.FD_TOL, help="max FD relative error")
    p.add_argument("--adjoint-tol", type=float, default=gradcheck.ADJOINT_TOL)

    p = sub.add_parser("count", help="per-layer params and FLOPs as CSV")
    _common(p)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--compare", action="append", default=[], metavar="OPERATOR",
                   help="also count this operator and report ratios")

    p = sub.add_parser("train", help="train on the synthetic texture set")
    _common(p)
    p.add_argument("--save-data", action="store_true", help="write the dataset under OUT/data")

    p = sub.add_parser("dump", help="write predicted LSA/GSI kernels of one layer")
    _common(p)
    p.add_argument("--layer", help="node name (default: first dynamic layer)")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--checkpoint", help="weights to load before dumping")

    p = sub.add_parser("bench", help="time forward/backward per op")
    _common(p)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--size", type=int, default=16)

    p = sub.add_parser("selftest", help="oracle equivalence, invariants and gradcheck, headless")
    _common(p)
    p.add_argument("--shapes", type=int, default=200, help="random shapes per oracle")
    return parser


# --------------------------------------------------------------------------
# settings
# --------------------------------------------------------------------------


def _settings(args) -> dict[str, str]:
    values = config.load_kv(args.config) if args.config else {}
    values.update(config.parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def _resolve(values, model_base: ModelSpec, data=True):
    groups = (MODEL_KEYS, TRAIN_KEYS, DATA_KEYS) if data else (MODEL_KEYS, TRAIN_KEYS)
    model_kv, train_kv, *rest = config.split_keys(values, *groups)
    dcfg = None
    try:
        spec = spec_from_kv(model_kv, model_base)
        tcfg = config.build(TrainConfig, train_kv)
        if data:
            data_kv = {DATA_ALIASES.get(k, k): v for k, v in rest[0].items()}
            dcfg = config.build(DataConfig, data_kv,
                                base=DataConfig(classes=spec.num_classes, channels=spec.in_channels))
    except config.ConfigError:
        raise
    except ValueError as e:     # dataclass validation
        raise UsageError(str(e)) from None
    return spec, tcfg, dcfg


def _seed_only(command, values) -> int:
    """Commands without settings accept just ``seed``."""
    extra = set(values) - {"seed"}
    if extra:
        raise UsageError(f"{command} takes no settings besides seed, got {sorted(extra)}")
    try:
        return int(values.get("seed", 0))
    except ValueError:
        raise UsageError(f"seed must be an integer, got {values['seed']!r}") from None


def _print_config(title, *objs, extra=None):
    print(f"# resolved config ({title})")
    for obj in objs:
        aliases = CONFIG_ALIASES if isinstance(obj, ModelSpec) else None
        if isinstance(obj, DataConfig):
            aliases = DATA_ALIASES
        print(config.format_kv(obj, aliases))
    for k, v in (extra or {}).items():
        print(f"{k} = {v}")
    sys.stdout.flush()


def _desk_model() -> ModelSpec:
    return small_spec("dcdc")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gradcheck(args, values) -> int:
    seed = _seed_only("gradcheck", values)
    ops = [o for item in args.op for o in item.split(",") if o]
    _print_config("gradcheck", extra={"ops": ",".join(ops) or "all", "tol": args.tol,
                                      "adjoint_tol": args.adjoint_tol, "eps": gradcheck.FD_EPS, "seed": seed})
    try:
        results = gradcheck.run(ops, args.tol, args.adjoint_tol, seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["op", "fd_rel_error", "adjoint_rel_error", "worst_tensor", "passed"])
        for r in results:
            w.writerow([r.op, repr(r.fd_error), repr(r.adjoint_error), r.worst_tensor, int(r.passed)])
    print(f"{'op':16s} {'fd rel err':>11s} {'adjoint err':>11s}  worst tensor")
    for r in results:
        print(f"{r.op:16s} {r.fd_error:11.3e} {r.adjoint_error:11.3e}  {r.worst_tensor}  "
              f"{'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ops within tolerance")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_count(args, values) -> int:
    spec, _, _ = _resolve(values, ModelSpec(), data=False)
    shape = (spec.in_channels, args.resolution, args.resolution)
    _print_config("count", spec, extra={"resolution": args.resolution,
                                        "compare": ",".join(args.compare) or "none"})
    reports = {}
    for op in [spec.operator] + [c for c in args.compare if c != spec.operator]:
        s = dataclasses.replace(spec, operator=op)
        try:
            reports[op] = analysis.count_flops(build_model(s, 0), shape)
        except ValueError as e:
            raise UsageError(str(e)) from None
    os.makedirs(args.out, exist_ok=True)
    for op, rep in reports.items():
        with open(os.path.join(args.out, f"costs_{op.replace('+', '_')}.csv"), "w", encoding="utf-8") as f:
            f.write(rep.to_csv())
    print(f"{'operator':16s} {'params (M)':>11s} {'FLOPs (G)':>10s}")
    for op, rep in reports.items():
        print(f"{op:16s} {rep.params / 1e6:11.3f} {rep.flops / 1e9:10.3f}")
    main = reports[spec.operator]
    for op, rep in reports.items():
        if op != spec.operator:
            print(f"ratio {spec.operator}/{op}: params {main.params / rep.params:.4f}  "
                  f"FLOPs {main.flops / rep.flops:.4f}")
    return EXIT_OK


def cmd_train(args, values) -> int:
    spec, tcfg, dcfg = _resolve(values, _desk_model())
    _print_config("train", spec, tcfg, dcfg)
    data = make_dataset(dcfg)
    if args.save_data:
        data.save(os.path.join(args.out, "data"))

    def log(row):
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
              flush=True)

    try:
        train(spec, tcfg, data, args.out, log)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {os.path.join(args.out, 'metrics.csv')} and checkpoint.dcdc")
    return EXIT_OK


def cmd_dump(args, values) -> int:
    spec, tcfg, dcfg = _resolve(values, _desk_model())
    _print_config("dump", spec, dcfg, extra={"layer": args.layer or "auto", "samples": args.samples,
                                             "checkpoint": args.checkpoint or "none"})
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    graph = build_model(spec, Rng(tcfg.seed))
    if args.checkpoint:
        A.load_checkpoint(graph, args.checkpoint)
    dynamic = [n.name for n in graph.nodes if isinstance(n.layer, (A.Lsa, A.Gsi, A.Dcdc))]
    layer = args.layer or (dynamic[0] if dynamic else None)
    if layer is None:
        raise UsageError(f"operator {spec.operator!r} has no dynamic layers")
    if layer not in dynamic:
        raise UsageError(f"layer {layer!r} has no dynamic kernels; choose from {dynamic[:8]}...")
    data = make_dataset(dataclasses.replace(dcfg, n_train=args.samples, n_val=0))
    files = analysis.dump_kernels(graph, data.images.astype(np.float64), layer, os.path.join(args.out, "kernels"))
    print(f"layer {layer}: wrote {len(files)} files under {os.path.join(args.out, 'kernels')}")
    return EXIT_OK


def _bench_ops(b, c, s, rng):
    x = rng.normal((b, c, s, s))
    lcfg = D.LsaConfig(c, kernel_size=7, group_size=min(16, c))
    gcfg = D.GsiConfig(c, kernel_size=3)
    theta, _ = D.init_lsa_params(lcfg, rng)
    gamma = D.init_gsi_params(gcfg, rng)
    layers = {
        "conv3x3": A.Conv2d(rng.normal((c, c, 3, 3))),
        "depthwise3x3": A.Conv2d(rng.normal((c, 1, 3, 3)), groups=c),
        "pointwise": A.Conv2d(rng.normal((c, c, 1, 1))),
        "lsa": A.Lsa(lcfg, theta, {}),
        "gsi": A.Gsi(gcfg, gamma),
        "dcdc": A.Dcdc(lcfg, gcfg, theta, {}, gamma),
    }
    return x, layers


def cmd_bench(args, values) -> int:
    seed = _seed_only("bench", values)
    if min(args.repetitions, args.batch, args.channels, args.size) < 1:
        raise UsageError("--repetitions, --batch, --channels and --size must be >= 1")
    _print_config("bench", extra={"repetitions": args.repetitions, "batch": args.batch,
                                  "channels": args.channels, "size": args.size, "seed": seed})
    x, layers = _bench_ops(args.batch, args.channels, args.size, Rng(seed))
    rows = []
    for name, layer in layers.items():
        times = []
        for _ in range(args.repetitions):
            t0 = time.perf_counter()
            y, cache = layer.forward([x], training=True, update_stats=False)
            layer.backward(cache, np.ones_like(y))
            times.append(time.perf_counter() - t0)
        med = statistics.median(times)
        macs = args.batch * analysis.layer_macs(layer, [x.shape], y.shape)
        rows.append((name, med, macs, macs / med))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["op", "median_seconds", "forward_macs", "macs_per_second"])
        w.writerows(rows)
    print(f"{'op':14s} {'median s':>10s} {'fwd MACs':>12s} {'MAC/s':>10s}")
    for name, med, macs, rate in rows:
        print(f"{name:14s} {med:10.4f} {macs:12d} {rate:10.3e}")
    return EXIT_OK


def cmd_selftest(args, values) -> int:
    from . import verify as V

    seed = _seed_only("selftest", values)
    _print_config("selftest", extra={"shapes": args.shapes, "seed": seed})
    lines, ok = [], True

    def record(name, passed, detail):
        nonlocal ok
        ok &= bool(passed)
        lines.append(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        print(lines[-1], flush=True)

    for op, (bad, diff) in V.oracle_equivalence(args.shapes, seed).items():
        record(f"oracle {op}", bad == 0, f"{bad}/{args.shapes} shapes differ, max |diff| {diff!r}")
    err = V.gsi_permutation_error(seed)
    record("gsi permutation invariance", err <= 1e-12, f"rel change {err!r}")
    bad = V.lsa_locality_violations(seed)
    record("lsa locality", bad == 0, f"{bad} positions changed")
    record("lsa dirac identity", V.lsa_dirac_identity(seed), "exact")
    record("dcdc = lsa + gsi", V.dcdc_sum_exact(seed), "exact")
    for r in gradcheck.run(seed=seed):
        record(f"gradcheck {r.op}", r.passed, f"fd {r.fd_error!r} adjoint {r.adjoint_error!r}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "selftest.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print("selftest", "passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"gradcheck": cmd_gradcheck, "count": cmd_count, "train": cmd_train,
            "dump": cmd_dump, "bench": cmd_bench, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        values = _settings(args)
        return COMMANDS[args.command](args, values)
    except UsageError as e:
        print(f"dcdc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (config.ConfigError, OSError) as e:
        print(f"dcdc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:     # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
