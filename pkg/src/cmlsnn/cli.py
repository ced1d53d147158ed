"""Command-line entry point: ``cmlsnn {train,paired,probe,gradcheck,compare}``.

Failures exit nonzero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import _kernels
from .data import DATA_DIR_ENV, default_data_dir
from .downsample import Variant
from .layers import LifParams


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"{self.prog}: {message}")


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _run_config(args):
    from .train import RunConfig

    if args.config:
        return RunConfig.load(args.config)
    return RunConfig(
        arch=args.arch, dataset=args.dataset, data_dir=args.data_dir or default_data_dir(),
        timesteps=args.timesteps, epochs=args.epochs, batch=args.batch, lr=args.lr,
        optimizer=args.optimizer, seed=args.seed, precision=args.precision, out=args.out,
        full_bptt=args.full_bptt, per_class=args.per_class, test_per_class=args.test_per_class,
        synth_noise=args.synth_noise, synth_per_class=args.synth_per_class,
        eval_train=not args.running_train_metrics,
    )


def cmd_train(args):
    from .train import train

    cfg = _run_config(args)
    result = train(cfg)
    _emit({"status": result.status, "out": cfg.out, "final": result.final.to_dict()})


def cmd_paired(args):
    from .train import run_paired

    cfg = _run_config(args)
    table = run_paired(cfg, archs=args.archs, seeds=range(args.seeds), out=cfg.out)
    _emit({k: table[k] for k in ("variants", "paired_vs_baseline", "lif_update_ratio_baseline_over_cml",
                                 "total_wall_time")})


def cmd_probe(args):
    from . import gradprobe as gp
    from .downsample import DownsampleBlock, count_lif_updates

    rng = np.random.default_rng(args.seed)
    params = LifParams()
    if args.mode == "opcount":
        shape = (1, 1, 1, args.size, args.size)
        counts = {}
        for v in Variant:
            block = DownsampleBlock(1, 1, v, stride=args.stride)
            counts[v.value] = count_lif_updates(block, shape)
        _emit({"mode": "opcount", "input_shape": list(shape), "stride": args.stride,
               "lif_updates": counts, "ratio_baseline_over_cml": counts["baseline"] / counts["cml"]},
              args.out)
        return
    x = gp.windows_to_tensor(gp.random_windows(rng, args.windows, args.stride, params, args.spike_rate))
    if args.mode == "mismatch":
        rates = {v: gp.mismatch_rate(x, params, v, args.stride) for v in ("baseline", "cml")}
        _emit({"mode": "mismatch", "windows": args.windows, "stride": args.stride,
               "target_spike_rate": args.spike_rate, "mismatch_rate": rates}, args.out)
        return
    summaries = {}
    for v in ("baseline", "cml"):
        report = gp.analyze_routing(gp.probe_block(v, args.stride, params), x)
        summaries[v] = report.summary()
        if args.out:
            path = Path(args.out)
            path.parent.mkdir(parents=True, exist_ok=True)
            report.write_jsonl(path.with_name(f"{path.stem}.{v}.jsonl"))
    _emit({"mode": "routing", "seed": args.seed, "summaries": summaries}, args.out)


def cmd_gradcheck(args):
    from .gradcheck import FD_TOL, check_network, check_smooth_graph

    t0 = time.perf_counter()
    results = {}
    if args.soft:
        for v in args.arch:
            results[v] = max(check_network(s, v, soft=True, eps=args.eps) for s in range(args.seeds))
    else:
        results["smooth_graph"] = max(check_smooth_graph(s, eps=args.eps) for s in range(args.seeds))
    worst = max(results.values())
    ok = worst < FD_TOL
    _emit({"soft": args.soft, "eps": args.eps, "seeds": args.seeds, "max_rel_error": results,
           "tolerance": FD_TOL, "passed": ok, "seconds": time.perf_counter() - t0})
    if not ok:
        raise CLIError(f"gradient check failed: max relative error {worst:.3e} >= {FD_TOL}")


def cmd_compare(args):
    from .train import compare

    table = compare(args.runs, out=args.out)
    _emit({k: table[k] for k in ("variants", "paired_vs_baseline", "lif_update_ratio_baseline_over_cml")})


def _add_run_flags(t):
    t.add_argument("--arch", choices=[v.value for v in Variant], default="cml")
    t.add_argument("--dataset", choices=["synth", "cifar10"], default="synth")
    t.add_argument("--data-dir", default=None, help=f"CIFAR-10 binary dir (default ${DATA_DIR_ENV})")
    t.add_argument("--timesteps", type=int, default=4)
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--precision", choices=["f32", "f64"], default="f32")
    t.add_argument("--out", default=None)
    t.add_argument("--full-bptt", action="store_true")
    t.add_argument("--per-class", type=int, default=None)
    t.add_argument("--test-per-class", type=int, default=None)
    t.add_argument("--synth-noise", type=float, default=0.0)
    t.add_argument("--synth-per-class", type=int, default=32)
    t.add_argument("--running-train-metrics", action="store_true",
                   help="report running batch loss/accuracy instead of re-evaluating the train set")
    t.add_argument("--config", default=None, help="RunConfig JSON; overrides the other flags")


def build_parser():
    p = _Parser(prog="cmlsnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the two-cell classifier")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    pa = sub.add_parser("paired", help="train several variants over shared seeds, then compare")
    _add_run_flags(pa)
    pa.add_argument("--archs", nargs="+", default=["baseline", "cml"], choices=[v.value for v in Variant])
    pa.add_argument("--seeds", type=int, default=5, help="seeds 0..N-1")
    pa.set_defaults(func=cmd_paired)

    pr = sub.add_parser("probe", help="gradient-routing analysis")
    pr.add_argument("--mode", choices=["routing", "mismatch", "opcount"], default="routing")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", default=None)
    pr.add_argument("--windows", type=int, default=10_000)
    pr.add_argument("--stride", type=int, default=2)
    pr.add_argument("--spike-rate", type=float, default=0.5)
    pr.add_argument("--size", type=int, default=32, help="input side for opcount")
    pr.set_defaults(func=cmd_probe)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--soft", action="store_true", help="soft spike forward; checks the full network")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--arch", nargs="+", default=[v.value for v in Variant],
                   choices=[v.value for v in Variant])
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("compare", help="tabulate finished runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        logging.getLogger(__name__).info("kernel backend: %s", _kernels.BACKEND)
        args.func(args)
    except SystemExit as exc:  # --help
        return exc.code or 0
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
