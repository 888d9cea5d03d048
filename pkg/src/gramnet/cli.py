"""``gramnet`` command line: train, eval, cond-study, gradcheck, gen-data.

Exit codes: 0 success, 1 usage/config/IO error, 2 numerical failure.
"""

import argparse
import contextlib
import csv
import os
import sys

import numpy as np

from . import experiment as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import MetricsWriter, gen_shapes, gen_toy_binary, metric_columns, write_raw_u8
from .errors import NUMERICAL_ERRORS, ConfigError, FormatError, ChecksumMismatch
from .trainer import evaluate, train_loop

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


def _thread_limit():
    n = os.environ.get("GRAMNET_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _resolve(args, check_paths=True):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides, check_paths)


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_train(args):
    run = _resolve(args)
    out = _out_dir(args)
    with open(os.path.join(out, "config.resolved"), "w") as fh:
        fh.write(run.render())
    train, ev = ex.load_datasets(run)
    if train.stats is not None:
        with open(os.path.join(out, "normalisation.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "mean", "std"])
            for c, (m, s) in enumerate(zip(*train.stats)):
                w.writerow([c, repr(float(m)), repr(float(s))])
    model = ex.build_model(run, train)
    digest = run.digest()

    def checkpoint(m, epoch):
        save_checkpoint(os.path.join(out, f"checkpoint_epoch{epoch + 1:05d}.gnck"), m.params, digest)

    metrics = os.path.join(out, "metrics.csv")
    if os.path.exists(metrics):
        os.remove(metrics)
    with MetricsWriter(metrics, metric_columns(len(model.config.layers))) as w:
        res = train_loop(model, train, ex.train_config(run), ex.objective_config(run),
                         ex.reg_config(run), eval_data=ev, writer=w, checkpoint_fn=checkpoint)
    if res.status != "ok":
        print(f"training failed: {res.error}", file=sys.stderr)
        return EXIT_NUMERICAL
    save_checkpoint(os.path.join(out, "model.gnck"), model.params, digest)
    last = res.rows[-1] if res.rows else None
    if last is not None:
        print(f"epochs {len(res.rows)}  objective {last['objective']:.6g}  "
              f"train_acc {last['train_acc']:.4f}  eval_acc {last['eval_acc']:.4f}  "
              f"eval_ll {last['eval_ll']:.6g}")
    return EXIT_OK


def cmd_eval(args):
    run = _resolve(args)
    out = _out_dir(args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    params, digest = load_checkpoint(args.checkpoint)
    if digest != run.digest():
        print("warning: checkpoint was written under a different config", file=sys.stderr)
    train, ev = ex.load_datasets(run)
    data = ev if ev is not None else train
    model = ex.model_for_params(run, train, params)
    tc = ex.train_config(run)
    res = evaluate(model, data, ex.reg_config(run), tc.mc_samples_eval, tc.seed, tc.batch_size)
    with open(os.path.join(out, "eval_probs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label"] + [f"p{c}" for c in range(data.classes)])
        for i, (lab, row) in enumerate(zip(data.labels, res.probs)):
            w.writerow([i, int(lab)] + [repr(float(p)) for p in row])
    print(f"accuracy {res.acc!r}")
    print(f"log_likelihood {res.ll!r}")
    return EXIT_OK


def cmd_cond_study(args):
    run = _resolve(args)
    out = _out_dir(args)
    with open(os.path.join(out, "config.resolved"), "w") as fh:
        fh.write(run.render())
    rows = ex.cond_study(run, out)
    for r in rows:
        print(f"{r['cell']:<32} {r['status']:<6} epochs {r['epochs_run']:>5}  "
              f"final cond {r['final_cond']:.4g}")
    return EXIT_OK


def cmd_gradcheck(args):
    run = _resolve(args)
    report = ex.run_gradcheck(run)
    threshold = run["gradcheck.threshold"]
    ok = True
    print(f"{'parameter':<24} {'max_rel_error':>14} {'max_abs_error':>14}  result")
    for name, e in report.items():
        good = e.finite and e.max_rel_error < threshold
        ok &= good
        print(f"{name:<24} {e.max_rel_error:>14.3e} {e.max_abs_error:>14.3e}  "
              f"{'pass' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_gen_data(args):
    # the data files named in the config are what this command creates
    run = _resolve(args, check_paths=False)
    out = _out_dir(args)
    seed = run["seed"]
    if run["gen.kind"] == "toy":
        for split, n, s in (("train", run["gen.n"], seed), ("eval", run["gen.eval_n"], seed + 1)):
            d = gen_toy_binary(n, s, run["data.noise"])
            with open(os.path.join(out, f"toy_{split}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["x0", "x1", "label"])
                for x, y in zip(d.inputs.reshape(len(d), -1), d.labels):
                    w.writerow([repr(float(x[0])), repr(float(x[1])), int(y)])
    else:
        for split, n, s in (("train", run["gen.n"], seed), ("eval", run["gen.eval_n"], seed + 1)):
            pix, lab = gen_shapes(n, s, run["gen.size"], run["gen.channels"],
                                  run["gen.noise"])
            write_raw_u8(os.path.join(out, f"shapes_{split}.u8"), pix, lab)
    print(f"wrote {run['gen.kind']} data to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "cond-study": cmd_cond_study,
            "gradcheck": cmd_gradcheck, "gen-data": cmd_gen_data}


def build_parser():
    p = argparse.ArgumentParser(prog="gramnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="config file (key = value lines)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; repeatable")
        sp.add_argument("--out", help="output directory (default: current directory)")
        sp.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        if verb == "eval":
            sp.add_argument("--checkpoint", help="checkpoint file written by train")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        with _thread_limit(), np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.verb](args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, FormatError, ChecksumMismatch, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
