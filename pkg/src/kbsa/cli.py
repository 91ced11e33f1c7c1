"""``kbsa`` command-line front end.

Exit status: 0 success, 1 validation-suite failure, 2 estimation error,
3 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import config as cfgmod
from . import validation
from .depmodel import sample_target
from .estimators import analyze
from .exceptions import ConfigError, KbsaError
from .screening import screen_rank
from .streams import Stream

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_CONFIG = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _versions() -> dict:
    return {"kbsa": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _subset_label(names, u) -> str:
    return "+".join(names[j] for j in u)


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def wide_table(result, names) -> str:
    """Square roots of the indices, one row per (index, kernel), inputs as columns."""
    subsets = list(dict.fromkeys(e.u for e in result.estimates))
    rows = []
    for kind in dict.fromkeys(e.kind for e in result.estimates):
        for kernel in dict.fromkeys(e.kernel for e in result.estimates):
            vals = [f"{result.get(kind, u, kernel).sqrt_value:.6f}" for u in subsets]
            rows.append([f"sqrt_{kind}", kernel] + vals)
    return _csv(["index", "kernel"] + [_subset_label(names, u) for u in subsets], rows)


LONG_COLUMNS = ["subset", "kind", "kernel", "value", "std_error", "ci_lo", "ci_hi", "sqrt_value", "sqrt_std_error",
                "m1", "m", "M", "seed", "flags"]


def long_table(result, names) -> str:
    rows = []
    for e in result.estimates:
        r = e.to_record(names)
        rows.append([_subset_label(names, e.u), e.kind, e.kernel] +
                    [repr(float(r[c])) for c in ("value", "std_error", "ci_lo", "ci_hi", "sqrt_value", "sqrt_std_error")] +
                    [e.m1, e.m, e.M, e.seed, ";".join(e.flags)])
    return _csv(LONG_COLUMNS, rows)


def _metadata(run, command: str, model) -> dict:
    return {
        "command": command,
        "config_hash": run.hash,
        "config": {k: v for k, v in run.raw.items() if k not in cfgmod.EXCLUDED_FROM_HASH},
        "versions": _versions(),
        "evaluations": model.meter.counts(),
        "evaluations_total": model.meter.total,
    }


def _out_dir(run, args) -> Path:
    return Path(args.out or run.raw.get("output", {}).get("dir") or "kbsa-out")


def _prefix(run) -> str:
    return run.raw.get("output", {}).get("prefix", "")


def _load(args) -> "cfgmod.Run":
    if not args.config:
        raise ConfigError("a --config file is required")
    raw = cfgmod.resolve(args.config)
    kernels = args.kernel if getattr(args, "kernel", None) else None
    raw = cfgmod.apply_overrides(raw, seed=args.seed, threads=args.threads, kernel=kernels,
                                 threshold=getattr(args, "threshold", None), out=args.out)
    return cfgmod.build(raw)


def cmd_analyze(args) -> int:
    run = _load(args)
    res = analyze(run.model, run.ew, run.subsets, run.kernels, run.kinds, run.estimator, run.override, run.order)
    out, pre = _out_dir(run, args), _prefix(run)
    report = _metadata(run, "analyze", run.model)
    report.update({
        "route": res.route,
        "dependency_route": res.dependency_route,
        "output_mean": np.asarray(res.mu).tolist(),
        "denominators": {k: {"value": d.value, "std_error": d.std_error, "weight_mean": d.ew_mean}
                         for k, d in res.denominators.items()},
        "estimates": [e.to_record(run.names) for e in res.estimates],
    })
    wide = wide_table(res, run.names)
    _write(out, pre + "indices_wide.csv", wide)
    _write(out, pre + "indices_long.csv", long_table(res, run.names))
    _write(out, pre + "report.json", _json(report))
    sys.stdout.write(wide)
    return EXIT_OK


def cmd_screen(args) -> int:
    run = _load(args)
    if "threshold" not in run.screening:
        raise ConfigError("screening needs a threshold (config field or --threshold)", "/screening/threshold")
    design = run.design()
    rep = screen_rank(run.model, run.ew, run.screening_kernel(), run.screening["threshold"], run.estimator, design,
                      run.screening.get("mu_mode", "independent"), run.override, run.names)
    out, pre = _out_dir(run, args), _prefix(run)
    text = rep.to_csv()
    report = _metadata(run, "screen", run.model)
    report.update({"threshold": rep.threshold, "kernel": rep.kernel, "screening": rep.rows(),
                   "upsilon": rep.upsilon.tolist(), "upsilon_std_error": rep.upsilon_se.tolist(),
                   "important": sorted(rep.important_set(), key=run.names.index), "method": rep.metadata})
    _write(out, pre + "screening.csv", text)
    _write(out, pre + "screening.json", _json(report))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sample(args) -> int:
    run = _load(args)
    n = args.n
    x = sample_target(cfgmod.base_dependency(run), n, Stream(run.estimator.base_seed).child("sample"))
    text = _csv(run.names, [[repr(float(v)) for v in row] for row in x])
    if args.out:
        _write(Path(args.out), _prefix(run) + "sample.csv", text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_converge(args) -> int:
    run = _load(args)
    conv = run.raw.get("converge", {})
    schedule = conv.get("schedule", [250, 500, 1000, 2000, 5000])
    kind = conv.get("kind", "first_order")
    ref = conv.get("reference", {})
    rows = []
    for m in schedule:
        est = run.estimator.replace(m=m, M=max(run.estimator.M, 10 * m, 10 * run.estimator.m1))
        run.model.meter.reset()
        res = analyze(run.model, run.ew, run.subsets, run.kernels, [kind], est, run.override, run.order)
        evals = run.model.meter.total
        for e in res.estimates:
            label = _subset_label(run.names, e.u)
            err = abs(e.sqrt_value - ref[label]) if label in ref else ""
            rows.append([m, evals, label, e.kernel, kind, repr(e.sqrt_value), repr(e.sqrt_std_error),
                         repr(err) if err != "" else ""])
    text = _csv(["m", "evaluations", "subset", "kernel", "kind", "sqrt_value", "sqrt_std_error", "abs_error"], rows)
    _write(_out_dir(run, args), _prefix(run) + "converge.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    threads = args.threads or 1
    suites = validation.SUITES if args.suite == "all" else (args.suite,)
    checks = []
    for s in suites:
        checks += validation.run_suite(s, threads)
    summ = validation.summary(checks)
    summ["suites"] = list(suites)
    summ["versions"] = _versions()
    text = _json(summ)
    if args.out:
        _write(Path(args.out), "validation.json", text)
    for c in checks:
        mark = "PASS" if c.passed else "FAIL"
        print(f"{mark} {c.name}: observed {c.observed:.4f} expected {c.expected:.4f} tol {c.tolerance:.4f}")
    print(f"{summ['checks'] - summ['failed']}/{summ['checks']} checks passed")
    return EXIT_OK if summ["passed"] else EXIT_VALIDATION


def _default_threads():
    env = os.environ.get("KBSA_THREADS")
    if env is None:
        return None
    try:
        value = int(env)
    except ValueError:
        raise ConfigError(f"KBSA_THREADS must be a positive integer, got {env!r}") from None
    if value < 1:
        raise ConfigError(f"KBSA_THREADS must be a positive integer, got {env!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kbsa", description="Kernel-based sensitivity analysis for weighted input distributions.")
    p.add_argument("--version", action="version", version=f"kbsa {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, kernel=True):
        sp.add_argument("--config", help="run configuration (path, or the name of a bundled config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", help="output directory")
        if kernel:
            sp.add_argument("--kernel", action="append", help="kernel name, e.g. l1, quadratic, lp:3 (repeatable)")

    a = sub.add_parser("analyze", help="estimate first-order, total and upper-bound indices")
    common(a)
    a.set_defaults(fn=cmd_analyze)
    s = sub.add_parser("screen", help="rank inputs by the upper bound and flag important ones")
    common(s)
    s.add_argument("--threshold", type=float)
    s.set_defaults(fn=cmd_screen)
    v = sub.add_parser("validate", help="run a reproduction suite")
    v.add_argument("suite", choices=list(validation.SUITES) + ["all"])
    v.add_argument("--threads", type=int)
    v.add_argument("--out")
    v.set_defaults(fn=cmd_validate)
    sm = sub.add_parser("sample", help="draw from the weighted input distribution")
    common(sm, kernel=False)
    sm.add_argument("-n", type=int, default=1000)
    sm.set_defaults(fn=cmd_sample)
    c = sub.add_parser("converge", help="sweep the outer sample size and report estimates against budget")
    common(c)
    c.set_defaults(fn=cmd_converge)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        if getattr(args, "threads", None) is None:
            args.threads = _default_threads()
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if getattr(args, "n", 1) < 1:
            raise ConfigError("-n must be >= 1")
        return args.fn(args)
    except ConfigError as exc:
        print(f"kbsa: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KbsaError, ArithmeticError) as exc:
        print(f"kbsa: estimation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
