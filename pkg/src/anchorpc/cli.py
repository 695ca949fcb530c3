"""Command-line front end.

Standard output carries ``key=value`` lines only; failures are reported as one
``error=<kind> message=<text>`` line on standard error plus an exit status:

    2 configuration, 3 I/O or file format, 4 algorithm,
    5 decode rows diverged, 6 external predictor failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import errors
from .anchors import load_anchors, normalize_strategy, save_anchors, select_anchors
from .cloud import (
    apply_rigid,
    check_writable,
    load_cloud,
    parse_rotation_degrees,
    random_rotation,
    save_cloud,
)
from .codec import SolverOptions, decode, dmcd, encode, load_matrix, save_matrix
from .completion import CompletionConfig, PipelineError, PredictorSpec, complete
from .evaluation import add_gaussian_noise, chamfer_l1, chamfer_l2, fidelity, remove_points

EXIT_CONFIG, EXIT_IO, EXIT_ALGO, EXIT_DIVERGED, EXIT_EXTERNAL = 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code, kind, message):
        self.code = code
        self.kind = kind
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, "config", message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _strategy(text):
    try:
        return normalize_strategy(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _emit(**kv):
    print(" ".join(f"{k}={_fmt(v)}" for k, v in kv.items()))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CliError(EXIT_CONFIG, "config", f"not a boolean: {text!r}")


def _load(path):
    try:
        return load_cloud(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, "io", f"no such file: {path}") from None


def _check_out(path):
    try:
        check_writable(path)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_anchors(args):
    cloud = _load(args.input)
    _check_out(args.out)
    aset = select_anchors(cloud, args.k, args.strategy, radius=args.radius,
                          threshold=args.threshold, k_nn=args.knn)
    save_anchors(aset, args.out)
    _emit(k=aset.k, strategy=aset.strategy, margin=float(aset.margin), out=args.out)
    return 0


def cmd_encode(args):
    cloud = _load(args.input)
    try:
        aset = load_anchors(args.anchors)
    except FileNotFoundError:
        raise CliError(EXIT_IO, "io", f"no such file: {args.anchors}") from None
    _check_out(args.out)
    D = encode(cloud, aset)
    save_matrix(D, args.out)
    _emit(rows=D.rows, cols=D.cols, out=args.out)
    return 0


def cmd_decode(args):
    try:
        D = load_matrix(args.input)
    except FileNotFoundError:
        raise CliError(EXIT_IO, "io", f"no such file: {args.input}") from None
    _check_out(args.out)
    opts = SolverOptions(max_iters=args.max_iters, residual_tol=args.tol)
    res = decode(D, opts, workers=args.workers)
    ok = res.ok_rows
    save_cloud(res.cloud.subset(ok), args.out)
    finite = res.residuals[np.isfinite(res.residuals)]
    _emit(rows=D.rows, written=int(ok.size), failed=len(res.failed),
          max_residual=float(finite.max()) if finite.size else float("nan"))
    if res.failed:
        raise CliError(EXIT_DIVERGED, "diverged",
                       "rows diverged: " + ",".join(str(i) for i in sorted(res.failed)))
    return 0


def cmd_complete(args):
    cloud = _load(args.input)
    _check_out(args.out)
    try:
        config = CompletionConfig(
            k=args.k, n_in=args.n, m_out=args.m, strategy=args.strategy, radius=args.radius,
            threshold=args.threshold, k_nn=args.knn,
            solver=SolverOptions(max_iters=args.max_iters, residual_tol=args.tol),
            predictor=PredictorSpec.parse(args.predictor), normalize=_bool(args.normalize),
            workers=args.workers, timeout=args.timeout)
    except (errors.ConfigError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None
    out, report = complete(cloud, config, seed=args.seed)
    save_cloud(out, args.out)
    report_path = args.report or str(Path(args.out).with_suffix(".jsonl"))
    with open(report_path, "w") as fh:
        fh.write(report.to_jsonl())
    stats = report.residual_stats()
    _emit(points=len(out), max_residual=stats["max"], failed=len(report.failed_rows),
          report=report_path)
    return 0


_METRICS = {"cdl1": chamfer_l1, "cdl2": chamfer_l2, "fidelity": fidelity}


def _is_matrix(path):
    return str(path).lower().endswith((".escd", ".csv"))


def cmd_eval(args):
    if args.metric == "dmcd":
        if _is_matrix(args.pred) and _is_matrix(args.gt):
            D1, D2 = load_matrix(args.pred), load_matrix(args.gt)
        else:
            pred, gt = _load(args.pred), _load(args.gt)
            aset = load_anchors(args.anchors) if args.anchors else select_anchors(gt, args.k, "fps")
            D1, D2 = encode(pred, aset), encode(gt, aset)
        value = dmcd(D1, D2)
    else:
        value = _METRICS[args.metric](_load(args.pred), _load(args.gt))
    _emit(metric=args.metric, value=float(value))
    return 0


def cmd_perturb(args):
    cloud = _load(args.input)
    _check_out(args.out)
    if args.noise_sigma is not None:
        out = add_gaussian_noise(cloud, args.noise_sigma, args.seed)
        what = f"noise_sigma={args.noise_sigma!r}"
    elif args.remove_ratio is not None:
        out = remove_points(cloud, args.remove_ratio, args.seed)
        what = f"remove_ratio={args.remove_ratio!r}"
    else:
        if args.rotate == "random":
            T = random_rotation(args.seed)
        else:
            try:
                T = parse_rotation_degrees(args.rotate)
            except ValueError as exc:
                raise CliError(EXIT_CONFIG, "config", str(exc)) from None
        out = apply_rigid(cloud, T)
        what = f"rotate={args.rotate}"
    save_cloud(out, args.out)
    print(f"{what} points={len(out)} seed={args.seed} out={args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_anchor_opts(p, strategy_default="ball_query"):
    p.add_argument("--k", type=_positive_int, default=8)
    p.add_argument("--strategy", type=_strategy, default=strategy_default)
    p.add_argument("--radius", type=_nonneg_float, default=0.075)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--knn", type=_positive_int, default=16)


def build_parser():
    parser = _Parser(prog="anchorpc", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("anchors", help="select anchor points")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _add_anchor_opts(p)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("encode", help="cloud + anchors -> ESCD")
    p.add_argument("--input", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    defaults = SolverOptions()
    p = sub.add_parser("decode", help="ESCD -> cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=_positive_int, default=defaults.max_iters)
    p.add_argument("--tol", type=float, default=defaults.residual_tol)
    p.add_argument("--workers", type=_positive_int, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("complete", help="run the full pipeline")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--m", type=_positive_int, default=16384)
    p.add_argument("--n", type=_positive_int, default=2048)
    _add_anchor_opts(p)
    p.add_argument("--predictor", default="identity")
    p.add_argument("--normalize", action="store_true", default=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=_positive_int, default=defaults.max_iters)
    p.add_argument("--tol", type=float, default=defaults.residual_tol)
    p.add_argument("--workers", type=_positive_int, default=None)
    p.add_argument("--timeout", type=float, default=300.0)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("eval", help="compare two clouds")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metric", choices=["cdl1", "cdl2", "fidelity", "dmcd"], default="cdl1")
    p.add_argument("--anchors", help="anchors for dmcd on clouds (default: FPS on --gt)")
    p.add_argument("--k", type=_positive_int, default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="noise, removal or rotation")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--noise-sigma", type=_nonneg_float)
    g.add_argument("--remove-ratio", type=float)
    g.add_argument("--rotate", help="'random' or 'rx,ry,rz' in degrees")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_perturb)
    return parser


def read_config_file(path):
    cfg = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read config {path}: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise CliError(EXIT_CONFIG, "config", f"{path}:{lineno}: expected key=value")
            cfg[key.strip().replace("-", "_")] = val.strip()
    return cfg


def _apply_config(parser, argv, cfg):
    # find the chosen subparser and push file values in as its defaults
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((tok for tok in argv if tok in sub_action.choices), None)
    if command is None:
        return
    sp = sub_action.choices[command]
    known = {a.dest: a for a in sp._actions}
    aliases = {"predictor": "predictor", "m_out": "m", "n_in": "n", "k_nn": "knn",
               "max_iters": "max_iters"}
    updates = {}
    for key, val in cfg.items():
        dest = aliases.get(key, key)
        if dest not in known or dest in ("help", "func"):
            raise CliError(EXIT_CONFIG, "config", f"unknown config key {key!r} for {command}")
        action = known[dest]
        if isinstance(action, argparse._StoreTrueAction):
            updates[dest] = _bool(val)
        else:
            updates[dest] = val
        action.required = False
    sp.set_defaults(**updates)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = _Parser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, argv, read_config_file(known.config))
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except PipelineError as exc:
        code, kind = _classify(exc.cause)
        return _fail(code, kind, f"stage={exc.stage} {exc.cause}")
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code, kind = _classify(exc)
        if code is None:
            raise
        return _fail(code, kind, str(exc))


def _classify(exc):
    if isinstance(exc, (errors.ExternalFailed, errors.BadExternalOutput)):
        return EXIT_EXTERNAL, "external"
    if isinstance(exc, errors.ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (OSError, errors.ParseError, errors.FormatError, errors.EmptyCloud)):
        return EXIT_IO, "io"
    if isinstance(exc, (errors.AnchorPCError, ValueError)):
        return EXIT_ALGO, "algorithm"
    return None, None


def _fail(code, kind, message):
    message = " ".join(str(message).split())
    print(f"error={kind} message={message}", file=sys.stderr)
    return code


def run():  # console-script entry
    sys.exit(main())


if __name__ == "__main__":
    run()
