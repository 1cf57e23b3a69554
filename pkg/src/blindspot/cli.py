"""Command-line entry point.

Exit codes: 0 success, 2 input/config error, 3 degenerate numerical input,
4 no null space (the expected outcome for a full-rank head), 5 training
divergence. JSON goes to stdout as a single document; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import linalg
from .errors import (
    ConfigError,
    DegenerateSpectrum,
    MatrixParseError,
    NoNullSpace,
    ShapeError,
    TrainingDiverged,
)
from .evalharness import (
    DatasetSpec,
    load_default_config,
    make_dataset,
    parse_experiment_config,
    run_blindspot_experiment,
    write_report,
)
from .regularizers import cn_penalty, finite_diff_check, lsv_penalty
from .trainer import TrainConfig, load_model, micro_gradient_check, save_model, train
from .vulnerability import lsv_attack, nsv_attack, random_perp_attack

log = logging.getLogger("blindspot")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_NO_NULL_SPACE = 4
EXIT_DIVERGED = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def resolve_seed(flag: int | None, fallback: int | None = None) -> int:
    """Seed precedence: --seed flag, then FEVER_SEED, then the config's seed, then 0."""
    if flag is not None:
        return flag
    env = os.environ.get("FEVER_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CliError(EXIT_INPUT, f"FEVER_SEED must be an integer, got {env!r}") from None
    return fallback if fallback is not None else 0


def _announce_seed(seed: int) -> None:
    print(f"seed: {seed}", file=sys.stderr)


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{path} is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------


def cmd_audit(args) -> int:
    _announce_seed(resolve_seed(None))
    try:
        w = linalg.read_matrix(args.matrix_path)
    except MatrixParseError as exc:
        raise CliError(EXIT_INPUT, f"{args.matrix_path}: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {args.matrix_path}: {exc}") from None
    s = linalg.svd(w)
    r = linalg.rank(s, args.rel_tol)
    try:
        ext = linalg.sigma_extremes(s, args.rel_tol)
    except DegenerateSpectrum:
        raise CliError(EXIT_DEGENERATE, "matrix is zero at the rank tolerance") from None
    _emit({
        "rank": r,
        "nullity": w.shape[0] - r,
        "sigma_min": ext.sigma_min,
        "sigma_max": ext.sigma_max,
        "kappa": ext.sigma_max / ext.sigma_min,
    })
    return EXIT_OK


ATTACK_KINDS = ("lsv", "null-space", "random")


def cmd_attack(args) -> int:
    seed = resolve_seed(args.seed)
    _announce_seed(seed)
    try:
        model = load_model(args.model_path)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {args.model_path}: {exc}") from None
    except (ConfigError, ShapeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"{args.model_path}: {exc}") from None
    head = model.head
    if args.features is None:
        features = np.zeros(head.d_in)
    else:
        try:
            features = np.array([float(t) for t in args.features.split(",")])
        except ValueError:
            raise CliError(EXIT_INPUT, "--features must be comma-separated numbers") from None
        if features.shape != (head.d_in,):
            raise CliError(EXIT_INPUT, f"--features has {features.size} values, head expects {head.d_in}")
    if not args.d_b > 0:
        raise CliError(EXIT_INPUT, "--d-b must be positive")
    try:
        if args.kind == "null-space":
            res = nsv_attack(head, features, args.d_b, seed)
        elif args.kind == "lsv":
            res = lsv_attack(head, features, args.d_b)
        else:
            res = random_perp_attack(head, features, args.d_b, seed)
    except NoNullSpace as exc:
        print(f"NoNullSpace: {exc}", file=sys.stderr)
        return EXIT_NO_NULL_SPACE
    except DegenerateSpectrum as exc:
        raise CliError(EXIT_DEGENERATE, str(exc)) from None
    text = json.dumps(res.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    allowed = {"seed", "dataset", "model", "train"}
    if set(doc) - allowed:
        raise CliError(EXIT_INPUT, f"unknown config keys: {sorted(set(doc) - allowed)}")
    seed = resolve_seed(args.seed, doc.get("seed"))
    _announce_seed(seed)
    try:
        spec = DatasetSpec.from_dict(doc.get("dataset", {}))
        model_doc = doc.get("model", {})
        hidden = [int(h) for h in model_doc.get("hidden", [16])]
        feature_dim = int(model_doc.get("feature_dim", 8))
        tc = TrainConfig.from_dict({**doc.get("train", {}), "seed": seed})
        data = make_dataset(spec, seed)
        report = train(tc, data.x_train, data.y_train, [spec.input_dim, *hidden, feature_dim],
                       spec.n_classes)
    except ConfigError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    except TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DIVERGED
    if args.out:
        save_model(report.model, args.out)
    test_acc = float(np.mean(report.model.predict(data.x_test) == data.y_test))
    _emit({"seed": seed, "config": tc.to_dict(), "test_accuracy": test_acc, **report.to_dict()})
    return EXIT_OK


def cmd_experiment(args) -> int:
    doc = _read_json(args.config) if args.config else load_default_config()
    fallback = doc.get("seed") if isinstance(doc, dict) else None
    seed = resolve_seed(args.seed, fallback)
    _announce_seed(seed)
    try:
        cfg = parse_experiment_config(doc, seed=seed)
    except ConfigError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    report = run_blindspot_experiment(cfg)
    rpath, cpath = write_report(report, args.out_dir)
    log.info("wrote %s and %s", rpath, cpath)
    _emit({"report": str(rpath), "energies": str(cpath), "seed": seed,
           "diverged": [v.name for v in report.variants if v.diverged]})
    return EXIT_OK


def cmd_check_grads(args) -> int:
    seed = resolve_seed(args.seed)
    _announce_seed(seed)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((args.rows, args.cols))
    out = {}
    for name, fn in (("lsv_penalty", lsv_penalty), ("cn_penalty", cn_penalty)):
        rep = finite_diff_check(fn, w, args.step)
        out[name] = {"max_rel_err": rep.max_rel_err, "n_checked": rep.n_checked,
                     "n_skipped": rep.n_skipped, "degenerate": bool(rep.degenerate)}
    micro = micro_gradient_check(seed)
    out["micro_model"] = {"max_rel_err": micro.max_rel_err, "n_params": micro.n_params}
    out["seed"] = seed
    _emit(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blindspot", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("audit", help="rank, nullity and extreme singular values of a head matrix")
    a.add_argument("matrix_path")
    a.add_argument("--rel-tol", type=float, default=linalg.DEFAULT_REL_TOL)
    a.set_defaults(func=cmd_audit)

    t = sub.add_parser("train", help="train one model on the synthetic blobs")
    t.add_argument("--config", help="JSON with optional seed/dataset/model/train sections")
    t.add_argument("--out", help="where to write the model JSON")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("attack", help="construct a blind-spot perturbation for a saved model")
    k.add_argument("model_path")
    k.add_argument("--kind", choices=ATTACK_KINDS, required=True)
    k.add_argument("--d-b", type=float, required=True, dest="d_b")
    k.add_argument("--seed", type=int)
    k.add_argument("--features", help="comma-separated anchor features (head input space); default zeros")
    k.add_argument("--out")
    k.set_defaults(func=cmd_attack)

    e = sub.add_parser("experiment", help="run the baseline / NSR / LSVR / CNR grid")
    e.add_argument("--config", help="experiment JSON; defaults to the bundled config")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_experiment)

    g = sub.add_parser("check-grads", help="finite-difference checks of the analytic gradients")
    g.add_argument("--seed", type=int)
    g.add_argument("--rows", type=int, default=8)
    g.add_argument("--cols", type=int, default=3)
    g.add_argument("--step", type=float, default=1e-5)
    g.set_defaults(func=cmd_check_grads)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
