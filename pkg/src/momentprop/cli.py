"""Command-line surface: generate, train, predict, evaluate, gradcheck.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 i/o error.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import autodiff as ad
from . import bayes, datagen, runio, systems

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

# finite-difference roundoff on near-zero gradients caps the audit resolution
GRADCHECK_GATE = 5e-4

_NUMERIC_ERRORS = (datagen.DatagenError, bayes.BayesError, systems.SystemError,
                   ad.GradcheckError)


def cmd_generate(args) -> int:
    config = runio.load_config(args.config)
    man = runio.generate(config, args.out, seed=args.seed)
    print(f"config {man['config_hash'][:12]} seed {man['seed']}")
    print(f"wrote {man['n_entries']} observations over "
          f"{man['grid']['n_t']} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = runio.load_config(args.config)
    man = runio.train_run(config, args.data, args.run, seed=args.seed)
    for m in man["members"]:
        if m["status"] == "ok":
            print(f"member {m['index']}: ok, final loss {m['final_loss']:.6g}")
        else:
            print(f"member {m['index']}: failed ({m['error']})")
    print(f"run written to {args.run}")
    return EXIT_OK


def cmd_predict(args) -> int:
    man = runio.predict_run(args.run, args.out, ic_path=args.ic,
                            steps=args.steps, seed=args.seed)
    print(f"{man['steps']} steps, {man['draws_used']} draws used, "
          f"{man['draws_failed']} failed")
    print(f"predictions written to {args.out}")
    return EXIT_OK


def _resolve_truth(path: str) -> str:
    if os.path.isdir(path):
        man = runio.read_json(os.path.join(path, "manifest.json"))
        return os.path.join(path, man["files"]["truth"])
    return path


def cmd_evaluate(args) -> int:
    metrics = runio.evaluate_run(args.run, _resolve_truth(args.data), args.out)
    for name in ("train", "forecast", "all"):
        w = metrics["windows"].get(name)
        if w is None:
            continue
        rmse = ", ".join(f"{x:.4g}" for x in w["rmse"])
        corr = w["spearman_abs_err_std"]
        corr_s = "undefined" if corr is None else f"{corr:.3f}"
        print(f"{name}: {w['n_frames']} frames, rmse [{rmse}], "
              f"coverage {w['coverage']:.4f}, spearman {corr_s}")
    print(f"metrics written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = runio.load_config(args.config)
    report = runio.gradcheck_run(config, steps=args.steps, seed=args.seed)
    print(f"{report['n_params']} parameters, {report['observations']} "
          f"observations over {report['steps']} steps, "
          f"loss {report['loss']:.6g}")
    for name, err in report["segments"].items():
        shown = "(empty)" if err is None else f"{err:.3e}"
        print(f"  {name}: {shown}")
    verdict = "ok" if report["overall"] < GRADCHECK_GATE else "FAILED"
    print(f"overall {report['overall']:.3e} ({report['elapsed_s']:.2f} s): {verdict}")
    return EXIT_OK if verdict == "ok" else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentprop",
        description="Hybrid moment-propagation experiments: data generation, "
                    "ensemble training, posterior prediction, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="solve the truth and write a dataset")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the ensemble against a dataset")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--data", required=True, help="generated dataset directory")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="posterior-averaged rollout")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--out", required=True, help="prediction output directory")
    p.add_argument("--ic", help="initial-condition file (defaults to the run's)")
    p.add_argument("--steps", type=int, help="rollout steps (default from config)")
    p.add_argument("--seed", type=int, help="override predict.seed")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics against a truth file")
    p.add_argument("--run", required=True, help="prediction directory")
    p.add_argument("--data", required=True,
                   help="truth file, or a dataset directory holding one")
    p.add_argument("--out", required=True, help="metrics output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--steps", type=int, default=10, help="rollout length")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except runio.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except runio.RunIoError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
