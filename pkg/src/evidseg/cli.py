"""Command-line pipeline: phantom generation, training, prediction,
evaluation and gradient checking.

Exit codes: 0 success, 1 validation/config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import metrics as mx
from . import trainer as tr
from . import volume_io as vio
from .config import ConfigError, RunConfig
from .evidential_head import decide
from .seeding import derive_seed

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# -- phantom ---------------------------------------------------------------

def cmd_phantom(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty (use --force)")
    dims = _parse_dims(args.dims)
    lo, hi = args.lesions
    cases = []
    for i in range(args.count):
        case = vio.generate_phantom(derive_seed(args.seed, f"case:{i}"),
                                    dims, (lo, hi))
        case.id = f"case_{i:04d}"
        cases.append(case)
    ids = [c.id for c in cases]
    train, val, test = vio.split_dataset(
        ids, ratios=tuple(args.ratios), seed=derive_seed(args.seed, "split"))
    vio.write_dataset(cases, {"train": train, "val": val, "test": test}, out)
    print(f"wrote {len(cases)} cases to {out} "
          f"(split {len(train)}/{len(val)}/{len(test)})")


# -- train -----------------------------------------------------------------

def load_split_cases(data_dir, config: RunConfig):
    cases, splits = vio.read_dataset(data_dir)
    return {name: [cases[cid] for cid in ids] for name, ids in splits.items()}


def cmd_train(args):
    config = RunConfig.from_file(args.config)
    split = load_split_cases(args.data, config)
    if not split.get("train") or not split.get("val"):
        raise CliError("dataset must provide nonempty train and val splits")
    train_cfg = config.train_config()
    model = tr.Model.create(config.backbone_config(), config.head,
                            train_cfg, train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_file = open(log_path, "w")

    def log_fn(record):
        log_file.write(json.dumps(record) + "\n")
        log_file.flush()
        print(f"epoch {record['epoch']:3d}  total {record['total']:.4f}  "
              f"val_dice {record['val_dice']:.4f}  "
              f"val_ignorance {record['val_mean_ignorance']:.4f}")

    try:
        best_params, best_epoch, _ = tr.train(
            model, split["train"], split["val"], train_cfg,
            gradcheck_gate=not args.skip_gradcheck, log_fn=log_fn)
    except tr.TrainingError as e:
        raise CliError(str(e), code=EXIT_NUMERIC) from e
    finally:
        log_file.close()
    model.params = best_params
    ckpt_path = out / "checkpoint.evckpt"
    tr.save_checkpoint(ckpt_path, model, train_cfg, best_epoch)
    print(f"best checkpoint (epoch {best_epoch}) -> {ckpt_path}")


# -- predict ---------------------------------------------------------------

def _predict_masses_for_case(model, train_cfg, case, stride=16):
    x, _ = tr.prepare_case(case)
    patch = tuple(min(p, d) for p, d in zip(train_cfg.patch_dims,
                                            case.pet.dims))
    return mx.sliding_window_masses(
        lambda p: model.predict_masses(p), x,
        patch_dims=patch, stride=stride)


def cmd_predict(args):
    model, train_cfg, _ = tr.load_checkpoint(args.ckpt)
    case = vio.read_case(args.case)
    masses = _predict_masses_for_case(model, train_cfg, case,
                                      stride=args.stride)
    binary, three_way, uncertainty = decide(masses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims, spacing = case.pet.dims, case.pet.spacing
    vio.write_volume(vio.Volume(dims, spacing, "MASK", binary),
                     out / "binary.evol")
    vio.write_volume(vio.Volume(dims, spacing, "MAP", three_way),
                     out / "threeway.evol")
    vio.write_volume(vio.Volume(dims, spacing, "MAP", uncertainty),
                     out / "uncertainty.evol")
    print(f"wrote binary/threeway/uncertainty volumes to {out}")


# -- eval ------------------------------------------------------------------

def cmd_eval(args):
    model, train_cfg, _ = tr.load_checkpoint(args.ckpt)
    config = RunConfig({})
    split = load_split_cases(args.data, config)
    if args.split not in split:
        raise CliError(f"split {args.split!r} not in dataset manifest")
    cases = split[args.split]
    if not cases:
        raise CliError(f"split {args.split!r} is empty")

    def predict_binary(case):
        masses = _predict_masses_for_case(model, train_cfg, case,
                                          stride=args.stride)
        return decide(masses)[0]

    report = mx.evaluate_cases(predict_binary, cases)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=1))
    (out / "report.txt").write_text(report.as_table() + "\n")
    print(report.as_table())


# -- gradcheck -------------------------------------------------------------

def cmd_gradcheck(args):
    if args.config:
        RunConfig.from_file(args.config)  # validated; suite uses tiny sizes
    results = gc.run_suite(instances=args.instances,
                           inject_fault=args.inject_fault)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<30} max_rel_err {r.max_error:.3e}")
        failed = failed or not r.passed
    if failed:
        raise CliError("gradient check failed", code=EXIT_NUMERIC)
    print(f"all {len(results)} op kinds pass "
          f"(step {gc.STEP:g}, tol {gc.TOL:g})")


# -- argument parsing ------------------------------------------------------

def _parse_dims(text):
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise CliError(f"bad dims {text!r}; expected X,Y,Z")
    if len(dims) != 3:
        raise CliError(f"bad dims {text!r}; expected three extents")
    return dims


def build_parser():
    parser = argparse.ArgumentParser(
        prog="evidseg",
        description="Evidential 3D PET/CT segmentation with uncertainty maps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--dims", default="32,32,32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lesions", type=int, nargs=2, default=(1, 3),
                   metavar=("MIN", "MAX"))
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-gradcheck", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="predict maps for one case")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=16)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default="eval_out")
    p.add_argument("--stride", type=int, default=16)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--config", default=None)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--inject-fault", default=None, metavar="OP",
                   help="corrupt one gradient of OP to prove the check bites")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, vio.VolumeFormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
