"""``svhscore`` command line: one executable, one config file, one seed.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .errors import PipelineError, ValidationError

log = logging.getLogger("svhscore")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (see `config --print-defaults`)")
    p.add_argument("--seed", type=int, help="single source of randomness (overrides config)")
    p.add_argument("--threads", type=int, default=1, help="worker pool size; results do not depend on it")
    p.add_argument("--out", type=Path, help="output directory (overrides paths.out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svhscore", description="Multi-task joint damage scoring on limb radiographs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--patients", type=int, help="number of patients (overrides synth.n_patients)")

    p = sub.add_parser("preprocess", help="edge bbox + crop + resize every image of a dataset")
    _common(p)
    p.add_argument("--data", type=Path, help="input dataset directory")

    p = sub.add_parser("train", help="fit one model")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--all-data", action="store_true", help="train on every patient (no validation fold)")

    p = sub.add_parser("train-ensemble", help="fit N models that differ only in seed")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--epochs", type=int)
    p.add_argument("--all-data", action="store_true")

    for name, help_ in (("predict", "write a prediction CSV"), ("evaluate", "write an EvalReport JSON")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--data", type=Path)
        p.add_argument("--model", type=Path, action="append", help="checkpoint (repeat for an ensemble)")
        p.add_argument("--ensemble", type=Path, help="directory of member_*.svhc checkpoints")
        p.add_argument(
            "--split",
            choices=("val", "train", "all"),
            default="all" if name == "predict" else "val",
            help="patients to score, using the configured fold split",
        )

    p = sub.add_parser("ablate", help="sweep label smoothing p or mask radius r")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--param", choices=("p", "r"), required=True)
    p.add_argument("--seeds", type=int, default=5, help="seeds per swept value")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("config", help="show configuration")
    _common(p)
    p.add_argument("--print-defaults", action="store_true")
    return parser


# ------------------------------------------------------------------ helpers


def _run_config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out is not None else Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(args, cfg) -> Path:
    return Path(args.data) if getattr(args, "data", None) is not None else Path(cfg.paths.data_dir)


def _schema(cfg):
    from .schema import load_manifest

    return load_manifest(cfg.paths.manifest)


def _load(args, cfg, schema):
    from .records import load_dataset

    data = load_dataset(_data_dir(args, cfg), schema)
    if not data:
        raise ValidationError(f"no patient records in {_data_dir(args, cfg)}")
    return data


def _train_cfg(args, cfg, **extra):
    overrides = dict(extra)
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "all_data", False):
        overrides["use_validation"] = False
    return cfg.train_config(**overrides)


def _members(args):
    from .model import load_checkpoint

    paths = list(args.model or [])
    if args.ensemble is not None:
        paths += sorted(Path(args.ensemble).glob("member_*.svhc"))
    if not paths:
        raise UsageError("give --model PATH (repeatable) or --ensemble DIR")
    members = []
    for p in paths:
        params, net_cfg, _ = load_checkpoint(p)
        members.append((params, net_cfg))
    return members


def _select(args, cfg, data):
    from .train import split_folds

    if args.split == "all":
        return data
    tcfg = cfg.train_config()
    train_ids, val_ids = split_folds([p.patient_id for p in data], tcfg.n_folds, tcfg.val_fold)
    keep = set(val_ids if args.split == "val" else train_ids)
    return [p for p in data if p.patient_id in keep]


def _score(args, cfg, schema):
    from .infer import ensemble_images
    from .train import patient_images

    data = _select(args, cfg, _load(args, cfg, schema))
    members = _members(args)
    net_cfg = members[0][1]
    images = patient_images(data, net_cfg)
    owners = [p.patient_id for p in data for _ in range(4)]
    preds = ensemble_images(members, images, schema)
    return owners, images, preds


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg):
    from .synth import generate_dataset

    scfg = dataclasses.replace(cfg.synth, seed=cfg.seed)
    if args.patients is not None:
        scfg = dataclasses.replace(scfg, n_patients=args.patients)
    out = _out_dir(args, cfg) if args.out is not None else Path(cfg.paths.data_dir)
    paths = generate_dataset(scfg, out, _schema(cfg))
    print(f"wrote {len(paths)} patients to {out}")


def cmd_preprocess(args, cfg):
    from .preprocess import normalize_image
    from .records import PatientRecord, save_patient

    schema = _schema(cfg)
    out = _out_dir(args, cfg)
    data = _load(args, cfg, schema)
    for rec in data:
        images = {k: normalize_image(im, cfg.network.in_h, cfg.network.in_w) for k, im in rec.images.items()}
        save_patient(PatientRecord(rec.patient_id, images), out)
    print(f"preprocessed {len(data)} patients into {out}")


def cmd_train(args, cfg):
    from .train import fit

    schema = _schema(cfg)
    res = fit(_load(args, cfg, schema), _train_cfg(args, cfg), cfg.network, _out_dir(args, cfg), schema, args.threads)
    print(f"checkpoint {res.checkpoint}")


def cmd_train_ensemble(args, cfg):
    from .train import fit

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    schema = _schema(cfg)
    data = _load(args, cfg, schema)
    out = _out_dir(args, cfg)
    for k in range(args.n):
        tcfg = _train_cfg(args, cfg, seed=cfg.seed + k)
        res = fit(data, tcfg, cfg.network, out, schema, args.threads, name=f"member_{k:02d}")
        print(f"member {k}: {res.checkpoint}")


def cmd_predict(args, cfg):
    from .infer import prediction_rows, write_predictions_csv

    owners, images, preds = _score(args, cfg, _schema(cfg))
    rows = [r for pid, im, pr in zip(owners, images, preds) for r in prediction_rows(pid, im, pr)]
    path = write_predictions_csv(_out_dir(args, cfg) / "predictions.csv", rows)
    print(f"wrote {path}")


def cmd_evaluate(args, cfg):
    from .evaluation import evaluate

    schema = _schema(cfg)
    _, images, preds = _score(args, cfg, schema)
    report = evaluate(preds, images, schema)
    path = _out_dir(args, cfg) / "eval_report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_ablate(args, cfg):
    from .evaluation import ablate

    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    schema = _schema(cfg)
    seeds = [cfg.seed + k for k in range(args.seeds)]
    rows = ablate(
        _load(args, cfg, schema), _train_cfg(args, cfg), cfg.network, args.param, seeds,
        out_dir=_out_dir(args, cfg), schema=schema, workers=args.threads,
    )
    print(f"{len(rows)} ablation rows written to {_out_dir(args, cfg)}")


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_gradcheck

    res = run_gradcheck(seed=cfg.seed)
    ok = res.max_rel_error < args.tol
    print(
        f"{'PASS' if ok else 'FAIL'} max relative error {res.max_rel_error:.3e} at {res.worst_param} "
        f"over {res.n_checked} parameters ({res.seconds:.1f}s)"
    )
    if not ok:
        raise PipelineError("gradient check failed")


def cmd_config(args, cfg):
    from .config import defaults_json

    if args.print_defaults:
        print(defaults_json())
    else:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "train-ensemble": cmd_train_ensemble,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "config": cmd_config,
}


def main(argv=None) -> int:
    level = os.environ.get("SVH_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _run_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
