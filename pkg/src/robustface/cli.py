"""Command-line entry point: ``robustface synth | train | evaluate | attack``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite values, perturbation budget violations).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import types
import typing
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, audit_budget, perturb, pgd
from .dataset import (
    FaceDataset,
    filter_min_images,
    generate_synthetic,
    load_dataset,
    quantize,
    split_train_val,
    write_dataset,
    write_image,
)
from .errors import BudgetError, CheckpointError, ConfigError, DatasetError, NumericError
from .evaluation import EVAL_ATTACK, VARIANTS, evaluate, evaluation_pool
from .model import EncoderConfig, forward_embed, load_checkpoint, save_checkpoint
from .pipeline import (
    BASELINE,
    FINETUNE,
    PRETRAIN,
    STANDARD,
    TrainConfig,
    finetune_triplet_adversarial,
    pretrain_contrastive_adversarial,
    train_standard,
    train_triplet_adversarial_baseline,
    with_overrides,
)
from .tensor import Tensor

log = logging.getLogger("robustface")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODES = ("standard", "triplet-adv", "pretrain", "finetune", "pretrain-semi")
PRESETS = {
    "standard": STANDARD,
    "triplet-adv": BASELINE,
    "pretrain": PRETRAIN,
    "finetune": FINETUNE,
    "pretrain-semi": with_overrides(PRETRAIN, label_fraction=0.1),
}
LOCK_NAME = ".lock"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    mode: str = "standard"
    manifest: str = ""
    run_dir: str = ""
    init: str | None = None
    min_images: int = 2
    val_fraction: float = 0.0
    eval_triplets: int = 200
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = STANDARD

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("/mode", f"must be one of {', '.join(MODES)}")
        if self.min_images < 2:
            raise ConfigError("/min_images", "must be >= 2 for triplet sampling")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("/val_fraction", "must lie in [0, 1)")
        if self.eval_triplets < 1:
            raise ConfigError("/eval_triplets", "must be >= 1")
        if self.mode == "pretrain" and self.train.label_fraction > 0:
            raise ConfigError("/train/label_fraction", "mode pretrain is unsupervised; use pretrain-semi")
        if self.mode == "pretrain-semi" and self.train.label_fraction == 0:
            raise ConfigError("/train/label_fraction", "mode pretrain-semi needs label_fraction > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _convert(tp, value, pointer: str):
    """Check ``value`` against the annotation ``tp`` (recursing into dataclasses)."""
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, pointer)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _convert(inner, value, pointer)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(pointer, "expected an array")
        (inner, _) = typing.get_args(tp)
        return tuple(_convert(inner, v, f"{pointer}/{i}") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(pointer, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(pointer, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(pointer, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(pointer, "expected a string")
        return value
    return value


def _build(cls, data, pointer: str = "", base=None):
    """Instantiate dataclass ``cls`` from ``data``, overlaying it on ``base`` (or the class defaults)."""
    if not isinstance(data, dict):
        raise ConfigError(pointer, "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{pointer}/{unknown[0]}", "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        sub = f"{pointer}/{f.name}"
        inner_base = getattr(base, f.name) if base is not None else None
        if dataclasses.is_dataclass(hints[f.name]) and inner_base is not None:
            kwargs[f.name] = _build(hints[f.name], data[f.name], sub, inner_base)
        else:
            kwargs[f.name] = _convert(hints[f.name], data[f.name], sub)
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(pointer + e.pointer, e.detail) from None
    except TypeError as e:
        raise ConfigError(pointer, str(e)) from None


def parse_run_config(data: dict, mode: str | None = None) -> RunConfig:
    """Validate a JSON document; training defaults come from the preset of the selected mode."""
    if not isinstance(data, dict):
        raise ConfigError("", "expected an object")
    mode = mode or data.get("mode", "standard")
    if mode not in MODES:
        raise ConfigError("/mode", f"must be one of {', '.join(MODES)}")
    base = RunConfig(mode=mode, train=PRESETS[mode])
    return _build(RunConfig, {**data, "mode": mode}, "", base)


def load_run_config(path, mode: str | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    return parse_run_config(data, mode)


# ---------------------------------------------------------------------------
# Run directory handling


@contextmanager
def run_lock(run_dir: Path):
    """Hold a sentinel file in ``run_dir`` so two processes never share it."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{run_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(p.name != LOCK_NAME for p in path.iterdir()):
        if not force:
            raise UsageError(f"{path} is not empty (use --force to overwrite)")
        for p in path.iterdir():
            if p.name == LOCK_NAME:
                continue
            shutil.rmtree(p) if p.is_dir() else p.unlink()


def _load_data(manifest: str, min_images: int = 2) -> FaceDataset:
    if not manifest:
        raise UsageError("no dataset given (--data or 'manifest' in the config)")
    ds = load_dataset(manifest)
    return filter_min_images(ds, min_images)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    if args.identities < 2:
        raise UsageError("--identities must be >= 2 (triplets need a negative identity)")
    if args.per_identity < 2:
        raise UsageError("--per-identity must be >= 2 (triplets need a positive)")
    out = Path(args.out)
    _prepare_dir(out, args.force)
    ds = generate_synthetic(
        num_identities=args.identities,
        images_per_identity=args.per_identity,
        height=args.size,
        width=args.size,
        noise_sigma=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = write_dataset(ds, out)
    print(f"wrote {len(ds)} images of {ds.num_identities} identities to {manifest}")
    return EXIT_OK


def _train_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError("", f"{args.config}: invalid JSON ({e.msg} at line {e.lineno})") from None
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e.strerror}") from None
        if not isinstance(data, dict):
            raise ConfigError("", "expected an object")
    data = dict(data)
    train = dict(data.get("train", {}))
    if args.seed is not None:
        train["seed"] = args.seed
    if args.epochs is not None:
        train["epochs"] = args.epochs
    if args.label_fraction is not None:
        train["label_fraction"] = args.label_fraction
    if train:
        data["train"] = train
    if args.data:
        data["manifest"] = args.data
    if args.out:
        data["run_dir"] = args.out
    if args.init:
        data["init"] = args.init
    cfg = parse_run_config(data, args.mode or data.get("mode"))
    if not cfg.run_dir:
        raise UsageError("no run directory given (--out or 'run_dir' in the config)")
    if cfg.mode == "finetune" and not cfg.init:
        raise UsageError("mode finetune requires --init CHECKPOINT")
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = _load_data(cfg.manifest, cfg.min_images)
    init = None
    if cfg.init:
        if not Path(cfg.init).is_file():
            raise UsageError(f"init checkpoint not found: {cfg.init}")
        init = load_checkpoint(cfg.init)
        encoder = init.config
    else:
        encoder = dataclasses.replace(cfg.encoder, input_dim=ds.input_dim)
    if encoder.input_dim != ds.input_dim:
        raise ConfigError("/encoder/input_dim", f"model expects {encoder.input_dim} inputs, images have {ds.input_dim}")
    cfg = dataclasses.replace(cfg, encoder=encoder)

    train_ds, evaluator = ds, None
    if cfg.val_fraction > 0:
        train_ds, val_ds = split_train_val(ds, cfg.val_fraction, seed=cfg.train.seed)
        pool = evaluation_pool(val_ds, cfg.eval_triplets, cfg.train.seed)

        def evaluator(params):
            r = evaluate(params, val_ds, triplets=pool)
            return r.sa, r.ra, r.sra

    run_dir = Path(cfg.run_dir)
    with run_lock(run_dir):
        _prepare_dir(run_dir, args.force)
        (run_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        kw = dict(run_dir=run_dir, evaluator=evaluator)
        if cfg.mode == "standard":
            result = train_standard(train_ds, cfg.train, encoder=encoder, init=init, **kw)
        elif cfg.mode == "triplet-adv":
            result = train_triplet_adversarial_baseline(train_ds, cfg.train, init=init, encoder=encoder, **kw)
        elif cfg.mode == "finetune":
            result = finetune_triplet_adversarial(train_ds, cfg.train, init=init, **kw)
        else:
            result = pretrain_contrastive_adversarial(train_ds, cfg.train, encoder=encoder, init=init, **kw)
        if cfg.train.epochs == 0:
            save_checkpoint(result.checkpoint, run_dir / f"epoch_{0:05d}.ckpt")
    last = result.logs[-1].loss if result.logs else float("nan")
    print(f"{cfg.mode}: {len(result.logs)} epochs, final loss {last:.5f}, run directory {run_dir}")
    return EXIT_OK


def _attack_config(args) -> AttackConfig:
    try:
        return AttackConfig(
            epsilon=args.epsilon,
            alpha=args.alpha,
            iterations=args.iterations,
            random_start=args.random_start,
            seed=args.seed if args.seed is not None else 0,
        )
    except ConfigError as e:
        raise ConfigError("/attack" + e.pointer, e.detail) from None


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_evaluate(args) -> int:
    ckpt = _load_model(args.checkpoint)
    ds = _load_data(args.data)
    if ckpt.config.input_dim != ds.input_dim:
        raise DatasetError(f"checkpoint expects {ckpt.config.input_dim} inputs, images have {ds.input_dim}")
    attack = _attack_config(args)
    seed = args.seed if args.seed is not None else 0
    report = evaluate(
        ckpt.params, ds, attack, n_triplets=args.triplets, seed=seed, variant=args.variant,
        tags={"checkpoint": str(args.checkpoint), "dataset": str(args.data), "seed": seed},
    )
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_json() if args.json else report.table())
    return EXIT_OK


def _instance_objective(params, z_clean: Tensor):
    # label-free: push each embedding away from its own clean embedding
    def objective(x: Tensor) -> Tensor:
        return T.mean(T.squared_distance(forward_embed(params, x), z_clean))

    return objective


def cmd_attack(args) -> int:
    ckpt = _load_model(args.checkpoint)
    ds = load_dataset(args.data)
    if ckpt.config.input_dim != ds.input_dim:
        raise DatasetError(f"checkpoint expects {ckpt.config.input_dim} inputs, images have {ds.input_dim}")
    attack = _attack_config(args)
    out = Path(args.out)
    flat = ds.flat()
    advs, files = [], []
    rng = np.random.default_rng(attack.seed)
    with T.deterministic(), audit_budget() as audit:
        for start in range(0, len(ds), args.batch_size):
            idx = np.arange(start, min(start + args.batch_size, len(ds)))
            x = Tensor(flat[idx])
            z = forward_embed(ckpt.params, x)
            delta = pgd(_instance_objective(ckpt.params, z), x, attack, rng)
            advs.append(perturb(x, delta).data)
    adv = np.concatenate(advs).reshape(ds.images.shape)
    if not audit.ok:  # pragma: no cover - pgd raises first
        raise BudgetError("; ".join(audit.violations))

    quantized = quantize(adv).astype(np.float32) / np.float32(255)
    for i, rel in enumerate(ds.paths):
        d = adv[i] - ds.images[i]
        files.append(
            {
                "path": _adv_name(rel),
                "source": rel,
                "max_abs_delta": float(np.abs(d).max()),
                "max_abs_delta_quantized": float(np.abs(quantized[i] - ds.images[i]).max()),
                "quantization_error": float(np.abs(quantized[i] - adv[i]).max()),
            }
        )
    report = {
        "attack": attack.to_dict(),
        "objective": "embedding self-distance",
        "images": len(ds),
        "max_abs_delta": max(f["max_abs_delta"] for f in files),
        "max_quantization_error": max(f["quantization_error"] for f in files),
        "within_budget": bool(audit.ok and audit.max_excess <= 1e-7),
        "files": files,
    }
    _prepare_dir(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, f in enumerate(files):
        target = out / f["path"]
        target.parent.mkdir(parents=True, exist_ok=True)
        write_image(target, adv[i])
        rows.append(f"{f['path']},{int(ds.labels[i])}\n")
    with open(out / "manifest.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("path,identity\n")
        fh.writelines(rows)
    (out / "audit.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(files)} perturbed images to {out}, max |delta| {report['max_abs_delta']:.6f} <= {attack.epsilon:.6f}")
    return EXIT_OK


def _adv_name(rel: str) -> str:
    p = Path(rel)
    return str(p.with_name(p.stem + ".adv.pgm"))


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="output directory or file")
    p.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="pin BLAS to one thread for bitwise reproducibility (default on)",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")


def _attack_flags(p: argparse.ArgumentParser, random_start: bool) -> None:
    p.add_argument("--epsilon", type=float, default=EVAL_ATTACK.epsilon)
    p.add_argument("--alpha", type=float, default=EVAL_ATTACK.alpha)
    p.add_argument("--iterations", type=int, default=EVAL_ATTACK.iterations)
    p.add_argument("--random-start", action=argparse.BooleanOptionalAction, default=random_start)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustface", description="Adversarially robust face-embedding training at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic face dataset")
    _common(p)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--per-identity", type=int, default=10)
    p.add_argument("--size", type=int, default=16, help="image height and width")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run a training procedure")
    p.add_argument("mode", nargs="?", choices=MODES, help="training procedure (default: config 'mode' or standard)")
    _common(p)
    p.add_argument("--data", help="dataset manifest (path,identity CSV)")
    p.add_argument("--init", help="checkpoint to start from (required for finetune)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--label-fraction", type=float)
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="clean and robust triplet accuracy of a checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    _attack_flags(p, random_start=EVAL_ATTACK.random_start)
    p.add_argument("--triplets", type=int, default=1000)
    p.add_argument("--variant", choices=VARIANTS, default="attacked_positive")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack", help="write PGD-perturbed copies of a dataset")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    _attack_flags(p, random_start=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_attack)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command in ("evaluate", "attack") and args.config:
        print(f"robustface {args.command}: --config is only used by train", file=sys.stderr)
        return EXIT_USAGE
    if args.command in ("synth", "attack") and not args.out:
        print(f"robustface {args.command}: --out is required", file=sys.stderr)
        return EXIT_USAGE
    previous = T.set_deterministic(args.deterministic)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"robustface {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as e:
        print(f"robustface {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, BudgetError) as e:
        print(f"robustface {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        T.set_deterministic(previous)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
