"""``sfcm`` command line: train, eval, gradcheck, export-selector, synth-data, ablate.

Exit codes: 0 success, 1 a check failed (gradcheck mismatch, divergence),
2 usage, config or data error.  ``SFCM_THREADS`` caps BLAS threads (default 1).
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sfcmnet import gradsuite
from sfcmnet.data import Dataset, FormatError, gen_synthetic, load_cifar10_binary, read_tsr, write_tsr
from sfcmnet.models import ModelConfig, build_model, load_checkpoint, model_forward, save_checkpoint
from sfcmnet.train import DivergenceError, evaluate, history_csv, make_optimizer, train_loop

log = logging.getLogger("sfcmnet")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- run configuration -----------------------------------------------------------

DEFAULT_DATA = {"source": "synthetic", "n": 2000, "size": 16, "classes": 4, "fg_frac": 0.1,
                "clutter": 0.5, "seed": 0, "test_n": 1000}


@dataclass
class RunConfig:
    name: str = "run"
    model: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=lambda: {"name": "sgd", "lr": 0.1, "momentum": 0.9,
                                                     "weight_decay": 0.0})
    data: dict = field(default_factory=lambda: dict(DEFAULT_DATA))
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    val_frac: float = 0.1
    augment: bool = False
    out_dir: str = "runs/run"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(d))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict(self.model)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from e

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.val_frac < 1:
            raise ConfigError("val_frac must lie in [0, 1)")
        if self.optimizer.get("name") not in ("sgd", "adam"):
            raise ConfigError(f"optimizer.name must be 'sgd' or 'adam', got {self.optimizer.get('name')!r}")
        if self.data.get("source") not in ("synthetic", "cifar", "tsr"):
            raise ConfigError(f"data.source must be synthetic, cifar or tsr, got {self.data.get('source')!r}")
        self.model_config()


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return RunConfig.from_dict(raw)


def load_datasets(data: dict) -> tuple[Dataset, Dataset | None]:
    """(training pool, optional test set) for a ``data`` config section."""
    src = data["source"]
    if src == "synthetic":
        d = {**DEFAULT_DATA, **data}
        args = dict(size=d["size"], classes=d["classes"], fg_frac=d["fg_frac"], clutter=d["clutter"])
        train = gen_synthetic(d["n"], seed=d["seed"], **args)
        test = gen_synthetic(d["test_n"], seed=d["seed"] + 1000, **args) if d.get("test_n") else None
        return train, test
    if src == "cifar":
        train = load_cifar10_binary(data["path"], data.get("max_n"))
        test = None
        if data.get("test_path"):
            test = load_cifar10_binary(data["test_path"], data.get("test_max_n"))
        return train, test
    train = Dataset.from_tsr(read_tsr(data["path"]), data.get("classes"))
    test = None
    if data.get("test_path"):
        test = Dataset.from_tsr(read_tsr(data["test_path"]), train.classes)
    return train, test


def _check_compatible(mc: ModelConfig, ds: Dataset) -> None:
    _, c, h, w = ds.images.shape
    if (c, h, w) != (mc.input_channels, mc.image_size, mc.image_size):
        raise ConfigError(f"data images are {c}x{h}x{w} but the model expects "
                          f"{mc.input_channels}x{mc.image_size}x{mc.image_size}")
    if ds.classes > mc.classes:
        raise ConfigError(f"data has {ds.classes} classes but the model only {mc.classes}")


def run_training(cfg: RunConfig):
    mc = cfg.model_config()
    train, test = load_datasets(cfg.data)
    _check_compatible(mc, train)
    model = build_model(mc, cfg.seed)
    opt = dict(cfg.optimizer)
    optimizer = make_optimizer(opt.pop("name"), cfg.epochs, **opt)
    result = train_loop(model, train, optimizer, cfg.epochs, cfg.batch_size, cfg.seed,
                        cfg.val_frac, cfg.augment, test)
    return result


@contextlib.contextmanager
def thread_limit():
    raw = os.environ.get("SFCM_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"SFCM_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    for key in ("seed", "epochs"):
        if getattr(args, key) is not None:
            setattr(cfg, key, getattr(args, key))
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    result = run_training(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(history_csv(result.history))
    save_checkpoint(result.model, out / "checkpoint.tsr")
    (out / "resolved-config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    last = result.split("train")[-1]
    print(f"trained {cfg.epochs} epochs: train loss {last.loss:.4f}, accuracy {last.accuracy:.3f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = Dataset.from_tsr(read_tsr(args.data), model.config.classes)
    _check_compatible(model.config, ds)
    m = evaluate(model, ds)
    print("loss,accuracy,selector_fg_mass,fg_area_frac")
    print(f"{m.loss!r},{m.accuracy!r},{m.selector_fg_mass!r},{m.fg_area_frac!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = list(gradsuite.CASES) if args.op == "all" else [args.op]
    if args.op != "all" and args.op not in gradsuite.CASES:
        raise ConfigError(f"unknown op {args.op!r}; choose 'all' or one of: {', '.join(gradsuite.CASES)}")
    if args.eps <= 0 or args.tol <= 0 or args.instances < 1:
        raise ConfigError("eps and tol must be positive and instances >= 1")
    results = gradsuite.run_suite(ops, args.instances, args.eps, args.tol, args.seed)
    report = gradsuite.results_csv(results, args.tol)
    if args.report:
        Path(args.report).write_text(report)
    sys.stdout.write(report)
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)} (eps={args.eps:g}, tol={args.tol:g})", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def pgm_bytes(s: np.ndarray) -> bytes:
    """Binary P5 greyscale image of a 2-D map, min-max scaled to 0..255.

    A constant map has no range to scale, so it is written as all zeros.
    """
    h, w = s.shape
    lo, hi = float(s.min()), float(s.max())
    if hi > lo:
        pix = np.round((s.astype(np.float64) - lo) / (hi - lo) * 255.0)
    else:
        pix = np.zeros_like(s, dtype=np.float64)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.astype(np.uint8).tobytes()


def map_csv(s: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row.astype(np.float32)) + "\n" for row in s)


def cmd_export_selector(args) -> int:
    model = load_checkpoint(args.checkpoint)
    sites = model.sfcm_sites()
    if not sites:
        raise ConfigError("no selector sites: checkpoint is a baseline model")
    if not 0 <= args.site < len(sites):
        raise ConfigError(f"--site must lie in 0..{len(sites) - 1}")
    entries = read_tsr(args.input)
    if "images" not in entries:
        raise ConfigError(f"{args.input}: no 'images' entry")
    images = entries["images"]
    if not 0 <= args.sample < len(images):
        raise ConfigError(f"--sample must lie in 0..{len(images) - 1}")
    _, sels = model_forward(model, images[args.sample:args.sample + 1])
    s = sels[args.site][0, 0]
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.pgm").write_bytes(pgm_bytes(s))
    Path(f"{prefix}.csv").write_text(map_csv(s))
    print(f"site {sites[args.site]}: {s.shape[1]}x{s.shape[0]} map -> {prefix}.pgm, {prefix}.csv")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    try:
        ds = gen_synthetic(args.n, args.size, args.classes, args.fg_frac, args.clutter, args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_tsr(args.out, ds.to_tsr())
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


ABLATION_ROWS = (("baseline", "none"), ("first block", "first"), ("first two blocks", "first_two"),
                 ("all blocks", "all"))


def ablation_blocks(which: str, blocks: int) -> tuple[int, ...]:
    return {"none": (), "first": (1,), "first_two": tuple(range(1, min(2, blocks) + 1)),
            "all": tuple(range(1, blocks + 1))}[which]


def run_ablation(cfg: RunConfig) -> list[dict]:
    """Error rate (%) per (sfcm_blocks, mode); identical variants are trained once."""
    cache: dict = {}

    def error(mode, blocks):
        key = (mode, blocks) if blocks else ("baseline", ())
        if key not in cache:
            run = copy.deepcopy(cfg)
            run.model = {**cfg.model, "mode": key[0], "sfcm_blocks": list(blocks)}
            res = run_training(run)
            split = "test" if res.split("test") else "val"
            cache[key] = 100.0 * (1.0 - res.split(split)[-1].accuracy)
        return cache[key]

    blocks = cfg.model_config().blocks
    rows = []
    for label, which in ABLATION_ROWS:
        sb = ablation_blocks(which, blocks)
        rows.append({"variant": label, "sfcm_blocks": " ".join(map(str, sb)) or "-",
                     "direct_error_pct": error("direct", sb), "residual_error_pct": error("residual", sb)})
    return rows


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
        cfg.validate()
    rows = run_ablation(cfg)
    lines = ["variant,sfcm_blocks,direct_error_pct,residual_error_pct"]
    lines += [f"{r['variant']},{r['sfcm_blocks']},{r['direct_error_pct']:.2f},{r['residual_error_pct']:.2f}"
              for r in rows]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfcm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a TSR1 dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--op", default="all")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--instances", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--report", help="also write the CSV report here")
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-selector", help="write one selector map as PGM and CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--input", required=True, help="TSR1 file with an 'images' entry")
    x.add_argument("--site", type=int, default=0)
    x.add_argument("--sample", type=int, default=0)
    x.add_argument("--out", required=True, help="output prefix; writes <out>.pgm and <out>.csv")
    x.set_defaults(func=cmd_export_selector)

    s = sub.add_parser("synth-data", help="generate the synthetic foreground dataset")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--fg-frac", type=float, default=0.1)
    s.add_argument("--clutter", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    a = sub.add_parser("ablate", help="train SFCM placements for both modes, write a trend table")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, FormatError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
