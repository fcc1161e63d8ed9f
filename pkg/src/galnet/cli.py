"""Command-line driver: ``galnet {gen-data,train,eval,export-affinity}``.

Settings come from a flat ``key = value`` file (``--config``) and repeated
``--set key=value`` overrides, applied in that order. Keys are the field
names of SyntheticConfig, ModelConfig and TrainConfig; ``backbone`` and
``factor_map`` take comma-separated integers. Exit status is 0 on success,
2 for configuration or parse errors and 3 for numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import MISSING, asdict, fields
from pathlib import Path

from galnet.data import SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from galnet.errors import ConfigError, ContractError, DimensionError, NumericError, ParseError
from galnet.evaluation import aggregate_affinity, evaluate, export_heatmap
from galnet.gal import celeba_prior_groups
from galnet.model import BlockSpec, ModelConfig, build_model, load_checkpoint, load_state, read_checkpoint, save_checkpoint
from galnet.training import MetricsRow, TrainConfig, train

logger = logging.getLogger("galnet")

_SECTIONS = {"synthetic": SyntheticConfig, "model": ModelConfig, "train": TrainConfig}
# filled from the dataset or from dedicated flags, never from the file
_RESERVED = {"input_shape", "prior_groups"}


def _field_defaults() -> dict[str, dict[str, object]]:
    out = {}
    for section, cls in _SECTIONS.items():
        out[section] = {}
        for f in fields(cls):
            if f.name in _RESERVED:
                continue
            if f.default_factory is not MISSING:
                out[section][f.name] = f.default_factory()
            else:
                out[section][f.name] = f.default
    return out


KNOWN_KEYS = sorted({k for sec in _field_defaults().values() for k in sec})


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ParseError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = raw
    return values


def parse_overrides(items) -> dict[str, str]:
    values = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        values[key] = raw
    return values


def _coerce(key: str, raw: str, default):
    try:
        if key == "backbone":
            return tuple(BlockSpec(int(c)) for c in raw.split(","))
        if key == "factor_map":
            return [int(v) for v in raw.split(",")]
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def section_kwargs(values: dict[str, str], section: str) -> dict:
    unknown = sorted(set(values) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    defaults = _field_defaults()[section]
    return {k: _coerce(k, v, defaults[k]) for k, v in values.items() if k in defaults}


def _settings(args) -> dict[str, str]:
    values = read_config_file(args.config) if args.config else {}
    values.update(parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if getattr(args, "variant", None):
        values["variant"] = args.variant
    return values


def _load(path, size):
    return load_dataset(path, size=tuple(size) if size else None)


# commands ------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = SyntheticConfig(**section_kwargs(_settings(args), "synthetic"))
    out = Path(args.out)
    save_dataset(generate_synthetic(cfg, "train"), out / "train")
    save_dataset(generate_synthetic(cfg, "eval"), out / "eval")
    print(f"wrote {cfg.n_train} train / {cfg.n_eval} eval samples to {out}")


def _prior_groups(dataset):
    groups = dataset.factor_groups()
    if groups is not None:
        return groups
    try:
        return celeba_prior_groups(dataset.attribute_names)
    except ContractError as exc:
        raise ConfigError(f"prior_groups: dataset has no factor pairs and {exc}") from None


def cmd_train(args) -> None:
    values = _settings(args)
    dataset = _load(args.data, args.size)
    eval_ds = _load(args.eval_data, args.size) if args.eval_data else None
    mkw = section_kwargs(values, "model")
    mkw.pop("num_attributes", None)
    tcfg = TrainConfig(**section_kwargs(values, "train"))
    mkw["variant"] = tcfg.variant
    if tcfg.variant == "gal_p":
        mkw["prior_groups"] = _prior_groups(dataset)
    mcfg = ModelConfig(dataset.num_attributes, input_shape=dataset.image_shape, **mkw)
    model, registry = build_model(mcfg, seed=tcfg.seed)
    if tcfg.variant == "gal_c":
        if not args.init_from:
            raise ConfigError("init_from: variant gal-c needs --init-from <baseline checkpoint>")
        header, arrays = read_checkpoint(args.init_from)
        _check_compatible(header["config"], mcfg)
        load_state(model, arrays, tags=("FLN", "HEAD_F"))
    elif args.init_from:
        raise ConfigError("init_from: only used by variant gal-c")

    sink = open(args.metrics, "w") if args.metrics else sys.stdout
    try:
        sink.write(",".join(MetricsRow.FIELDS) + "\n")
        train(model, registry, dataset, tcfg, eval_dataset=eval_ds,
              on_row=lambda row: (sink.write(row.format() + "\n"), sink.flush()))
    finally:
        if sink is not sys.stdout:
            sink.close()
    save_checkpoint(args.out, model, extra={"train": asdict(tcfg)})


def _check_compatible(saved: dict, cfg: ModelConfig) -> None:
    base = ModelConfig.from_dict({**saved, "variant": "baseline", "prior_groups": None})
    for key in ("num_attributes", "input_shape", "backbone", "branch_channels", "pse_hidden"):
        a, b = getattr(base, key), getattr(cfg, key)
        if tuple(a) != tuple(b) if isinstance(a, (list, tuple)) else a != b:
            raise ConfigError(f"{key}: --init-from checkpoint has {a}, run expects {b}")


def cmd_eval(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, _load(args.data, args.size))
    print(report.format_table())


def cmd_export_affinity(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    summary = aggregate_affinity(model, _load(args.data, args.size))
    export_heatmap(summary, args.csv, args.pgm)
    print(f"wrote {args.csv}" + (f" and {args.pgm}" if args.pgm else ""))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="galnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, settings=True, data=True):
        if settings:
            sp.add_argument("--config", help="flat key = value settings file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
            sp.add_argument("--seed", type=int, help="the single source of randomness")
        if data:
            sp.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="resize loaded images")

    g = sub.add_parser("gen-data", help="write a synthetic planted-factor dataset")
    common(g, data=False)
    g.add_argument("--out", required=True, help="directory; gets train/ and eval/")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    common(t)
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--eval-data", help="held-out dataset for the metric rows")
    t.add_argument("--variant", choices=["baseline", "gal-j", "gal-c", "gal-p"])
    t.add_argument("--init-from", help="baseline checkpoint (required for gal-c)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV path (default: stdout)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-attribute accuracy table")
    common(e, settings=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-affinity", help="mean attention matrix as CSV and PGM")
    common(x, settings=False)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--csv", required=True)
    x.add_argument("--pgm")
    x.set_defaults(func=cmd_export_affinity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ParseError, DimensionError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
