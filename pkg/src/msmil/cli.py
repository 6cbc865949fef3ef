"""Command-line surface for the whole pipeline.

Subcommands: generate, filter, train, infer, eval, ablate, sweep.
Configuration is a key=value file plus repeatable --set overrides; defaults
< config file < command line. Unknown keys are rejected. Results go to
standard output, diagnostics to standard error.

Exit codes: 0 success, 2 I/O failure, 3 missing input, 4 numeric failure
(divergence), 5 configuration error.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evalbench import (
    STRATEGIES,
    InputError,
    StratificationError,
    UndefinedAucError,
    ablation_run,
    evaluate,
    format_table,
    graph_size_sweep,
    kfold_run,
    write_curve,
    write_report,
)
from .iaam import IaamConfig, RankError
from .msfem import ConfigError, EncoderConfig
from .paramio import ParamFormatError, load_params, write_params
from .pipeline import (
    CacheFormatError,
    DivergenceError,
    EmptySlideError,
    TrainConfig,
    build_bank,
    build_banks,
    build_model,
    cache_features,
    infer_bank,
    oracle_provider,
    read_cache,
    train_e2e,
    train_full,
    train_mil_stage2,
    write_cache,
)
from .sffm import CoverageError, FileMaskProvider, run_sffm, write_refs
from .synthwsi import PpmError, SpecError, SynthSpec, load_dataset, write_dataset, write_manifest

EXIT_IO = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
EXIT_CONFIG = 5


class CliConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliConfigError(message)


# ------------------------------------------------------------ run config


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in str(text).split(",") if tok != "")


_DEFAULTS = {
    "model.seed": 1,
    "enc.input_side": 64,
    "enc.widths": (24, 48, 96, 96),
    "enc.token_dim": 64,
    "enc.depth": 2,
    "enc.heads": 4,
    "mil.rank": 16,
    "mil.heads": 1,
    "mil.layers": 1,
    "mil.queries": 10,
    "mil.residual": False,
    "train.instances_per_graph": 64,
    "train.lr": 0.05,
    "train.epochs": 6,
    "train.accum_steps": 1,
    "train.seed": 0,
    "train.patch_source": "all_nonbackground",
    "train.scales": (512, 1024, 2048),
    "train.random_quotas": (46, 11, 3),
    "train.stage2_epochs": 0,
    "train.stage2_lr": 0.05,
}

_PARSERS = {
    "enc.widths": _csv_ints,
    "train.scales": _csv_ints,
    "train.random_quotas": _csv_ints,
    "mil.residual": lambda s: str(s).lower() in ("1", "true", "yes"),
    "train.patch_source": str,
    "train.lr": float,
    "train.stage2_lr": float,
}


def load_run_config(config_path: str | None, sets: list[str] | None) -> dict:
    conf = dict(_DEFAULTS)

    def apply(key: str, raw: str, origin: str):
        if key not in conf:
            raise CliConfigError(f"unknown config key {key!r} ({origin})")
        parser = _PARSERS.get(key, type(_DEFAULTS[key]))
        try:
            conf[key] = parser(raw)
        except ValueError as e:
            raise CliConfigError(f"bad value for {key}: {raw!r} ({origin})") from e

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliConfigError(f"malformed config line {line!r}")
            key, val = line.split("=", 1)
            apply(key.strip(), val.strip(), str(path))
    for item in sets or []:
        if "=" not in item:
            raise CliConfigError(f"--set needs key=value, got {item!r}")
        key, val = item.split("=", 1)
        apply(key.strip(), val.strip(), "--set")
    return conf


def configs_from(conf: dict, classes: int):
    enc = EncoderConfig(
        input_side=conf["enc.input_side"], widths=tuple(conf["enc.widths"]),
        token_dim=conf["enc.token_dim"], depth=conf["enc.depth"], heads=conf["enc.heads"],
    )
    mil = IaamConfig(
        dim=conf["enc.token_dim"], rank=conf["mil.rank"], heads=conf["mil.heads"],
        layers=conf["mil.layers"], queries=conf["mil.queries"], classes=classes,
        residual=conf["mil.residual"],
    )
    train = TrainConfig(
        instances_per_graph=conf["train.instances_per_graph"], lr=conf["train.lr"],
        epochs=conf["train.epochs"], accum_steps=conf["train.accum_steps"],
        seed=conf["train.seed"], patch_source=conf["train.patch_source"],
        scales=tuple(conf["train.scales"]), random_quotas=tuple(conf["train.random_quotas"]),
    )
    return enc, mil, train


def echo_config(conf: dict) -> dict:
    out = {}
    for key in sorted(conf):
        val = conf[key]
        out[key] = ",".join(str(v) for v in val) if isinstance(val, tuple) else val
    return out


# ----------------------------------------------------------- subcommands


def _provider(dataset, kind: str):
    if kind == "file":
        if dataset.root is None:
            raise FileNotFoundError("file masks need an on-disk dataset")
        return FileMaskProvider(dataset.root)
    return oracle_provider(dataset)


def _load_dataset(path: str):
    root = Path(path)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"no dataset manifest under {root}")
    return load_dataset(root)


def _find_slide(dataset, ident: str):
    for rec in dataset.slides:
        if rec.ident == ident:
            return rec
    raise FileNotFoundError(f"slide {ident!r} not in dataset")


def cmd_generate(args) -> int:
    spec = SynthSpec(
        classes=args.classes, width=args.width, height=args.height,
        lesion_fraction=args.lesion_frac,
    )
    out = Path(args.out)
    write_dataset(out, spec, args.slides, args.seed)
    print(f"dataset {out} slides={args.slides} classes={args.classes} seed={args.seed}")
    return 0


def cmd_filter(args) -> int:
    dataset = _load_dataset(args.dataset)
    record = _find_slide(dataset, args.slide)
    provider = _provider(dataset, args.mask)
    patch_set = run_sffm(record.image(), provider)
    if args.out:
        write_refs(patch_set.refs, Path(args.out))
    n1, n2, n3 = patch_set.per_scale
    print(f"{n1} {n2} {n3}")
    return 0


def cmd_train(args) -> int:
    conf = load_run_config(args.config, args.set)
    if args.seed is not None:
        conf["train.seed"] = args.seed
    dataset = _load_dataset(args.dataset)
    classes = dataset.spec.classes
    enc_cfg, mil_cfg, train_cfg = configs_from(conf, classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.stage == "mil_only":
        if not args.cache:
            raise CliConfigError("--stage mil_only requires --cache")
        cache = read_cache(Path(args.cache))
        model = build_model(enc_cfg, mil_cfg, conf["model.seed"])
        if args.init_params:
            load_params(model.store, Path(args.init_params))
        labels = {rec.ident: rec.label for rec in dataset.slides}
        dims = {rec.ident: (rec.width, rec.height) for rec in dataset.slides}
        s2 = replace(train_cfg, stage="mil_only")
        manifest = train_mil_stage2(cache, labels, model, s2, dims)
    else:
        provider = _provider(dataset, args.mask)
        banks = build_banks(dataset, provider, enc_cfg.input_side)
        model = build_model(enc_cfg, mil_cfg, conf["model.seed"])
        if args.init_params:
            load_params(model.store, Path(args.init_params))
        manifest = train_e2e(banks, model, train_cfg)
        cache = cache_features(banks, model, scales=train_cfg.scales)
        write_cache(cache, out / "features.msml")

    write_params(model.store, out / "params.msmp")
    manifest_entries = {"dataset": args.dataset, "stage": args.stage, "classes": classes}
    manifest_entries.update(echo_config(conf))
    manifest_entries.update({k: v for k, v in manifest.items() if k not in manifest_entries})
    write_manifest(out / "manifest.txt", manifest_entries)
    print(f"params {out / 'params.msmp'}")
    return 0


def _load_model_for(dataset, conf, params_path):
    enc_cfg, mil_cfg, train_cfg = configs_from(conf, dataset.spec.classes)
    model = build_model(enc_cfg, mil_cfg, conf["model.seed"])
    if params_path:
        path = Path(params_path)
        if not path.exists():
            raise FileNotFoundError(f"params file {path} not found")
        load_params(model.store, path)
    return model, enc_cfg, mil_cfg, train_cfg


def cmd_infer(args) -> int:
    conf = load_run_config(args.config, args.set)
    dataset = _load_dataset(args.dataset)
    record = _find_slide(dataset, args.slide)
    model, enc_cfg, _, train_cfg = _load_model_for(dataset, conf, args.params)
    provider = _provider(dataset, args.mask)
    bank = build_bank(record, provider, enc_cfg.input_side)
    result = infer_bank(bank, model, scales=train_cfg.scales)
    probs = " ".join(f"{p:.6f}" for p in result.probabilities)
    flag = " fallback=all_nonbackground" if result.fallback else ""
    print(f"slide={args.slide} predicted={result.predicted} probs=[{probs}] "
          f"patches={result.patch_count} wall_ms={result.wall_ms:.1f}{flag}")
    return 0


def cmd_eval(args) -> int:
    conf = load_run_config(args.config, args.set)
    dataset = _load_dataset(args.dataset)
    provider = _provider(dataset, args.mask)
    model, enc_cfg, mil_cfg, train_cfg = _load_model_for(dataset, conf, args.params)
    banks = build_banks(dataset, provider, enc_cfg.input_side)
    out = Path(args.out) if args.out else None
    if args.kfold:
        def trainer(train_banks, cfg):
            trained, _ = train_full(train_banks, enc_cfg, mil_cfg, cfg, conf["model.seed"],
                                    stage2_epochs=conf["train.stage2_epochs"],
                                    stage2_lr=conf["train.stage2_lr"])
            return trained

        summary = kfold_run(banks, args.kfold, trainer, train_cfg)
        print(f"accuracy {summary['accuracy_mean']:.4f} +/- {summary['accuracy_sd']:.4f}  "
              f"auc {summary['auc_mean']:.4f} +/- {summary['auc_sd']:.4f}")
        if out:
            entries = {"kfold": args.kfold, "dataset": args.dataset}
            entries.update(echo_config(conf))
            entries.update({k: v for k, v in summary.items() if k != "fold_sizes"})
            entries["fold_sizes"] = ",".join(str(s) for s in summary["fold_sizes"])
            write_report(out, entries)
        return 0
    report = evaluate(banks, model, args.strategy, scales=train_cfg.scales)
    print(f"accuracy {report.accuracy:.4f}  auc {report.auc_macro:.4f}  "
          f"slides {len(banks)}  wall_ms {report.wall_ms:.0f}")
    if out:
        entries = {"dataset": args.dataset, "strategy": args.strategy,
                   "accuracy": f"{report.accuracy:.6f}", "auc_macro": f"{report.auc_macro:.6f}",
                   "wall_ms": f"{report.wall_ms:.1f}"}
        entries.update(echo_config(conf))
        rows = [[c] + list(map(int, report.confusion[c])) for c in range(report.confusion.shape[0])]
        write_report(out, entries, (["true\\pred"] + list(range(report.confusion.shape[0])), rows))
    return 0


def cmd_ablate(args) -> int:
    conf = load_run_config(args.config, args.set)
    dataset = _load_dataset(args.dataset)
    provider = _provider(dataset, args.mask)
    model, enc_cfg, _, train_cfg = _load_model_for(dataset, conf, args.params)
    banks = build_banks(dataset, provider, enc_cfg.input_side)
    result = ablation_run(banks, model, seed=train_cfg.seed,
                          quotas=train_cfg.random_quotas)
    headers = ["strategy", "accuracy", "auc", "mean_patches", "wall_ms"]
    rows = [[r["strategy"], r["accuracy"], r["auc"], r["mean_patches"], r["wall_ms"]]
            for r in result["rows"]]
    print(format_table(headers, rows))
    if args.out:
        entries = {"dataset": args.dataset, "params_hash": result["params_hash"]}
        entries.update(echo_config(conf))
        write_report(Path(args.out), entries, (headers, rows))
    return 0


def cmd_sweep(args) -> int:
    conf = load_run_config(args.config, args.set)
    sizes = list(_csv_ints(args.sizes))
    dataset = _load_dataset(args.dataset)
    provider = _provider(dataset, args.mask)
    enc_cfg, mil_cfg, train_cfg = configs_from(conf, dataset.spec.classes)
    banks = build_banks(dataset, provider, enc_cfg.input_side)
    split = max(1, int(len(banks) * (1.0 - args.holdout)))
    train_banks, test_banks = banks[:split], banks[split:] or banks

    def factory():
        return build_model(enc_cfg, mil_cfg, conf["model.seed"])

    def refine(model, tb):
        if conf["train.stage2_epochs"] > 0:
            cache = cache_features(tb, model, scales=train_cfg.scales)
            labels = {b.ident: b.label for b in tb}
            dims = {b.ident: (b.width, b.height) for b in tb}
            s2 = replace(train_cfg, epochs=conf["train.stage2_epochs"],
                         lr=conf["train.stage2_lr"], stage="mil_only")
            train_mil_stage2(cache, labels, model, s2, dims)

    curve = graph_size_sweep(train_banks, test_banks, sizes, train_cfg, factory, refine)
    for b, acc in curve:
        print(f"{b} {acc:.4f}")
    if args.out:
        write_curve(Path(args.out), curve)
    return 0


# ----------------------------------------------------------------- parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="msmil", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--slides", type=int, default=8)
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--lesion-frac", type=float, default=0.3, dest="lesion_frac")
    gen.add_argument("--width", type=int, default=4096)
    gen.add_argument("--height", type=int, default=4096)
    gen.set_defaults(func=cmd_generate)

    def common(p, params_required=False):
        p.add_argument("--dataset", required=True)
        p.add_argument("--mask", choices=("oracle", "file"), default="oracle")
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        if params_required:
            p.add_argument("--params", required=True)

    flt = sub.add_parser("filter", help="run the lesion filter on one slide")
    flt.add_argument("--dataset", required=True)
    flt.add_argument("--slide", required=True)
    flt.add_argument("--mask", choices=("oracle", "file"), default="oracle")
    flt.add_argument("--out", default=None)
    flt.set_defaults(func=cmd_filter)

    trn = sub.add_parser("train", help="train (e2e or cached-feature refinement)")
    common(trn)
    trn.add_argument("--stage", choices=("e2e", "mil_only"), default="e2e")
    trn.add_argument("--out", required=True)
    trn.add_argument("--cache", default=None)
    trn.add_argument("--init-params", default=None, dest="init_params")
    trn.add_argument("--seed", type=int, default=None)
    trn.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="classify one slide")
    common(inf, params_required=True)
    inf.add_argument("--slide", required=True)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="evaluate params or run k-fold training")
    common(ev)
    ev.add_argument("--params", default=None)
    ev.add_argument("--kfold", type=int, default=None)
    ev.add_argument("--strategy", choices=STRATEGIES, default="lesion")
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    abl = sub.add_parser("ablate", help="patch-selection strategy comparison")
    common(abl, params_required=True)
    abl.add_argument("--out", default=None)
    abl.set_defaults(func=cmd_ablate)

    swp = sub.add_parser("sweep", help="instances-in-graph sweep")
    common(swp)
    swp.add_argument("--sizes", required=True)
    swp.add_argument("--out", default=None)
    swp.add_argument("--holdout", type=float, default=0.25)
    swp.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, RankError, SpecError, ValueError, StratificationError, InputError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (CoverageError,) as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (DivergenceError, UndefinedAucError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PpmError, ParamFormatError, CacheFormatError, EmptySlideError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
