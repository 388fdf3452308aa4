"""Command-line entry point: ``python -m lasan <command> ...``.

Commands: synth, split, train, eval, mask, bench. Hyperparameters come from
a flat ``key=value`` run config (``#`` comments, dotted section names);
paths come from flags. Every artifact written is announced on stdout.
"""
import os

# thread caps must be in place before numpy/numba load their pools
if os.environ.get("LASAN_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["LASAN_THREADS"])

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import sys  # noqa: E402
from dataclasses import dataclass, field, fields, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import checkpoint  # noqa: E402
from .dataio import (  # noqa: E402
    Label,
    Partition,
    Task,
    load_manifest_dataset,
    read_manifest,
    read_split,
    stratified_patient_split,
    task_view,
    write_split,
)
from .errors import ConfigurationError, LasanError  # noqa: E402
from .evalmask import confusion_metrics, masking_analysis, task_auroc  # noqa: E402
from .foundation import (  # noqa: E402
    IntegrationKind,
    LinearProbeModel,
    StrategyConfig,
    StrategyKind,
    apply_strategy,
    build_integration,
    encoder_from_registry,
    model_checkpoint,
    model_from_checkpoint,
)
from .model import LasanSpec  # noqa: E402
from .synth import PathologyMagnitudes, SynthConfig, generate_corpus  # noqa: E402
from .trainer import TrainConfig, default_patience, predict, train, training_log_csv  # noqa: E402

# ---------------------------------------------------------------- run config


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_like(default, text):
    """Parse ``text`` into the type of ``default`` (tuples are comma-separated)."""
    text = text.strip()
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in text.split(",") if v.strip())
    return text


_NONE_WORDS = ("none", "null", "")


def _coerce_optional(name, text):
    if text.strip().lower() in _NONE_WORDS:
        return None
    if name == "patience":
        return int(text)
    if name == "focal_alpha":
        return tuple(float(v) for v in text.split(","))
    if name == "class_counts":
        out = []
        for item in text.split(","):
            lab, _, n = item.partition(":")
            if lab.strip() not in Label.__members__:
                raise ValueError(f"unknown class {lab!r}")
            out.append((lab.strip(), int(n)))
        return tuple(out)
    raise ValueError(f"cannot parse {text!r}")


def _section_fields(cls):
    return {f.name for f in fields(cls)}


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    split_ratios: tuple = (0.70, 0.15, 0.15)
    split_seed: int = 42
    spec: LasanSpec = field(default_factory=LasanSpec)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: Task = Task.THREE_CLASS
    integration: IntegrationKind = IntegrationKind.STANDALONE
    encoder: str = "pretext_pretrained"
    encoder_dim: int = 64
    encoder_seed: int = 0
    log_wall_seconds: bool = True
    bench_seeds: tuple = (0, 1, 2)
    bench_strategies: tuple = tuple(k.value for k in StrategyKind)
    bench_encoders: tuple = ("random_frozen", "pretext_pretrained")
    bench_integrations: tuple = tuple(k.value for k in IntegrationKind)

    @classmethod
    def parse(cls, text, source="<config>"):
        """Parse ``key=value`` lines; unknown keys and bad values name their line."""
        raw = {"synth": {}, "magnitudes": {}, "lasan": {}, "strategy": {}, "train": {}}
        top = {}
        for n, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            key, sep, value = body.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigurationError(f"{source}:{n}: expected key=value, got {line.strip()!r}", module="cli")
            section, _, name = key.partition(".")
            if section == "synth" and name.startswith("magnitudes."):
                section, name = "magnitudes", name[len("magnitudes.") :]
            known = {
                "synth": _section_fields(SynthConfig) - {"magnitudes"},
                "magnitudes": _section_fields(PathologyMagnitudes),
                "lasan": _section_fields(LasanSpec),
                "strategy": _section_fields(StrategyConfig),
                "train": _section_fields(TrainConfig),
            }
            if section in known and name in known[section]:
                raw[section][name] = (value.strip(), n)
            elif key in _TOP_KEYS:
                top[key] = (value.strip(), n)
            else:
                raise ConfigurationError(f"{source}:{n}: unknown key {key!r}", module="cli")
        return cls._build(raw, top, source)

    @classmethod
    def _build(cls, raw, top, source):
        def section(kls, entries, extra=None):
            kwargs = dict(extra or {})
            for name, (text, n) in entries.items():
                default = getattr(kls, name, None) if not _is_factory(kls, name) else None
                try:
                    if name in _OPTIONAL:
                        kwargs[name] = _coerce_optional(name, text)
                    elif default is None:
                        kwargs[name] = text
                    else:
                        kwargs[name] = _parse_like(default, text)
                except ValueError as exc:
                    raise ConfigurationError(f"{source}:{n}: {kls.__name__}.{name}: {exc}", module="cli") from None
            try:
                return kls(**kwargs)
            except LasanError as exc:
                lines = sorted(n for _, n in entries.values() if n > 0)
                where = f"{source}:{lines[0]}" if lines else source
                raise ConfigurationError(f"{where}: {exc.args[0]}", module="cli") from None

        cfg = cls()
        for key, (text, n) in top.items():
            attr, default = _TOP_KEYS[key]
            try:
                value = default(text) if callable(default) else _parse_like(getattr(cfg, attr), text)
            except (ValueError, KeyError) as exc:
                raise ConfigurationError(f"{source}:{n}: {key}: {exc}", module="cli") from None
            setattr(cfg, attr, value)
        mags = section(PathologyMagnitudes, raw["magnitudes"])
        cfg.synth = section(SynthConfig, raw["synth"], {"magnitudes": mags})
        spec_entries = dict(raw["lasan"])
        spec_entries.setdefault("n_classes", (str(cfg.task.n_classes), 0))
        cfg.spec = section(LasanSpec, spec_entries)
        if cfg.spec.n_classes != cfg.task.n_classes:
            raise ConfigurationError(
                f"{source}: lasan.n_classes={cfg.spec.n_classes} but task {cfg.task.name} has {cfg.task.n_classes}",
                module="cli",
            )
        train_entries = dict(raw["train"])
        if "patience" not in train_entries:
            text, n = train_entries.get("max_epochs", (str(TrainConfig.max_epochs), 0))
            try:
                max_epochs = int(text)
            except ValueError:
                raise ConfigurationError(f"{source}:{n}: TrainConfig.max_epochs: not an integer: {text!r}", module="cli") from None
            p = default_patience(cfg.task.n_classes)
            train_entries["patience"] = (str(p) if p < max_epochs else "none", 0)
        cfg.train = section(TrainConfig, train_entries)
        cfg.strategy = section(StrategyConfig, raw["strategy"])
        return cfg

    @classmethod
    def load(cls, path):
        if path is None:
            return cls.parse("")
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}", module="cli") from None
        return cls.parse(text, source=str(path))


_OPTIONAL = {"patience", "focal_alpha", "class_counts"}


def _is_factory(kls, name):
    return name == "magnitudes" or (kls is StrategyConfig and name == "kind")


def _enum_parser(enum_cls):
    def parse(text):
        try:
            return enum_cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown value {text!r}; choose from {', '.join(m.name for m in enum_cls)}") from None

    return parse


_TOP_KEYS = {
    "split.ratios": ("split_ratios", None),
    "split.seed": ("split_seed", None),
    "task": ("task", _enum_parser(Task)),
    "integration": ("integration", _enum_parser(IntegrationKind)),
    "encoder": ("encoder", None),
    "encoder.dim": ("encoder_dim", None),
    "encoder.seed": ("encoder_seed", None),
    "log.wall_seconds": ("log_wall_seconds", None),
    "bench.seeds": ("bench_seeds", None),
    "bench.strategies": ("bench_strategies", None),
    "bench.encoders": ("bench_encoders", None),
    "bench.integrations": ("bench_integrations", None),
}


# ---------------------------------------------------------------- helpers


def _announce(path):
    print(f"wrote {path}")


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    _announce(path)


def _splits(manifest, split_path, task):
    ds = load_manifest_dataset(manifest)
    split = read_split(split_path)
    missing = sorted(set(ds.patient_ids) - set(split.assignment))
    if missing:
        raise ConfigurationError(f"{len(missing)} patients missing from split file, e.g. {missing[0]}", module="cli")
    return {p: task_view(ds.partition(split, p), task) for p in Partition}


def _build_model(cfg, integration, encoder_name, seed, linear_head=False):
    """Model plus encoder handle (None for standalone) for one run."""
    if integration is IntegrationKind.STANDALONE and not linear_head:
        return build_integration(integration, None, cfg.spec, seed), None
    handle = encoder_from_registry(encoder_name, seed=cfg.encoder_seed + seed, dim=cfg.encoder_dim)
    if linear_head:
        return LinearProbeModel(handle, cfg.task.n_classes, seed), handle
    return build_integration(integration, handle, cfg.spec, seed), handle


def _fit(cfg, model, handle, splits, seed, strategy=None):
    """Train and return the list of stage results."""
    tr, va = splits[Partition.TRAIN], splits[Partition.VAL]
    if handle is None:
        return [train(model, tr, va, replace(cfg.train, seed=seed))]
    return apply_strategy(handle, model, strategy or cfg.strategy, tr, va, seed=seed).stages


def _log_rows(stages, keep_wall):
    rows, offset = [], 0
    for st in stages:
        for r in st.log:
            r = dict(r, epoch=r["epoch"] + offset)
            if not keep_wall:
                r["wall_seconds"] = 0.0
            rows.append(r)
        offset += len(st.log)
    return rows


def _metrics_csv(probs, targets, task):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "class", "value"])
    macro, per = task_auroc(probs, targets, task.n_classes)
    if task.n_classes == 3:
        w.writerow(["auroc", "macro", repr(macro)])
    for name, v in zip(task.class_names, per):
        w.writerow(["auroc", name, repr(v)])
    if task.n_classes == 2:
        m = confusion_metrics(probs, targets, 0.5)
        for metric in ("sensitivity", "specificity", "balanced_accuracy", "accuracy"):
            w.writerow([metric, task.class_names[0], repr(float(getattr(m, metric)))])
    w.writerow(["n_records", "all", str(len(targets))])
    return buf.getvalue()


def _load_model(path):
    meta, state = checkpoint.read_checkpoint(path)
    return meta, model_from_checkpoint(meta, state)


def _checkpoint_task(meta):
    return Task[meta.get("task", Task.THREE_CLASS.name)]


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = RunConfig.load(args.config)
    synth = cfg.synth
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    if args.patients_per_class is not None:
        synth = replace(synth, patients_per_class=args.patients_per_class)
    manifest = generate_corpus(synth, args.out)
    print(f"wrote {Path(args.out) / 'records'}/ ({sum(1 for _ in read_manifest(manifest))} records)")
    _announce(manifest)


def cmd_split(args):
    cfg = RunConfig.load(args.config)
    ratios = cfg.split_ratios if args.ratios is None else tuple(float(r) for r in args.ratios.split(","))
    seed = cfg.split_seed if args.seed is None else args.seed
    patients = {(e.patient_id, e.label) for e in read_manifest(args.manifest)}
    split = stratified_patient_split(sorted(patients), ratios, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_split(out, split)
    _announce(out)


def cmd_train(args):
    cfg = RunConfig.load(args.config)
    splits = _splits(args.manifest, args.split, cfg.task)
    model, handle = _build_model(cfg, cfg.integration, cfg.encoder, cfg.train.seed)
    stages = _fit(cfg, model, handle, splits, cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta, state = model_checkpoint(model)
    meta["task"] = cfg.task.name
    ckpt = out / "checkpoint.lasw"
    checkpoint.write_checkpoint(ckpt, meta, state)
    _announce(ckpt)
    _write_text(out / "train_log.csv", training_log_csv(_log_rows(stages, cfg.log_wall_seconds), cfg.task.class_names))
    best = stages[-1]
    print(f"best epoch {best.best_epoch}: validation AUROC {best.best_val_auroc:.6f}")


def cmd_eval(args):
    meta, model = _load_model(args.checkpoint)
    task = _checkpoint_task(meta)
    data = _splits(args.manifest, args.split, task)[Partition[args.partition.upper()]]
    probs = predict(model, data)
    _write_text(Path(args.out) / f"metrics_{args.partition.lower()}.csv", _metrics_csv(probs, data.targets, task))


def cmd_mask(args):
    meta, model = _load_model(args.checkpoint)
    task = _checkpoint_task(meta)
    data = _splits(args.manifest, args.split, task)[Partition[args.partition.upper()]]
    report = masking_analysis(
        lambda x, x_fm: predict(model, None, x=x, x_fm=x_fm),
        data,
        n_classes=task.n_classes,
        class_names=task.class_names,
    )
    out = Path(args.out)
    _write_text(out / "masking.csv", report.to_csv())
    _write_text(out / "masking.svg", report.to_svg())


def _bench_row(name_cols, results, class_names, three_class):
    macro = np.array([r[0] for r in results])
    per = np.array([r[1] for r in results])
    ddof = 1 if len(results) > 1 else 0
    row = list(name_cols)
    if three_class:
        row += [f"{macro.mean():.6f}", f"{macro.std(ddof=ddof):.6f}"]
    for j in range(len(class_names)):
        row += [f"{per[:, j].mean():.6f}", f"{per[:, j].std(ddof=ddof):.6f}"]
    return row + [len(results)]


def _bench_header(first, class_names, three_class):
    cols = list(first)
    if three_class:
        cols += ["auroc_macro", "auroc_macro_sd"]
    for c in class_names:
        cols += [f"auroc_{c}", f"auroc_{c}_sd"]
    return cols + ["n_seeds"]


def cmd_bench(args):
    cfg = RunConfig.load(args.config)
    splits = _splits(args.manifest, args.split, cfg.task)
    test = splits[Partition.TEST]
    names = cfg.task.class_names
    three = cfg.task.n_classes == 3
    out = Path(args.out)

    def run(integration, encoder, strategy, linear_head=False):
        results = []
        for seed in cfg.bench_seeds:
            model, handle = _build_model(cfg, integration, encoder, seed, linear_head)
            _fit(cfg, model, handle, splits, seed, strategy)
            results.append(task_auroc(predict(model, test), test.targets, cfg.task.n_classes))
        return results

    strategies = [StrategyKind[s.upper()] for s in cfg.bench_strategies]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_bench_header(["encoder", "strategy"], names, three))
    for enc in cfg.bench_encoders:
        for kind in strategies:
            res = run(None, enc, replace(cfg.strategy, kind=kind), linear_head=True)
            w.writerow(_bench_row([enc, kind.value], res, names, three))
    _write_text(out / "bench_strategies.csv", buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_bench_header(["integration", "encoder", "strategy"], names, three))
    for integ in (IntegrationKind[i.upper()] for i in cfg.bench_integrations):
        if integ is IntegrationKind.STANDALONE:
            w.writerow(_bench_row([integ.value, "none", "none"], run(integ, None, None), names, three))
            continue
        for enc in cfg.bench_encoders:
            res = run(integ, enc, cfg.strategy)
            w.writerow(_bench_row([integ.value, enc, cfg.strategy.kind.value], res, names, three))
    _write_text(out / "bench_integrations.csv", buf.getvalue())


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="lasan", description="Lead-aware ECG classification toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus (records + manifest)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--patients-per-class", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="stratified patient-level train/val/test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratios")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_split)

    for name, func, helptext in (
        ("train", cmd_train, "train a model; writes checkpoint.lasw and train_log.csv"),
        ("bench", cmd_bench, "strategy x encoder and integration grids over seeds"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config")
        s.add_argument("--manifest", required=True)
        s.add_argument("--split", required=True)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    for name, func, helptext in (
        ("eval", cmd_eval, "AUROC (and thresholded metrics for binary tasks) on one partition"),
        ("mask", cmd_mask, "lead-group masking report (CSV + SVG)"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--manifest", required=True)
        s.add_argument("--split", required=True)
        s.add_argument("--partition", default="test", choices=["train", "val", "test"])
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except LasanError as exc:
        print(str(exc).splitlines()[0], file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cli: {exc.filename or ''}: {exc.strerror or exc}".replace(": : ", ": "), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"cli: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
