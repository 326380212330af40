"""Command-line entry point: ``train``, ``eval``, ``sweep``, ``attack``, ``export-embeddings``.

Every output file starts with (or embeds) the format version and the full
config echo, and carries no timestamps, so re-running a command with the
same config produces byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import SynonymLexicon, after_attack_accuracy, outcomes_to_json_lines
from .config import FORMAT_VERSION, ExperimentConfig, load_config, parse_config
from .data import Dataset, DatasetError, featurize_many, few_shot_sample, load_dataset
from .encoder import CheckpointError, encode, load_checkpoint, save_checkpoint
from .knn import AnchorIndex, KNNContractError, write_index_tsv
from .trainer import ConfigError, MetricsReport, evaluate, make_classifier, run_experiment, run_seed

log = logging.getLogger("knn_finetune")

# axis name accepted on the command line -> config field
SWEEP_AXES = {
    "k": "k", "K": "k",
    "phi": "phi", "φ": "phi",
    "lambda": "lam", "λ": "lam",
    "n_most": "n_most", "M_m": "n_most",
    "n_least": "n_least", "M_l": "n_least",
}
_EVAL_ONLY = ("k", "phi")


class CommandError(Exception):
    pass


# --- helpers -------------------------------------------------------------------


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        key, sep, val = p.partition("=")
        if not sep:
            raise ConfigError(p, "expected --set key=value")
        out[key.strip()] = val.strip()
    return out


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise CommandError("--config is required for this command")
    return load_config(args.config, _overrides(args.set))


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir if cfg else "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg_echo: str) -> list[str]:
    return [f"format_version = {FORMAT_VERSION}"] + [
        line for line in cfg_echo.splitlines() if not line.startswith("#")
    ]


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")
    log.info("wrote %s", path)


def _report_config(cfg: ExperimentConfig, **extra) -> dict:
    return {"format_version": FORMAT_VERSION, "config_echo": cfg.echo(), **extra}


def _datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    return load_dataset(cfg.train_path, cfg.num_classes), load_dataset(cfg.test_path, cfg.num_classes)


def _checkpoint_paths(args, cfg: ExperimentConfig, out: Path) -> list[Path]:
    if args.checkpoint:
        paths = [Path(p) for p in args.checkpoint]
    else:
        paths = [out / f"seed{s}.ckpt" for s in cfg.seeds]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise CommandError(f"checkpoint not found: {', '.join(missing)}")
    return paths


def _load_checked(path: Path, cfg: ExperimentConfig):
    ck = load_checkpoint(path)
    want = (cfg.feature_dim, cfg.hidden_dim, cfg.embed_dim)
    if ck.dims != want or ck.num_classes != cfg.num_classes:
        raise CommandError(
            f"{path}: checkpoint dims {ck.dims} x {ck.num_classes} classes do not match "
            f"config {want} x {cfg.num_classes} classes"
        )
    return ck


def _models_from_checkpoints(args, cfg, out, train_set):
    """(seed, classifier, anchor set) for each checkpoint; the anchor set is the
    few-shot draw of that seed when the config asks for one."""
    models = []
    for path in _checkpoint_paths(args, cfg, out):
        ck = _load_checked(path, cfg)
        anchors = few_shot_sample(train_set, cfg.few_shot_n, ck.seed) if cfg.few_shot_n else train_set
        models.append((ck.seed, make_classifier(ck, anchors, cfg.featurizer, cfg.train)))
    return models


# --- commands ------------------------------------------------------------------


def cmd_train(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    echo = cfg.echo()

    def save(run):
        save_checkpoint(run.checkpoint(echo), out / f"seed{run.seed}.ckpt")

    report = run_experiment(cfg.train, cfg.featurizer, cfg.train_path, cfg.test_path, cfg.num_classes,
                            cfg.seeds, cfg.few_shot_n or None, on_seed=save)
    report = replace(report, config=_report_config(cfg, command="train"))
    _write(out / "config.echo", echo)
    _write(out / "metrics.jsonl", report.to_json_lines())
    _write(out / "metrics.tsv", _table_with_header(report.to_table(), echo))
    sys.stdout.write(report.to_table())


def _table_with_header(table: str, echo: str) -> str:
    return "".join(f"# {h}\n" for h in _header(echo)) + table


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train_set, test_set = _datasets(cfg)
    seeds, accs = [], []
    for seed, model in _models_from_checkpoints(args, cfg, out, train_set):
        seeds.append(seed)
        accs.append(evaluate(model, test_set))
    report = MetricsReport(seeds, accs, _report_config(cfg, command="eval", k=cfg.k, phi=cfg.phi))
    _write(out / "eval.jsonl", report.to_json_lines())
    sys.stdout.write(report.to_table())


def parse_values(axis: str, text: str) -> list:
    field = SWEEP_AXES.get(axis)
    if field is None:
        raise ConfigError("axis", f"unknown sweep axis {axis!r}; choose from k, phi, lambda, n_most, n_least")
    raw = [v.strip() for v in (text or "").split(",") if v.strip()]
    if not raw:
        raise ConfigError("values", "at least one value is required")
    cast = int if field in ("k", "n_most", "n_least") else float
    try:
        return [cast(v) for v in raw]
    except ValueError as e:
        raise ConfigError("values", str(e)) from None


def sweep_rows(cfg: ExperimentConfig, axis: str, values: list) -> list[tuple]:
    """``(value, accuracies per seed)`` rows.

    K and phi only change inference, so each seed is trained once and
    re-evaluated; the other axes retrain per value.
    """
    field = SWEEP_AXES[axis]
    train_set, test_set = _datasets(cfg)
    rows = []
    if field in _EVAL_ONLY:
        runs = [run_seed(cfg.train, cfg.featurizer, train_set, test_set, s, cfg.few_shot_n or None)
                for s in cfg.seeds]
        for v in values:
            accs = [evaluate(r.model, test_set, **{field: v}) for r in runs]
            rows.append((v, accs))
    else:
        for v in values:
            c = cfg.with_values(**{field: v})
            accs = [run_seed(c.train, c.featurizer, train_set, test_set, s, c.few_shot_n or None).accuracy
                    for s in c.seeds]
            rows.append((v, accs))
    return rows


def format_sweep(cfg: ExperimentConfig, axis: str, rows) -> str:
    field = SWEEP_AXES[axis]
    name = "lambda" if field == "lam" else field
    fixed = {"n_most": cfg.n_most, "n_least": cfg.n_least}
    lines = [f"# {h}" for h in _header(cfg.echo())]
    seed_cols = [f"seed{s}" for s in cfg.seeds]
    if field in fixed:
        # selection table: one row per (n_most, n_least) pair
        lines.append("\t".join(["n_most", "n_least", "mean", "variance", *seed_cols]))
    else:
        lines.append("\t".join([name, "mean", "variance", *seed_cols]))
    for v, accs in rows:
        head = [str(v)]
        if field in fixed:
            pair = dict(fixed, **{field: v})
            head = [str(pair["n_most"]), str(pair["n_least"])]
        lines.append("\t".join([*head, f"{np.mean(accs):.6f}", f"{np.var(accs):.8f}",
                                *(f"{a:.6f}" for a in accs)]))
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> None:
    cfg = _config(args)
    values = parse_values(args.axis, args.values)
    out = _out_dir(args, cfg)
    table = format_sweep(cfg, args.axis, sweep_rows(cfg, args.axis, values))
    field = SWEEP_AXES[args.axis]
    _write(out / f"sweep_{'lambda' if field == 'lam' else field}.tsv", table)
    sys.stdout.write(table)


def attack_report(cfg: ExperimentConfig, models, test_set: Dataset, lexicon: SynonymLexicon):
    """Rows ``(phi, clean accuracies, after-attack accuracies)`` plus per-example outcome lines."""
    subset = Dataset(test_set.examples[: cfg.attack_size], test_set.num_classes)
    rows, detail = [], []
    for phi in cfg.attack_phis:
        clean, after = [], []
        for seed, model in models:
            m = model.with_settings(phi=phi)
            clean.append(evaluate(m, subset))
            acc, outcomes = after_attack_accuracy(m, subset, lexicon, cfg.max_sub_fraction)
            after.append(acc)
            for line in outcomes_to_json_lines(subset, outcomes).splitlines():
                rec = json.loads(line)
                rec.update(phi=phi, seed=seed)
                detail.append(json.dumps(rec, sort_keys=True))
        rows.append((phi, clean, after))
    return rows, detail


def cmd_attack(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train_set, test_set = _datasets(cfg)
    models = _models_from_checkpoints(args, cfg, out, train_set)
    lexicon = SynonymLexicon.load(cfg.lexicon_path) if cfg.lexicon_path else SynonymLexicon()
    rows, detail = attack_report(cfg, models, test_set, lexicon)
    lines = [f"# {h}" for h in _header(cfg.echo())]
    lines.append("phi\tclean_accuracy\tafter_attack_accuracy")
    jsonl = [json.dumps({"kind": "config", **_report_config(cfg, command="attack")}, sort_keys=True)]
    for phi, clean, after in rows:
        lines.append(f"{phi}\t{np.mean(clean):.6f}\t{np.mean(after):.6f}")
        jsonl.append(json.dumps({"kind": "summary", "phi": phi, "clean": clean, "after_attack": after,
                                 "clean_mean": float(np.mean(clean)),
                                 "after_attack_mean": float(np.mean(after))}, sort_keys=True))
    table = "\n".join(lines) + "\n"
    _write(out / "attack.tsv", table)
    _write(out / "attack.jsonl", "\n".join(jsonl) + "\n")
    _write(out / "attack_examples.jsonl", "\n".join(detail) + ("\n" if detail else ""))
    sys.stdout.write(table)


def cmd_export_embeddings(args) -> None:
    if not args.checkpoint or len(args.checkpoint) != 1:
        raise CommandError("export-embeddings needs exactly one --checkpoint")
    path = Path(args.checkpoint[0])
    if not path.is_file():
        raise CommandError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    if args.config:
        cfg = _config(args)
    elif ck.config_echo:
        cfg = parse_config(ck.config_echo, overrides=_overrides(args.set))
    else:
        raise CommandError("checkpoint carries no config echo; pass --config")
    if cfg.feature_dim != ck.dims[0]:
        raise CommandError(
            f"feature_dim {cfg.feature_dim} does not match the checkpoint input dimension {ck.dims[0]}"
        )
    data_path = args.data or cfg.train_path
    dataset = load_dataset(data_path, cfg.num_classes)
    params = ck.key if cfg.anchor_source == "key" else ck.query
    z = encode(params, featurize_many(dataset.texts, cfg.featurizer)).z
    index = AnchorIndex(z, dataset.labels, np.array([e.id for e in dataset], dtype=np.int64), cfg.num_classes)
    out = _out_dir(args, cfg)
    target = out / "embeddings.tsv"
    header = _header(cfg.echo()) + [f"checkpoint_seed = {ck.seed}", f"checkpoint_step = {ck.step}"]
    write_index_tsv(index, target, header)
    log.info("wrote %s", target)
    sys.stdout.write(f"{len(dataset)} rows -> {target}\n")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "attack": cmd_attack,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knn-finetune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file (key = value)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        p.add_argument("--out", help="output directory (default: out_dir from the config)")
        if name in ("eval", "attack", "export-embeddings"):
            p.add_argument("--checkpoint", action="append",
                           help="checkpoint file; repeatable (default: out/seed<S>.ckpt per config seed)")
        if name == "sweep":
            p.add_argument("--axis", required=True, help="k, phi, lambda, n_most or n_least")
            p.add_argument("--values", required=True, help="comma-separated values")
        if name == "export-embeddings":
            p.add_argument("--data", help="dataset TSV to embed (default: train_path)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CommandError, DatasetError, CheckpointError, KNNContractError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
