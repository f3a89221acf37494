"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 checkpoint, 6 numerical.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import config as C
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import augment_reciprocals, load_dataset
from .errors import CheckpointMismatchError, ConfigError, DataError, KGDecompError
from .evaluation import EvalReport, bench_throughput, evaluate
from .models import DeComSpec, KGEModel, count_parameters, parameter_breakdown
from .training import ADAGRAD_LR_GRID, ADAM_LR_GRID, train

logger = logging.getLogger("kgdecomp")

EXIT_USAGE = 2
CSV_COLUMNS = ("mrr", "hits1", "hits3", "hits10", "params", "triples_per_second")
CHECKPOINT_NAME = "best.ckpt"


@dataclass
class MetricsRecord:
    run_id: str
    config: dict
    report: EvalReport
    params: int
    loss_curve: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = self.report.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        d = dict(d)
        d["report"] = EvalReport.from_dict(d["report"])
        return cls(**d)


def run_id(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def emit_metrics(record: MetricsRecord, directory: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
    """Write ``<stem>.json`` (full record) and ``<stem>.csv`` (one flat row)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = directory / f"{stem}.json"
    doc.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    row = directory / f"{stem}.csv"
    r = record.report
    with open(row, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerow([r.mrr, r.hits1, r.hits3, r.hits10, record.params, r.triples_per_second])
    return doc, row


def load_metrics(path: str | Path) -> MetricsRecord:
    return MetricsRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# commands


def _load_graph(cfg: RunConfig, for_training: bool = False):
    paths = cfg.data_paths()
    for p in paths:
        if not p.is_file():
            raise DataError(f"dataset file not found: {p}")
    graph = load_dataset(*paths)
    if for_training and cfg.train.regime == "one-N":
        graph = augment_reciprocals(graph)
    return graph


def cmd_prepare(cfg: RunConfig, args) -> int:
    graph = _load_graph(cfg)
    out = cfg.output_path
    graph.vocab.save(out)
    stats = graph.statistics()
    (out / "dataset_stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(f"entities: {stats['entities']}")
    print(f"relations: {stats['relations']}")
    print(f"train/valid/test: {stats['train']}/{stats['valid']}/{stats['test']}")
    return 0


def cmd_params(cfg: RunConfig, args) -> int:
    if cfg.data.has_files:
        graph = _load_graph(cfg)
        n_ent, n_rel = graph.n_entities, graph.n_base_relations
    elif cfg.data.num_entities and cfg.data.num_relations:
        n_ent, n_rel = cfg.data.num_entities, cfg.data.num_relations
    else:
        raise ConfigError("params needs dataset files or data.num_entities / data.num_relations")
    for name, shape, count in parameter_breakdown(cfg.model, n_ent, n_rel):
        print(f"{name}\t{'x'.join(map(str, shape))}\t{count}")
    print(f"total\t{count_parameters(cfg.model, n_ent, n_rel)}")
    return 0


def _absolute_paths(cfg: RunConfig, doc: dict) -> dict:
    """Rewrite the data and output paths of ``doc`` so it loads from any directory."""
    for key in ("train", "valid", "test"):
        if doc["data"][key]:
            doc["data"][key] = str(cfg.resolve(doc["data"][key]).resolve())
    doc["output_dir"] = str(cfg.resolve(doc["output_dir"]).resolve())
    return doc


def cmd_train(cfg: RunConfig, args) -> int:
    graph = _load_graph(cfg, for_training=True)
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    doc = _absolute_paths(cfg, cfg.to_dict())
    (out / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    model = KGEModel.for_graph(cfg.model, graph)
    result = train(model, graph, cfg.train, log_path=log_path)
    model.load_state_dict(result.best_state)
    save_checkpoint(model, out / CHECKPOINT_NAME, metadata={"best_epoch": result.best_epoch})
    valid = graph.base_triples("valid")
    report = evaluate(model, valid, graph, workers=cfg.eval.workers) if len(valid) else None
    if report is not None:
        record = MetricsRecord(run_id(cfg), cfg.to_dict(), report, model.num_parameters(), log_path.name,
                               {"split": "valid", "best_epoch": result.best_epoch})
        emit_metrics(record, out)
        print(f"best epoch {result.best_epoch}: valid MRR {report.mrr:.4f}")
    return 0


def _load_model_for(cfg: RunConfig) -> KGEModel:
    path = cfg.output_path / CHECKPOINT_NAME
    if not path.is_file():
        raise CheckpointMismatchError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if ckpt.config.to_dict() != {**cfg.model.to_dict(), "seed": ckpt.config.seed}:
        raise CheckpointMismatchError(
            f"checkpoint model config ({ckpt.config.scorer}) disagrees with --config ({cfg.model.scorer})")
    return ckpt.model


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _load_model_for(cfg)
    graph = _load_graph(cfg)
    if (graph.n_entities, graph.n_base_relations) != (model.n_entities, model.n_base_relations):
        raise CheckpointMismatchError("checkpoint table sizes do not match the dataset")
    split = args.split or cfg.eval.split
    report = evaluate(model, graph.base_triples(split), graph, workers=cfg.eval.workers,
                      batch_size=cfg.eval.batch_size)
    out = cfg.output_path
    report.save(out / f"eval_{split}.json")
    emit_metrics(MetricsRecord(run_id(cfg), cfg.to_dict(), report, model.num_parameters(), None,
                               {"split": split}), out, stem=f"metrics_{split}")
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_direction"}, sort_keys=True))
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    model = _load_model_for(cfg)
    graph = _load_graph(cfg)
    split = args.split or cfg.bench.split
    rate = bench_throughput(model, graph.base_triples(split), graph, cfg.bench.repetitions, cfg.bench.workers)
    (cfg.output_path / "bench.json").write_text(json.dumps({"split": split, "triples_per_second": rate}) + "\n")
    print(f"triples/sec: {rate:.2f}")
    return 0


def grid_configs(cfg: RunConfig) -> list[dict]:
    """Expand the decompression and learning-rate search ranges around ``cfg``."""
    base = cfg.to_dict()
    scorer = cfg.model.scorer
    d = cfg.model.d_e
    variants: list[dict] = [dict(d_e=d, d_r=d, entity_decom={}, relation_decom={})]
    if scorer == "rescal":
        for out in C.FC_OUT_GRID:
            for pre in C.RESCAL_PRE_DECOM_GRID:
                variants.append(dict(d_e=d, d_r=pre, entity_decom=dict(kind="fc", out_dim=out),
                                     relation_decom=dict(kind="fc", out_dim=out)))
            variants.append(dict(d_e=d, d_r=out, entity_decom=dict(kind="fc", out_dim=out), relation_decom={}))
    else:
        specs = [dict(kind="fc", out_dim=out) for out in C.FC_OUT_GRID]
        specs += [dict(kind="conv", conv_channels=c, conv_ksize=k, out_dim=c * d)
                  for c in C.CONV_CHANNELS_GRID for k in C.CONV_KSIZE_GRID]
        for spec in specs:
            out = spec["out_dim"]
            variants.append(dict(d_e=d, d_r=d, entity_decom=spec, relation_decom=spec))
            variants.append(dict(d_e=d, d_r=out, entity_decom=spec, relation_decom={}))
            variants.append(dict(d_e=out, d_r=d, entity_decom={}, relation_decom=spec))
    lrs = ADAM_LR_GRID if cfg.train.optimizer == "adam" else ADAGRAD_LR_GRID
    out = []
    for i, v in enumerate(variants):
        for lr in lrs:
            doc = copy.deepcopy(base)
            doc["model"].update(copy.deepcopy(v))
            for key in ("entity_decom", "relation_decom"):
                doc["model"][key] = {**asdict(DeComSpec()), **doc["model"][key]}
                if key == "entity_decom" and cfg.model.entity_decom.post_l2_normalize:
                    doc["model"][key]["post_l2_normalize"] = doc["model"][key]["kind"] != "none"
            doc["train"]["learning_rate"] = lr
            doc["output_dir"] = str(Path(cfg.output_dir) / f"grid_{i:03d}_lr{lr:g}")
            RunConfig.from_dict(doc)  # reject anything the expansion got wrong
            out.append(doc)
    return out


def cmd_grid(cfg: RunConfig, args) -> int:
    target = cfg.output_path / "grid"
    target.mkdir(parents=True, exist_ok=True)
    docs = grid_configs(cfg)
    for i, doc in enumerate(docs):
        _absolute_paths(cfg, doc)
        (target / f"{i:04d}.yaml").write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")
    print(f"wrote {len(docs)} configs to {target}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "params": cmd_params,
    "bench": cmd_bench,
    "grid": cmd_grid,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgdecomp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config (YAML or JSON)")
        p.add_argument("--seed", type=int, help="override model and training seeds")
        if name in ("eval", "bench"):
            p.add_argument("--split", choices=("train", "valid", "test"))
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        cfg.output_path.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except KGDecompError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
