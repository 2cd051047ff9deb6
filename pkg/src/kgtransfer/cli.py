"""Command-line entry point: ``kgtransfer <command> --config run.json [--seed N]``.

Every command writes into ``<output_dir>/<command>/`` through a staging
directory; a failed command leaves its partial output under
``<output_dir>/quarantine/`` instead. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate, project_embeddings, write_projection
from .kg import (AlignmentSet, DatasetSplit, KnowledgeGraph, MultiSourceCollection,
                 add_reverse_triplets, file_checksum, load_alignment, load_split,
                 load_triplets, merge_aligned, remove_leakage, save_kg, write_alignment,
                 write_manifest, write_triplets)
from .paths import build_corpus, dump_corpus_text, save_corpus
from .pipeline import pretrain_teacher, run_joint_lp, run_lp, run_pr4lp
from .pretrain import (Checkpoint, load_checkpoint, prepare_collection, save_checkpoint)
from .rules import mine_rules, rule_report
from .subgraph import linked_subgraph, save_subgraph

COMMANDS = ("ingest", "sample-paths", "pretrain", "build-subgraph", "retrain", "eval",
            "mine-rules", "project")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("kgtransfer")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()}, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgtransfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kgtransfer {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run configuration (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override every seed")
    parser.add_argument("--log-format", choices=("json", "text"), default="json",
                        help="stderr log records as JSON lines or plain text")
    parser.add_argument("--verbose", action="store_true")
    return parser


# -- inputs ------------------------------------------------------------------

class Inputs:
    """Target split, background KGs and their alignments as named by the config."""

    def __init__(self, cfg: RunConfig):
        d = cfg.data
        self.target, self.split = load_split(d.train, d.valid, d.test, "target")
        self.backgrounds: list[KnowledgeGraph] = []
        self.alignments: list[AlignmentSet] = []
        for i, (bg_path, al_path) in enumerate(zip(d.background, d.alignment)):
            name = "background" if len(d.background) == 1 else f"background{i}"
            bg = load_triplets(bg_path, name)
            al = load_alignment(al_path, self.target, bg)
            if d.remove_leakage:
                bg, report = remove_leakage(bg, self.split, al)
                logger.info("removed %d leaking triplets from %s", report.count, name)
            self.backgrounds.append(bg)
            self.alignments.append(al)
        self.files = {"train": d.train, "valid": d.valid, "test": d.test}
        self.files.update({f"background{i}": p for i, p in enumerate(d.background)})
        self.files.update({f"alignment{i}": p for i, p in enumerate(d.alignment)})

    def primary_background(self) -> tuple[KnowledgeGraph, AlignmentSet]:
        if not self.backgrounds:
            raise ConfigError("data.background: this command needs a background KG")
        return self.backgrounds[0], self.alignments[0]


def _checkpoint_index(ckpt: Checkpoint, kg: KnowledgeGraph, split_rows: np.ndarray) -> np.ndarray:
    """Target triplets in checkpoint indices, matching ``KG:name`` members of merged nodes."""
    ent: dict[str, int] = {}
    for i, name in enumerate(ckpt.entities):
        for member in name.split("|"):
            ent.setdefault(member, i)
    rel = ckpt.relation_index()
    out = []
    for s, r, o in np.asarray(split_rows).reshape(-1, 3).tolist():
        keys = (f"{kg.name}:{kg.entities[s]}", f"{kg.name}:{kg.relations[r]}",
                f"{kg.name}:{kg.entities[o]}")
        if keys[0] not in ent or keys[2] not in ent or keys[1] not in rel:
            raise DataError(f"checkpoint has no embedding for triplet {keys}")
        out.append((ent[keys[0]], rel[keys[1]], ent[keys[2]]))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


# -- artifact handling -------------------------------------------------------

class Artifacts:
    """Staging directory promoted on success and quarantined on failure."""

    def __init__(self, cfg: RunConfig, command: str):
        self.root = Path(cfg.output_dir)
        self.final = self.root / command
        self.stage = self.root / f".{command}.partial"
        self.command = command
        self.cfg = cfg
        self.inputs: dict[str, str] = {}

    def __enter__(self) -> Path:
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir(parents=True)
        (self.stage / "config.json").write_text(self.cfg.to_json(), encoding="utf-8")
        return self.stage

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self._manifest()
            if self.final.exists():
                shutil.rmtree(self.final)
            self.stage.rename(self.final)
            return False
        quarantine = self.root / "quarantine"
        quarantine.mkdir(parents=True, exist_ok=True)
        n = 0
        while (quarantine / f"{self.command}-{n}").exists():
            n += 1
        self.stage.rename(quarantine / f"{self.command}-{n}")
        (quarantine / f"{self.command}-{n}" / "error.txt").write_text(
            f"{exc_type.__name__}: {exc}\n", encoding="utf-8")
        return False

    def _manifest(self):
        items = {"tool": "kgtransfer", "version": __version__, "command": self.command,
                 "setting": self.cfg.setting, "seed": self.cfg.seed,
                 "threads": self.cfg.threads, "config_sha256": self.cfg.digest()}
        for key, path in sorted(self.inputs.items()):
            items[f"input.{key}"] = file_checksum(path)
        write_manifest(self.stage / "manifest.txt", items)


def _write_history(history: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _teacher(cfg: RunConfig, inputs: Inputs, art: Artifacts) -> Checkpoint:
    if cfg.data.teacher:
        art.inputs["teacher"] = cfg.data.teacher
        return load_checkpoint(cfg.data.teacher)
    saved = Path(cfg.output_dir) / "pretrain" / "checkpoint"
    if saved.exists():
        art.inputs["teacher"] = str(saved)
        return load_checkpoint(saved)
    logger.info("no teacher checkpoint found; pre-training one")
    return pretrain_teacher(inputs.backgrounds, [], cfg.settings()).checkpoint


# -- commands ------------------------------------------------------------------

def cmd_ingest(cfg, inputs, out, art):
    save_kg(inputs.target.with_triplets(inputs.split.train), out / "target")
    for part in ("train", "valid", "test"):
        write_triplets(inputs.target, out / f"{part}.tsv", getattr(inputs.split, part))
    for bg, al in zip(inputs.backgrounds, inputs.alignments):
        save_kg(bg, out / bg.name)
        write_alignment(al, inputs.target, bg, out / f"alignment_{bg.name}.tsv")
    stats = {"target_entities": inputs.target.num_entities,
             "target_relations": inputs.target.num_relations,
             "train": len(inputs.split.train), "valid": len(inputs.split.valid),
             "test": len(inputs.split.test)}
    for bg, al in zip(inputs.backgrounds, inputs.alignments):
        stats[f"{bg.name}_triplets"] = len(bg)
        stats[f"{bg.name}_aligned"] = len(al)
    write_manifest(out / "stats.txt", stats)
    print(" ".join(f"{k}={v}" for k, v in stats.items()))


def cmd_sample_paths(cfg, inputs, out, art):
    if cfg.setting == "pr4lp" and inputs.backgrounds:
        collection = MultiSourceCollection(inputs.backgrounds, [])
        union, mapping, ent, rel, names = prepare_collection(collection)
        corpus = build_corpus(union, cfg.walk, mapping, cfg.pretrain.augmentation_multiplier,
                              ent, rel, names)
        kg = union
    else:
        kg = add_reverse_triplets(inputs.target.with_triplets(inputs.split.train))
        corpus = build_corpus(kg, cfg.walk, {})
    save_corpus(corpus, out / "corpus.bin")
    dump_corpus_text(corpus, kg, out / "paths.tsv")
    print(f"paths={len(corpus)} length={cfg.walk.path_length}")


def cmd_pretrain(cfg, inputs, out, art):
    if not inputs.backgrounds:
        raise ConfigError("data.background: pre-training needs at least one background KG")
    result = pretrain_teacher(inputs.backgrounds, [], cfg.settings(),
                              log=lambda r: logger.info(json.dumps(r, sort_keys=True)))
    save_checkpoint(result.checkpoint, out / "checkpoint")
    _write_history(result.history, out / "history.jsonl")
    print(f"epochs={len(result.history)} final_loss={result.history[-1]['mean_loss']:.6f}")


def cmd_build_subgraph(cfg, inputs, out, art):
    bg, al = inputs.primary_background()
    budget = len(inputs.split.train) if cfg.budget is None else cfg.budget
    sub = linked_subgraph(bg, al, budget, cfg.retrain.seed)
    save_subgraph(bg, inputs.target, sub, out / "subgraph")
    print(f"linked={len(sub.full)} core={len(sub.core)} sampled={len(sub.sampled)} "
          f"budget={budget}")


def cmd_retrain(cfg, inputs, out, art):
    s = cfg.settings()
    log = lambda r: logger.info(json.dumps(r, sort_keys=True))  # noqa: E731
    if cfg.setting == "lp":
        result = run_lp(inputs.target, inputs.split, s, log)
    elif cfg.setting == "joint-lp":
        bg, al = inputs.primary_background()
        result = run_joint_lp(inputs.target, inputs.split, bg, al, s, log)
    else:
        bg, al = inputs.primary_background()
        teacher = _teacher(cfg, inputs, art)
        result = run_pr4lp(inputs.target, inputs.split, bg, al, s, teacher, log)
        save_subgraph(bg, inputs.target, result.subgraph, out / "subgraph")
    save_checkpoint(result.student.checkpoint, out / "checkpoint")
    _write_history(result.student.history, out / "history.jsonl")
    (out / "metrics.json").write_text(result.report.to_json() + "\n", encoding="utf-8")
    (out / "metrics.tsv").write_text(result.report.to_tsv(), encoding="utf-8")
    print(result.report.to_text())


def _model_path(explicit, cfg: RunConfig) -> Path:
    path = Path(explicit) if explicit else Path(cfg.output_dir) / "retrain" / "checkpoint"
    if not path.exists():
        raise DataError(f"checkpoint not found: {path} (run `retrain` first)")
    return path


def cmd_eval(cfg, inputs, out, art):
    path = _model_path(cfg.eval.checkpoint, cfg)
    art.inputs["checkpoint"] = str(path)
    model = load_checkpoint(path)
    test = _checkpoint_index(model, inputs.target, inputs.split.test)
    known = _checkpoint_index(model, inputs.target, inputs.split.train)
    if cfg.distill.filter_all:
        known = np.concatenate([known, _checkpoint_index(model, inputs.target,
                                                         inputs.split.valid), test])
    report = evaluate(model, test, known, cfg.setting, cfg.eval.both_directions)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(report.to_text())


def cmd_mine_rules(cfg, inputs, out, art):
    if not inputs.backgrounds:
        raise ConfigError("data.background: rule mining needs a background KG")
    train_kg = inputs.target.with_triplets(inputs.split.train)
    alignments = [al.reversed() for al in inputs.alignments]
    joint = merge_aligned(MultiSourceCollection(inputs.backgrounds + [train_kg], alignments))
    r = cfg.rules
    rules = mine_rules(joint.kg, r.max_body, r.min_confidence, r.min_support, r.cross_kg)
    text = rule_report(rules, "text")
    (out / "rules.txt").write_text(text, encoding="utf-8")
    (out / "rules.tsv").write_text(rule_report(rules, "tsv"), encoding="utf-8")
    print(text, end="")


def cmd_project(cfg, inputs, out, art):
    path = _model_path(cfg.project.checkpoint, cfg)
    art.inputs["checkpoint"] = str(path)
    model = load_checkpoint(path)
    index = {}
    for i, name in enumerate(model.entities):
        for member in name.split("|"):
            index.setdefault(member, i)
    if cfg.project.entities:
        names = list(cfg.project.entities)
        missing = [n for n in names if f"{inputs.target.name}:{n}" not in index]
        if missing:
            raise DataError(f"project.entities: unknown entity {missing[0]!r}")
        rows = [index[f"{inputs.target.name}:{n}"] for n in names]
    else:
        rows = model.candidate_entities.tolist()
        names = [model.entities[i] for i in rows]
    projected = project_embeddings(model, rows, names)
    write_projection(projected, out / "projection.tsv")
    print(f"projected={len(projected)}")


HANDLERS = {
    "ingest": cmd_ingest, "sample-paths": cmd_sample_paths, "pretrain": cmd_pretrain,
    "build-subgraph": cmd_build_subgraph, "retrain": cmd_retrain, "eval": cmd_eval,
    "mine-rules": cmd_mine_rules, "project": cmd_project,
}


def run(cfg: RunConfig, command: str) -> None:
    """Run one command against a validated config, writing its artifact directory."""
    art = Artifacts(cfg, command)
    with art as out:
        inputs = Inputs(cfg)
        art.inputs.update(inputs.files)
        HANDLERS[command](cfg, inputs, out, art)


def _configure_logging(fmt: str, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if fmt == "json"
                         else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("kgtransfer")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.log_format, args.verbose)
    try:
        cfg = load_config(args.config, args.seed)
        run(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
