"""Command-line entry points.

Every subcommand reads one JSON RunConfig, writes artifacts into ``--out`` and
exits 0 on success, 2 on a config problem and 1 on any other failure (with
``error.json`` describing it).  Artifacts carry no timestamps, so reruns with
the same config and seed are byte-identical.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable

import click
import numpy as np
import pydantic

from . import analysis as an
from . import backbone as bb
from . import data as dt
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .report import emit_report
from .routing import ElasticModel
from .trainer import evaluate, pretrain_teacher, train_distill

log = logging.getLogger("elasticlab")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        cfg = apply_seed(cfg, seed)
    return cfg.check()


def apply_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override every seed in the document with ``seed``."""
    doc = cfg.model_dump(mode="json")
    doc["seed"] = seed
    for section in ("model", "train", "teacher_train", "prune"):
        doc[section]["seed"] = seed
    return RunConfig.model_validate(doc)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _images(cfg: RunConfig):
    m = cfg.model
    patches, labels = dt.make_synthetic_images(cfg.data.n_images, m.image_grid, cfg.data.image_classes, cfg.seed)
    if patches.shape[-1] != m.patch_dim:
        raise ConfigError(f"synthetic patches have dim {patches.shape[-1]}, model expects {m.patch_dim}")
    split = int(len(patches) * (1.0 - cfg.data.eval_frac))
    return patches[:split], labels[:split], patches[split:], labels[split:]


def train_data(cfg: RunConfig, corpus: str | None = None, classes=None) -> np.ndarray:
    if cfg.model.mode == "causal_lm":
        return dt.load_corpus(corpus or cfg.data.corpus, cfg.data.eval_frac).train
    x, y, _, _ = _images(cfg)
    classes = classes if classes is not None else cfg.data.train_classes
    return x if classes is None else x[dt.class_subset(y, classes)]


def eval_sets(cfg: RunConfig) -> dict[str, list[np.ndarray]]:
    bs, nb = cfg.train.batch_size, cfg.data.eval_batches
    if cfg.model.mode == "causal_lm":
        seq = min(cfg.train.seq_len, cfg.model.max_seq)
        return {name: dt.eval_batches(dt.windows(dt.load_corpus(name, cfg.data.eval_frac).eval, seq + 1), bs, nb)
                for name in cfg.data.eval_corpora}
    _, _, x, _ = _images(cfg)
    return {"images": dt.eval_batches(x, bs, nb)}


def obtain_teacher(cfg: RunConfig, out: Path) -> bb.TransformerParams:
    """Load the configured teacher, reuse ``out/teacher``, or pretrain one there."""
    if cfg.teacher:
        params = load_checkpoint(cfg.teacher).params
    elif (out / "teacher" / "manifest.json").is_file():
        params = load_checkpoint(out / "teacher").params
    else:
        log.info("no teacher checkpoint found; pretraining into %s", out / "teacher")
        return _pretrain(cfg, out)
    if params.config != cfg.model:
        raise ConfigError("teacher checkpoint model config differs from the run config")
    return params.freeze()


def _pretrain(cfg: RunConfig, out: Path) -> bb.TransformerParams:
    corpus = cfg.data.teacher_corpus
    data = train_data(cfg, corpus=corpus, classes=None) if cfg.model.mode == "causal_lm" else _images(cfg)[0]
    teacher, _ = pretrain_teacher(cfg.model, data, cfg.teacher_train, out / "teacher_train.jsonl")
    save_checkpoint(teacher, None, out / "teacher")
    return teacher


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain_teacher(cfg: RunConfig, out: Path, threads: int) -> None:
    teacher = _pretrain(cfg, out)
    metrics = {}
    if cfg.model.mode == "causal_lm":
        for name, batches in eval_sets(cfg).items():
            metrics[name] = {"teacher_lm_loss": an.teacher_baseline(teacher, batches, cfg.seed).eval_task_metric}
    write_json(out / "teacher_metrics.json", {"digest": teacher.digest(), "eval": metrics})


def cmd_distill(cfg: RunConfig, out: Path, threads: int) -> None:
    teacher = obtain_teacher(cfg, out)
    model, _ = train_distill(teacher, cfg.elastic, cfg.distill, cfg.train, train_data(cfg),
                             out / "distill_train.jsonl")
    save_checkpoint(model.params, model.routers, out / "student", elastic=cfg.elastic)
    write_json(out / "student_summary.json", {
        "trainable_params": bb.count_params(model, trainable_only=True),
        "compute": an.active_compute(cfg.model, cfg.elastic),
        "teacher_digest": teacher.digest(),
    })


def cmd_eval(cfg: RunConfig, out: Path, threads: int) -> None:
    teacher = obtain_teacher(cfg, out)
    path = Path(cfg.student) if cfg.student else out / "student"
    ckpt = load_checkpoint(path)
    elastic = ckpt.elastic or cfg.elastic
    model = ElasticModel(ckpt.params, elastic, ckpt.routers)
    mode = "infer" if cfg.sweep.eval_routing == "threshold" else "train"
    results = {}
    for name, batches in eval_sets(cfg).items():
        metrics = evaluate(model, teacher, batches, cfg.distill, mode=mode)
        metrics["teacher_baseline"] = an.teacher_baseline(teacher, batches, cfg.seed).eval_task_metric
        results[name] = metrics
    write_json(out / "eval.json", {"mode": mode, "elastic": elastic.model_dump(mode="json"), "corpora": results})


def cmd_sweep(cfg: RunConfig, out: Path, threads: int) -> None:
    teacher = obtain_teacher(cfg, out)
    sets = eval_sets(cfg)
    eval_data = [b for batches in sets.values() for b in batches]
    result = an.capacity_sweep(teacher, cfg.sweep.kinds, cfg.sweep.capacities, cfg.distill, cfg.train,
                               train_data(cfg), eval_data, cfg.elastic, cfg.sweep.eval_routing, threads)
    (out / "sweep.csv").write_text(result.to_csv())
    (out / "sweep.json").write_text(result.to_json(cfg.model_dump(mode="json")))


def cmd_prune(cfg: RunConfig, out: Path, threads: int) -> None:
    if cfg.model.mode != "causal_lm":
        raise ConfigError("prune measures LM loss and needs a causal_lm model")
    teacher = obtain_teacher(cfg, out)
    rows = []
    for name, batches in eval_sets(cfg).items():
        rows.extend(an.prune_eval(teacher, cfg.prune, batches, corpus=name).rows)
    result = an.PruneResult(rows)
    (out / "prune.csv").write_text(result.to_csv())
    curves = {}
    for name in cfg.data.eval_corpora:
        counts, deltas = result.curve(name)
        curves[name] = {"spearman": _finite_or_none(an.rank_correlation(counts, deltas))}
    write_json(out / "prune.json", {"rows": [r.__dict__ for r in rows], "curves": curves})


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def cmd_compare_routers(cfg: RunConfig, out: Path, threads: int) -> None:
    teacher = obtain_teacher(cfg, out)
    probe = eval_sets(cfg)
    probe_x = np.concatenate(next(iter(probe.values())))
    if cfg.model.mode == "causal_lm":
        probe_x = probe_x[:, :-1]
    models = {}
    for classes in cfg.data.compare_classes:
        name = "classes_" + "_".join(str(c) for c in classes)
        model, _ = train_distill(teacher, cfg.elastic, cfg.distill, cfg.train,
                                 train_data(cfg, classes=classes), out / f"routers_{name}.jsonl")
        models[name] = model
    models["random_init"] = ElasticModel(teacher, cfg.elastic,
                                         an.random_routers(cfg.model, cfg.elastic, cfg.seed + 101))
    sim = an.similarity_matrix(models, probe_x)
    write_json(out / "similarity.json", sim)
    if cfg.model.mode == "encoder":
        write_json(out / "heatmaps.json", {k: an.selection_heatmaps(m, probe_x) for k, m in models.items()})


def cmd_report(cfg: RunConfig, out: Path, threads: int) -> None:
    emit_report(out)


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------

def _setup_logging() -> None:
    level = os.environ.get("ELASTI_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _run(name: str, fn: Callable, config: str | None, out: str, seed: int | None, threads: int) -> None:
    _setup_logging()
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    err_path = out_dir / "error.json"
    if err_path.exists():
        err_path.unlink()
    try:
        cfg = load_config(config, seed)
    except (pydantic.ValidationError, ConfigError, json.JSONDecodeError, OSError) as exc:
        _fail(err_path, name, "config", exc, EXIT_CONFIG)
    if name != "report":
        (out_dir / "config.json").write_text(cfg.dump())
    try:
        fn(cfg, out_dir, threads)
    except (ConfigError, pydantic.ValidationError) as exc:
        _fail(err_path, name, "config", exc, EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001
        log.exception("%s failed", name)
        _fail(err_path, name, "runtime", exc, EXIT_RUNTIME)


def _fail(path: Path, command: str, category: str, exc: BaseException, status: int):
    record = {"command": command, "category": category, "error_type": type(exc).__name__,
              "message": str(exc), "status": status}
    write_json(path, record)
    click.echo(json.dumps(record, sort_keys=True), err=True)
    sys.exit(status)


def _command(name: str, fn: Callable, help_text: str):
    @click.command(name=name, help=help_text)
    @click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
                  help="RunConfig JSON document (defaults apply when omitted).")
    @click.option("--out", "out", type=click.Path(file_okay=False), required=True, help="Output directory.")
    @click.option("--seed", type=click.IntRange(min=0), default=None, help="Override every seed in the config.")
    @click.option("--threads", type=click.IntRange(min=1), default=1, help="Worker threads for sweep cells.")
    def cmd(config, out, seed, threads):
        _run(name, fn, config, out, seed, threads)
    return cmd


COMMANDS = {
    "pretrain-teacher": (cmd_pretrain_teacher, "Pretrain the backbone and save a frozen teacher checkpoint."),
    "distill": (cmd_distill, "Train routers (and LoRA adapters) against the teacher."),
    "eval": (cmd_eval, "Evaluate a distilled student against its teacher on held-out data."),
    "sweep": (cmd_sweep, "Capacity sweep: one router set per (kind, capacity) cell."),
    "prune": (cmd_prune, "Static head / MLP-layer removal curves on each eval corpus."),
    "compare-routers": (cmd_compare_routers, "Train router sets on class subsets and compare their logits."),
    "report": (cmd_report, "Merge run artifacts into report.json."),
}


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Elastic self-distillation lab."""


for _name, (_fn, _help) in COMMANDS.items():
    main.add_command(_command(_name, _fn, _help))


if __name__ == "__main__":
    main()
