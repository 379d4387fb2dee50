"""Command implementations behind the CLI.

Every command validates a raw config mapping, runs inside a staging
directory next to ``out`` and only moves its files into ``out`` once it
has succeeded. Each run leaves ``summary.json``, ``config.resolved.json``
and ``log.jsonl`` (plus any checkpoints, tables and figures) in ``out``.
Wall-clock timings go to ``timing.json`` so that everything else is a
pure function of (config, seed).
"""

from __future__ import annotations

import os
import shutil
import time
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from . import config as cfgmod
from . import data, gradcheck, metrics, nets, report, toy, transfer, zeroshot
from .config import ConfigError, Resolver

Handler = Callable[[Any, Resolver, Path], dict]


def _settings(m: cfgmod.TrainModel) -> transfer.TrainSettings:
    return transfer.TrainSettings(**m.model_dump())


def _labeled(res: Resolver, ref: cfgmod.DataRef, field: str) -> data.LabeledDataset:
    ds = res.dataset(ref)
    if not isinstance(ds, data.LabeledDataset):
        raise ConfigError([(f"{field}.manifest", "expected a labeled dataset")])
    if len(ds) == 0:
        raise ConfigError([(field, "selects no samples")])
    return ds


def _epoch_logger(log: report.JsonlLog) -> Callable[[transfer.EpochRecord], None]:
    return lambda r: log.write(r.epoch, train_loss=r.train_loss, test_accuracy=r.test_accuracy)


# ------------------------------------------------------------------ handlers


def _gen_data(cfg: cfgmod.GenDataFile, res: Resolver, out: Path) -> dict:
    base = data.make_toy_shapes(
        cfg.scenes,
        cfg.num_classes,
        seed=cfg.seed,
        size=cfg.size,
        channels=cfg.channels,
        frames_per_scene=cfg.frames_per_scene,
        noise=cfg.noise,
        clutter=cfg.clutter,
    )
    files = {}
    with report.JsonlLog(out / "log.jsonl") as log:
        if cfg.kind == "shapes":
            parts = {"labeled": base}
        else:
            pairs = data.generate_paired_synthetic(cfg.kind, base, seed=cfg.seed, modality_names=cfg.modality_names)
            parts = {"paired": pairs.paired, "labeled_s": pairs.labeled_s, "labeled_d": pairs.labeled_d}
        for i, (name, ds) in enumerate(parts.items()):
            files[name] = str(data.save_dataset(ds, out / name).relative_to(out))
            log.write(i, dataset=name, samples=len(ds))
    scene_ids = next(iter(parts.values())).scene_ids
    split = data.random_split(scene_ids, cfg.split_fractions, seed=cfg.seed)
    cfgmod.save_split(split, out / "split.json")
    first = next(iter(parts.values()))
    return {
        "kind": cfg.kind,
        "files": files,
        "split": "split.json",
        "samples": len(first),
        "scenes": {k: len(getattr(split, k)) for k in ("train", "val", "test")},
        "num_classes": parts.get("labeled", parts.get("labeled_d")).num_classes,
    }


def _train_teacher(cfg: cfgmod.TeacherFile, res: Resolver, out: Path) -> dict:
    train = _labeled(res, cfg.train_data, "train_data")
    test = _labeled(res, cfg.test_data, "test_data") if cfg.test_data else None
    if cfg.spec is not None:
        spec = cfg.spec.build()
    else:
        spec = toy.teacher_spec(
            cfg.arch.num_classes or train.num_classes,
            input_shape=train.sample_shape,
            widths=tuple(cfg.arch.widths),
            hidden=cfg.arch.hidden,
        )
    net = nets.build_network(spec, seed=cfg.train.seed, modality_tag=cfg.modality_tag)
    with report.JsonlLog(out / "log.jsonl") as log:
        history = transfer.train_classifier(net, train, _settings(cfg.train), test, _epoch_logger(log))
    nets.save_checkpoint(net, out / "teacher.pten", extra={"class_names": train.class_names})
    return {
        "checkpoint": "teacher.pten",
        "accuracy": history[-1].test_accuracy,
        "final_train_loss": history[-1].train_loss,
        "num_train": len(train),
        "param_count": net.param_count(),
    }


def _points(cfg: cfgmod.TransferFile) -> list[transfer.TransferPoint]:
    return [
        transfer.TransferPoint(
            p.teacher_layer,
            p.student_layer or p.teacher_layer,
            transfer.AdapterSpec(**p.adapter.model_dump()),
            p.weight,
        )
        for p in cfg.points
    ]


def _paired(res: Resolver, ref: cfgmod.DataRef) -> data.PairedDataset:
    ds = res.dataset(ref)
    if not isinstance(ds, data.PairedDataset):
        raise ConfigError([("paired_data.manifest", "expected a paired dataset")])
    return ds


def _transfer(cfg: cfgmod.TransferFile, res: Resolver, out: Path) -> dict:
    teacher = res.network(cfg.teacher)
    tc = transfer.TransferConfig(
        teacher=teacher,
        student_spec=cfgmod.student_spec_from(cfg.student, teacher),
        points=_points(cfg),
        paired_data=_paired(res, cfg.paired_data),
        loss=transfer.LossSpec(**cfg.loss.model_dump()),
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        learning_rate=cfg.optim.learning_rate,
        momentum=cfg.optim.momentum,
        lr_schedule=[tuple(x) for x in cfg.optim.lr_schedule],
        seed=cfg.seed,
    )
    with report.JsonlLog(out / "log.jsonl") as log:
        rep = transfer.train_transfer(tc, on_step=lambda r: log.write(r.step, loss=r.total, per_point=r.per_point))
    nets.save_checkpoint(rep.student, out / "student.pten")
    adapters = {}
    for i, (key, adapter) in enumerate(rep.adapters.items()):
        name = f"adapter-{i}.pten"
        nets.save_checkpoint(adapter, out / name, extra={"point": key})
        adapters[key] = name
    report.plot_loss_curve([r.step for r in rep.loss_history], [r.total for r in rep.loss_history], out / "loss.png")
    return {
        "student": "student.pten",
        "adapters": adapters,
        "iterations": cfg.iterations,
        "initial_loss": rep.initial_loss,
        "final_loss": rep.final_loss,
        "loss_ratio": rep.final_loss / rep.initial_loss if rep.initial_loss else None,
        "calibration": rep.calibration,
        "_wall_time": rep.wall_time,
    }


def _finetune(cfg: cfgmod.FinetuneFile, res: Resolver, out: Path) -> dict:
    student = res.network(cfg.student)
    if cfg.student_upto is not None:
        student = nets.truncate(student, cfg.student_upto)
    head = cfgmod.head_spec_from(cfg.head, res)
    train = _labeled(res, cfg.train_data, "train_data")
    test = _labeled(res, cfg.test_data, "test_data") if cfg.test_data else None
    with report.JsonlLog(out / "log.jsonl") as log:
        result = transfer.finetune(student, head, train, cfg.mode, _settings(cfg.train), test, _epoch_logger(log))
    nets.save_checkpoint(result.classifier, out / "classifier.pten", extra={"mode": cfg.mode})
    return {
        "mode": cfg.mode,
        "checkpoint": "classifier.pten",
        "accuracy": result.accuracy,
        "final_train_loss": result.history[-1].train_loss,
        "num_train": len(train),
    }


def _probe(cfg: cfgmod.ProbeFile, res: Resolver, out: Path) -> dict:
    net = res.network(cfg.network)
    if cfg.reinit_seed is not None:
        net = nets.build_network(net.spec, seed=cfg.reinit_seed, modality_tag=net.modality_tag)
    train = _labeled(res, cfg.train_data, "train_data")
    test = _labeled(res, cfg.test_data, "test_data")
    r = transfer.linear_probe(net, cfg.layer, train, test, cfg.max_iter)
    with report.JsonlLog(out / "log.jsonl") as log:
        log.write(0, layer=r.layer, accuracy=r.accuracy, train_accuracy=r.train_accuracy)
    return {
        "layer": r.layer,
        "accuracy": r.accuracy,
        "train_accuracy": r.train_accuracy,
        "feature_dim": r.feature_dim,
        "reinitialised": cfg.reinit_seed is not None,
    }


def _sweep(cfg: cfgmod.SweepFile, res: Resolver, out: Path) -> dict:
    teacher = res.network(cfg.teacher)
    adapter = transfer.AdapterSpec(**cfg.adapter.model_dump())
    template = transfer.TransferConfig(
        teacher=teacher,
        student_spec=teacher.spec,
        points=[transfer.TransferPoint(cfg.points[0], cfg.points[0], adapter)],
        paired_data=_paired(res, cfg.paired_data),
        loss=transfer.LossSpec(**cfg.loss.model_dump()),
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        learning_rate=cfg.optim.learning_rate,
        momentum=cfg.optim.momentum,
        lr_schedule=[tuple(x) for x in cfg.optim.lr_schedule],
        seed=cfg.seed,
    )
    rows = transfer.sweep_layers(
        template,
        [(p, p) for p in cfg.points],
        head_for=lambda layer: toy.upper_spec(teacher.spec, layer),
        labeled=_labeled(res, cfg.train_data, "train_data"),
        test=_labeled(res, cfg.test_data, "test_data"),
        settings=_settings(cfg.train),
        student_spec_for=lambda layer: toy.lower_spec(teacher.spec, layer),
        adapter=adapter,
    )
    table = [
        {"rank": i + 1 if r.skipped is None else None, "point": r.student_layer, "accuracy": r.accuracy,
         "final_transfer_loss": r.final_loss, "skipped": r.skipped}
        for i, r in enumerate(rows)
    ]
    report.write_table(table, out / "sweep.csv", ["rank", "point", "accuracy", "final_transfer_loss", "skipped"])
    by_point = {r.student_layer: r for r in rows}
    with report.JsonlLog(out / "log.jsonl") as log:
        for i, p in enumerate(cfg.points):
            r = by_point[p]
            log.write(i, point=p, accuracy=r.accuracy, final_transfer_loss=r.final_loss, skipped=r.skipped)
    report.plot_sweep(cfg.points, [by_point[p].accuracy for p in cfg.points], out / "sweep.png")
    return {"rows": table, "best": rows[0].student_layer if rows and rows[0].skipped is None else None}


def _zero_shot(cfg: cfgmod.ZeroShotFile, res: Resolver, out: Path) -> dict:
    teacher = res.network(cfg.teacher)
    franken = zeroshot.assemble_franken(
        res.network(cfg.student), teacher, cfg.seam, res.network(cfg.adapter) if cfg.adapter else None
    )
    test = _labeled(res, cfg.test_data, "test_data")
    logits = franken.predict(test.images)
    rep = metrics.classification_report(logits, test.labels, test.class_names)
    metrics.export_metrics(rep, out / "metrics.json")
    summary = {"seam": cfg.seam, "accuracy": rep.accuracy, "mean_ap": rep.mean_ap, "labeled_target_samples_used": 0}
    if cfg.reference_data is not None:
        ref = _labeled(res, cfg.reference_data, "reference_data")
        ref_rep = metrics.classification_report(nets.predict(teacher, ref.images), ref.labels, ref.class_names)
        summary.update(reference_accuracy=ref_rep.accuracy, reference_mean_ap=ref_rep.mean_ap)
    with report.JsonlLog(out / "log.jsonl") as log:
        log.write(0, **{k: v for k, v in summary.items() if k != "seam"})
    nets.save_checkpoint(franken.as_network(), out / "franken.pten", extra={"seam": cfg.seam})
    summary["checkpoint"] = "franken.pten"
    return summary


def _eval(cfg: cfgmod.EvalFile, res: Resolver, out: Path) -> dict:
    score_sets, per_model = [], []
    labels, class_names = None, None
    for i, m in enumerate(cfg.models):
        ds = _labeled(res, m.data, f"models.{i}.data")
        if labels is None:
            labels, class_names = ds.labels, ds.class_names
        elif not np.array_equal(ds.labels, labels):
            raise ConfigError([(f"models.{i}.data", "labels differ from models.0; fused sets must be aligned")])
        scores = nets.predict(res.network(m.checkpoint), ds.images)
        one = metrics.classification_report(scores, labels, class_names)
        per_model.append({"checkpoint": m.checkpoint, "accuracy": one.accuracy, "mean_ap": one.mean_ap})
        score_sets.append(scores)
    if cfg.weights is not None and len(cfg.weights) != len(cfg.models):
        raise ConfigError([("weights", f"expected {len(cfg.models)} weights, got {len(cfg.weights)}")])
    fused = zeroshot.fuse_scores(score_sets, cfg.weights)
    rep = metrics.classification_report(fused, labels, class_names)
    metrics.export_metrics(rep, out / "metrics.json")
    metrics.export_metrics(rep, out / "metrics.csv", format="csv")
    value = rep.accuracy if cfg.metric == "acc" else rep.mean_ap
    with report.JsonlLog(out / "log.jsonl") as log:
        for i, pm in enumerate(per_model):
            log.write(i, **pm)
        log.write(len(per_model), checkpoint="fused" if len(per_model) > 1 else per_model[0]["checkpoint"],
                  accuracy=rep.accuracy, mean_ap=rep.mean_ap)
    return {
        "metric": cfg.metric,
        "value": value,
        "accuracy": rep.accuracy,
        "mean_ap": rep.mean_ap,
        "fused": len(cfg.models) > 1,
        "per_model": per_model,
        "num_samples": rep.num_samples,
    }


def _gradcheck(cfg: cfgmod.GradcheckFile, res: Resolver, out: Path) -> dict:
    errors = gradcheck.check_all_kernels(seed=cfg.seed, probes=cfg.probes, eps=cfg.eps)
    with report.JsonlLog(out / "log.jsonl") as log:
        for i, (name, err) in enumerate(errors.items()):
            log.write(i, kernel=name, max_rel_error=err, passed=err <= cfg.tolerance)
    worst = max(errors.values())
    return {"max_rel_error": errors, "worst": worst, "tolerance": cfg.tolerance, "passed": worst <= cfg.tolerance}


HANDLERS: dict[str, Handler] = {
    "gen-data": _gen_data,
    "train-teacher": _train_teacher,
    "transfer": _transfer,
    "finetune": _finetune,
    "probe": _probe,
    "sweep-layers": _sweep,
    "zero-shot": _zero_shot,
    "eval": _eval,
    "gradcheck": _gradcheck,
}


# ----------------------------------------------------------------- execution


def _staging_dir(out: Path) -> Path:
    return out.parent / f".{out.name}.partial-{os.getpid()}"


def _publish(staging: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(staging.iterdir()):
        dest = out / item.name
        if dest.is_dir() and not dest.is_symlink():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        item.rename(dest)
    staging.rmdir()


def staged(out: str | os.PathLike, body: Callable[[Path], dict]) -> dict:
    """Run ``body(staging_dir)``; publish its files into ``out`` only on success."""
    out = Path(out)
    staging = _staging_dir(out)
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        summary = body(staging)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    _publish(staging, out)
    return summary


def execute(
    command: str,
    raw: Mapping[str, Any],
    out: str | os.PathLike,
    base_dir: str | os.PathLike | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> dict:
    """Validate ``raw`` (after ``overrides``) and run ``command`` into ``out``."""
    if command not in HANDLERS:
        raise ConfigError([("<command>", f"unknown command {command!r}")])
    resolved = cfgmod.apply_overrides(raw, overrides or {})
    cfg = cfgmod.validate(command, resolved)
    res = Resolver(base_dir if base_dir is not None else Path.cwd())

    def body(stage: Path) -> dict:
        t0 = time.perf_counter()
        summary = HANDLERS[command](cfg, res, stage)
        wall = summary.pop("_wall_time", None)
        summary = {"command": command, "status": "ok", **summary}
        report.write_json(cfg.model_dump(mode="json"), stage / "config.resolved.json")
        report.write_json(summary, stage / "summary.json")
        report.write_json({"wall_time": time.perf_counter() - t0, "inner_wall_time": wall}, stage / "timing.json")
        return summary

    return staged(out, body)


def execute_file(command: str, path: str | os.PathLike, out: str | os.PathLike, overrides: Mapping[str, Any] | None = None) -> dict:
    """Like :func:`execute` with ``raw`` read from a YAML/JSON file; paths resolve next to it."""
    path = Path(path)
    return execute(command, cfgmod.read_config_file(path), out, base_dir=path.parent, overrides=overrides)


def _cmd(name: str):
    def run(
        config: Mapping[str, Any] | str | os.PathLike | None,
        out: str | os.PathLike,
        base_dir: str | os.PathLike | None = None,
        **overrides: Any,
    ) -> dict:
        ov = {k.replace("__", "."): v for k, v in overrides.items()}
        if config is None:
            return execute(name, {}, out, base_dir=base_dir, overrides=ov)
        if isinstance(config, Mapping):
            return execute(name, config, out, base_dir=base_dir, overrides=ov)
        return execute_file(name, config, out, overrides=ov)

    run.__name__ = "cmd_" + name.replace("-", "_")
    run.__doc__ = (
        f"Run ``{name}``; keyword overrides use ``__`` for nesting (``optim__learning_rate=0.01``). "
        "Relative paths in a mapping config resolve against ``base_dir`` (default: cwd)."
    )
    return run


cmd_gen_data = _cmd("gen-data")
cmd_train_teacher = _cmd("train-teacher")
cmd_transfer = _cmd("transfer")
cmd_finetune = _cmd("finetune")
cmd_probe = _cmd("probe")
cmd_sweep_layers = _cmd("sweep-layers")
cmd_zero_shot = _cmd("zero-shot")
cmd_eval = _cmd("eval")
cmd_gradcheck = _cmd("gradcheck")
