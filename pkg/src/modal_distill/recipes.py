"""Bundled experiment recipes on the toy shapes benchmark.

A recipe is an ordered list of command invocations. Each step writes into
``<out>/steps/<step name>/``; step configs use paths relative to ``<out>``,
so a finished output directory can be moved and its ``recipe.json`` replayed.

``table-control-toy``
    scratch vs copied-teacher vs transferred initialisation, fine-tuned with
    50 labels per class, plus linear probes on frozen random, copied and
    transferred features.
``layer-sweep-toy``
    transfer at pool1, pool2 and pool3, then train only the layers above.
``zero-shot-toy``
    teacher upper layers on top of the transferred student, no target labels.
``fusion-toy``
    one classifier per modality on complementary image halves, then the
    mean of their pre-softmax scores.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from pydantic import Field

from . import commands, report
from .config import AdapterModel, _Strict, validate_model

RECIPES = ("table-control-toy", "layer-sweep-toy", "zero-shot-toy", "fusion-toy")


class ToyBenchmark(_Strict):
    num_classes: int = Field(default=8, gt=1)
    noise: float = 0.12
    clutter: int = 2
    teacher_scenes: int = Field(default=600, gt=0)
    teacher_epochs: int = Field(default=8, gt=0)
    teacher_lr: float = 0.01
    teacher_lr_drop_epoch: int | None = 6
    pair_scenes: int = Field(default=560, gt=0)
    pair_test_fraction: float = Field(default=2 / 7, gt=0, lt=1)
    point: str = "pool3"
    # the toy student is the teacher's own lower stack, so features already line up
    adapter: AdapterModel = AdapterModel(kind="identity")
    transfer_iterations: int = Field(default=1000, gt=0)
    transfer_lr: float = 3e-4
    per_class: int = Field(default=50, gt=0)
    finetune_epochs: int = Field(default=30, gt=0)
    finetune_lr: float = 0.01
    finetune_lr_drop_epoch: int | None = 20
    probe_iter: int = Field(default=500, gt=0)
    sweep_points: list[str] = ["pool1", "pool2", "pool3"]
    fusion_classes: int = Field(default=4, gt=1)
    fusion_scenes: int = Field(default=400, gt=0)
    fusion_epochs: int = Field(default=8, gt=0)


class RecipeFile(_Strict):
    name: Literal["table-control-toy", "layer-sweep-toy", "zero-shot-toy", "fusion-toy"]
    seed: int = 0
    toy: ToyBenchmark = ToyBenchmark()


@dataclass
class RecipeStep:
    name: str
    command: str
    config: dict[str, Any]


@dataclass
class ExperimentRecipe:
    name: str
    seed: int
    steps: list[RecipeStep] = field(default_factory=list)

    def add(self, name: str, command: str, config: dict[str, Any]) -> str:
        self.steps.append(RecipeStep(name, command, config))
        return f"steps/{name}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "steps": [{"name": s.name, "command": s.command, "out": f"steps/{s.name}", "config": s.config} for s in self.steps],
        }


def _ref(manifest: str, split: str | None = None, part: str | None = None, **extra) -> dict[str, Any]:
    d: dict[str, Any] = {"manifest": manifest}
    if split is not None:
        d.update(split=split, part=part)
    d.update(extra)
    return d


def _common(r: ExperimentRecipe, toy: ToyBenchmark) -> dict[str, str]:
    """Teacher data, paired data and the teacher; returns useful paths."""
    seed = r.seed
    td = r.add(
        "teacher-data",
        "gen-data",
        {"kind": "shapes", "scenes": toy.teacher_scenes, "num_classes": toy.num_classes, "noise": toy.noise,
         "clutter": toy.clutter, "seed": 100 + seed, "split_fractions": [0.8, 0.0, 0.2]},
    )
    tf = toy.pair_test_fraction
    pd = r.add(
        "pairs",
        "gen-data",
        {"kind": "invertible_affine", "scenes": toy.pair_scenes, "num_classes": toy.num_classes, "noise": toy.noise,
         "clutter": toy.clutter, "seed": 200 + seed, "split_fractions": [1.0 - tf, 0.0, tf]},
    )
    tsplit = f"{td}/split.json"
    teacher = r.add(
        "teacher",
        "train-teacher",
        {
            "train_data": _ref(f"{td}/labeled/manifest.json", tsplit, "train"),
            "test_data": _ref(f"{td}/labeled/manifest.json", tsplit, "test"),
            "train": {"epochs": toy.teacher_epochs, "learning_rate": toy.teacher_lr,
                      "lr_drop_epoch": toy.teacher_lr_drop_epoch, "seed": seed},
        },
    )
    psplit = f"{pd}/split.json"
    return {
        "teacher": f"{teacher}/teacher.pten",
        "paired_train": _ref(f"{pd}/paired/manifest.json", psplit, "train"),
        "d_train": _ref(f"{pd}/labeled_d/manifest.json", psplit, "train", per_class=toy.per_class, per_class_seed=seed),
        "d_test": _ref(f"{pd}/labeled_d/manifest.json", psplit, "test"),
        "s_test": _ref(f"{pd}/labeled_s/manifest.json", psplit, "test"),
    }


def _transfer_step(r: ExperimentRecipe, toy: ToyBenchmark, paths: dict) -> str:
    return r.add(
        "transfer",
        "transfer",
        {
            "teacher": paths["teacher"],
            "student": {"from_teacher": toy.point},
            "points": [{"teacher_layer": toy.point, "adapter": toy.adapter.model_dump()}],
            "paired_data": paths["paired_train"],
            "iterations": toy.transfer_iterations,
            "optim": {"learning_rate": toy.transfer_lr},
            "seed": r.seed,
        },
    )


def _finetune_train(toy: ToyBenchmark, seed: int) -> dict[str, Any]:
    return {"epochs": toy.finetune_epochs, "learning_rate": toy.finetune_lr,
            "lr_drop_epoch": toy.finetune_lr_drop_epoch, "seed": seed}


def build_recipe(name: str, seed: int = 0, toy: ToyBenchmark | None = None) -> ExperimentRecipe:
    toy = toy or ToyBenchmark()
    r = ExperimentRecipe(name, seed)
    if name == "fusion-toy":
        fd = r.add(
            "halves",
            "gen-data",
            {"kind": "complementary_halves", "scenes": toy.fusion_scenes, "num_classes": toy.fusion_classes,
             "noise": toy.noise, "clutter": toy.clutter, "seed": 300 + seed, "split_fractions": [0.75, 0.0, 0.25]},
        )
        split = f"{fd}/split.json"
        models = []
        for m in ("s", "d"):
            step = r.add(
                f"classifier-{m}",
                "train-teacher",
                {"train_data": _ref(f"{fd}/labeled_{m}/manifest.json", split, "train"),
                 "train": {"epochs": toy.fusion_epochs, "learning_rate": toy.teacher_lr,
                           "lr_drop_epoch": toy.teacher_lr_drop_epoch, "seed": seed},
                 "modality_tag": m},
            )
            models.append({"checkpoint": f"{step}/teacher.pten", "data": _ref(f"{fd}/labeled_{m}/manifest.json", split, "test")})
        r.add("eval-fused", "eval", {"models": models, "metric": "acc"})
        return r

    paths = _common(r, toy)
    if name == "layer-sweep-toy":
        r.add(
            "sweep",
            "sweep-layers",
            {"teacher": paths["teacher"], "paired_data": paths["paired_train"], "points": list(toy.sweep_points),
             "adapter": toy.adapter.model_dump(), "iterations": toy.transfer_iterations,
             "optim": {"learning_rate": toy.transfer_lr}, "seed": seed,
             "train_data": paths["d_train"], "test_data": paths["d_test"], "train": _finetune_train(toy, seed)},
        )
        return r

    tr = _transfer_step(r, toy, paths)
    student = f"{tr}/student.pten"
    if name == "zero-shot-toy":
        r.add("zero-shot", "zero-shot",
              {"student": student, "teacher": paths["teacher"], "adapter": f"{tr}/adapter-0.pten", "seam": toy.point,
               "test_data": paths["d_test"], "reference_data": paths["s_test"]})
        return r
    if name != "table-control-toy":
        raise ValueError(f"unknown recipe {name!r}; choose from {RECIPES}")
    head = {"from_teacher": paths["teacher"], "above": toy.point}
    ft = {"train_data": paths["d_train"], "test_data": paths["d_test"], "head": head, "train": _finetune_train(toy, seed)}
    r.add("scratch-finetune", "finetune", {"student": student, "mode": "from_scratch", **ft})
    r.add("teacher-copy-finetune", "finetune", {"student": paths["teacher"], "student_upto": toy.point, "mode": "all", **ft})
    r.add("transfer-finetune", "finetune", {"student": student, "mode": "all", **ft})
    probe = {"layer": toy.point, "train_data": paths["d_train"], "test_data": paths["d_test"], "max_iter": toy.probe_iter}
    r.add("random-probe", "probe", {"network": student, "reinit_seed": seed, **probe})
    r.add("teacher-probe", "probe", {"network": paths["teacher"], **probe})
    r.add("transfer-probe", "probe", {"network": student, **probe})
    return r


_ROW_LABELS = {
    "scratch-finetune": "random init, fine-tune all",
    "teacher-copy-finetune": "copy teacher, fine-tune all",
    "transfer-finetune": "transfer init, fine-tune all",
    "random-probe": "frozen random features, linear probe",
    "teacher-probe": "frozen teacher features, linear probe",
    "transfer-probe": "frozen transferred features, linear probe",
}


def _tables(recipe: ExperimentRecipe, summaries: dict[str, dict], stage: Path) -> dict[str, Any]:
    if recipe.name == "table-control-toy":
        rows = [{"row": k, "setting": v, "accuracy": summaries[k]["accuracy"]} for k, v in _ROW_LABELS.items()]
        report.write_table(rows, stage / "table.csv", ["row", "setting", "accuracy"])
        report.plot_bars([r["row"] for r in rows], [r["accuracy"] for r in rows], stage / "table.png",
                         title="downstream accuracy on the target modality")
        acc = {r["row"]: r["accuracy"] for r in rows}
        return {"rows": rows, "transfer_beats_scratch": acc["transfer-finetune"] > acc["scratch-finetune"],
                "transfer_probe_beats_random_probe": acc["transfer-probe"] > acc["random-probe"]}
    if recipe.name == "layer-sweep-toy":
        rows = summaries["sweep"]["rows"]
        report.write_table(rows, stage / "table.csv", ["rank", "point", "accuracy", "final_transfer_loss", "skipped"])
        by = {r["point"]: r["accuracy"] for r in rows}
        pts = [s for s in recipe.steps if s.name == "sweep"][0].config["points"]
        report.plot_sweep(pts, [by.get(p) for p in pts], stage / "table.png")
        return {"rows": rows}
    if recipe.name == "zero-shot-toy":
        z = summaries["zero-shot"]
        rows = [
            {"row": "teacher on source modality", "accuracy": z.get("reference_accuracy"), "mean_ap": z.get("reference_mean_ap")},
            {"row": "franken on target modality", "accuracy": z["accuracy"], "mean_ap": z["mean_ap"]},
        ]
        report.write_table(rows, stage / "table.csv", ["row", "accuracy", "mean_ap"])
        report.plot_bars([r["row"] for r in rows], [r["accuracy"] or 0.0 for r in rows], stage / "table.png")
        return {"rows": rows}
    e = summaries["eval-fused"]
    rows = [
        {"row": "source half only", "accuracy": e["per_model"][0]["accuracy"], "mean_ap": e["per_model"][0]["mean_ap"]},
        {"row": "target half only", "accuracy": e["per_model"][1]["accuracy"], "mean_ap": e["per_model"][1]["mean_ap"]},
        {"row": "fused scores", "accuracy": e["accuracy"], "mean_ap": e["mean_ap"]},
    ]
    report.write_table(rows, stage / "table.csv", ["row", "accuracy", "mean_ap"])
    report.plot_bars([r["row"] for r in rows], [r["accuracy"] for r in rows], stage / "table.png")
    return {"rows": rows, "fused_beats_both": rows[2]["accuracy"] > max(rows[0]["accuracy"], rows[1]["accuracy"])}


def run_recipe(recipe: ExperimentRecipe, out: str | os.PathLike, log=None) -> dict[str, Any]:
    def body(stage: Path) -> dict:
        report.write_json(recipe.to_dict(), stage / "recipe.json")
        summaries: dict[str, dict] = {}
        with report.JsonlLog(stage / "log.jsonl") as jl:
            for i, step in enumerate(recipe.steps):
                if log is not None:
                    log(f"[{recipe.name}] step {i + 1}/{len(recipe.steps)}: {step.command} -> steps/{step.name}")
                summaries[step.name] = commands.execute(step.command, step.config, stage / "steps" / step.name, base_dir=stage)
                jl.write(i, name=step.name, command=step.command)
        summary = {"command": "recipe", "status": "ok", "recipe": recipe.name, "seed": recipe.seed,
                   **_tables(recipe, summaries, stage)}
        report.write_json(summary, stage / "summary.json")
        return summary

    return commands.staged(out, body)


def cmd_recipe(name: str, out: str | os.PathLike, seed: int = 0, toy: dict[str, Any] | None = None, log=None) -> dict[str, Any]:
    cfg = validate_model(RecipeFile, {"name": name, "seed": seed, "toy": toy or {}})
    return run_recipe(build_recipe(cfg.name, cfg.seed, cfg.toy), out, log=log)
