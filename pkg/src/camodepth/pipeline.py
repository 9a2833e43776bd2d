"""Pipeline stages shared by the command line and the acceptance suite.

Every stage writes its outputs plus a ``run_manifest.json`` recording the
tool version, the full config tree, the master seed, checksums of its inputs
and of every file it produced.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camodepth import __version__
from camodepth.attack import AttackRun, optimize_texture, save_run
from camodepth.config import PipelineConfig, derive_seed
from camodepth.evalmetrics import (
    Baseline,
    MetricsReport,
    breakdown_csv,
    evaluate,
    summary_csv,
    summary_table,
)
from camodepth.scenegen import SceneSet, dataset_checksum, generate_dataset, load_dataset, save_dataset
from camodepth.texconv import load_seed
from camodepth.victim import NonConvergenceError, TrainResult, build_victim, load_checkpoint, save_checkpoint, train_victim

MANIFEST_NAME = "run_manifest.json"
SPLITS = ("train", "attack", "eval")
AXES = ("weather", "azimuth", "distance")


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    stage: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # name -> sha256
    outputs: list[dict] = field(default_factory=list)  # {"path", "sha256"}
    notes: dict = field(default_factory=dict)
    tool_version: str = __version__

    def write(self, out_dir: str | Path, files: list[Path] = ()) -> Path:
        out_dir = Path(out_dir)
        for f in files:
            f = Path(f)
            rel = f.relative_to(out_dir) if f.is_relative_to(out_dir) else f
            self.outputs.append({"path": str(rel), "sha256": file_sha256(f)})
        path = out_dir / MANIFEST_NAME
        body = {
            "tool_version": self.tool_version,
            "stage": self.stage,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "notes": self.notes,
        }
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, out_dir: str | Path) -> RunManifest:
        d = json.loads((Path(out_dir) / MANIFEST_NAME).read_text())
        return cls(d["stage"], d["config"], d["seed"], d["inputs"], d["outputs"], d.get("notes", {}),
                   d["tool_version"])


def resolved(cfg: PipelineConfig) -> PipelineConfig:
    """Copy of ``cfg`` with stage seeds derived from the master seed."""
    cfg = copy.deepcopy(cfg)
    cfg.train.seed = derive_seed(cfg.seed, "victim")
    cfg.attack.seed = derive_seed(cfg.seed, "attack")
    return cfg


# --------------------------------------------------------------------------- stages


def gen_scenes(cfg: PipelineConfig, out_dir: str | Path | None = None, splits=SPLITS) -> dict[str, SceneSet]:
    counts = {"train": cfg.data.train_count, "attack": cfg.data.attack_count, "eval": cfg.data.eval_count}
    sets = {s: generate_dataset(cfg.scenes, counts[s], derive_seed(cfg.seed, f"{s}_scenes")) for s in splits}
    if out_dir is not None:
        out = Path(out_dir)
        files = []
        for split, scenes in sets.items():
            save_dataset(scenes, out / split)
            files.append(out / split / "manifest.json")
        RunManifest("gen-scenes", cfg.to_dict(), cfg.seed).write(out, files)
    return sets


def train_stage(cfg: PipelineConfig, scenes: SceneSet, out_dir: str | Path | None = None,
                inputs: dict | None = None) -> TrainResult:
    cfg = resolved(cfg)
    model = build_victim(cfg.victim, seed=cfg.train.seed)
    result = train_victim(model, scenes, cfg.train)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(model, out / "model.ckpt", {"val_error": result.val_error})
        log = out / "train_log.csv"
        log.write_text("epoch,loss\n" + "".join(f"{i},{v:.9g}\n" for i, v in enumerate(result.losses)))
        notes = {"val_error": result.val_error, "converged": result.converged, "target": cfg.train.target}
        RunManifest("train-victim", cfg.to_dict(), cfg.seed, inputs or {}, notes=notes).write(out, [ckpt, log])
    return result


def attack_stage(cfg: PipelineConfig, model, scenes: SceneSet, out_dir: str | Path | None = None,
                 inputs: dict | None = None) -> AttackRun:
    cfg = resolved(cfg)
    run = optimize_texture(model, scenes, cfg.attack)
    if out_dir is not None:
        files = save_run(run, out_dir)
        notes = {"iterations": len(run.trace)}
        RunManifest("attack", cfg.to_dict(), cfg.seed, inputs or {}, notes=notes).write(out_dir, files)
    return run


def eval_stage(cfg: PipelineConfig, model, scenes: SceneSet, seed_texture: np.ndarray | None,
               out_dir: str | Path | None = None, inputs: dict | None = None) -> list[MetricsReport]:
    """Optimized texture (if given) plus the configured baselines, all with the same paired draws."""
    eval_seed = derive_seed(cfg.seed, "eval")
    n = seed_texture.shape[0] if seed_texture is not None else cfg.attack.seed_size
    specs = [] if seed_texture is None else [seed_texture]
    specs += [Baseline(b, cfg.eval.uniform_color) for b in cfg.eval.baselines]
    reports = [
        evaluate(model, scenes, s, cfg.attack.tc, cfg.pa, seed=eval_seed, seed_size=n, v_thre=cfg.eval.v_thre,
                 batch_size=cfg.eval.batch_size)
        for s in specs
    ]
    if out_dir is not None:
        write_eval(reports, out_dir, cfg, inputs or {})
    return reports


def write_eval(reports: list[MetricsReport], out_dir: str | Path, cfg: PipelineConfig, inputs: dict) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "summary.csv", out / "summary.txt", out / "per_sample.csv"]
    files[0].write_text(summary_csv(reports))
    files[1].write_text(summary_table(reports))
    per_sample = reports[0].to_csv() + "".join(r.to_csv().split("\n", 1)[1] for r in reports[1:])
    files[2].write_text(per_sample)
    for axis in AXES:
        path = out / f"breakdown_{axis}.csv"
        text = breakdown_csv(reports[0], axis) + "".join(breakdown_csv(r, axis).split("\n", 1)[1] for r in reports[1:])
        path.write_text(text)
        files.append(path)
    RunManifest("eval", cfg.to_dict(), cfg.seed, inputs).write(out, files)
    return files


# --------------------------------------------------------------------------- ablation

LOSS_SUBSETS = (("a",), ("a", "nps"), ("a", "st"), ("a", "st", "nps"))
MODULE_COLUMNS = {"None": (False, False), "TC": (True, False), "PA": (False, True), "Full": (True, True)}


@dataclass
class AblationCell:
    loss_terms: tuple[str, ...]
    column: str
    e_d: float | None
    r_a: float | None
    status: str = "ok"


@dataclass
class AblationTable:
    cells: list[AblationCell]

    def get(self, loss_terms, column) -> AblationCell:
        for c in self.cells:
            if c.loss_terms == tuple(loss_terms) and c.column == column:
                return c
        raise KeyError((loss_terms, column))

    def marginal(self, module: str, on: bool) -> float:
        """Mean E_d over all successful cells with ``module`` ("TC" or "PA") switched on/off."""
        idx = 0 if module == "TC" else 1
        vals = [c.e_d for c in self.cells if c.e_d is not None and MODULE_COLUMNS[c.column][idx] == on]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss_terms", "column", "use_tc", "use_pa", "E_d", "R_a", "status"])
        for c in self.cells:
            tc, pa = MODULE_COLUMNS[c.column]
            fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
            w.writerow(["+".join(c.loss_terms), c.column, int(tc), int(pa), fmt(c.e_d), fmt(c.r_a), c.status])
        return buf.getvalue()

    def to_text(self) -> str:
        names = {"a": "L_a", "st": "L_st", "nps": "L_nps"}
        lines = [f"{'losses':<20}" + "".join(f"{col:>9}" for col in MODULE_COLUMNS)]
        for terms in LOSS_SUBSETS:
            row = f"{'+'.join(names[t] for t in terms):<20}"
            for col in MODULE_COLUMNS:
                try:
                    c = self.get(terms, col)
                except KeyError:
                    row += f"{'-':>9}"
                    continue
                row += f"{c.e_d:>9.3f}" if c.e_d is not None else f"{c.status:>9}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def run_ablation(cfg: PipelineConfig, model, attack_scenes: SceneSet, eval_scenes: SceneSet,
                 loss_subsets=LOSS_SUBSETS, columns=tuple(MODULE_COLUMNS), cache: dict | None = None) -> AblationTable:
    """Attack under every module/loss combination; each texture is evaluated with the same protocol.

    ``cache`` may map ``(loss_terms, column)`` to an already optimized seed.
    """
    cfg = resolved(cfg)
    eval_seed = derive_seed(cfg.seed, "eval")
    cells = []
    for terms in loss_subsets:
        for col in columns:
            use_tc, use_pa = MODULE_COLUMNS[col]
            acfg = copy.deepcopy(cfg.attack)
            acfg.loss_terms, acfg.use_tc, acfg.use_pa = tuple(terms), use_tc, use_pa
            try:
                key = (tuple(terms), col)
                seed = cache[key] if cache and key in cache else optimize_texture(model, attack_scenes, acfg).seed
                rep = evaluate(model, eval_scenes, seed, cfg.attack.tc, cfg.pa, seed=eval_seed,
                               v_thre=cfg.eval.v_thre, batch_size=cfg.eval.batch_size)
                cells.append(AblationCell(tuple(terms), col, rep.mean_e_d, rep.mean_r_a))
            except Exception as exc:  # a failed cell is marked, the table continues
                cells.append(AblationCell(tuple(terms), col, None, None, f"failed: {type(exc).__name__}"))
    return AblationTable(cells)


# --------------------------------------------------------------------------- report


def read_summary(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def make_report(eval_dir: str | Path, out_dir: str | Path, ablation_csv: str | Path | None = None,
                trace_csv: str | Path | None = None) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eval_dir, out = Path(eval_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    summary = read_summary(eval_dir / "summary.csv")
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    methods = [r["method"] for r in summary]
    for ax, key in zip(axes, ("E_d", "R_a")):
        ax.bar(methods, [float(r[key]) for r in summary], color="0.4")
        ax.set_title(key)
    fig.tight_layout()
    files.append(out / "summary.png")
    fig.savefig(files[-1], dpi=100)
    plt.close(fig)

    for axis in AXES:
        rows = read_summary(eval_dir / f"breakdown_{axis}.csv")
        fig, ax = plt.subplots(figsize=(8, 3))
        for method in dict.fromkeys(r["method"] for r in rows):
            sel = [r for r in rows if r["method"] == method]
            ys = [float(r["E_d"]) if r["E_d"] else np.nan for r in sel]
            ax.plot([r["bin"] for r in sel], ys, marker="o", label=method)
        ax.set_xlabel(axis)
        ax.set_ylabel("E_d (m)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        files.append(out / f"breakdown_{axis}.png")
        fig.savefig(files[-1], dpi=100)
        plt.close(fig)

    if trace_csv is not None and Path(trace_csv).is_file():
        rows = read_summary(trace_csv)
        fig, ax = plt.subplots(figsize=(8, 3))
        it = [int(r["iteration"]) for r in rows]
        for key in ("L_total", "L_a", "L_st", "L_nps"):
            ax.plot(it, [float(r[key]) for r in rows], label=key)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
        fig.tight_layout()
        files.append(out / "trace.png")
        fig.savefig(files[-1], dpi=100)
        plt.close(fig)

    text = ["# Evaluation report", "", "```", (eval_dir / "summary.txt").read_text().rstrip(), "```", ""]
    if ablation_csv is not None and Path(ablation_csv).is_file():
        text += ["## Ablation", "", "```", Path(ablation_csv).read_text().rstrip(), "```", ""]
    files.append(out / "report.md")
    files[-1].write_text("\n".join(text))
    return files


# --------------------------------------------------------------------------- end to end


def end_to_end(cfg: PipelineConfig, out_dir: str | Path, allow_nonconverged: bool = False) -> dict:
    """gen-scenes, train-victim, attack, eval, report. Completed stages stay on disk if a later one fails."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sets = gen_scenes(cfg, out / "scenes")
    checks = {s: dataset_checksum(out / "scenes" / s) for s in SPLITS}
    result = train_stage(cfg, sets["train"], out / "victim", {"train_scenes": checks["train"]})
    if not result.converged and not allow_nonconverged:
        raise NonConvergenceError(
            f"victim validation error {result.val_error:.4f} >= target {cfg.train.target}", result.val_error
        )
    ckpt_sum = file_sha256(out / "victim" / "model.ckpt")
    run = attack_stage(cfg, result.model, sets["attack"], out / "attack",
                       {"attack_scenes": checks["attack"], "model": ckpt_sum})
    seed = load_seed(out / "attack" / "seed.png")
    reports = eval_stage(cfg, result.model, sets["eval"], seed, out / "eval",
                         {"eval_scenes": checks["eval"], "model": ckpt_sum,
                          "seed": file_sha256(out / "attack" / "seed.npy")})
    report_files = make_report(out / "eval", out / "report", trace_csv=out / "attack" / "trace.csv")
    RunManifest("report", resolved(cfg).to_dict(), cfg.seed).write(out / "report", report_files)
    top = [out / "eval" / "summary.csv", out / "attack" / "seed.npy", out / "victim" / "model.ckpt"]
    RunManifest("end-to-end", resolved(cfg).to_dict(), cfg.seed, checks,
                notes={"val_error": result.val_error}).write(out, top)
    return {"train": result, "attack": run, "reports": reports}


def load_scenes(path: str | Path) -> SceneSet:
    return load_dataset(path)


def load_model(path: str | Path):
    return load_checkpoint(path)


__all__ = [
    "AblationCell", "AblationTable", "LOSS_SUBSETS", "MODULE_COLUMNS", "RunManifest", "attack_stage",
    "end_to_end", "eval_stage", "gen_scenes", "load_model", "load_scenes", "make_report", "resolved",
    "run_ablation", "train_stage", "write_eval",
]
