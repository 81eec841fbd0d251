"""Staged, resumable runs: data, models, prompts, synthesis, distillation, metrics and ablation.

A run directory holds every artifact, the resolved configuration and a
``manifest.json`` with per-stage fingerprints (config section plus upstream
artifact hashes) and output hashes.  A stage whose fingerprint and outputs are
unchanged is skipped.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import statistics
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .conditions import WorldBinding
from .diffusion import DiffusionModel, DiffusionTrainConfig, NoiseSchedule, train_diffusion
from .distill import DistillConfig, evaluate_accuracy, train_student
from .dpe import Lexicon, LLMClient, build_prompt_set, encode_condition, load_prompt_set, save_prompt_set
from .guidance import GuidanceConfig, Prompt, synthesize_dataset, write_trace_csv
from .metrics import compute_report, energy_values, write_report
from .nets import TrainConfig, load_model, save_model, teacher_model, train_autoencoder, train_classifier
from .world import LabeledSet, World, WorldSpec, build_world, sample_split

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-teacher", "train-ae", "train-diffusion", "dpe", "synthesize",
          "distill", "evaluate", "report")
TEACHER_GATE = 0.95


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


class MissingArtifactError(StageError):
    pass


class GateError(RuntimeError):
    """A fixture gate (teacher accuracy, autoencoder quality, energy separation) failed."""


class LockError(StageError):
    pass


# ----------------------------------------------------------------------------- configuration


def _dc_defaults(cls, drop=()) -> dict:
    return {f.name: f.default for f in fields(cls) if f.name not in drop}


def default_config() -> dict:
    world = _dc_defaults(WorldSpec, drop=("id_mask",))
    guidance = _dc_defaults(GuidanceConfig)
    guidance["tau_start"] = "auto"
    return {
        "run": {"seed": 0, "run_dir": "runs/default"},
        "world": world,
        "data": {"n_train": 10000, "n_test": 4000, "n_prior": 20000, "n_reference": 2000},
        "teacher": {"epochs": 30, "batch_size": 128, "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0,
                    "clip_norm": 5.0},
        "autoencoder": {"epochs": 30, "batch_size": 128, "lr": 0.01, "momentum": 0.9, "d_z": 16,
                        "threshold_factor": 0.05},
        "diffusion": {**_dc_defaults(DiffusionTrainConfig, drop=("seed",)), "T": 100, "eta": 1.0},
        "dpe": {"enabled": True, "n_content": 5, "n_style": 4, "source": "offline", "endpoint": "",
                "model": "default", "temperature": 1.0, "retries": 3, "max_concurrency": 4},
        "guidance": {"enabled": True, **guidance},
        "synthesis": {"per_class": 200, "trace": False},
        "distill": _dc_defaults(DistillConfig, drop=("seed",)),
        "metrics": {"k": 3, "alpha": 1.0},
        "ablation": {"seeds": [0, 1, 2]},
    }


def _check_type(section: str, key: str, value, default):
    if default is None or isinstance(default, str) and default == "auto":
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{section}.{key} must be a list, got {value!r}")
    return value


def merge_config(base: dict, overrides: dict) -> dict:
    """Deep-merge ``overrides`` into a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for section, values in overrides.items():
        if section not in out:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[section][key] = _check_type(section, key, value, base[section][key])
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` with a TOML value (bare words are taken as strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return {section: {key: value}}


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                cfg = merge_config(cfg, tomllib.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    for text in overrides or []:
        cfg = merge_config(cfg, parse_override(text))
    validate_config(cfg)
    return cfg


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {v!r} as TOML")


def dump_config(cfg: dict) -> str:
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if value is None:
                lines.append(f"# {key} unset")
            else:
                lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def world_spec(cfg: dict) -> WorldSpec:
    return WorldSpec(**cfg["world"])


def guidance_config(cfg: dict, **changes) -> GuidanceConfig:
    g = {k: v for k, v in cfg["guidance"].items() if k != "enabled"}
    if g.get("tau_start") == "auto":
        g["tau_start"] = None
    g.update(changes)
    return GuidanceConfig(**g)


def validate_config(cfg: dict) -> None:
    try:
        world_spec(cfg).validate()
        guidance_config(cfg).validate()
        guidance_config(cfg).resolve_window(cfg["diffusion"]["T"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["dpe"]["source"] not in ("offline", "llm"):
        raise ConfigError("dpe.source must be 'offline' or 'llm'")
    if cfg["dpe"]["source"] == "llm" and not cfg["dpe"]["endpoint"]:
        raise ConfigError("dpe.source = 'llm' needs dpe.endpoint")
    if min(cfg["dpe"]["n_content"], cfg["dpe"]["n_style"]) < 1:
        raise ConfigError("dpe.n_content and dpe.n_style must be at least 1")
    if cfg["synthesis"]["per_class"] < 1:
        raise ConfigError("synthesis.per_class must be positive")
    if not cfg["ablation"]["seeds"]:
        raise ConfigError("ablation.seeds must not be empty")


def config_hash(cfg: dict) -> str:
    """Hash of everything that shapes results; the run directory location is left out."""
    doc = copy.deepcopy(cfg)
    doc.get("run", {}).pop("run_dir", None)
    return hashlib.sha256(checkpoint.canonical_json(doc).encode()).hexdigest()[:12]


# ----------------------------------------------------------------------------- library-level steps


def per_prompt_count(per_class: int, n_content: int, n_style: int) -> int:
    """Samples per prompt so that each class receives about ``per_class`` samples."""
    return max(1, per_class // (n_content * n_style))


def make_prompts(binding: WorldBinding, class_names: list[str], n_content: int, n_style: int,
                 source: str = "offline", seed: int = 0, client: LLMClient | None = None,
                 lexicon: Lexicon | None = None, **llm_kw) -> tuple[list, list[Prompt]]:
    """Prompt texts and their condition codes for every class."""
    lexicon = lexicon or Lexicon.load()
    specs = build_prompt_set(class_names, lexicon, n_content, n_style, source, seed, client, **llm_kw)
    return specs, prompts_from_specs(specs, binding, n_style)


def prompts_from_specs(specs, binding: WorldBinding, n_style: int) -> list[Prompt]:
    out = []
    for p in specs:
        c = encode_condition(p, binding)
        out.append(Prompt(c.index, p.class_id, p.content_idx * n_style + p.style_idx, c.content, c.style))
    return out


def code_prompts(binding: WorldBinding, n_content: int, n_style: int) -> list[Prompt]:
    """Condition codes of an ``n_content x n_style`` prompt grid without rendering texts."""
    return [Prompt(int(binding.combo_code(k, c % binding.n_content, s % binding.n_style)), k, c * n_style + s,
                   c % binding.n_content, s % binding.n_style)
            for k in range(binding.K) for c in range(n_content) for s in range(n_style)]


@dataclass
class CellSpec:
    name: str
    n_content: int
    n_style: int
    bn: bool
    energy: bool

    @property
    def guided(self) -> bool:
        return self.bn or self.energy


def ablation_cells(n_content: int = 5, n_style: int = 4) -> list[CellSpec]:
    """The eight settings of the component ablation, in table order."""
    return [
        CellSpec("baseline", 1, 1, False, False),
        CellSpec("dpe", n_content, n_style, False, False),
        CellSpec("dpe+bn", n_content, n_style, True, False),
        CellSpec("dpe+e", n_content, n_style, False, True),
        CellSpec("eda", 1, 1, True, True),
        CellSpec("eda+cd", n_content, 1, True, True),
        CellSpec("eda+sd", 1, n_style, True, True),
        CellSpec("prism", n_content, n_style, True, True),
    ]


def synthesize_cell(diffusion: DiffusionModel, teacher, cell: CellSpec, gcfg: GuidanceConfig,
                    per_class: int, seed: int, trace: list | None = None) -> LabeledSet:
    prompts = code_prompts(diffusion.binding, cell.n_content, cell.n_style)
    cfg = None
    if cell.guided:
        cfg = replace(gcfg, rho0=gcfg.rho0 if cell.bn else 0.0, gamma0=gcfg.gamma0 if cell.energy else 0.0)
    per_prompt = per_prompt_count(per_class, cell.n_content, cell.n_style)
    return synthesize_dataset(diffusion, teacher, prompts, per_prompt, cfg, seed=seed, trace=trace)


def run_cell(diffusion, teacher, cell: CellSpec, gcfg: GuidanceConfig, per_class: int, seed: int,
             test: LabeledSet, reference: LabeledSet, dcfg: DistillConfig, k: int = 3,
             alpha: float = 1.0) -> dict:
    """Synthesize, distill and measure one ablation cell."""
    syn = synthesize_cell(diffusion, teacher, cell, gcfg, per_class, seed)
    student, _ = train_student(teacher, syn, DistillConfig(**{**asdict(dcfg), "seed": seed}))
    report = compute_report(teacher, reference, syn, k, alpha)
    return {"cell": cell.name, "seed": seed, "accuracy": evaluate_accuracy(student, test),
            "precision": report.precision, "recall": report.recall, "fid": report.fid,
            "mean_energy": report.mean_energy_syn, "n": len(syn)}


def table_layout(rows: list[dict]) -> str:
    """Component ablation as a CSV table: one column per cell, median accuracy last."""
    cells = []
    for r in rows:
        if r["cell"] not in cells:
            cells.append(r["cell"])
    spec = {c.name: c for c in ablation_cells()}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting"] + cells)
    mark = lambda b: "x" if b else "-"  # noqa: E731
    w.writerow(["EDA L_BN"] + [mark(spec[c].bn) for c in cells])
    w.writerow(["EDA L_E"] + [mark(spec[c].energy) for c in cells])
    w.writerow(["DPE content"] + [mark(spec[c].n_content > 1) for c in cells])
    w.writerow(["DPE style"] + [mark(spec[c].n_style > 1) for c in cells])
    w.writerow(["ACC (median)"] + [f"{100 * median_of(rows, c, 'accuracy'):.1f}" for c in cells])
    return buf.getvalue()


def median_of(rows: list[dict], cell: str, key: str) -> float:
    return float(statistics.median(r[key] for r in rows if r["cell"] == cell))


# ----------------------------------------------------------------------------- run directory


def file_hash(path) -> str:
    return checkpoint.file_hash(path)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, "utf-8")


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{run_dir} is locked by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Run:
    """One run directory bound to a resolved configuration."""

    # stage -> (config sections, upstream files, output files)
    LAYOUT = {
        "gen-data": (("world", "data"), (), ("world.json", "id_train.prsm", "id_test.prsm", "broad_prior.prsm")),
        "train-teacher": (("teacher",), ("id_train.prsm", "id_test.prsm", "broad_prior.prsm"),
                          ("teacher.prsm", "gates_teacher.json")),
        "train-ae": (("autoencoder",), ("broad_prior.prsm",), ("autoencoder.prsm", "gates_autoencoder.json")),
        "train-diffusion": (("diffusion",), ("broad_prior.prsm", "autoencoder.prsm"), ("diffusion.prsm",)),
        "dpe": (("dpe",), ("world.json",), ("prompts.json",)),
        "synthesize": (("guidance", "synthesis"), ("teacher.prsm", "autoencoder.prsm", "diffusion.prsm", "prompts.json"),
                       ("synthetic.prsm",)),
        "distill": (("distill",), ("teacher.prsm", "synthetic.prsm"), ("student.prsm",)),
        "evaluate": (("metrics",), ("teacher.prsm", "student.prsm", "synthetic.prsm", "id_train.prsm", "id_test.prsm"),
                     ("evaluation.json",)),
        "report": ((), ("evaluation.json", "gates_teacher.json", "gates_autoencoder.json"),
                   ("report.json", "report.md")),
        "ablate": (("guidance", "synthesis", "distill", "metrics", "ablation", "dpe"),
                   ("teacher.prsm", "autoencoder.prsm", "diffusion.prsm", "id_train.prsm", "id_test.prsm"),
                   ("ablation.json", "ablation.csv")),
    }
    # inputs folded into the fingerprint only when present
    OPTIONAL = {"report": ("ablation.json", "ablation.csv")}
    PRODUCER = {out: stage for stage, (_, _, outs) in LAYOUT.items() for out in outs}

    def __init__(self, cfg: dict, run_dir=None):
        self.cfg = cfg
        self.dir = Path(run_dir if run_dir is not None else cfg["run"]["run_dir"])
        self.seed = int(cfg["run"]["seed"])
        self.manifest_path = self.dir / "manifest.json"

    # -- manifest
    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text("utf-8"))
        return {"stages": {}}

    def _save_manifest(self, manifest: dict) -> None:
        manifest["config"] = self.cfg
        manifest["config_hash"] = config_hash(self.cfg)
        manifest["seeds"] = self.seeds()
        _write_text(self.manifest_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    def seeds(self) -> dict:
        return {"world": self.cfg["world"]["seed"], "run": self.seed,
                "ablation": list(self.cfg["ablation"]["seeds"])}

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing {name}; run stage '{self.PRODUCER.get(name, '?')}' first")
        return p

    def fingerprint(self, stage: str) -> str:
        sections, inputs, _ = self.LAYOUT[stage]
        doc = {"stage": stage, "seed": self.seed, "config": {s: self.cfg[s] for s in sections},
               "inputs": {name: file_hash(self.require(name)) for name in inputs}}
        for name in self.OPTIONAL.get(stage, ()):
            if self.path(name).exists():
                doc["inputs"][name] = file_hash(self.path(name))
        if stage in ("train-teacher", "train-ae", "train-diffusion", "dpe"):
            doc["world"] = self.cfg["world"]
        return hashlib.sha256(checkpoint.canonical_json(doc).encode()).hexdigest()

    def up_to_date(self, stage: str) -> bool:
        entry = self.manifest()["stages"].get(stage)
        if not entry or entry.get("fingerprint") != self.fingerprint(stage):
            return False
        return all(self.path(n).exists() and file_hash(self.path(n)) == h for n, h in entry["outputs"].items())

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Execute ``stage`` unless it is up to date; returns True when it ran."""
        if stage not in self.LAYOUT:
            raise StageError(f"unknown stage {stage!r}")
        self.dir.mkdir(parents=True, exist_ok=True)
        fp = self.fingerprint(stage)
        if not force and self.up_to_date(stage):
            log.info("stage %s up to date, skipped", stage)
            return False
        log.info("running stage %s", stage)
        getattr(self, "_" + stage.replace("-", "_"))()
        outs = self.LAYOUT[stage][2]
        manifest = self.manifest()
        manifest["stages"][stage] = {"fingerprint": fp,
                                     "outputs": {n: file_hash(self.require(n)) for n in outs}}
        self._save_manifest(manifest)
        _write_text(self.path("config.toml"), dump_config(self.cfg))
        return True

    def run_all(self, stages=STAGES, force: bool = False) -> list[str]:
        ran = []
        with run_lock(self.dir):
            for stage in stages:
                if self.run_stage(stage, force):
                    ran.append(stage)
        return ran

    # -- loaders
    def world(self) -> World:
        return build_world(WorldSpec.from_dict(json.loads(self.require("world.json").read_text("utf-8"))))

    def dataset(self, name: str) -> LabeledSet:
        return LabeledSet.load(self.require(f"{name}.prsm"))

    def teacher(self):
        return load_model(self.require("teacher.prsm"))

    def autoencoder(self):
        return load_model(self.require("autoencoder.prsm"))

    def diffusion(self) -> DiffusionModel:
        return DiffusionModel.load(self.require("diffusion.prsm"), self.autoencoder())

    def reference(self) -> LabeledSet:
        train = self.dataset("id_train")
        return train.subset(np.arange(min(len(train), self.cfg["data"]["n_reference"])))

    def gates(self) -> dict:
        gates = {}
        for name in ("gates_teacher.json", "gates_autoencoder.json"):
            if self.path(name).exists():
                gates.update(json.loads(self.path(name).read_text("utf-8")))
        return gates

    def _write_gates(self, name: str, values: dict) -> None:
        _write_text(self.path(f"gates_{name}.json"), json.dumps(values, indent=1, sort_keys=True) + "\n")

    # -- stages
    def _gen_data(self) -> None:
        spec = world_spec(self.cfg)
        world = build_world(spec)
        _write_text(self.path("world.json"), json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
        d = self.cfg["data"]
        for split, n in (("id_train", d["n_train"]), ("id_test", d["n_test"]), ("broad_prior", d["n_prior"])):
            sample_split(world, split, n, seed=self.seed).save(self.path(f"{split}.prsm"))

    def _train_teacher(self) -> None:
        train, test, prior = self.dataset("id_train"), self.dataset("id_test"), self.dataset("broad_prior")
        c = self.cfg["teacher"]
        model = teacher_model(train.x.shape[1], self.cfg["world"]["K"], seed=self.seed)
        model, _ = train_classifier(train, TrainConfig(seed=self.seed, **c), model=model)
        save_model(self.path("teacher.prsm"), model)
        acc = evaluate_accuracy(model, test)
        distractors = prior.subset(prior.is_ood)
        e_id = float(energy_values(model, test.x).mean())
        e_ood = float(energy_values(model, distractors.x).mean()) if len(distractors) else float("nan")
        gates = {"teacher_accuracy": acc, "teacher_gate": acc >= TEACHER_GATE,
                 "energy_id": e_id, "energy_distractor": e_ood, "energy_margin": e_ood - e_id,
                 "energy_gate": bool(e_ood > e_id) if len(distractors) else True}
        self._write_gates("teacher", gates)
        if not gates["teacher_gate"]:
            raise GateError(f"teacher test accuracy {acc:.4f} below {TEACHER_GATE}")
        if not gates["energy_gate"]:
            raise GateError(f"distractor energy {e_ood:.3f} not above ID energy {e_id:.3f}")

    def _train_ae(self) -> None:
        c = dict(self.cfg["autoencoder"])
        d_z, factor = c.pop("d_z"), c.pop("threshold_factor")
        ae = train_autoencoder(self.dataset("broad_prior").x, TrainConfig(seed=self.seed, **c), d_z=d_z,
                               threshold_factor=factor)
        save_model(self.path("autoencoder.prsm"), ae)
        self._write_gates("autoencoder", {"autoencoder_mse": ae.meta["heldout_mse"],
                                          "autoencoder_threshold": ae.meta["threshold"],
                                          "autoencoder_gate": bool(ae.meta["passed"])})
        if not ae.meta["passed"]:
            raise GateError(f"autoencoder held-out MSE {ae.meta['heldout_mse']:.4g} above threshold")

    def _train_diffusion(self) -> None:
        c = dict(self.cfg["diffusion"])
        schedule = NoiseSchedule.linear(c.pop("T"), c.pop("eta"))
        binding = WorldBinding.from_spec(world_spec(self.cfg))
        model = train_diffusion(self.dataset("broad_prior"), self.autoencoder(), binding,
                                DiffusionTrainConfig(seed=self.seed, **c), schedule)
        model.save(self.path("diffusion.prsm"))

    def _dpe(self) -> None:
        c = self.cfg["dpe"]
        nc, ns = (c["n_content"], c["n_style"]) if c["enabled"] else (1, 1)
        client = None
        if c["source"] == "llm":
            client = LLMClient(c["endpoint"], c["model"])
        specs = build_prompt_set(self.world().class_names_for(), Lexicon.load(), nc, ns, c["source"], self.seed,
                                 client, c["temperature"], c["retries"], c["max_concurrency"])
        save_prompt_set(self.path("prompts.json"), specs)

    def _synthesize(self) -> None:
        specs = load_prompt_set(self.require("prompts.json"))
        nc = len({p.content_idx for p in specs})
        ns = len({p.style_idx for p in specs})
        diffusion = self.diffusion()
        prompts = prompts_from_specs(specs, diffusion.binding, ns)
        cfg = guidance_config(self.cfg) if self.cfg["guidance"]["enabled"] else None
        trace = [] if self.cfg["synthesis"]["trace"] and cfg is not None else None
        per_prompt = per_prompt_count(self.cfg["synthesis"]["per_class"], nc, ns)
        syn = synthesize_dataset(diffusion, self.teacher(), prompts, per_prompt, cfg, seed=self.seed, trace=trace)
        syn.save(self.path("synthetic.prsm"))
        if trace is not None:
            write_trace_csv(self.path("guidance_trace.csv"), trace)

    def _distill(self) -> None:
        student, _ = train_student(self.teacher(), self.dataset("synthetic"),
                                   DistillConfig(seed=self.seed, **self.cfg["distill"]))
        save_model(self.path("student.prsm"), student)

    def _evaluate(self) -> None:
        teacher, student = self.teacher(), load_model(self.require("student.prsm"))
        test, syn, ref = self.dataset("id_test"), self.dataset("synthetic"), self.reference()
        m = self.cfg["metrics"]
        report = compute_report(teacher, ref, syn, m["k"], m["alpha"], {"seed": self.seed})
        tag = f"{self.seed}_{config_hash(self.cfg)}"
        write_report(self.dir, report, tag, teacher, ref, syn)
        doc = {"student_accuracy": evaluate_accuracy(student, test),
               "teacher_accuracy": evaluate_accuracy(teacher, test),
               "metrics": report.to_dict(), "report_tag": tag}
        _write_text(self.path("evaluation.json"), json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def _report(self) -> None:
        ev = json.loads(self.require("evaluation.json").read_text("utf-8"))
        manifest = self.manifest()
        doc = {"config_hash": config_hash(self.cfg), "seeds": self.seeds(), "gates": self.gates(),
               "evaluation": ev,
               "artifacts": {n: h for stage, s in manifest["stages"].items() if stage != "report"
                             for n, h in s["outputs"].items()}}
        if self.path("ablation.json").exists():
            doc["ablation"] = json.loads(self.path("ablation.json").read_text("utf-8"))
        _write_text(self.path("report.json"), json.dumps(doc, indent=1, sort_keys=True) + "\n")
        m = ev["metrics"]
        lines = [f"# Run report (seed {self.seed}, config {doc['config_hash']})", "",
                 f"- teacher accuracy: {ev['teacher_accuracy']:.4f}",
                 f"- student accuracy: {ev['student_accuracy']:.4f}",
                 f"- FID: {m['fid']:.4f}", f"- precision: {m['precision']:.4f}", f"- recall: {m['recall']:.4f}",
                 f"- mean energy (real / synthetic): {m['mean_energy_real']:.4f} / {m['mean_energy_syn']:.4f}", ""]
        if "ablation" in doc:
            lines += ["## Ablation", "", "```", self.path("ablation.csv").read_text("utf-8").rstrip(), "```", ""]
        _write_text(self.path("report.md"), "\n".join(lines))

    def _ablate(self) -> None:
        teacher, diffusion = self.teacher(), self.diffusion()
        test, ref = self.dataset("id_test"), self.reference()
        gcfg = guidance_config(self.cfg)
        dcfg = DistillConfig(**self.cfg["distill"])
        m = self.cfg["metrics"]
        rows = []
        for seed in self.cfg["ablation"]["seeds"]:
            for cell in ablation_cells(self.cfg["dpe"]["n_content"], self.cfg["dpe"]["n_style"]):
                row = run_cell(diffusion, teacher, cell, gcfg, self.cfg["synthesis"]["per_class"], seed,
                               test, ref, dcfg, m["k"], m["alpha"])
                log.info("ablation %s seed %d: acc %.4f", cell.name, seed, row["accuracy"])
                rows.append(row)
        cells = [c.name for c in ablation_cells()]
        summary = {c: {key: median_of(rows, c, key) for key in ("accuracy", "precision", "recall", "fid",
                                                                 "mean_energy")} for c in cells}
        _write_text(self.path("ablation.json"),
                    json.dumps({"rows": rows, "median": summary}, indent=1, sort_keys=True) + "\n")
        _write_text(self.path("ablation.csv"), table_layout(rows))
