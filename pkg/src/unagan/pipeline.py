"""End-to-end noise adaptation: baseline -> translator -> simulation -> fine-tune -> evaluation.

Workspace layout::

    manifests/    plan.json, gan_target.jsonl, gan_clean.jsonl, simulated.jsonl
    checkpoints/  se_baseline.pt, ugan/ugan.pt, se_adapted.pt, se_upper.pt
    simulated/    one WAV per source clean utterance
    reports/      per-system metric JSON, tables, histories, adaptation_report.json
    stages/       one marker per completed stage (fingerprint + outputs)
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .configio import fingerprint, to_dict
from .corpus import DomainCorpus, load_corpus, load_eval_set, subsample_target
from .errors import ConfigError, InsufficientData, StageFailed
from .evalkit import EvalConfig, MetricReport, evaluate_system, identity_system, render_table
from .senet import SeTrainConfig, finetune_se, train_se
from .ugan.training import UganConfig, load_generator, train_una_gan, write_history

log = logging.getLogger(__name__)

STAGES = ("baseline", "select", "ugan", "simulate", "finetune", "evaluate")
PHASE_POLICIES = ("reuse-clean-phase", "griffin-lim")


@dataclass(frozen=True)
class SimulationConfig:
    phase_policy: str = "reuse-clean-phase"
    griffin_lim_iters: int = 32

    def __post_init__(self):
        if self.phase_policy not in PHASE_POLICIES:
            raise ConfigError(f"phase_policy must be one of {PHASE_POLICIES}, got {self.phase_policy!r}")


@dataclass(frozen=True)
class PipelineConfig:
    n_t: int | None = None
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    upper_bound: bool = False


@dataclass
class AdaptationPlan:
    source_manifest: str
    workspace: str
    target_manifest: str | None = None
    eval_manifest: str | None = None
    upper_bound_manifest: str | None = None
    n_t: int | None = None
    seed: int = 0
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)
    se: SeTrainConfig = field(default_factory=SeTrainConfig)
    ugan: UganConfig = field(default_factory=UganConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def source(self) -> DomainCorpus:
        return load_corpus(self.source_manifest)

    def target(self) -> DomainCorpus:
        return load_corpus(self.target_manifest or self.source_manifest)

    def validate(self) -> "AdaptationPlan":
        n_target = self.target().n_target
        if self.n_t is not None and self.n_t > n_target:
            raise InsufficientData(f"n_t={self.n_t} exceeds the {n_target} available target utterances")
        if self.n_t is not None and self.n_t < 1:
            raise InsufficientData("the translator needs at least one target utterance (n_t >= 1)")
        return self


@dataclass(frozen=True)
class SimulatedPair:
    id: str
    noisy_path: str
    clean_id: str
    clean_path: str
    generator_fingerprint: str


@dataclass
class SimulatedCorpus:
    pairs: list[SimulatedPair]
    generator_fingerprint: str
    phase_policy: str

    def training_pairs(self) -> list[tuple[str, str]]:
        return [(p.noisy_path, p.clean_path) for p in self.pairs]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"format": "unagan-simulated", "version": 1, "generator_fingerprint": self.generator_fingerprint,
                  "phase_policy": self.phase_policy}
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for p in self.pairs:
                fh.write(json.dumps(asdict(p), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SimulatedCorpus":
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        return cls([SimulatedPair(**json.loads(l)) for l in lines[1:] if l.strip()],
                   header["generator_fingerprint"], header["phase_policy"])


@dataclass
class StageRecord:
    name: str
    fingerprint: str
    skipped: bool
    seconds: float
    outputs: dict


@dataclass
class AdaptationReport:
    workspace: Path
    stages: dict
    reports: dict
    deltas: dict
    budget: dict
    table: str

    def to_json(self) -> dict:
        return {"workspace": str(self.workspace), "stages": {k: asdict(v) for k, v in self.stages.items()},
                "metrics": {k: r.aggregates() for k, r in self.reports.items()}, "deltas": self.deltas,
                "budget": self.budget, "table": self.table}


def _generator_fingerprint(payload: dict) -> str:
    return fingerprint({"config": payload["fingerprint"], "step": payload["step"],
                        "state": _state_hash(payload["modules"]["generator"])})


def _state_hash(state: dict) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name, tensor in sorted(state.items()):
        digest.update(name.encode())
        digest.update(tensor.cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]


@torch.no_grad()
def simulate_utterance(G, clean: dsp.Waveform, stft_cfg: dsp.StftConfig,
                       sim_cfg: SimulationConfig = SimulationConfig()) -> dsp.Waveform:
    """Translate one full-length clean magnitude and rebuild a waveform."""
    spec = dsp.stft(clean, stft_cfg)
    dtype = next(G.parameters()).dtype
    frames = spec.n_frames
    mag = torch.from_numpy(spec.magnitude).to(dtype)[None, None]
    if frames < G.cfg.min_width:
        mag = torch.nn.functional.pad(mag, (0, G.cfg.min_width - frames))
    sim = G(mag)[0, 0, :, :frames].double().numpy()
    if sim_cfg.phase_policy == "reuse-clean-phase":
        out = dsp.Spectrogram(sim, spec.phase, stft_cfg, spec.length, spec.sample_rate)
        return dsp.istft(out)
    return dsp.griffin_lim(sim, stft_cfg, spec.length, init_phase=spec.phase, n_iter=sim_cfg.griffin_lim_iters,
                           sample_rate=spec.sample_rate)


def simulate_target_corpus(generator_ckpt, clean_records, stft_cfg: dsp.StftConfig = dsp.StftConfig(),
                           out_dir=None, sim_cfg: SimulationConfig = SimulationConfig()) -> SimulatedCorpus:
    """Run the trained translator over every clean utterance (no segmentation).

    Failing utterances are collected into ``simulation_failures.jsonl`` next to
    the outputs and reported together through ``StageFailed``.
    """
    G, payload = load_generator(generator_ckpt)
    gen_fp = _generator_fingerprint(payload)
    out_dir = Path(out_dir) if out_dir is not None else Path(generator_ckpt).parent / "simulated"
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs, failures = [], []
    for rec in clean_records:
        name = Path(rec.path).stem + "__sim.wav"
        try:
            clean = dsp.read_wav(rec.path)
            sim = simulate_utterance(G, clean, stft_cfg, sim_cfg)
            path = dsp.write_wav(out_dir / name, sim)
        except Exception as exc:  # collected, then raised as one stage failure
            failures.append({"id": rec.id, "path": rec.path, "error": f"{type(exc).__name__}: {exc}"})
            continue
        pairs.append(SimulatedPair(f"simulated/{Path(rec.path).stem}", str(Path(path).resolve()), rec.id,
                                   rec.path, gen_fp))
    if failures:
        fail_path = out_dir / "simulation_failures.jsonl"
        fail_path.write_text("".join(json.dumps(f, sort_keys=True) + "\n" for f in failures))
        raise StageFailed(f"simulation failed for {len(failures)} utterance(s); see {fail_path}")
    return SimulatedCorpus(pairs, gen_fp, sim_cfg.phase_policy)


def _file_hash(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_records(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps({"id": r.id, "path": r.path}, sort_keys=True) + "\n" for r in records))
    return path


def _read_record_ids(path) -> list[str]:
    return [json.loads(l)["id"] for l in Path(path).read_text().splitlines() if l.strip()]


class _Workspace:
    def __init__(self, root):
        self.root = Path(root)
        for sub in ("manifests", "checkpoints", "simulated", "reports", "stages"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def __truediv__(self, other):
        return self.root / other

    def marker(self, stage) -> Path:
        return self.root / "stages" / f"{stage}.json"

    def done(self, stage, fp) -> dict | None:
        path = self.marker(stage)
        if not path.exists():
            return None
        data = json.loads(path.read_text())
        if data.get("fingerprint") != fp:
            return None
        if not all(Path(p).exists() for p in data.get("outputs", {}).values()):
            return None
        return data

    def mark(self, stage, fp, seconds, outputs):
        self.marker(stage).write_text(json.dumps({"stage": stage, "fingerprint": fp, "seconds": seconds,
                                                  "outputs": {k: str(v) for k, v in outputs.items()}},
                                                 indent=2, sort_keys=True))

    def clear_from(self, stage):
        for name in STAGES[STAGES.index(stage):]:
            self.marker(name).unlink(missing_ok=True)


def run_adaptation(plan: AdaptationPlan, resume: bool = True, stop_after: str | None = None,
                   upper_bound: bool = False) -> AdaptationReport:
    """Execute the adaptation stages in order, skipping those whose marker fingerprint still matches.

    Each stage fingerprint chains the upstream one, so a changed config or
    input invalidates everything downstream. The evaluation stage always
    runs. ``stop_after`` ends the run early after the named stage.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}; expected one of {STAGES}")
    plan.validate()
    ws = _Workspace(plan.workspace)
    if not resume:
        ws.clear_from(STAGES[0])
    (ws / "manifests" / "plan.json").write_text(json.dumps(to_dict(plan), indent=2, sort_keys=True))
    source = plan.source()
    target = plan.target()
    records: dict[str, StageRecord] = {}

    def stage(name, parent_fp, config, fn):
        fp = fingerprint({"stage": name, "parent": parent_fp, "config": config, "seed": plan.seed})
        prior = ws.done(name, fp) if name != "evaluate" else None
        if prior is not None:
            log.info("stage %s: up to date (%s)", name, fp)
            records[name] = StageRecord(name, fp, True, prior["seconds"], prior["outputs"])
            return fp, {k: Path(v) for k, v in prior["outputs"].items()}
        ws.clear_from(name)
        log.info("stage %s: running", name)
        t0 = time.perf_counter()
        try:
            outputs = fn()
        except StageFailed:
            raise
        except Exception as exc:
            raise StageFailed(f"stage {name!r} failed: {type(exc).__name__}: {exc}") from exc
        seconds = time.perf_counter() - t0
        ws.mark(name, fp, seconds, outputs)
        records[name] = StageRecord(name, fp, False, seconds, {k: str(v) for k, v in outputs.items()})
        return fp, outputs

    def finished(name):
        return stop_after == name

    # 1: supervised baseline on source pairs
    source_pairs = [(n.path, c.path) for n, c in source.source_pairs()]
    base_ckpt = ws / "checkpoints" / "se_baseline.pt"

    def run_baseline():
        run = train_se(source_pairs, plan.se, seed=plan.seed, out_path=base_ckpt, sample_rate=plan.sample_rate)
        hist = write_history(ws / "reports" / "se_baseline_history.csv", run.history, ("step", "loss"))
        return {"checkpoint": base_ckpt, "history": hist}

    src_fp = fingerprint({"source": _file_hash(plan.source_manifest)})
    # fine-tuning fields do not affect the baseline, so they stay out of its fingerprint
    base_cfg = to_dict(replace(plan.se, finetune_steps=0, finetune_lr=None))
    fp, _ = stage("baseline", src_fp, {"se": base_cfg, "sr": plan.sample_rate}, run_baseline)
    if finished("baseline"):
        return _partial(ws, records)

    # 2: target budget and an equal number of clean utterances
    tgt_manifest = plan.target_manifest or plan.source_manifest
    tgt_fp = fingerprint({"target": _file_hash(tgt_manifest)})
    sel_target, sel_clean = ws / "manifests" / "gan_target.jsonl", ws / "manifests" / "gan_clean.jsonl"

    def run_select():
        n_t = target.n_target if plan.n_t is None else plan.n_t
        chosen = subsample_target(target, n_t, seed=plan.seed).pool("noisy", "target")
        cleans = source.pool("clean", "source")
        if len(cleans) == 0:
            raise InsufficientData("the source corpus has no clean utterances to pair with the target budget")
        rng = np.random.default_rng([plan.seed, 2])
        idx = rng.choice(len(cleans), size=len(chosen), replace=len(chosen) > len(cleans))
        _write_records(sel_target, chosen)
        _write_records(sel_clean, [cleans[i] for i in sorted(idx)])
        return {"target": sel_target, "clean": sel_clean}

    fp, _ = stage("select", fingerprint([fp, tgt_fp]), {"n_t": plan.n_t}, run_select)
    if finished("select"):
        return _partial(ws, records)
    index = {**source.by_id(), **target.by_id()}
    gan_targets = [index[i] for i in _read_record_ids(sel_target)]
    gan_cleans = [index[i] for i in _read_record_ids(sel_clean)]

    # 3: translator on unpaired crops
    gan_dir = ws / "checkpoints" / "ugan"

    def run_ugan():
        # a partial run left by an interrupted attempt is only resumed under the same stage fingerprint
        owner = gan_dir / "stage_fingerprint"
        if owner.exists() and owner.read_text() != ugan_fp:
            for stale in gan_dir.iterdir():
                stale.unlink()
        gan_dir.mkdir(parents=True, exist_ok=True)
        owner.write_text(ugan_fp)
        run = train_una_gan(gan_cleans, gan_targets, plan.ugan, plan.stft, seed=plan.seed, out_dir=gan_dir,
                            resume=resume, log_every=max(1, plan.ugan.steps // 20))
        used = ws / "reports" / "ugan_budget.json"
        used.write_text(json.dumps({"n_t": len(gan_targets), "target_ids": sorted(r.id for r in gan_targets),
                                    "used_target_ids": sorted(run.used_target_ids),
                                    "used_clean_ids": sorted(run.used_clean_ids)}, indent=2))
        hist = gan_dir / "ugan_history.csv"
        return {"checkpoint": run.checkpoint_path, "history": hist, "budget": used}

    ugan_config = {"ugan": to_dict(plan.ugan), "stft": to_dict(plan.stft)}
    ugan_fp = fingerprint({"stage": "ugan", "parent": fp, "config": ugan_config, "seed": plan.seed})
    fp, outs = stage("ugan", fp, ugan_config, run_ugan)
    if finished("ugan"):
        return _partial(ws, records)
    gan_ckpt = Path(outs["checkpoint"])

    # 4: simulate over every source clean
    sim_manifest = ws / "manifests" / "simulated.jsonl"

    def run_simulate():
        sim = simulate_target_corpus(gan_ckpt, source.pool("clean", "source"), plan.stft, ws / "simulated",
                                     plan.simulation)
        return {"manifest": sim.save(sim_manifest)}

    fp, _ = stage("simulate", fp, {"simulation": to_dict(plan.simulation)}, run_simulate)
    if finished("simulate"):
        return _partial(ws, records)

    # 5: fine-tune the baseline on simulated pairs
    adapted_ckpt = ws / "checkpoints" / "se_adapted.pt"

    def run_finetune():
        pairs = SimulatedCorpus.load(sim_manifest).training_pairs()
        run = finetune_se(base_ckpt, pairs, plan.se, seed=plan.seed, out_path=adapted_ckpt,
                          sample_rate=plan.sample_rate)
        hist = write_history(ws / "reports" / "se_adapted_history.csv", run.history, ("step", "loss"))
        return {"checkpoint": adapted_ckpt, "history": hist}

    fp, _ = stage("finetune", fp, {"se": to_dict(plan.se)}, run_finetune)
    if finished("finetune"):
        return _partial(ws, records)

    # optional labelled-target reference point, outside the unsupervised chain
    systems = {"Unprocessed": identity_system, "Baseline": base_ckpt, "Adapted": adapted_ckpt}
    if upper_bound and plan.upper_bound_manifest:
        upper_ckpt = ws / "checkpoints" / "se_upper.pt"
        labelled = [(it.noisy_path, it.reference_path) for it in load_eval_set(plan.upper_bound_manifest)
                    if it.reference_path]
        if not labelled:
            raise InsufficientData("upper-bound manifest has no labelled pairs")
        finetune_se(base_ckpt, labelled, plan.se, seed=plan.seed, out_path=upper_ckpt,
                    sample_rate=plan.sample_rate)
        systems["Upper bound"] = upper_ckpt

    # 6: evaluation
    reports: dict[str, MetricReport] = {}

    def run_evaluate():
        if plan.eval_manifest is None:
            raise InsufficientData("no evaluation manifest configured")
        items = load_eval_set(plan.eval_manifest)
        outputs = {}
        for label, system in systems.items():
            fp_sys = None if callable(system) else _file_hash(system)
            rep = evaluate_system(system, items, label, fp_sys, plan.evaluation.pesq_command,
                                  plan.evaluation.pesq_version_command, ws / "reports" / "enhanced")
            reports[label] = rep
            key = label.lower().replace(" ", "_")
            outputs[key] = rep.save(ws / "reports" / f"metrics_{key}.json")
        metrics = ["si_sdr_out", "si_sdri"]
        if any(r.values("pesq") for r in reports.values()):
            metrics.append("pesq")
        tables = [render_table(reports.values(), m, plan.evaluation.columns, decimals=plan.evaluation.decimals)
                  for m in metrics]
        outputs["table"] = ws / "reports" / "table.txt"
        outputs["table"].write_text("\n".join(tables))
        return outputs

    stage("evaluate", fp, {"eval": to_dict(plan.evaluation), "systems": sorted(systems)}, run_evaluate)
    base, adapted = reports["Baseline"], reports["Adapted"]
    deltas = {m: adapted.mean(m) - base.mean(m) for m in ("si_sdr_out", "si_sdri")}
    budget = json.loads((ws / "reports" / "ugan_budget.json").read_text())
    table = (ws / "reports" / "table.txt").read_text()
    report = AdaptationReport(ws.root, records, reports, deltas, budget, table)
    (ws / "reports" / "adaptation_report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return report


def _partial(ws: _Workspace, records) -> AdaptationReport:
    return AdaptationReport(ws.root, records, {}, {}, {}, "")
