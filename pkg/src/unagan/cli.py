"""Command-line entry point: ``unagan <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import dsp
from .config import RunConfig, defaults_help, load_config, save_config
from .errors import ConfigError, UnaganError

log = logging.getLogger("unagan")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


class MissingInput(UnaganError):
    category = "missing-input"


def _require(path, what):
    if path is None:
        raise MissingInput(f"{what} not configured")
    if not Path(path).exists():
        raise MissingInput(f"{what} not found: {path}")
    return Path(path)


def _manifest(cfg: RunConfig, ws: Path) -> Path:
    default = ws / "corpus" / "corpus.jsonl"
    return _require(cfg.corpus.manifest or (default if default.exists() else None), "corpus.manifest")


def _eval_manifest(cfg: RunConfig, ws: Path) -> Path:
    default = ws / "corpus" / "eval.jsonl"
    return _require(cfg.corpus.eval_manifest or (default if default.exists() else None), "corpus.eval_manifest")


# -- subcommands ---------------------------------------------------------------------

def cmd_synth_corpus(args, cfg, ws):
    from .corpus import generate_synthetic_corpus

    out = generate_synthetic_corpus(cfg.corpus.synth, Path(args.out) if args.out else ws / "corpus", args.seed)
    print(f"corpus: {out.manifest_path}")
    print(f"eval:   {out.eval_path}")
    if out.oracle_path:
        print(f"oracle: {out.oracle_path}")


def cmd_mix(args, cfg, ws):
    from .corpus import MixSpec, build_manifest, materialize_mix, save_corpus

    mix = cfg.corpus.mix
    clean_dir = _require(args.clean_dir or mix.clean_dir, "corpus.mix.clean_dir")
    noise_dir = _require(args.noise_dir or mix.noise_dir, "corpus.mix.noise_dir")
    snrs = tuple(args.snr) if args.snr else mix.snrs
    cleans = build_manifest({"source_clean": clean_dir})
    noises = {p.stem: p for p in sorted(noise_dir.iterdir()) if p.suffix.lower() == ".wav"}
    if not noises:
        raise MissingInput(f"no .wav noise files in {noise_dir}")
    spec = MixSpec(tuple(r.id for r in cleans.records), tuple(sorted(noises)), snrs, mix.domain)
    out = materialize_mix(cleans, spec, noises, ws / "mix", args.seed, mix.subtype)
    path = save_corpus(out, ws / "manifests" / f"mix_{mix.domain}.jsonl")
    print(f"wrote {spec.size} mixtures; manifest {path}")


def cmd_train_se(args, cfg, ws):
    from .senet import train_se
    from .ugan.training import write_history

    corpus = _load_corpus(_manifest(cfg, ws))
    pairs = [(n.path, c.path) for n, c in corpus.source_pairs()]
    ckpt = ws / "checkpoints" / "se_baseline.pt"
    run = train_se(pairs, cfg.senet, steps=args.steps, seed=args.seed, out_path=ckpt)
    write_history(ws / "reports" / "se_baseline_history.csv", run.history, ("step", "loss"))
    print(f"checkpoint: {ckpt}")


def cmd_train_gan(args, cfg, ws):
    from .corpus import subsample_target
    from .ugan.training import train_una_gan

    corpus = _load_corpus(_manifest(cfg, ws))
    n_t = cfg.pipeline.n_t if cfg.pipeline.n_t is not None else corpus.n_target
    targets = subsample_target(corpus, n_t, args.seed).pool("noisy", "target")
    run = train_una_gan(corpus.pool("clean", "source"), targets, cfg.ugan, cfg.stft, steps=args.steps, seed=args.seed,
                        out_dir=ws / "checkpoints" / "ugan", resume=args.resume)
    print(f"checkpoint: {run.checkpoint_path}")


def cmd_simulate(args, cfg, ws):
    from .pipeline import simulate_target_corpus

    gen = _require(args.generator or ws / "checkpoints" / "ugan" / "ugan.pt", "generator checkpoint")
    corpus = _load_corpus(_manifest(cfg, ws))
    sim = simulate_target_corpus(gen, corpus.pool("clean", "source"), cfg.stft, ws / "simulated",
                                 cfg.pipeline.simulation)
    path = sim.save(ws / "manifests" / "simulated.jsonl")
    print(f"simulated {len(sim.pairs)} utterances; manifest {path}")


def cmd_finetune(args, cfg, ws):
    from .pipeline import SimulatedCorpus
    from .senet import finetune_se
    from .ugan.training import write_history

    base = _require(args.baseline or ws / "checkpoints" / "se_baseline.pt", "baseline checkpoint")
    sim = _require(args.simulated or ws / "manifests" / "simulated.jsonl", "simulated manifest")
    ckpt = ws / "checkpoints" / "se_adapted.pt"
    run = finetune_se(base, SimulatedCorpus.load(sim).training_pairs(), cfg.senet, steps=args.steps, seed=args.seed,
                      out_path=ckpt)
    write_history(ws / "reports" / "se_adapted_history.csv", run.history, ("step", "loss"))
    print(f"checkpoint: {ckpt}")


def cmd_evaluate(args, cfg, ws):
    from .corpus import load_eval_set
    from .evalkit import evaluate_system, identity_system, render_table

    items = load_eval_set(_eval_manifest(cfg, ws))
    systems = {"Unprocessed": identity_system}
    specs = args.system or []
    if not specs:
        for label, name in (("Baseline", "se_baseline.pt"), ("Adapted", "se_adapted.pt")):
            if (ws / "checkpoints" / name).exists():
                specs.append(f"{label}={ws / 'checkpoints' / name}")
    for spec in specs:
        label, _, path = spec.rpartition("=")
        systems[label or Path(path).stem] = _require(path, "checkpoint")
    reports = []
    for label, system in systems.items():
        rep = evaluate_system(system, items, label, pesq_command=cfg.eval.pesq_command,
                              pesq_version_command=cfg.eval.pesq_version_command,
                              workdir=ws / "reports" / "enhanced")
        rep.save(ws / "reports" / f"metrics_{label.lower().replace(' ', '_')}.json")
        reports.append(rep)
    tables = [render_table(reports, m, cfg.eval.columns, decimals=cfg.eval.decimals) for m in ("si_sdr_out", "si_sdri")]
    (ws / "reports" / "table.txt").write_text("\n".join(tables))
    print("\n".join(tables))


def cmd_adapt(args, cfg, ws):
    from .pipeline import AdaptationPlan, run_adaptation

    plan = AdaptationPlan(
        source_manifest=str(_manifest(cfg, ws)),
        target_manifest=cfg.corpus.target_manifest,
        eval_manifest=str(_eval_manifest(cfg, ws)),
        upper_bound_manifest=cfg.corpus.upper_bound_manifest,
        workspace=str(ws),
        n_t=cfg.pipeline.n_t,
        seed=args.seed,
        stft=cfg.stft,
        se=cfg.senet,
        ugan=cfg.ugan,
        simulation=cfg.pipeline.simulation,
        evaluation=cfg.eval,
    )
    report = run_adaptation(plan, resume=args.resume, upper_bound=cfg.pipeline.upper_bound)
    print(report.table)
    print(json.dumps(report.deltas, sort_keys=True))


def cmd_plot(args, cfg, ws):
    from .evalkit import export_spectrogram_figure

    panels, labels = [], []
    for spec in args.panel:
        label, _, path = spec.rpartition("=")
        panels.append(dsp.read_wav(_require(path, "audio file")))
        labels.append(label or Path(path).stem)
    out = Path(args.out) if args.out else ws / "reports" / "spectrograms.png"
    info = export_spectrogram_figure(panels, labels, out, cfg.stft)
    print(f"figure: {info.path}")


def _load_corpus(path):
    from .corpus import load_corpus

    return load_corpus(path)


COMMANDS = {
    "synth-corpus": (cmd_synth_corpus, "generate the synthetic source/target fixture"),
    "mix": (cmd_mix, "mix clean speech with noise files over an SNR grid"),
    "train-se": (cmd_train_se, "train the baseline enhancer on source pairs"),
    "train-gan": (cmd_train_gan, "train the clean-to-noisy magnitude translator"),
    "simulate": (cmd_simulate, "simulate target-style noisy speech from source cleans"),
    "finetune": (cmd_finetune, "fine-tune the baseline on simulated pairs"),
    "evaluate": (cmd_evaluate, "score checkpoints on the evaluation set"),
    "adapt": (cmd_adapt, "run the whole adaptation pipeline"),
    "plot": (cmd_plot, "export a shared-scale spectrogram comparison figure"),
}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies suppress their defaults so flags given before the subcommand survive
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=d(None),
                        help="YAML run configuration (all fields optional)")
    common.add_argument("--seed", type=int, default=d(0), help="global seed (default 0)")
    common.add_argument("--workspace", metavar="DIR", default=d("workspace"),
                        help="output directory (default ./workspace)")
    common.add_argument("--threads", type=int, default=d(1),
                        help="torch intra-op threads; 1 (default) gives bit-reproducible runs, more is faster "
                             "but not deterministic")
    common.add_argument("--resume", action="store_true", default=d(False),
                        help="reuse completed stages and checkpoints")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unagan", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Unsupervised noise adaptation for speech enhancement.",
        epilog="default configuration:\n" + defaults_help(), parents=[_global_flags(False)])
    sub_flags = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parsers = {name: sub.add_parser(name, help=text, description=text, parents=[sub_flags])
               for name, (_, text) in COMMANDS.items()}
    parsers["synth-corpus"].add_argument("--out", metavar="DIR", help="default: WORKSPACE/corpus")
    parsers["mix"].add_argument("--clean-dir")
    parsers["mix"].add_argument("--noise-dir")
    parsers["mix"].add_argument("--snr", type=float, action="append", help="repeatable; overrides corpus.mix.snrs")
    for name in ("train-se", "train-gan", "finetune"):
        parsers[name].add_argument("--steps", type=int, help="override the configured step count")
    parsers["simulate"].add_argument("--generator", metavar="CKPT")
    parsers["finetune"].add_argument("--baseline", metavar="CKPT")
    parsers["finetune"].add_argument("--simulated", metavar="MANIFEST")
    parsers["evaluate"].add_argument("--system", action="append", metavar="LABEL=CKPT")
    parsers["plot"].add_argument("--panel", action="append", required=True, metavar="LABEL=WAV")
    parsers["plot"].add_argument("--out", metavar="PNG")
    return parser


def _report_error(exc: BaseException, code: int, key_path=None) -> int:
    category = getattr(exc, "category", "missing-input" if code == EXIT_MISSING else "error")
    fields = [f"category={category}"]
    if key_path:
        fields.append(f"key={key_path}")
    print(f"unagan: error {' '.join(fields)}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    ws = Path(args.workspace)
    try:
        cfg = load_config(_require(args.config, "config file") if args.config else None)
    except ConfigError as exc:
        return _report_error(exc, EXIT_CONFIG, exc.key_path)
    except MissingInput as exc:
        return _report_error(exc, EXIT_MISSING)
    ws.mkdir(parents=True, exist_ok=True)
    save_config(cfg, ws / "config.resolved.yaml")
    fn = COMMANDS[args.command][0]
    try:
        fn(args, cfg, ws)
    except ConfigError as exc:
        return _report_error(exc, EXIT_CONFIG, exc.key_path)
    except (MissingInput, FileNotFoundError) as exc:
        return _report_error(exc, EXIT_MISSING)
    except UnaganError as exc:
        return _report_error(exc, EXIT_FAILURE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
