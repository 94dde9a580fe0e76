"""Corpus manifests, SNR-grid mixing, unpaired sampling and a synthetic fixture.

Manifest files are JSON lines. The first line is a header::

    {"format": "unagan-manifest", "version": 1, "kind": "corpus", ...}

followed by one object per record. Relative paths resolve against the
manifest's directory.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import zlib
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dsp
from .errors import (
    EmptyPool,
    IngestError,
    InsufficientData,
    ManifestError,
    MixError,
    PairingError,
    SilentClean,
    SilentNoise,
)

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "unagan-manifest"
MANIFEST_VERSION = 1
AUDIO_SUFFIXES = (".wav",)


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    role: str
    path: str
    duration: float
    domain: str
    snr_db: float | None = None
    noise_type: str | None = None
    paired_clean_id: str | None = None

    def __post_init__(self):
        if self.role not in ("clean", "noisy", "noise"):
            raise ManifestError(f"{self.id}: unknown role {self.role!r}")
        if self.domain not in ("source", "target"):
            raise ManifestError(f"{self.id}: unknown domain {self.domain!r}")
        if self.role == "noisy" and self.domain == "source" and self.paired_clean_id is None:
            raise ManifestError(f"{self.id}: source noisy record must carry paired_clean_id")
        if self.role == "noisy" and self.domain == "target" and self.paired_clean_id is not None:
            raise ManifestError(f"{self.id}: target noisy record must not carry paired_clean_id")


@dataclass(frozen=True)
class DomainCorpus:
    records: tuple[UtteranceRecord, ...]
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(sorted(self.records, key=lambda r: r.id)))

    @property
    def n_source(self) -> int:
        return sum(1 for r in self.records if r.role == "noisy" and r.domain == "source")

    @property
    def n_target(self) -> int:
        return sum(1 for r in self.records if r.role == "noisy" and r.domain == "target")

    def pool(self, role: str, domain: str) -> list[UtteranceRecord]:
        return [r for r in self.records if r.role == role and r.domain == domain]

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.id: r for r in self.records}

    def source_pairs(self) -> list[tuple[UtteranceRecord, UtteranceRecord]]:
        index = self.by_id()
        return [(r, index[r.paired_clean_id]) for r in self.pool("noisy", "source")]

    def validate(self) -> "DomainCorpus":
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate record ids in corpus")
        index = self.by_id()
        for r in self.records:
            if r.paired_clean_id is not None:
                target = index.get(r.paired_clean_id)
                if target is None or target.role != "clean":
                    raise PairingError(
                        f"{r.id}: paired_clean_id {r.paired_clean_id!r} does not resolve to a clean record")
        return self

    def merge(self, other: "DomainCorpus") -> "DomainCorpus":
        return DomainCorpus(self.records + other.records, self.notes + other.notes).validate()


@dataclass(frozen=True)
class EvalItem:
    """A test utterance with its reference; used only for scoring."""
    id: str
    noisy_path: str
    reference_path: str | None
    noise_type: str | None = None
    snr_db: float | None = None


@dataclass(frozen=True)
class MixSpec:
    clean_ids: tuple[str, ...]
    noise_types: tuple[str, ...]
    snr_grid: tuple[float, ...]
    domain_label: str = "source"
    loop_noise: bool = True

    def __post_init__(self):
        if not self.snr_grid:
            raise ValueError("snr_grid must not be empty")
        if self.domain_label not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain_label!r}")

    @property
    def size(self) -> int:
        return len(self.clean_ids) * len(self.noise_types) * len(self.snr_grid)

    def jobs(self) -> list[tuple[str, str, float]]:
        return list(itertools.product(self.clean_ids, self.noise_types, self.snr_grid))


# -- manifest I/O ------------------------------------------------------------

def _rel(path: str, base: Path) -> str:
    try:
        return os.path.relpath(path, base)
    except ValueError:
        return path


def _abs(path: str, base: Path) -> str:
    p = Path(path)
    return str(p if p.is_absolute() else (base / p).resolve())


def _write_lines(path: Path, header: dict, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _read_lines(path: Path, kind: str) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.get('version')}")
    if header.get("kind") != kind:
        raise ManifestError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
    return header, [json.loads(line) for line in lines[1:]]


def save_corpus(corpus: DomainCorpus, path) -> Path:
    base = Path(path).resolve().parent
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "kind": "corpus",
              "n_source": corpus.n_source, "n_target": corpus.n_target, "notes": list(corpus.notes)}
    rows = ({**asdict(r), "path": _rel(r.path, base)} for r in corpus.records)
    return _write_lines(path, header, rows)


def load_corpus(path) -> DomainCorpus:
    header, rows = _read_lines(path, "corpus")
    base = Path(path).resolve().parent
    records = [UtteranceRecord(**{**row, "path": _abs(row["path"], base)}) for row in rows]
    corpus = DomainCorpus(tuple(records), tuple(header.get("notes", ()))).validate()
    if header.get("n_source") != corpus.n_source or header.get("n_target") != corpus.n_target:
        raise ManifestError(f"{path}: header counts disagree with records")
    return corpus


def save_eval_set(items: list[EvalItem], path) -> Path:
    base = Path(path).resolve().parent
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "kind": "eval", "n_items": len(items)}
    rows = []
    for item in items:
        row = asdict(item)
        row["noisy_path"] = _rel(item.noisy_path, base)
        if item.reference_path is not None:
            row["reference_path"] = _rel(item.reference_path, base)
        rows.append(row)
    return _write_lines(path, header, rows)


def load_eval_set(path) -> list[EvalItem]:
    _, rows = _read_lines(path, "eval")
    base = Path(path).resolve().parent
    items = []
    for row in rows:
        row["noisy_path"] = _abs(row["noisy_path"], base)
        if row.get("reference_path") is not None:
            row["reference_path"] = _abs(row["reference_path"], base)
        items.append(EvalItem(**row))
    return items


# -- ingestion -----------------------------------------------------------------

def stem_pairing(noisy_stem: str) -> str:
    """Identical-stem convention (VoiceBank style)."""
    return noisy_stem


def prefix_pairing(noisy_stem: str) -> str:
    """``<clean stem>__<anything>`` convention used by :func:`materialize_mix`."""
    return noisy_stem.split("__", 1)[0]


PAIRING_RULES = {"stem": stem_pairing, "prefix": prefix_pairing}


def _audio_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"audio directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in AUDIO_SUFFIXES)


def build_manifest(audio_dirs: dict, pairing_rule: str | Callable[[str], str] = "stem") -> DomainCorpus:
    """Index audio directories into a corpus.

    ``audio_dirs`` maps any of ``source_clean``, ``source_noisy``, ``target_noisy``
    (and optionally ``source_noise`` / ``target_noise``) to directories.
    """
    rule = PAIRING_RULES[pairing_rule] if isinstance(pairing_rule, str) else pairing_rule
    layout = {
        "source_clean": ("clean", "source"),
        "source_noisy": ("noisy", "source"),
        "target_noisy": ("noisy", "target"),
        "source_noise": ("noise", "source"),
        "target_noise": ("noise", "target"),
    }
    unknown = set(audio_dirs) - set(layout)
    if unknown:
        raise ValueError(f"unknown audio directory keys: {sorted(unknown)}")
    if "target_clean" in audio_dirs:
        raise ValueError("target-domain clean audio is not part of an unsupervised corpus")

    durations, offenders = {}, []
    files = {key: _audio_files(d) for key, d in audio_dirs.items()}
    for key, paths in files.items():
        for p in paths:
            try:
                durations[p] = dsp.read_wav(p).duration
            except Exception as exc:  # noqa: BLE001 - every failure is reported
                offenders.append(f"{p}: {exc}")
    if offenders:
        raise IngestError(f"{len(offenders)} unreadable audio file(s)", offenders)

    clean_ids = {p.stem: f"source/clean/{p.stem}" for p in files.get("source_clean", [])}
    records = []
    for key, paths in files.items():
        role, domain = layout[key]
        for p in paths:
            rid = f"{domain}/{role}/{p.stem}"
            paired = None
            if role == "noisy" and domain == "source":
                clean_stem = rule(p.stem)
                if clean_stem not in clean_ids:
                    raise PairingError(f"no clean counterpart for source noisy file {p.name}")
                paired = clean_ids[clean_stem]
            noise_type = p.stem if role == "noise" else None
            records.append(UtteranceRecord(rid, role, str(p.resolve()), durations[p], domain,
                                           noise_type=noise_type, paired_clean_id=paired))
    return DomainCorpus(tuple(records)).validate()


# -- mixing --------------------------------------------------------------------

def utterance_rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(key.encode())])


def _snr_tag(snr: float) -> str:
    return f"{snr:g}".replace("-", "m").replace(".", "p")


def materialize_mix(corpus: DomainCorpus, mix_spec: MixSpec, noises: dict, out_dir, seed: int = 0,
                    subtype: str = "float32") -> DomainCorpus:
    """Write every clean x noise x SNR combination of ``mix_spec`` under ``out_dir``.

    ``noises`` maps noise-type names to WAV paths. Source-domain outputs keep
    the link to their clean record; target-domain outputs do not. On any
    failure every file written by this call is removed.
    """
    out_dir = Path(out_dir)
    index = corpus.by_id()
    missing = [cid for cid in mix_spec.clean_ids if cid not in index]
    if missing:
        raise FileNotFoundError(f"clean ids not in corpus: {missing[:5]}")
    missing = [n for n in mix_spec.noise_types if n not in noises]
    if missing:
        raise FileNotFoundError(f"no noise source configured for: {missing}")
    noise_wavs = {}
    for name in mix_spec.noise_types:
        noise_wavs[name] = dsp.read_wav(noises[name])

    written, records, failures, report = [], [], [], []
    clean_cache = {}
    for clean_id, noise_type, snr in mix_spec.jobs():
        clean_rec = index[clean_id]
        if clean_id not in clean_cache:
            clean_cache[clean_id] = dsp.read_wav(clean_rec.path)
        clean = clean_cache[clean_id]
        stem = Path(clean_rec.path).stem
        name = f"{stem}__{noise_type}__snr{_snr_tag(snr)}"
        rid = f"{mix_spec.domain_label}/noisy/{name}"
        try:
            mix = dsp.mix_at_snr(clean, noise_wavs[noise_type], snr, utterance_rng(seed, rid), mix_spec.loop_noise)
        except (SilentNoise, SilentClean) as exc:
            failures.append({"id": rid, "error": type(exc).__name__, "message": str(exc)})
            continue
        path = out_dir / mix_spec.domain_label / "noisy" / f"{name}.wav"
        dsp.write_wav(path, mix.waveform, subtype)
        written.append(path)
        paired = clean_id if mix_spec.domain_label == "source" else None
        records.append(UtteranceRecord(rid, "noisy", str(path.resolve()), mix.waveform.duration,
                                       mix_spec.domain_label, float(snr), noise_type, paired))
        report.append({"id": rid, "clean_id": clean_id, "noise_type": noise_type, "snr_db": snr,
                       "gain": mix.gain, "peak": mix.peak, "clipped": mix.clipped, "noise_offset": mix.noise_offset})
    if failures:
        for path in written:
            path.unlink(missing_ok=True)
        _write_lines(out_dir / "mix_failures.jsonl",
                     {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "kind": "mix-failures"}, failures)
        raise MixError(f"{len(failures)} of {mix_spec.size} mixes failed", failures)
    _write_lines(out_dir / f"mix_report_{mix_spec.domain_label}.jsonl",
                 {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "kind": "mix-report"}, report)
    keep = list(records)
    if mix_spec.domain_label == "source":
        keep += [index[cid] for cid in mix_spec.clean_ids]
    return DomainCorpus(tuple(keep)).validate()


def select_subset(records: list, n: int, seed: int = 0, keys=("noise_type", "snr_db")) -> list:
    """Stratified subset: round-robin over the ``keys`` strata in shuffled order."""
    if n > len(records):
        raise InsufficientData(f"requested {n} of {len(records)} records")
    rng = np.random.default_rng(seed)
    strata = {}
    for rec in records:
        strata.setdefault(tuple(getattr(rec, k) for k in keys), []).append(rec)
    queues = []
    for key in sorted(strata, key=repr):
        items = list(strata[key])
        rng.shuffle(items)
        queues.append(items)
    chosen = []
    while len(chosen) < n:
        for q in queues:
            if q and len(chosen) < n:
                chosen.append(q.pop())
    return sorted(chosen, key=lambda r: r.id)


def subsample_target(corpus: DomainCorpus, n_t: int, seed: int = 0) -> DomainCorpus:
    """Keep ``n_t`` target noisy utterances drawn uniformly without replacement."""
    targets = corpus.pool("noisy", "target")
    if n_t > len(targets):
        raise InsufficientData(f"n_t={n_t} exceeds the {len(targets)} available target utterances")
    if n_t < 0:
        raise ValueError("n_t must be nonnegative")
    rng = np.random.default_rng(seed)
    chosen = {targets[i].id for i in rng.choice(len(targets), size=n_t, replace=False)}
    keep = [r for r in corpus.records if not (r.role == "noisy" and r.domain == "target") or r.id in chosen]
    notes = corpus.notes + (("empty-target-pool",) if n_t == 0 else ())
    return DomainCorpus(tuple(keep), notes)


# -- unpaired sampling -----------------------------------------------------------

class UnpairedSampler:
    """Independent uniform draws of clean-source and target-noisy magnitude crops.

    Only the record's ``path`` and ``id`` are touched; pairing fields are never read.
    """

    def __init__(self, clean_records, target_records, stft_cfg=dsp.StftConfig(), width: int = 128,
                 seed: int = 0):
        self.clean = list(clean_records)
        self.target = list(target_records)
        if not self.clean:
            raise EmptyPool("no clean source utterances to sample from")
        if not self.target:
            raise EmptyPool("no target noisy utterances to sample from")
        self.stft_cfg = stft_cfg
        self.width = width
        self.rng = np.random.default_rng(seed)
        self._cache = {}

    @classmethod
    def from_corpus(cls, corpus: DomainCorpus, **kwargs):
        return cls(corpus.pool("clean", "source"), corpus.pool("noisy", "target"), **kwargs)

    def magnitude(self, record) -> np.ndarray:
        key = record.path
        if key not in self._cache:
            self._cache[key] = dsp.stft(dsp.read_wav(record.path), self.stft_cfg).magnitude.astype(np.float32)
        return self._cache[key]

    def draw_indices(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        return (self.rng.integers(0, len(self.clean), batch_size),
                self.rng.integers(0, len(self.target), batch_size))

    def sample(self, batch_size: int):
        """Return (clean [B,bins,W], noisy [B,bins,W], clean ids, target ids)."""
        ci, ti = self.draw_indices(batch_size)
        ys = [dsp.segment_magnitude(self.magnitude(self.clean[i]), self.width, "random_crop", self.rng)[0].values
              for i in ci]
        xs = [dsp.segment_magnitude(self.magnitude(self.target[i]), self.width, "random_crop", self.rng)[0].values
              for i in ti]
        return (np.stack(ys), np.stack(xs), [self.clean[i].id for i in ci], [self.target[i].id for i in ti])

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict):
        self.rng.bit_generator.state = state


def sample_unpaired_batch(corpus: DomainCorpus, batch_size: int, seed: int = 0, stft_cfg=dsp.StftConfig(),
                          width: int = 128):
    sampler = UnpairedSampler.from_corpus(corpus, stft_cfg=stft_cfg, width=width, seed=seed)
    ys, xs, _, _ = sampler.sample(batch_size)
    return ys, xs


# -- synthetic fixture -------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale stand-in for a source/target corpus pair.

    Clean surrogates are harmonic complexes with drifting f0 and syllable-like
    envelopes. Source noise is stationary; target noise is a rotor tone complex
    and/or amplitude-modulated "cry" bursts.
    """
    n_source_clean: int = 8
    n_target_train: int = 4
    n_target_test: int = 4
    duration: float = 2.0
    sample_rate: int = 16000
    f0_range: tuple[float, float] = (100.0, 300.0)
    max_partial_hz: float = 4000.0
    clean_rms: float = 0.05
    source_noises: tuple[str, ...] = ("white",)
    target_noises: tuple[str, ...] = ("rotor",)
    source_snrs: tuple[float, ...] = (-6.0, 0.0, 6.0, 12.0)
    target_snrs: tuple[float, ...] = (-5.0,)
    test_snrs: tuple[float, ...] = (-6.0, -3.0, 0.0, 3.0, 6.0)
    noise_seconds: float = 12.0
    rotor_f0: float = 437.5
    rotor_max_hz: float = 4000.0
    write_oracle: bool = False


@dataclass
class SyntheticCorpus:
    corpus: DomainCorpus
    eval_set: list[EvalItem]
    root: Path
    manifest_path: Path
    eval_path: Path
    oracle_path: Path | None = None
    noise_files: dict = field(default_factory=dict)


def synth_clean(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    t = np.arange(n) / sr
    f0 = rng.uniform(*spec.f0_range)
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    f0_track = f0 * drift
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    formants = rng.uniform([400, 1100, 2300], [900, 1800, 3200])
    x = np.zeros(n)
    for k in range(1, int(spec.max_partial_hz // f0) + 1):
        fk = k * f0
        shape = sum(np.exp(-0.5 * ((fk - f) / 250.0) ** 2) for f in formants)
        x += (0.3 + shape) / k ** 0.7 * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    envelope = np.zeros(n)
    pos = int(rng.uniform(0.02, 0.1) * sr)
    while pos < n:
        length = int(rng.uniform(0.15, 0.35) * sr)
        seg = np.sin(np.pi * np.arange(length) / length) ** 2
        end = min(pos + length, n)
        envelope[pos:end] = seg[:end - pos] * rng.uniform(0.5, 1.0)
        pos = end + int(rng.uniform(0.04, 0.15) * sr)
    x *= envelope
    level = spec.clean_rms * 10 ** (rng.uniform(-3, 3) / 20)
    return x * level / dsp.rms(x)


def rotor_frequencies(spec: SynthSpec) -> np.ndarray:
    return spec.rotor_f0 * np.arange(1, int(spec.rotor_max_hz // spec.rotor_f0) + 1)


def synth_noise(kind: str, rng: np.random.Generator, spec: SynthSpec, seconds: float | None = None) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round((seconds or spec.noise_seconds) * sr))
    t = np.arange(n) / sr
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec_ = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sr)
        spec_[1:] /= np.sqrt(freqs[1:])
        spec_[0] = 0
        x = np.fft.irfft(spec_, n)
    elif kind == "rotor":
        x = np.zeros(n)
        blade = 1.0 + 0.3 * np.sin(2 * np.pi * 11.0 * t)
        for k, f in enumerate(rotor_frequencies(spec), start=1):
            jitter = 1.0 + 0.002 * np.cumsum(rng.standard_normal(n)) / np.sqrt(sr)
            phase = 2 * np.pi * f * np.cumsum(jitter) / sr + rng.uniform(0, 2 * np.pi)
            x += (1.0 / k ** 0.5) * np.sin(phase)
        x *= blade
        x += 0.02 * rng.standard_normal(n)
    elif kind == "cry":
        x = np.zeros(n)
        pos = 0
        while pos < n:
            length = int(rng.uniform(0.3, 0.7) * sr)
            end = min(pos + length, n)
            tt = np.arange(end - pos) / sr
            f0 = rng.uniform(400, 600) * (1 + 0.15 * np.sin(2 * np.pi * rng.uniform(1, 3) * tt))
            ph = 2 * np.pi * np.cumsum(f0) / sr
            burst = sum(np.sin(k * ph) / k for k in range(1, 6))
            x[pos:end] = burst * np.sin(np.pi * np.arange(end - pos) / length) ** 2
            pos = end + int(rng.uniform(0.1, 0.4) * sr)
    else:
        raise ValueError(f"unknown noise family {kind!r}")
    return x / dsp.rms(x) * 0.05


def _quantized(x: np.ndarray, sr: int) -> dsp.Waveform:
    return dsp.Waveform(x.astype(np.float32).astype(np.float64), sr)


def generate_synthetic_corpus(spec: SynthSpec, out_dir, seed: int = 0) -> SyntheticCorpus:
    out = Path(out_dir)
    sr = spec.sample_rate
    rng = np.random.default_rng([seed, 1])
    noise_files = {}
    for domain, kinds in (("source", spec.source_noises), ("target", spec.target_noises)):
        for kind in kinds:
            for split in ("train", "test"):
                nrng = utterance_rng(seed, f"noise/{domain}/{kind}/{split}")
                path = out / "noise" / f"{kind}_{split}.wav"
                if path not in noise_files.values():
                    dsp.write_wav(path, _quantized(synth_noise(kind, nrng, spec), sr))
                noise_files[f"{kind}_{split}"] = path

    records = []
    for i in range(spec.n_source_clean):
        path = out / "source" / "clean" / f"src{i:03d}.wav"
        dsp.write_wav(path, _quantized(synth_clean(rng, spec), sr))
        records.append(
            UtteranceRecord(f"source/clean/src{i:03d}", "clean", str(path.resolve()), spec.duration, "source"))
    noise_records = [UtteranceRecord(f"{d}/noise/{Path(p).stem}", "noise", str(Path(p).resolve()),
                                     spec.noise_seconds, d, noise_type=Path(p).stem.rsplit("_", 1)[0])
                     for d, kinds in (("source", spec.source_noises), ("target", spec.target_noises))
                     for p in (noise_files[f"{k}_train"] for k in kinds)]
    cleans = DomainCorpus(tuple(records))
    source_mix = MixSpec(tuple(r.id for r in records), spec.source_noises, spec.source_snrs, "source")
    source = materialize_mix(cleans, source_mix, {k: noise_files[f"{k}_train"] for k in spec.source_noises},
                             out, seed)

    def target_split(split, count, snrs, write_refs):
        items, oracle = [], []
        for i in range(count):
            clean = _quantized(synth_clean(rng, spec), sr)
            for kind in spec.target_noises:
                for snr in snrs:
                    name = f"{split}{i:03d}__{kind}__snr{_snr_tag(snr)}"
                    noise = dsp.read_wav(noise_files[f"{kind}_{'test' if split == 'test' else 'train'}"])
                    mix = dsp.mix_at_snr(clean, noise, snr, utterance_rng(seed, f"{split}/{name}"))
                    noisy_path = out / ("target" if split == "tgt" else "test") / "noisy" / f"{name}.wav"
                    dsp.write_wav(noisy_path, mix.waveform)
                    ref_path = None
                    if write_refs:
                        ref_path = out / ("oracle" if split == "tgt" else "test") / "clean" / f"{split}{i:03d}.wav"
                        if not ref_path.exists():
                            dsp.write_wav(ref_path, clean)
                        ref_path = str(ref_path.resolve())
                    items.append(EvalItem(f"{split}/{name}", str(noisy_path.resolve()), ref_path, kind, float(snr)))
        return items

    train_items = target_split("tgt", spec.n_target_train, spec.target_snrs, spec.write_oracle)
    test_items = target_split("test", spec.n_target_test, spec.test_snrs, True)
    target_records = [UtteranceRecord(f"target/noisy/{Path(it.noisy_path).stem}", "noisy", it.noisy_path,
                                      spec.duration, "target", it.snr_db, it.noise_type) for it in train_items]
    corpus = DomainCorpus(source.records + tuple(target_records) + tuple(noise_records)).validate()
    manifest_path = save_corpus(corpus, out / "corpus.jsonl")
    eval_path = save_eval_set(test_items, out / "eval.jsonl")
    oracle_path = save_eval_set(train_items, out / "oracle_target.jsonl") if spec.write_oracle else None
    return SyntheticCorpus(corpus, test_items, out, manifest_path, eval_path, oracle_path, noise_files)
