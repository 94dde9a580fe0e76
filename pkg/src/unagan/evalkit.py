"""Scoring, comparison tables, spectrogram figures and an external-metric adapter."""
from __future__ import annotations

import json
import logging
import re
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import GroupingError, ToolOutputError

log = logging.getLogger(__name__)

METRICS = ("si_sdr_in", "si_sdr_out", "si_sdri", "pesq")
_NUMBER = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?")


@dataclass(frozen=True)
class EvalConfig:
    pesq_command: str | None = None
    pesq_version_command: str | None = None
    columns: str = "snr_db"
    decimals: int = 2

    def __post_init__(self):
        if self.columns not in ("snr_db", "noise_type"):
            raise ValueError(f"columns must be 'snr_db' or 'noise_type', got {self.columns!r}")


@dataclass(frozen=True)
class MetricRow:
    id: str
    noise_type: str | None
    snr_db: float | None
    si_sdr_in: float | None
    si_sdr_out: float | None
    si_sdri: float | None
    pesq: float | None = None


@dataclass
class MetricReport:
    system: str
    rows: list[MetricRow]
    fingerprint: str | None = None
    excluded: list[str] = field(default_factory=list)
    tool: dict | None = None

    def values(self, metric: str) -> list[float]:
        return [getattr(r, metric) for r in self.rows if getattr(r, metric) is not None]

    def mean(self, metric: str) -> float | None:
        vals = self.values(metric)
        return float(np.mean(vals)) if vals else None

    def grouped(self, metric: str, key: str) -> dict:
        groups = {}
        for r in self.rows:
            value = getattr(r, metric)
            if value is not None:
                groups.setdefault(getattr(r, key), []).append(value)
        return {k: float(np.mean(v)) for k, v in groups.items()}

    def aggregates(self) -> dict:
        out = {}
        for metric in METRICS:
            if not self.values(metric):
                continue
            by_pair = {}
            for r in self.rows:
                if getattr(r, metric) is not None:
                    by_pair.setdefault((r.noise_type, r.snr_db), []).append(getattr(r, metric))
            avg_over_snr = {}
            for noise in sorted({r.noise_type for r in self.rows}, key=str):
                snr_means = [float(np.mean(v)) for (n, _), v in by_pair.items() if n == noise]
                if snr_means:
                    avg_over_snr[str(noise)] = float(np.mean(snr_means))
            out[metric] = {
                "overall": self.mean(metric),
                "by_noise_type": {str(k): v for k, v in self.grouped(metric, "noise_type").items()},
                "by_snr_db": {str(k): v for k, v in self.grouped(metric, "snr_db").items()},
                "by_noise_type_snr_db": {f"{n}|{s}": float(np.mean(v)) for (n, s), v in by_pair.items()},
                "avg_over_snr": avg_over_snr,
            }
        return out

    def to_json(self) -> dict:
        return {"system": self.system, "fingerprint": self.fingerprint, "excluded": self.excluded,
                "tool": self.tool, "rows": [asdict(r) for r in self.rows], "aggregates": self.aggregates()}

    @classmethod
    def from_json(cls, data: dict) -> "MetricReport":
        return cls(data["system"], [MetricRow(**r) for r in data["rows"]], data.get("fingerprint"),
                   list(data.get("excluded", [])), data.get("tool"))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_json(json.loads(Path(path).read_text()))


# -- external perceptual metric ----------------------------------------------------

@dataclass(frozen=True)
class ToolScore:
    value: float
    tool: str
    version: str | None
    output: str


def pesq_adapter(enhanced_path, reference_path, command_template: str | None,
                 version_command: str | None = None, timeout: float = 300.0) -> ToolScore | None:
    """Run an external quality tool and parse the last number it prints.

    ``command_template`` holds ``{enhanced}`` and ``{reference}`` placeholders.
    Returns None (with a warning) when no tool is configured or it cannot be found.
    """
    if not command_template:
        return None
    argv = shlex.split(command_template.format(enhanced=shlex.quote(str(enhanced_path)),
                                               reference=shlex.quote(str(reference_path))))
    exe = shutil.which(argv[0]) if argv else None
    if exe is None:
        log.warning("quality tool %r not found; metric omitted", argv[0] if argv else command_template)
        return None
    try:
        proc = subprocess.run([exe, *argv[1:]], capture_output=True, text=True, timeout=timeout)
    except OSError as exc:
        log.warning("quality tool %s could not be started (%s); metric omitted", exe, exc)
        return None
    output = (proc.stdout or "") + (proc.stderr or "")
    if proc.returncode != 0:
        raise ToolOutputError(f"{exe} exited with status {proc.returncode}", output)
    numbers = _NUMBER.findall(proc.stdout or "")
    if not numbers:
        raise ToolOutputError(f"no numeric score in output of {exe}", output)
    version = None
    if version_command:
        try:
            vp = subprocess.run(shlex.split(version_command), capture_output=True, text=True, timeout=30)
            version = ((vp.stdout or vp.stderr).strip().splitlines() or [None])[0]
        except OSError:
            version = None
    return ToolScore(float(numbers[-1]), exe, version, output)


# -- evaluation --------------------------------------------------------------------

def _as_system(system):
    from .senet import SeNet, enhance, load_se

    if isinstance(system, (str, Path)):
        system = load_se(system)[0]
    if isinstance(system, SeNet):
        model = system
        return lambda noisy, item: enhance(model, noisy)
    return system


def identity_system(noisy, item):
    return noisy


def evaluate_system(system, items, label: str, fingerprint: str | None = None, pesq_command: str | None = None,
                    pesq_version_command: str | None = None, workdir=None) -> MetricReport:
    """Score ``system`` on evaluation items that carry clean references.

    ``system`` is a checkpoint path, an ``SeNet`` or a callable
    ``(noisy Waveform, EvalItem) -> Waveform``.
    """
    fn = _as_system(system)
    rows, excluded, tool = [], [], None
    tmp = None
    if pesq_command and workdir is None:
        tmp = tempfile.TemporaryDirectory()
        workdir = tmp.name
    try:
        for item in items:
            if item.reference_path is None or not Path(item.reference_path).exists():
                excluded.append(item.id)
                continue
            noisy = dsp.read_wav(item.noisy_path)
            ref = dsp.read_wav(item.reference_path)
            out = fn(noisy, item)
            s_in = dsp.si_sdr(noisy, ref)
            s_out = dsp.si_sdr(out, ref)
            pesq = None
            if pesq_command:
                enh_path = Path(workdir) / f"{label}__{Path(item.noisy_path).stem}.wav"
                dsp.write_wav(enh_path, out)
                score = pesq_adapter(enh_path, item.reference_path, pesq_command, pesq_version_command)
                if score is not None:
                    pesq = score.value
                    tool = {"tool": score.tool, "version": score.version}
            rows.append(MetricRow(item.id, item.noise_type, item.snr_db, s_in, s_out, s_out - s_in, pesq))
    finally:
        if tmp is not None:
            tmp.cleanup()
    return MetricReport(label, rows, fingerprint, excluded, tool)


# -- tables -------------------------------------------------------------------------

def relative_change(value: float, baseline: float, decimals: int = 2) -> float:
    """Percent change computed on the values as displayed (rounded to ``decimals``)."""
    v, b = round(value, decimals), round(baseline, decimals)
    return 100.0 * (v - b) / b


def render_table(reports, metric: str = "si_sdri", columns: str = "snr_db", baseline: str | None = "Unprocessed",
                 decimals: int = 2) -> str:
    """Fixed-width comparison table: one row per system, one column per group plus ``Avg.``.

    ``Avg.`` is the mean of the column means. When a row labelled ``baseline``
    is present every row's average also carries a ``+X.X%`` change relative to
    it, computed from the displayed (rounded) averages. Percentages are only
    shown against a positive baseline average.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("render_table needs at least one report")
    grouped = [r.grouped(metric, columns) for r in reports]
    keys = set(grouped[0])
    for rep, g in zip(reports[1:], grouped[1:]):
        if set(g) != keys:
            raise GroupingError(f"report {rep.system!r} groups {sorted(map(str, g))} differ from "
                                f"{reports[0].system!r} groups {sorted(map(str, keys))}")
    if not keys:
        raise GroupingError(f"no rows carry metric {metric!r}")
    ordered = sorted(keys, key=lambda k: (k is None, k if not isinstance(k, str) else 0, str(k)))
    averages = [float(np.mean([g[k] for k in ordered])) for g in grouped]
    base_avg = None
    if baseline is not None:
        for rep, avg in zip(reports, averages):
            if rep.system.lower() == baseline.lower():
                base_avg = avg
    header = ["System"] + [f"{k:g}" if isinstance(k, float) else str(k) for k in ordered] + ["Avg."]
    lines = []
    for rep, g, avg in zip(reports, grouped, averages):
        cells = [rep.system] + [f"{g[k]:.{decimals}f}" for k in ordered]
        avg_cell = f"{avg:.{decimals}f}"
        if base_avg is not None and round(base_avg, decimals) > 0:
            avg_cell += f" {relative_change(avg, base_avg, decimals):+.1f}%"
        lines.append(cells + [avg_cell])
    widths = [max(len(row[i]) for row in [header] + lines) for i in range(len(header))]
    fmt = lambda row: " | ".join(cell.ljust(w) for cell, w in zip(row, widths))
    rule = "-+-".join("-" * w for w in widths)
    title = f"{metric} by {columns}"
    return "\n".join([title, fmt(header), rule] + [fmt(row) for row in lines]) + "\n"


# -- figures ------------------------------------------------------------------------

@dataclass
class FigureInfo:
    path: Path
    vmin: float
    vmax: float
    panels_db: list
    labels: list = field(default_factory=list)


def log_magnitude(mag: np.ndarray) -> np.ndarray:
    return 20.0 * np.log10(np.maximum(mag, 1e-12))


def export_spectrogram_figure(panels, labels, path, stft_cfg: dsp.StftConfig = dsp.StftConfig(),
                              dynamic_range_db: float = 80.0, dpi: int = 100) -> FigureInfo:
    """Render magnitudes side by side on one shared dB color scale.

    The scale tops out at the global maximum over all panels and spans
    ``dynamic_range_db`` below it; anything quieter (including silence) sits
    on the floor colour.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(panels) != len(labels):
        raise ValueError("one label per panel required")
    mags = []
    for p in panels:
        if isinstance(p, dsp.Waveform):
            p = dsp.stft(p, stft_cfg).magnitude
        elif isinstance(p, dsp.Spectrogram):
            p = p.magnitude
        mags.append(np.asarray(p, dtype=np.float64))
    dbs = [log_magnitude(m) for m in mags]
    vmax = max(float(d.max()) for d in dbs)
    if vmax <= log_magnitude(np.array(0.0)):
        vmax = 0.0
    vmin = vmax - dynamic_range_db
    dbs = [np.clip(d, vmin, vmax) for d in dbs]

    fig, axes = plt.subplots(1, len(dbs), figsize=(4 * len(dbs), 3.5), squeeze=False)
    image = None
    for ax, d, label in zip(axes[0], dbs, labels):
        image = ax.imshow(d, origin="lower", aspect="auto", cmap="magma", vmin=vmin, vmax=vmax)
        ax.set_title(label)
        ax.set_xlabel("frame")
    axes[0][0].set_ylabel("frequency bin")
    bar = fig.colorbar(image, ax=axes[0].tolist(), label="dB")
    drawn_min, drawn_max = bar.mappable.get_clim()
    titles = [ax.get_title() for ax in axes[0]]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return FigureInfo(path, float(drawn_min), float(drawn_max), dbs, titles)
