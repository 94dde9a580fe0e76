import hashlib
import json
import logging
import stat
from pathlib import Path

import matplotlib.image
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unagan import dsp
from unagan.corpus import EvalItem
from unagan.errors import GroupingError, ToolOutputError
from unagan.evalkit import (
    EvalConfig,
    MetricReport,
    MetricRow,
    evaluate_system,
    export_spectrogram_figure,
    identity_system,
    pesq_adapter,
    relative_change,
    render_table,
)
from unagan.senet import SeConfig, SeNet


def _oracle(noisy, item):
    return dsp.read_wav(item.reference_path)


def _tool(tmp_path, name, body):
    path = tmp_path / name
    path.write_text("#!/bin/sh\n" + body + "\n")
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return path


def _row(i, noise, snr, value):
    return MetricRow(f"u{i}", noise, snr, 0.0, value, value, value)


def _report(system, values, noise="heli"):
    rows = [_row(i, noise, snr, v) for i, (snr, v) in enumerate(values)]
    return MetricReport(system, rows)


# evaluation

def test_oracle_system_hits_cap(synth):
    report = evaluate_system(_oracle, synth.eval_set, "Oracle")
    assert len(report.rows) == len(synth.eval_set)
    assert all(r.si_sdr_out == 60.0 for r in report.rows)


def test_identity_system_zero_improvement(synth):
    report = evaluate_system(identity_system, synth.eval_set, "Unprocessed")
    assert all(r.si_sdri == 0.0 for r in report.rows)
    for r in report.rows:
        assert r.si_sdri == r.si_sdr_out - r.si_sdr_in


def test_rows_carry_grouping_keys(synth):
    report = evaluate_system(identity_system, synth.eval_set, "Unprocessed")
    items = {i.id: i for i in synth.eval_set}
    for r in report.rows:
        assert r.noise_type == items[r.id].noise_type
        assert r.snr_db == items[r.id].snr_db


def test_missing_reference_excluded(synth, tmp_path):
    items = list(synth.eval_set)
    first = items[0]
    items[0] = EvalItem(first.id, first.noisy_path, None, first.noise_type, first.snr_db)
    items[1] = EvalItem(items[1].id, items[1].noisy_path, str(tmp_path / "gone.wav"), items[1].noise_type,
                        items[1].snr_db)
    report = evaluate_system(identity_system, items, "Unprocessed")
    assert report.excluded == [items[0].id, items[1].id]
    assert len(report.rows) == len(items) - 2


def test_evaluate_accepts_model_and_checkpoint(synth, tmp_path):
    from unagan.checkpoint import save_checkpoint
    from unagan.configio import fingerprint, to_dict
    from unagan.senet import SeTrainConfig

    cfg = SeTrainConfig(model=SeConfig(encoder_filters=16, tcn_hidden=16, tcn_bottleneck=8))
    model = SeNet(cfg.model)
    path = save_checkpoint(tmp_path / "se.pt", "se", {"senet": to_dict(cfg.model), "training": to_dict(cfg)},
                           fingerprint(cfg.model), {"senet": model})
    a = evaluate_system(model, synth.eval_set[:2], "Model")
    b = evaluate_system(path, synth.eval_set[:2], "Model")
    assert [r.si_sdr_out for r in a.rows] == [r.si_sdr_out for r in b.rows]


def _digest(paths):
    return {p: hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in paths}


def test_evaluate_does_not_mutate_inputs(synth):
    paths = [i.noisy_path for i in synth.eval_set] + [i.reference_path for i in synth.eval_set] + [
        str(synth.eval_path)]
    before = _digest(paths)
    evaluate_system(identity_system, synth.eval_set, "Unprocessed")
    assert _digest(paths) == before


# aggregates

def test_avg_over_snr_is_mean_of_level_means():
    rows = [_row(0, "heli", -5.0, 1.0), _row(1, "heli", -5.0, 3.0), _row(2, "heli", 5.0, 10.0)]
    agg = MetricReport("S", rows).aggregates()["si_sdri"]
    assert agg["by_snr_db"] == {"-5.0": 2.0, "5.0": 10.0}
    assert agg["avg_over_snr"] == {"heli": 6.0}
    np.testing.assert_allclose(agg["overall"], 14.0 / 3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c"]), st.sampled_from([-5.0, 0.0, 5.0]),
                          st.floats(-30, 30)), min_size=1, max_size=30))
def test_aggregates_match_independent_recomputation(rows):
    report = MetricReport("S", [_row(i, n, s, v) for i, (n, s, v) in enumerate(rows)])
    data = json.loads(json.dumps(report.to_json()))
    agg = data["aggregates"]["si_sdri"]
    values = [r["si_sdri"] for r in data["rows"]]
    np.testing.assert_allclose(agg["overall"], sum(values) / len(values), rtol=1e-12, atol=1e-12)
    for noise in {r["noise_type"] for r in data["rows"]}:
        vals = [r["si_sdri"] for r in data["rows"] if r["noise_type"] == noise]
        np.testing.assert_allclose(agg["by_noise_type"][noise], sum(vals) / len(vals), rtol=1e-12, atol=1e-12)
        levels = {}
        for r in data["rows"]:
            if r["noise_type"] == noise:
                levels.setdefault(r["snr_db"], []).append(r["si_sdri"])
        means = [sum(v) / len(v) for v in levels.values()]
        np.testing.assert_allclose(agg["avg_over_snr"][noise], sum(means) / len(means), rtol=1e-12, atol=1e-12)
    for snr in {r["snr_db"] for r in data["rows"]}:
        vals = [r["si_sdri"] for r in data["rows"] if r["snr_db"] == snr]
        np.testing.assert_allclose(agg["by_snr_db"][str(snr)], sum(vals) / len(vals), rtol=1e-12, atol=1e-12)


def test_report_round_trip(tmp_path):
    report = MetricReport("S", [_row(0, "heli", 0.0, 1.5)], "abc", ["x"], {"tool": "t", "version": "1"})
    loaded = MetricReport.load(report.save(tmp_path / "r.json"))
    assert loaded == report


# tables

def test_relative_change_uses_displayed_values():
    np.testing.assert_allclose(relative_change(1.59, 1.13), 40.70796, rtol=1e-5)
    assert f"{relative_change(1.594, 1.1349):+.1f}" == "+40.7"


def test_render_table_percentage():
    base = _report("Unprocessed", [(-5.0, 1.00), (0.0, 1.13), (5.0, 1.26)])
    una = _report("UNA-GAN", [(-5.0, 1.40), (0.0, 1.59), (5.0, 1.78)])
    table = render_table([base, una], metric="pesq")
    lines = table.splitlines()
    assert lines[0] == "pesq by snr_db"
    assert lines[1].split(" | ")[-1].strip() == "Avg."
    una_line = next(line for line in lines if line.startswith("UNA-GAN"))
    assert una_line.rstrip().endswith("1.59 +40.7%")
    base_line = next(line for line in lines if line.startswith("Unprocessed"))
    assert base_line.rstrip().endswith("1.13 +0.0%")


def test_render_table_without_baseline_has_no_percentages():
    table = render_table([_report("Adapted", [(0.0, 1.5), (5.0, 2.5)])], metric="pesq")
    assert "%" not in table
    assert "2.00" in table


def test_render_table_no_percentages_against_nonpositive_baseline():
    base = _report("Unprocessed", [(-5.0, -0.07), (0.0, -0.07)])
    una = _report("Adapted", [(-5.0, 1.0), (0.0, 2.0)])
    assert "%" not in render_table([base, una], metric="si_sdr_out")


def test_render_table_columns_by_noise_type():
    rows = [_row(0, "heli", 0.0, 1.0), _row(1, "babble", 0.0, 3.0)]
    table = render_table([MetricReport("S", rows)], columns="noise_type")
    header = [c.strip() for c in table.splitlines()[1].split(" | ")]
    assert header == ["System", "babble", "heli", "Avg."]
    assert [c.strip() for c in table.splitlines()[3].split(" | ")] == ["S", "3.00", "1.00", "2.00"]


def test_render_table_disjoint_groups():
    a = _report("A", [(0.0, 1.0)], noise="heli")
    b = _report("B", [(0.0, 1.0)], noise="babble")
    with pytest.raises(GroupingError):
        render_table([a, b], columns="noise_type")


def test_render_table_needs_a_report():
    with pytest.raises(ValueError):
        render_table([])


def test_eval_config_rejects_unknown_columns():
    with pytest.raises(ValueError):
        EvalConfig(columns="speaker")


# figures

def test_figure_three_panels(tmp_path, rng):
    mags = [rng.random((129, 40)) * s for s in (1.0, 4.0, 2.0)]
    info = export_spectrogram_figure(mags, ["clean", "simulated", "real target"], tmp_path / "fig.png")
    assert info.labels == ["clean", "simulated", "real target"]
    assert len(info.panels_db) == 3
    image = matplotlib.image.imread(info.path)
    assert image.ndim == 3 and image.shape[1] > image.shape[0]


def test_figure_shared_scale_max(tmp_path, rng):
    mags = [rng.random((129, 40)) * s for s in (1.0, 4.0, 2.0)]
    info = export_spectrogram_figure(mags, ["a", "b", "c"], tmp_path / "fig.png")
    global_max = max(20 * np.log10(m.max()) for m in mags)
    np.testing.assert_allclose(info.vmax, global_max, rtol=1e-12)
    np.testing.assert_allclose(info.vmax - info.vmin, 80.0)


def test_figure_zero_panel_at_floor(tmp_path, rng):
    mags = [rng.random((129, 40)), np.zeros((129, 40))]
    info = export_spectrogram_figure(mags, ["signal", "silence"], tmp_path / "fig.png")
    assert np.all(info.panels_db[1] == info.vmin)


def test_figure_from_waveforms(tmp_path, rng):
    w = dsp.Waveform(rng.standard_normal(4000))
    info = export_spectrogram_figure([w, w], ["x", "y"], tmp_path / "fig.png")
    assert info.panels_db[0].shape == (129, 1 + 4000 // 64)


# external metric

def test_pesq_unconfigured(synth):
    report = evaluate_system(identity_system, synth.eval_set[:2], "Unprocessed")
    assert all(r.pesq is None for r in report.rows)
    assert report.tool is None
    assert pesq_adapter("a.wav", "b.wav", None) is None


def test_pesq_tool_absent_warns(synth, caplog):
    with caplog.at_level(logging.WARNING):
        report = evaluate_system(identity_system, synth.eval_set[:2], "Unprocessed",
                                 pesq_command="no-such-quality-tool {enhanced} {reference}")
    assert all(r.pesq is None for r in report.rows)
    assert "not found" in caplog.text


def test_pesq_mock_tool_value(synth, tmp_path):
    tool = _tool(tmp_path, "fakepesq", 'echo "P.862 score for $1 vs $2"; echo "2.91"')
    version = _tool(tmp_path, "fakepesq-version", 'echo "fakepesq 1.0"')
    report = evaluate_system(identity_system, synth.eval_set[:2], "Unprocessed",
                             pesq_command=f"{tool} {{enhanced}} {{reference}}", pesq_version_command=str(version),
                             workdir=tmp_path / "enh")
    assert [r.pesq for r in report.rows] == [2.91, 2.91]
    assert report.tool == {"tool": str(tool), "version": "fakepesq 1.0"}
    assert report.to_json()["aggregates"]["pesq"]["overall"] == pytest.approx(2.91)


def test_pesq_mock_tool_garbage(tmp_path):
    tool = _tool(tmp_path, "badpesq", 'echo "error: cannot open file"')
    with pytest.raises(ToolOutputError) as err:
        pesq_adapter(tmp_path / "e.wav", tmp_path / "r.wav", f"{tool} {{enhanced}} {{reference}}")
    assert "cannot open file" in err.value.output


def test_pesq_tool_failure_status(tmp_path):
    tool = _tool(tmp_path, "crashpesq", 'echo "3.5"; echo boom >&2; exit 4')
    with pytest.raises(ToolOutputError) as err:
        pesq_adapter(tmp_path / "e.wav", tmp_path / "r.wav", f"{tool} {{enhanced}} {{reference}}")
    assert "boom" in err.value.output


def test_pesq_paths_with_spaces(tmp_path):
    tool = _tool(tmp_path, "argpesq", 'test -n "$2" && echo "$#"')
    score = pesq_adapter(tmp_path / "my enhanced.wav", tmp_path / "my ref.wav", f"{tool} {{enhanced}} {{reference}}")
    assert score.value == 2.0
