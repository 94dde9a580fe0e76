import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from unagan import dsp
from unagan.cli import main
from unagan.config import RunConfig, dump_config, load_config, parse_config
from unagan.errors import ConfigError

FIXTURES = Path(__file__).parent / "fixtures"

TINY = {
    "corpus": {"synth": {"n_source_clean": 3, "n_target_train": 2, "n_target_test": 1, "duration": 1.0,
                         "source_snrs": [0.0, 6.0], "test_snrs": [0.0], "noise_seconds": 3.0}},
    "ugan": {"generator": {"n_resnet_blocks": 2, "n_attention_layers": 1, "base_channels": 4, "dropout_rate": 0.0},
             "discriminator": {"base_channels": 4}, "nce": {"n_patches": 16, "proj_dim": 16},
             "batch_size": 2, "steps": 4, "segment_width": 32, "checkpoint_every": 2},
    "senet": {"model": {"encoder_filters": 16, "tcn_hidden": 16, "tcn_bottleneck": 8},
              "excerpt_seconds": 0.25, "steps": 4, "finetune_steps": 2, "checkpoint_every": 2},
}


def _write_cfg(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


# configuration

def test_empty_config_matches_pinned_defaults(tmp_path):
    pinned = _flatten(yaml.safe_load((FIXTURES / "default_config.yaml").read_text()))
    resolved = _flatten(yaml.safe_load(dump_config(load_config(_write_cfg(tmp_path / "empty.yaml", {})))))
    assert resolved.keys() == pinned.keys()
    for key in pinned:
        assert resolved[key] == pinned[key], key


def test_defaults_hold_the_published_settings():
    cfg = RunConfig()
    assert cfg.ugan.generator.n_resnet_blocks == 9
    assert cfg.ugan.generator.n_attention_layers == 3
    assert cfg.senet.model.n_tcn_blocks == 4
    assert (cfg.ugan.alpha, cfg.ugan.beta) == (1.0, 1.0)
    assert (cfg.ugan.lr, cfg.senet.lr) == (0.002, 0.001)
    assert (cfg.stft.n_bins, cfg.ugan.segment_width) == (129, 128)
    assert cfg.ugan.nce.n_patches == 256 and cfg.ugan.nce.proj_dim == 256
    assert cfg.ugan.nce.resolve_layers(cfg.ugan.generator) == [
        "input", "downsample-1", "downsample-2", "resblock-1", "resblock-5"]


def test_config_round_trip(tmp_path):
    cfg = load_config(_write_cfg(tmp_path / "tiny.yaml", TINY))
    text = dump_config(cfg)
    again = parse_config(yaml.safe_load(text))
    assert again == cfg
    assert dump_config(again) == text
    assert cfg.ugan.generator.base_channels == 4
    assert cfg.ugan.generator.n_resnet_blocks == 2


def test_unknown_key_names_path():
    with pytest.raises(ConfigError) as err:
        parse_config({"ugan": {"alpa": 1}})
    assert err.value.key_path == "ugan.alpa"


def test_invalid_value_is_config_error():
    with pytest.raises(ConfigError):
        parse_config({"ugan": {"generator": {"n_resnet_blocks": 0}}})


def test_toy_config_parses():
    cfg = load_config(Path(__file__).parents[1] / "configs" / "toy.yaml")
    assert cfg.ugan.generator.base_channels < RunConfig().ugan.generator.base_channels


# command line

def test_train_gan_unknown_key_exit_2(tmp_path, capsys):
    code = main(["train-gan", "--config", _write_cfg(tmp_path / "bad.yaml", {"ugan": {"alpa": 1}}),
                 "--workspace", str(tmp_path / "ws")])
    assert code == 2
    err = capsys.readouterr().err
    assert "category=config" in err and "key=ugan.alpa" in err


def test_bad_yaml_exit_2(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("ugan: [unclosed\n")
    assert main(["adapt", "--config", str(path), "--workspace", str(tmp_path / "ws")]) == 2


def test_missing_inputs_exit_3(tmp_path, capsys):
    assert main(["train-se", "--workspace", str(tmp_path / "ws")]) == 3
    assert "category=missing-input" in capsys.readouterr().err
    assert main(["train-se", "--config", str(tmp_path / "nope.yaml"), "--workspace", str(tmp_path / "ws")]) == 3
    assert main(["simulate", "--workspace", str(tmp_path / "ws")]) == 3
    assert main(["plot", "--panel", f"x={tmp_path / 'missing.wav'}", "--workspace", str(tmp_path / "ws")]) == 3


def test_mix_2x2x1(tmp_path):
    rng = np.random.default_rng(0)
    for d, names in (("clean", ["a", "b"]), ("noise", ["hum", "hiss"])):
        for name in names:
            dsp.write_wav(tmp_path / d / f"{name}.wav", dsp.Waveform(0.1 * rng.standard_normal(8000)))
    ws = tmp_path / "ws"
    code = main(["mix", "--clean-dir", str(tmp_path / "clean"), "--noise-dir", str(tmp_path / "noise"),
                 "--snr", "5", "--workspace", str(ws)])
    assert code == 0
    assert len(list((ws / "mix").rglob("*.wav"))) == 4
    manifest = (ws / "manifests" / "mix_source.jsonl").read_text().splitlines()
    assert sum(json.loads(l).get("role") == "noisy" for l in manifest[1:]) == 4


def test_resolved_config_echoed(tmp_path):
    ws = tmp_path / "ws"
    cfg = _write_cfg(tmp_path / "tiny.yaml", TINY)
    assert main(["--config", cfg, "synth-corpus", "--workspace", str(ws)]) == 0
    echoed = load_config(ws / "config.resolved.yaml")
    assert echoed == load_config(cfg)


def test_global_flags_before_and_after_subcommand(tmp_path):
    cfg = _write_cfg(tmp_path / "tiny.yaml", TINY)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--seed", "3", "--workspace", str(a), "--config", cfg, "synth-corpus"]) == 0
    assert main(["synth-corpus", "--seed", "3", "--workspace", str(b), "--config", cfg]) == 0
    assert (a / "corpus" / "corpus.jsonl").exists() and (b / "corpus" / "corpus.jsonl").exists()
    wa = dsp.read_wav(next((a / "corpus" / "source").rglob("*.wav")))
    wb = dsp.read_wav(next((b / "corpus" / "source").rglob("*.wav")))
    np.testing.assert_array_equal(wa.samples, wb.samples)


def _adapt(tmp_path, name, cfg):
    ws = tmp_path / name
    assert main(["synth-corpus", "--config", cfg, "--workspace", str(ws), "--seed", "7"]) == 0
    assert main(["adapt", "--config", cfg, "--workspace", str(ws), "--seed", "7", "--threads", "1"]) == 0
    return ws


def test_adapt_twice_identical(tmp_path):
    cfg = _write_cfg(tmp_path / "tiny.yaml", TINY)
    a, b = _adapt(tmp_path, "a", cfg), _adapt(tmp_path, "b", cfg)
    for label in ("unprocessed", "baseline", "adapted"):
        ra = json.loads((a / "reports" / f"metrics_{label}.json").read_text())
        rb = json.loads((b / "reports" / f"metrics_{label}.json").read_text())
        assert ra["aggregates"] == rb["aggregates"]
        assert [r["si_sdr_out"] for r in ra["rows"]] == [r["si_sdr_out"] for r in rb["rows"]]
    for hist in ("reports/se_baseline_history.csv", "reports/se_adapted_history.csv",
                 "checkpoints/ugan/ugan_history.csv"):
        assert (a / hist).read_bytes() == (b / hist).read_bytes()
    assert (a / "reports" / "table.txt").read_text() == (b / "reports" / "table.txt").read_text()


def test_stagewise_commands(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "tiny.yaml", TINY)
    ws = str(tmp_path / "ws")
    common = ["--config", cfg, "--workspace", ws]
    assert main(["synth-corpus", *common]) == 0
    assert main(["train-se", *common, "--steps", "2"]) == 0
    assert main(["train-gan", *common, "--steps", "2"]) == 0
    assert main(["simulate", *common]) == 0
    assert main(["finetune", *common, "--steps", "1"]) == 0
    capsys.readouterr()
    assert main(["evaluate", *common]) == 0
    out = capsys.readouterr().out
    assert "Baseline" in out and "Adapted" in out and "Unprocessed" in out
    clean = next((tmp_path / "ws" / "corpus" / "source" / "clean").glob("*.wav"))
    sim = next((tmp_path / "ws" / "simulated").glob("*.wav"))
    assert main(["plot", *common, "--panel", f"clean={clean}", "--panel", f"simulated={sim}"]) == 0
    assert (tmp_path / "ws" / "reports" / "spectrograms.png").exists()


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    assert "ugan.generator.n_resnet_blocks" in out
    assert "--threads" in out
