"""Rotor-band energy of simulated magnitudes relative to real target magnitudes.

Usage: python scripts/rotor_fidelity.py WORKSPACE

WORKSPACE is the output of `unagan synth-corpus` followed by `unagan adapt`.
Only source cleans that the translator did not see are simulated.
"""
import json
import sys
from pathlib import Path

import numpy as np
import torch

from unagan import dsp
from unagan.corpus import SynthSpec, load_corpus, rotor_frequencies
from unagan.ugan import Generator, load_generator


def band_energy(mags, bins):
    return float(np.mean([np.mean(m[bins] ** 2) for m in mags]))


def main(workspace):
    ws = Path(workspace)
    spec = SynthSpec()
    bins = np.round(rotor_frequencies(spec) / (spec.sample_rate / 256)).astype(int)
    corpus = load_corpus(ws / "corpus" / "corpus.jsonl")
    used = {json.loads(line)["id"] for line in (ws / "manifests" / "gan_clean.jsonl").read_text().splitlines()}
    held = [dsp.stft(dsp.read_wav(r.path)).magnitude for r in corpus.pool("clean", "source") if r.id not in used]
    real = [dsp.stft(dsp.read_wav(r.path)).magnitude for r in corpus.pool("noisy", "target")]
    trained, payload = load_generator(ws / "checkpoints" / "ugan" / "ugan.pt")
    torch.manual_seed(0)
    untrained = Generator(trained.cfg)
    target = band_energy(real, bins)
    for name, G in (("untrained", untrained), (f"trained ({payload['step']} steps)", trained)):
        G.eval()
        with torch.no_grad():
            sim = [G(torch.from_numpy(m.astype(np.float32))[None, None])[0, 0].numpy() for m in held]
        print(f"{name}: simulated / real rotor-band energy = {band_energy(sim, bins) / target:.3f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "workspace")
