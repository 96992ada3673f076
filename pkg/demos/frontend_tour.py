# Front-end tour: from a breath cycle to the 64x256 log-mel image the network sees.
#
# Run with:  python3 demos/frontend_tour.py

import numpy as np

from multibreath.data import synth_cycle
from multibreath.frontend import (FrontendConfig, MaskSpec, Waveform, apply_masks, filterbank_for,
                                  waveform_to_logmel)

# A synthetic wheeze: band-limited noise with an amplitude-modulated tone on top.
# Stored at 4 kHz, the way many stethoscope recordings in the corpus are.
cycle = synth_cycle("wheeze", duration_s=2.5, sample_rate_hz=4000, seed=11)
print("raw cycle:", cycle.samples.shape, "samples at", cycle.sample_rate_hz, "Hz")

# The front end resamples to 16 kHz, repeats the cycle until it fills 131072
# samples, and takes a Hann-windowed STFT (1024 point, hop 512).
cfg = FrontendConfig()
fb = filterbank_for(cfg)
print("mel bank:", fb.weights.shape, f"covering {cfg.fmin:g}-{cfg.fmax:g} Hz")

spec = waveform_to_logmel(Waveform(cycle.samples, cycle.sample_rate_hz), cfg, fb)
print("log-mel image:", spec.values.shape)

# Where does the energy sit? The wheeze tone should stand out as one bright band.
band_energy = spec.values.mean(axis=1)
print("brightest mel band:", int(np.argmax(band_energy)), "of", cfg.n_mels)

# Compare against a normal cycle from the same generator.
normal = synth_cycle("normal", duration_s=2.5, sample_rate_hz=4000, seed=11)
ref = waveform_to_logmel(Waveform(normal.samples, normal.sample_rate_hz), cfg, fb)
print("mean log-power, wheeze vs normal: %.2f vs %.2f" % (spec.values.mean(), ref.values.mean()))

# Training-time augmentation blanks one random run of frames and one run of bins.
masked, rects = apply_masks(spec, MaskSpec(), seed=[0, 0, 0], return_rects=True)
for r in rects:
    print(f"  {r.axis} mask: start {r.start}, width {r.width}")
changed = np.argwhere(masked.values != spec.values)
print("cells touched by masking:", len(changed))
