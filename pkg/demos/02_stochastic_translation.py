"""
Stochastic translation
======================

A content/style translator maps a source image to many target-looking
images, one per style code v ~ N(0, sigma2 I). This script trains a small one
for a few hundred iterations (about a minute on a laptop CPU) and saves a grid
of translations.
"""

# %%
import sys
from pathlib import Path

import torch
from PIL import Image

from stochuda import synth, translation
from stochuda.config import GeneratorConfig, TranslationConfig

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
data = out / "translation_data"
synth.generate_dataset(GeneratorConfig(height=32, width=32, source_train=64, target_train=64,
                                       target_val=8, source_val=8), data)
x_s = torch.from_numpy(synth.stack(synth.load_dataset(data, "source-train"))[0])
x_t = torch.from_numpy(synth.stack(synth.load_dataset(data, "target-train"))[0])

# %%
# Train without the semantic-consistency term (it needs a pretrained segmenter).
cfg = TranslationConfig(iterations=300, batch_size=4, width=8, n_downsample=1, use_sem=False, log_every=50)
model, curve = translation.train_translation(cfg, x_s, x_t, seed=0)
for name in ("recon_s", "cycle_content_s", "cycle_style_s"):
    it, v = translation.curve_series(curve, name)
    print(f"{name}: {v[0]:.3f} -> {v[-1]:.3f}")

# %%
# Each column uses a fresh style draw; sigma2 = 10 spreads the styles wider.
gen = torch.Generator().manual_seed(0)
x = x_s[:4]
with torch.no_grad():
    cols = [x] + [model.translate(x, "source", "target", model.sample_styles(4, s2, gen))
                  for s2 in (1.0, 1.0, 10.0, 10.0)]
grid = torch.cat([torch.cat(list(c), 1) for c in cols], 2).permute(1, 2, 0).numpy()
u8 = synth.to_uint8(grid)
Image.fromarray(u8).resize((u8.shape[1] * 3, u8.shape[0] * 3), Image.NEAREST).save(out / "translations.png")

# %%
# Freezing v at a constant turns the same network into a deterministic translator.
v0 = torch.zeros(4, model.style_dim)
with torch.no_grad():
    a = model.translate(x, "source", "target", v0)
    b = model.translate(x, "source", "target", v0)
print("frozen style is deterministic:", torch.equal(a, b))
