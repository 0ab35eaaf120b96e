"""
The two-domain benchmark
========================

Source images share one fixed palette; every target image draws its own
style (hue shift, contrast, texture, blur). Labels depend only on the scene
layout, so restyling a layout never changes its ground truth.
"""

# %%
# Render one layout under the source style and several target styles.
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from stochuda import synth
from stochuda.config import GeneratorConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
cfg = GeneratorConfig(height=64, width=64)

layout = synth.generate_layout(7, cfg)
views = [synth.render(layout, "source", synth.source_style(cfg))]
views += [synth.render(layout, "target", synth.sample_style(s, cfg)) for s in range(5)]

# %%
# The label map is identical in every view.
assert all(np.array_equal(v.labels, views[0].labels) for v in views)
print("classes present:", [synth.CLASS_NAMES[c] for c in np.unique(views[0].labels)])

# %%
# Save the strip: source first, then the five target styles.
strip = np.concatenate([synth.to_uint8(v.pixels) for v in views], axis=1)
Image.fromarray(strip).resize((strip.shape[1] * 3, strip.shape[0] * 3), Image.NEAREST).save(out / "styles.png")

# %%
# A small on-disk dataset. The manifest pins counts, seeds and checksums.
manifest = synth.generate_dataset(GeneratorConfig(height=32, width=32, source_train=20, target_train=20,
                                                  target_val=10, source_val=10), out / "data")
print({split: entry["count"] for split, entry in manifest["splits"].items()})

# %%
# Target-train ground truth exists on disk for diagnostics only: inside a
# training context the loader refuses it.
with synth.training_guard():
    try:
        synth.read_labels(out / "data", "target-train")
    except synth.LabelLeakError as e:
        print("refused:", e)
