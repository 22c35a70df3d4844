# %% [markdown]
# # Overfitting one patch, then looking inside
#
# A three-block model is fitted to a single 48x48 LR patch. 200 iterations
# is a short run (the tiny preset uses 500), enough to see the loss fall and
# the features take shape. Afterwards the
# channel means of the step-2 features around the first GFM are saved as
# grayscale images.

# %%
from pathlib import Path

import numpy as np
import skimage.data

from gmfn.config import preset_config
from gmfn.imaging import degrade, save_image
from gmfn.inference import feature_maps, frozen, super_resolve
from gmfn.metrics import score_pair
from gmfn.imaging import upscale_bicubic
from gmfn.train import train_loop

cfg = preset_config("tiny").with_overrides(iterations=200)
pair = degrade(skimage.data.astronaut()[100:196, 180:276], 2)
res = train_loop(cfg.train_config(), cfg.model_config(), cfg.topology(), [pair], cfg.adam_hyper())
for it, lr, loss in res.log[::40]:
    print(it, f"{loss:.4f}")

# %%
params = frozen(res.params)
sr = super_resolve(params, cfg.model_config(), cfg.topology(), pair.lr)
print("model   %.2f dB" % score_pair(sr, pair.hr, 2)[0])
print("bicubic %.2f dB" % score_pair(upscale_bicubic(pair.lr, 2), pair.hr, 2)[0])

# %%
out = Path("features_demo")
maps = feature_maps(params, cfg.model_config(), cfg.topology(), pair.lr,
                    ["F_L0_t2", "feedback_1_t2", "F_H1_t2", "refined_1_t2"])
for name, img in maps.items():
    save_image(img, out / f"{name}.png")
    print(name, img.shape, int(img.min()), int(img.max()))
