"""Walk one texture seed through conversion, projection, augmentation and compositing.

Writes a strip of images to demos_out/conversion.png:
seed | converted texture | benign scene | textured scene | augmented scene
"""
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from camodepth.physaug import PAConfig, composite, no_augment, physical_augment
from camodepth.renderproj import SceneBatch, project, render_benign
from camodepth.scenegen import CameraPose, SceneGenConfig, generate_scene
from camodepth.texconv import TCConfig, texture_convert

out = Path("demos_out")
out.mkdir(exist_ok=True)
rng = np.random.default_rng(0)

# a blocky seed makes the tiling visible
seed = torch.as_tensor(np.kron(rng.random((4, 4, 3)), np.ones((4, 4, 1))))
tc = TCConfig(tau=6, size=64)
texture = texture_convert(seed, tc, np.random.default_rng(1))

cfg = SceneGenConfig(height=128, width=128)
scene = generate_scene(cfg, np.random.default_rng(2), CameraPose(35.0, 6.0, 1.6))
batch = SceneBatch.from_samples([scene], torch.float64)

benign = composite(batch.background, no_augment(render_benign(batch), batch))
obj = project(texture[None], batch)
textured = composite(batch.background, no_augment(obj, batch))
augmented = composite(batch.background, physical_augment(obj, batch, [np.random.default_rng(3)], PAConfig()))


def tile_of(img, size=128):
    arr = (img.detach().numpy().clip(0, 1) * 255).round().astype(np.uint8)
    return np.asarray(Image.fromarray(arr).resize((size, size), Image.NEAREST))


strip = np.concatenate([tile_of(seed), tile_of(texture), tile_of(benign[0]), tile_of(textured[0]),
                        tile_of(augmented[0])], axis=1)
Image.fromarray(strip).save(out / "conversion.png")
print(f"weather {scene.weather}; {int(scene.mask.sum())} object pixels; wrote {out / 'conversion.png'}")
