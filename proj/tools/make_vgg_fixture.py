"""Build the VGG-19 converter fixture with PyTorch.

Writes per-layer weights as .npy files, three 8-bit RGB test images, and the
activations torch computes for them at every tap. The C++ test imports the
weights through `crn perceiver convert` and compares its taps against these
dumps. Weights are seeded (not pretrained) and the width is reduced by
--divisor so the fixture stays small.

    python3 tools/make_vgg_fixture.py --out tests/data/vgg_fixture
"""

import argparse
import pathlib

import numpy as np
import torch
from PIL import Image

STAGES = [(2, 64), (2, 128), (4, 256), (4, 512), (2, 512)]
TAPS = ["conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"]
MEAN = torch.tensor([123.68, 116.779, 103.939]).view(1, 3, 1, 1)


def build(divisor):
    layers, names, in_ch = [], [], 3
    for s, (convs, ch) in enumerate(STAGES):
        out = ch // divisor
        for j in range(convs):
            if s > 0 and j == 0:
                layers.append(("pool", torch.nn.MaxPool2d(2, 2)))
            conv = torch.nn.Conv2d(in_ch, out, 3, padding=1)
            name = f"conv{s + 1}_{j + 1}"
            layers.append((name, conv))
            names.append(name)
            in_ch = out
    return layers, names


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=pathlib.Path, required=True)
    ap.add_argument("--divisor", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--height", type=int, default=32)
    ap.add_argument("--width", type=int, default=48)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    layers, names = build(args.divisor)
    npy_dir, img_dir, act_dir = (args.out / d for d in ("npy", "images", "activations"))
    for d in (npy_dir, img_dir, act_dir):
        d.mkdir(parents=True, exist_ok=True)

    for name, mod in layers:
        if isinstance(mod, torch.nn.Conv2d):
            # Scale the default init down so activations stay moderate after
            # the [0, 255] input range.
            with torch.no_grad():
                mod.weight.mul_(0.05)
            np.save(npy_dir / f"{name}.weight.npy", mod.weight.detach().numpy().astype(np.float32))
            np.save(npy_dir / f"{name}.bias.npy", mod.bias.detach().numpy().astype(np.float32))

    for i in range(3):
        pixels = rng.integers(0, 256, size=(args.height, args.width, 3), dtype=np.uint8)
        Image.fromarray(pixels, "RGB").save(img_dir / f"img{i}.png")
        x = torch.from_numpy(pixels.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0)
        np.save(act_dir / f"img{i}_input.npy", x[0].numpy())
        h = x * 255.0 - MEAN
        with torch.no_grad():
            for name, mod in layers:
                h = mod(h)
                if isinstance(mod, torch.nn.Conv2d):
                    h = torch.relu(h)
                    if name in TAPS:
                        np.save(act_dir / f"img{i}_{name}.npy", h[0].numpy().astype(np.float32))
                    if name == TAPS[-1]:
                        break


if __name__ == "__main__":
    main()
