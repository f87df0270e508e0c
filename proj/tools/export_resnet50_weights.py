#!/usr/bin/env python3
"""Convert torchvision ResNet-50 weights into an mmfal tensor archive.

Batch norm layers are folded into per-channel scale/shift pairs, and conv
kernels are flattened to out x (in*k*k). The fc head is dropped.

    python3 tools/export_resnet50_weights.py --out resnet50.mmfal
    python3 tools/export_resnet50_weights.py --state-dict r50.pth --out resnet50.mmfal
"""

import argparse
import json
import struct
import sys

import numpy as np
import torch
import torchvision

MAGIC = b"MMFALTA1"


def as_chw(array):
    a = np.asarray(array, dtype="<f8")
    if a.ndim == 1:
        return a.reshape(a.shape[0], 1, 1)
    if a.ndim == 4:
        return a.reshape(a.shape[0], -1, 1)
    raise ValueError(f"unexpected tensor rank {a.ndim}")


def convert(model):
    tensors = []
    state = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    for name, module in model.named_modules():
        if isinstance(module, torch.nn.Conv2d):
            tensors.append((f"{name}.weight", as_chw(state[f"{name}.weight"])))
        elif isinstance(module, torch.nn.BatchNorm2d):
            scale = state[f"{name}.weight"] / np.sqrt(state[f"{name}.running_var"] + module.eps)
            shift = state[f"{name}.bias"] - state[f"{name}.running_mean"] * scale
            tensors.append((f"{name}.scale", as_chw(scale)))
            tensors.append((f"{name}.shift", as_chw(shift)))
    return tensors


def write_archive(path, tensors, meta):
    header = {
        "meta": meta,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for _, t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", required=True, help="archive to write")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--state-dict", help="local torchvision resnet50 state dict (.pth)")
    source.add_argument("--weights", default="IMAGENET1K_V1", help="torchvision weights enum (downloads)")
    source.add_argument("--random", action="store_true", help="random init, for layout checks only")
    args = parser.parse_args(argv)

    if args.state_dict:
        model = torchvision.models.resnet50(weights=None)
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
        origin = args.state_dict
    elif args.random:
        model = torchvision.models.resnet50(weights=None)
        origin = "random"
    else:
        model = torchvision.models.resnet50(weights=args.weights)
        origin = f"torchvision:{args.weights}"

    tensors = [(n, t) for n, t in convert(model) if not n.startswith("fc.")]
    write_archive(args.out, tensors, {"kind": "backbone", "backbone": "resnet50", "source": origin})
    print(f"wrote {len(tensors)} tensors to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
