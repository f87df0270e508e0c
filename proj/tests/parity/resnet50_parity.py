#!/usr/bin/env python3
"""Exports a random torchvision ResNet-50 with non-trivial batch norm
statistics, runs it in float64 and checks the C++ trunk reproduces it.

    resnet50_parity.py PARITY_BINARY WORKDIR
"""

import os
import subprocess
import sys

import torch
import torchvision

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "..", "tools"))
import export_resnet50_weights as export  # noqa: E402


def main():
    binary, workdir = sys.argv[1], sys.argv[2]
    os.makedirs(workdir, exist_ok=True)
    torch.manual_seed(0)
    model = torchvision.models.resnet50(weights=None).double().eval()
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.2, 0.2)
            m.running_var.uniform_(0.5, 2.0)
            m.weight.data.uniform_(0.5, 1.5)
            m.bias.data.uniform_(-0.1, 0.1)
    weights = os.path.join(workdir, "resnet50.mmfal")
    io = os.path.join(workdir, "io.mmfal")
    export.write_archive(weights, [(n, t) for n, t in export.convert(model) if not n.startswith("fc.")], {})

    x = torch.rand(1, 3, 64, 64, dtype=torch.double)
    trunk = torch.nn.Sequential(*list(model.children())[:-2])
    with torch.no_grad():
        y = trunk(x)[0].numpy()
    export.write_archive(io, [("x", x[0].numpy()), ("y", y)], {})
    sys.exit(subprocess.call([binary, weights, io]))


if __name__ == "__main__":
    main()
