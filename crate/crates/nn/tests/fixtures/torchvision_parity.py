"""Regenerates torchvision_parity.json.

Every state_dict entry is filled from a closed-form pattern (mirrored in
tests/torchvision_parity.rs) and the pooled features of a fixed input are
recorded in eval mode.
"""
import json
import math

import torch
import torchvision


def phase(name):
    return sum(name.encode()) * 0.01


def pattern(name, shape):
    n = math.prod(shape)
    j = torch.arange(n, dtype=torch.float64)
    s = torch.sin(0.1 * j + phase(name))
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "running_mean":
        v = 0.1 * s
    elif leaf == "running_var":
        v = 1.0 + 0.5 * s.abs()
    elif leaf == "layer_scale":
        v = 0.5 + 0.1 * s
    elif len(shape) >= 2:
        fan_in = shape[1] * math.prod(shape[2:])
        v = s / math.sqrt(fan_in)
    elif leaf == "weight":
        v = 1.0 + 0.1 * s
    else:
        v = 0.1 * s
    return v.reshape(shape)


def trunk(kind):
    if kind == "convnext_tiny":
        m = torchvision.models.convnext_tiny()
        f = lambda x: m.classifier[0](m.avgpool(m.features(x))).flatten(1)
        keep = lambda k: not k.startswith("classifier.2")
    elif kind == "resnet18":
        m = torchvision.models.resnet18()
        f = lambda x: torch.flatten(m.avgpool(m.layer4(m.layer3(m.layer2(m.layer1(
            m.maxpool(m.relu(m.bn1(m.conv1(x))))))))), 1)
        keep = lambda k: not k.startswith("fc.")
    else:
        m = torchvision.models.mobilenet_v3_small()
        f = lambda x: m.avgpool(m.features(x)).flatten(1)
        keep = lambda k: not k.startswith("classifier.")
    return m.double().eval(), f, keep


def main():
    out = {}
    x = torch.sin(0.05 * torch.arange(3 * 64 * 64, dtype=torch.float64)).reshape(1, 3, 64, 64)
    for kind in ["convnext_tiny", "resnet18", "mobilenet_v3_small"]:
        m, f, keep = trunk(kind)
        sd = m.state_dict()
        names = []
        for k, v in sd.items():
            if k.endswith("num_batches_tracked") or not keep(k):
                continue
            sd[k] = pattern(k, list(v.shape))
            names.append(k)
        m.load_state_dict(sd)
        with torch.no_grad():
            z = f(x)[0]
        out[kind] = {"names": sorted(names), "features": z.tolist()}
    with open("torchvision_parity.json", "w") as fh:
        json.dump(out, fh)


if __name__ == "__main__":
    main()
