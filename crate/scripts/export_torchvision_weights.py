"""Exports ImageNet weights of a torchvision backbone to safetensors.

    python scripts/export_torchvision_weights.py convnext_tiny weights/convnext_tiny.safetensors

Needs network access on first use (torchvision caches the download).
"""
import argparse
import os

import torchvision
from safetensors.torch import save_file

MODELS = {
    "convnext_tiny": (torchvision.models.convnext_tiny, "ConvNeXt_Tiny_Weights"),
    "resnet18": (torchvision.models.resnet18, "ResNet18_Weights"),
    "mobilenet_v3_small": (torchvision.models.mobilenet_v3_small, "MobileNet_V3_Small_Weights"),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("backbone", choices=sorted(MODELS))
    ap.add_argument("output")
    args = ap.parse_args()
    build, weights = MODELS[args.backbone]
    model = build(weights=getattr(torchvision.models, weights).IMAGENET1K_V1)
    state = {k: v.detach().contiguous() for k, v in model.state_dict().items()}
    os.makedirs(os.path.dirname(os.path.abspath(args.output)), exist_ok=True)
    save_file(state, args.output)
    print(f"wrote {len(state)} tensors to {args.output}")


if __name__ == "__main__":
    main()
