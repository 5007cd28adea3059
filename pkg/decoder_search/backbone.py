#!/usr/bin/env python3
"""
TOY BACKBONE
============

Fixed four-stage convolutional backbone producing c3, c4, c5.

    stem    conv3x3/2   3 -> 16     stride 2
    stage1  conv3x3/2  16 -> 32     stride 4
    stage2  conv3x3/2  32 -> 64     stride 8   (c3)
    stage3  conv3x3/2  64 -> 128    stride 16  (c4)
    stage4  conv3x3/2 128 -> 128    stride 32  (c5)

Each conv is followed by GroupNorm and ReLU. GroupNorm keeps every image's
features independent of the batch it was computed in, so cached features
match a live forward pass.
"""

import hashlib
import logging
import math
from typing import Dict, Sequence, Tuple

import numpy as np

from .checkpoint import encode_tensors
from .tensor_engine import Parameter, Tensor, conv2d, group_norm, relu

logger = logging.getLogger(__name__)

STEM_WIDTH = 16
STAGE1_WIDTH = 32
BACKBONE_GN_GROUPS = 8


def stage_widths(channels: Sequence[int] = (64, 128, 128)) -> Tuple[Tuple[str, int], ...]:
    c3, c4, c5 = channels
    return (("stem", STEM_WIDTH), ("stage1", STAGE1_WIDTH), ("c3", c3), ("c4", c4), ("c5", c5))


def init_backbone(seed: int, channels: Sequence[int] = (64, 128, 128), dtype=np.float32) -> Dict[str, Parameter]:
    rng = np.random.default_rng(seed)
    params = {}
    cin = 3
    for name, cout in stage_widths(channels):
        std = math.sqrt(2.0 / (cin * 9))
        params[f"backbone.{name}.weight"] = Parameter(rng.normal(0.0, std, (cout, cin, 3, 3)).astype(dtype))
        params[f"backbone.{name}.gamma"] = Parameter(np.ones(cout, dtype=dtype))
        params[f"backbone.{name}.beta"] = Parameter(np.zeros(cout, dtype=dtype))
        cin = cout
    return params


def backbone_forward(params: Dict[str, Parameter], images: Tensor,
                     channels: Sequence[int] = (64, 128, 128)) -> Dict[str, Tensor]:
    """(N, 3, H, W) images -> {"c3", "c4", "c5"} feature maps."""
    features = {}
    x = images
    for name, _ in stage_widths(channels):
        x = conv2d(x, params[f"backbone.{name}.weight"], stride=2)
        x = relu(group_norm(x, params[f"backbone.{name}.gamma"], params[f"backbone.{name}.beta"],
                            BACKBONE_GN_GROUPS))
        if name.startswith("c"):
            features[name] = x
    return features


def backbone_hash(params: Dict[str, Parameter]) -> str:
    """Content hash of the frozen weights; keys the feature cache."""
    return hashlib.sha256(encode_tensors({name: p.data for name, p in params.items()})).hexdigest()
