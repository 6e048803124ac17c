"""Hyper-convolution kernels, models and experiment tools."""

import json

from . import _core
from ._core import (
    add_noise,
    blob_sample,
    conv2d,
    distill,
    hyper_kernel,
    kernel_laplacian,
    load_tensor,
    phantom,
    run,
    save_tensor,
    vd_mask,
    zero_fill,
)


def summary(architecture):
    """Parameter counts and receptive field for an architecture dict."""
    return json.loads(_core.summary_json(json.dumps(architecture)))


def spec(architecture):
    """Expanded layer graph of an architecture dict."""
    return json.loads(_core.spec_json(json.dumps(architecture)))


__all__ = [
    "add_noise",
    "blob_sample",
    "conv2d",
    "distill",
    "hyper_kernel",
    "kernel_laplacian",
    "load_tensor",
    "phantom",
    "run",
    "save_tensor",
    "spec",
    "summary",
    "vd_mask",
    "zero_fill",
]
