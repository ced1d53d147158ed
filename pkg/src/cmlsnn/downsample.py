"""The four downsampling cell orderings compared in the CML study."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autodiff import SurrogateConfig, Var
from .layers import ConvBN, LifParams, MultistepLIF
from .tensor import PoolSpec, ShapeError


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    CML = "cml"
    AVGPOOL = "avgpool"
    STRIDECONV = "strideconv"

    @property
    def label(self) -> str:
        return VARIANT_LABELS[self]

    @property
    def lif_before_pool(self) -> bool:
        return self is Variant.BASELINE


VARIANT_LABELS = {
    Variant.BASELINE: "ConvBN-LIF-MaxPool",
    Variant.CML: "ConvBN-MaxPool-LIF",
    Variant.AVGPOOL: "ConvBN-AvgPool-LIF",
    Variant.STRIDECONV: "ConvBN(stride=2)-LIF",
}


@dataclass
class BlockTrace:
    """Intermediates of one forward: ConvBN output ``x``, spike map ``h``
    (pre-pool for the baseline, post-pool otherwise) and cell output ``y``."""

    x: Var
    h: Var
    y: Var
    pooled: Var | None = None


class DownsampleBlock:
    """One stride-``s`` cell built from ConvBN, a pool and a multistep LIF.

    All variants share the same conv kernel size; ``strideconv`` moves the
    stride into the convolution and drops the pool.
    """

    def __init__(self, in_channels, out_channels, variant="cml", stride=2, kernel_size=3,
                 lif_params: LifParams = LifParams(), surrogate: SurrogateConfig = SurrogateConfig(),
                 full_bptt=False, rng=None, dtype=np.float32):
        self.variant = Variant(variant)
        self.stride = stride
        self.pool = PoolSpec(stride)
        conv_stride = stride if self.variant is Variant.STRIDECONV else 1
        self.convbn = ConvBN(in_channels, out_channels, kernel_size, conv_stride, rng=rng, dtype=dtype)
        self.lif = MultistepLIF(lif_params, surrogate, full_bptt)
        self.out_channels = out_channels

    @property
    def lif_params(self) -> LifParams:
        return self.lif.params

    @property
    def surrogate(self) -> SurrogateConfig:
        return self.lif.surrogate

    def parameters(self):
        return self.convbn.parameters()

    def buffers(self):
        return self.convbn.buffers()

    def train(self, mode=True):
        self.convbn.training = mode
        return self

    def check_input(self, shape):
        if len(shape) != 5:
            raise ShapeError(f"expected (T, B, C, H, W) input, got {tuple(shape)}")
        h, w = shape[3:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"input {h}x{w} not divisible by stride {self.stride}")

    def output_shape(self, shape):
        self.check_input(shape)
        t, b, _, h, w = shape
        return (t, b, self.out_channels, h // self.stride, w // self.stride)

    def spike_stage(self, x: Var) -> BlockTrace:
        """Everything after ConvBN, starting from the pre-activation map ``x``."""
        v = self.variant
        if v is Variant.BASELINE:
            h = self.lif(x)
            y = F.maxpool(h, self.pool)
            return BlockTrace(x=x, h=h, y=y)
        if v is Variant.CML:
            pooled = F.maxpool(x, self.pool)
        elif v is Variant.AVGPOOL:
            pooled = F.avgpool(x, self.pool)
        else:
            pooled = x
        y = self.lif(pooled)
        return BlockTrace(x=x, h=y, y=y, pooled=pooled)

    def forward_traced(self, inp: Var) -> BlockTrace:
        self.check_input(inp.data.shape)
        return self.spike_stage(self.convbn(inp))

    def __call__(self, inp: Var) -> Var:
        return self.forward_traced(inp).y

    def count_lif_updates(self, input_shape) -> int:
        return count_lif_updates(self, input_shape)


def count_lif_updates(block: DownsampleBlock, input_shape) -> int:
    """Neuron-state updates per forward: ``T*B*C*H*W`` counted where the LIF sits."""
    t, b, _, h, w = input_shape
    block.check_input(input_shape)
    c = block.out_channels
    if block.variant.lif_before_pool:
        return t * b * c * h * w
    s = block.stride
    return t * b * c * (h // s) * (w // s)
