"""Stand-in classifier: two downsampling cells, global average pool, linear head."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .autodiff import SurrogateConfig, Tape, Var
from .downsample import DownsampleBlock, Variant
from .layers import LifParams


class SpikingClassifier:
    """Image -> T-replicated input -> cells -> spatial mean -> linear -> mean over T."""

    def __init__(self, in_channels, n_classes, variant="cml", timesteps=4, widths=(8, 16),
                 stride=2, kernel_size=3, lif_params: LifParams = LifParams(),
                 surrogate: SurrogateConfig = SurrogateConfig(), full_bptt=False,
                 seed=0, dtype=np.float32):
        self.variant = Variant(variant)
        self.timesteps = timesteps
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.cells = []
        cin = in_channels
        for width in widths:
            self.cells.append(DownsampleBlock(cin, width, self.variant, stride, kernel_size,
                                              lif_params, surrogate, full_bptt, rng=rng, dtype=dtype))
            cin = width
        bound = 1.0 / np.sqrt(cin)
        self.head_weight = rng.uniform(-bound, bound, size=(n_classes, cin)).astype(dtype)
        self.head_bias = np.zeros(n_classes, dtype=dtype)

    def parameters(self):
        params = []
        for cell in self.cells:
            params.extend(cell.parameters())
        return params + [self.head_weight, self.head_bias]

    def buffers(self):
        return [b for cell in self.cells for b in cell.buffers()]

    def train(self, mode=True):
        for cell in self.cells:
            cell.train(mode)
        return self

    def forward(self, tape: Tape, images) -> Var:
        """Logits ``(B, K)`` for images ``(B, C, H, W)``."""
        x = tape.constant(np.ascontiguousarray(images, dtype=self.dtype))
        return self.forward_var(x)

    def forward_var(self, x: Var) -> Var:
        first = self.cells[0]
        first.check_input((self.timesteps,) + x.data.shape)
        # a static image gives T identical ConvBN outputs, so the first ConvBN
        # runs once and its output is replicated; batch statistics are unchanged
        pre = first.convbn(F.add_time_axis(x))
        h = first.spike_stage(F.repeat_time(pre, self.timesteps)).y
        for cell in self.cells[1:]:
            h = cell(h)
        feats = F.spatial_mean(h)
        tape = x.tape
        logits = F.linear(feats, tape.param(self.head_weight), tape.param(self.head_bias))
        return F.time_mean(logits)

    def lif_updates_per_sample(self, image_shape) -> int:
        """LIF state updates for one image over all T steps."""
        c, h, w = image_shape
        shape = (self.timesteps, 1, c, h, w)
        total = 0
        for cell in self.cells:
            total += cell.count_lif_updates(shape)
            shape = cell.output_shape(shape)
        return total

    def state_dict(self):
        return {f"p{i}": p.copy() for i, p in enumerate(self.parameters() + self.buffers())}

    def load_state_dict(self, state):
        for i, p in enumerate(self.parameters() + self.buffers()):
            p[...] = state[f"p{i}"]
