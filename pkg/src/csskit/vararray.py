"""Array-geometry-agnostic mask estimator.

Conformer blocks run on every channel with shared weights; a TAC
(transform-average-concatenate) layer in front of each block exchanges
information across channels. After the last block the channel axis is
averaged away and four sigmoid heads emit masks for speech 1, speech 2,
stationary noise and transient noise. Because every cross-channel operation
is a mean, the output does not depend on channel order or count.

Shapes inside the network are ``(C, N, D)``: channels, frames, model dim.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

NUM_MASKS = 4


@dataclass(frozen=True)
class NetConfig:
    num_blocks: int = 3
    layers_per_block: int = 2
    model_dim: int = 48
    attention_heads: int = 3
    conv_kernel: int = 33
    mask_outputs: int = NUM_MASKS
    feature_kind: str = "logmag-phase"
    bins: int = 257
    ffn_mult: int = 4

    def __post_init__(self):
        if self.mask_outputs != NUM_MASKS:
            raise ValueError(f"mask_outputs must be {NUM_MASKS}, got {self.mask_outputs}")
        if self.model_dim % self.attention_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by attention_heads {self.attention_heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.feature_kind != "logmag-phase":
            raise ValueError(f"unknown feature_kind {self.feature_kind!r}")
        for name in ("num_blocks", "layers_per_block", "model_dim", "attention_heads",
                     "conv_kernel", "bins", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def min_frames(self):
        return self.conv_kernel // 2 + 1

    def to_dict(self):
        return asdict(self)


# Desk-scale presets. XS/S follow the block/head/dim proportions of the
# full-size model family; XT is the default trainable-in-minutes config and
# LT a wider teacher of the same depth.
PRESETS = {
    "XT": NetConfig(num_blocks=3, layers_per_block=2, model_dim=48, attention_heads=3),
    "LT": NetConfig(num_blocks=3, layers_per_block=2, model_dim=96, attention_heads=4),
    "XS": NetConfig(num_blocks=3, layers_per_block=5, model_dim=48, attention_heads=3),
    "S": NetConfig(num_blocks=5, layers_per_block=5, model_dim=64, attention_heads=4),
}


def featurize(spec):
    """Per-channel features ``(C, N, 3F)``: log(1+|Y|), Re(Y)/|Y|, Im(Y)/|Y|.

    Zero-magnitude bins get unit phase (1, 0).
    """
    spec = np.asarray(spec)
    if spec.ndim != 3 or 0 in spec.shape:
        raise ValueError(f"expected non-empty (C, F, N) spectrogram, got {spec.shape}")
    mag = np.abs(spec)
    safe = np.where(mag > 0, mag, 1.0)
    re = np.where(mag > 0, spec.real / safe, 1.0)
    im = np.where(mag > 0, spec.imag / safe, 0.0)
    feats = np.concatenate([np.log1p(mag), re, im], axis=1)
    return np.ascontiguousarray(feats.transpose(0, 2, 1))


def _shapes(cfg):
    D, F, K = cfg.model_dim, cfg.bins, cfg.conv_kernel
    E = cfg.ffn_mult * D
    shapes = {
        "input.weight": (3 * F, D), "input.bias": (D,),
        "input.ln.gamma": (D,), "input.ln.beta": (D,),
    }
    for b in range(cfg.num_blocks):
        p = f"block{b}.tac."
        shapes.update({
            p + "transform.weight": (D, D), p + "transform.bias": (D,),
            p + "project.weight": (2 * D, D), p + "project.bias": (D,),
        })
        for l in range(cfg.layers_per_block):
            p = f"block{b}.layer{l}."
            for ff in ("ffn1.", "ffn2."):
                shapes.update({
                    p + ff + "ln.gamma": (D,), p + ff + "ln.beta": (D,),
                    p + ff + "w1": (D, E), p + ff + "b1": (E,),
                    p + ff + "w2": (E, D), p + ff + "b2": (D,),
                })
            shapes.update({
                p + "mhsa.ln.gamma": (D,), p + "mhsa.ln.beta": (D,),
                p + "mhsa.qkv.weight": (D, 3 * D), p + "mhsa.qkv.bias": (3 * D,),
                p + "mhsa.out.weight": (D, D), p + "mhsa.out.bias": (D,),
                p + "conv.ln.gamma": (D,), p + "conv.ln.beta": (D,),
                p + "conv.pw1.weight": (D, 2 * D), p + "conv.pw1.bias": (2 * D,),
                p + "conv.dw.weight": (K, D), p + "conv.dw.bias": (D,),
                p + "conv.norm.gamma": (D,), p + "conv.norm.beta": (D,),
                p + "conv.pw2.weight": (D, D), p + "conv.pw2.bias": (D,),
                p + "final.ln.gamma": (D,), p + "final.ln.beta": (D,),
            })
    shapes.update({"heads.weight": (D, NUM_MASKS * F), "heads.bias": (NUM_MASKS * F,)})
    return shapes


def param_count(cfg):
    """Exact trainable-parameter count, from the per-layer formulas."""
    D, F, K, E = cfg.model_dim, cfg.bins, cfg.conv_kernel, cfg.ffn_mult * cfg.model_dim
    ln = 2 * D
    ffn = ln + D * E + E + E * D + D
    mhsa = ln + D * 3 * D + 3 * D + D * D + D
    conv = ln + D * 2 * D + 2 * D + K * D + D + ln + D * D + D
    layer = 2 * ffn + mhsa + conv + ln
    tac = D * D + D + 2 * D * D + D
    block = tac + cfg.layers_per_block * layer
    return (3 * F * D + D + ln) + cfg.num_blocks * block + (D * NUM_MASKS * F + NUM_MASKS * F)


def init_params(cfg, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _shapes(cfg).items():
        if name.endswith("gamma"):
            value = np.ones(shape)
        elif name.endswith(("beta", "bias", "b1", "b2")):
            value = np.zeros(shape)
        else:
            value = rng.standard_normal(shape) / np.sqrt(shape[0])
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


def _positional(n, d, dtype):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def _linear(x, params, prefix):
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def _ln(x, params, prefix):
    return ag.layer_norm(x, params[prefix + ".gamma"], params[prefix + ".beta"])


def tac_layer(params, prefix, x):
    """Transform each channel, average across channels, concatenate, project.

    ``x`` is ``(C, N, D)``. The projection output is added back to ``x``.
    """
    t = ag.swish(_linear(x, params, prefix + "transform"))
    avg = ag.mean(t, axis=0, keepdims=True)
    avg = avg + np.zeros((x.shape[0], 1, 1), dtype=x.dtype)
    joint = ag.concat([t, avg], axis=-1)
    return x + ag.swish(_linear(joint, params, prefix + "project"))


def _ffn(x, params, p):
    h = ag.layer_norm(x, params[p + "ln.gamma"], params[p + "ln.beta"])
    h = ag.swish(h @ params[p + "w1"] + params[p + "b1"])
    return h @ params[p + "w2"] + params[p + "b2"]


def _mhsa(x, params, p, heads):
    C, N, D = x.shape
    dh = D // heads
    h = _ln(x, params, p + "ln")
    qkv = _linear(h, params, p + "qkv")
    qkv = qkv.reshape(C, N, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # (3, C, H, N, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ag.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(C, N, D)
    return _linear(o, params, p + "out")


def _conv_module(x, params, p):
    D = x.shape[-1]
    h = _ln(x, params, p + "ln")
    h = _linear(h, params, p + "pw1")
    h = h[..., :D] * ag.sigmoid(h[..., D:])
    h = ag.conv1d_depthwise(h, params[p + "dw.weight"], params[p + "dw.bias"])
    h = ag.swish(_ln(h, params, p + "norm"))
    return _linear(h, params, p + "pw2")


def conformer_layer(params, prefix, x, cfg):
    x = x + _ffn(x, params, prefix + "ffn1.") * 0.5
    x = x + _mhsa(x, params, prefix + "mhsa.", cfg.attention_heads)
    x = x + _conv_module(x, params, prefix + "conv.")
    x = x + _ffn(x, params, prefix + "ffn2.") * 0.5
    return _ln(x, params, prefix + "final.ln")


class MaskSet:
    """Four ``(F, N)`` masks: speech 1, speech 2, stationary noise, transient noise."""

    def __init__(self, masks):
        self.masks = masks if isinstance(masks, Tensor) else Tensor(masks)
        if self.masks.ndim != 3 or self.masks.shape[0] != NUM_MASKS:
            raise ValueError(f"expected ({NUM_MASKS}, F, N) masks, got {self.masks.shape}")

    @property
    def speech(self):
        return self.masks[0:2]

    @property
    def noise(self):
        return self.masks[2:4]

    @property
    def values(self):
        return self.masks.data

    @property
    def shape(self):
        return self.masks.shape[1:]


def forward(params, cfg, spec):
    """Run the network on a ``(C, F, N)`` spectrogram and return a MaskSet."""
    feats = featurize(spec)
    C, N, _ = feats.shape
    if spec.shape[1] != cfg.bins:
        raise ValueError(f"spectrogram has {spec.shape[1]} bins, model expects {cfg.bins}")
    if N < cfg.min_frames:
        raise ValueError(f"{N} frames is shorter than the minimum of {cfg.min_frames}")
    dtype = params["input.weight"].dtype
    x = _linear(Tensor(feats.astype(dtype)), params, "input")
    x = _ln(x, params, "input.ln") + _positional(N, cfg.model_dim, dtype)
    for b in range(cfg.num_blocks):
        x = tac_layer(params, f"block{b}.tac.", x)
        for l in range(cfg.layers_per_block):
            x = conformer_layer(params, f"block{b}.layer{l}.", x, cfg)
    h = ag.mean(x, axis=0)
    logits = _linear(h, params, "heads")  # (N, 4F)
    masks = ag.sigmoid(logits).reshape(N, NUM_MASKS, cfg.bins).transpose(1, 2, 0)
    return MaskSet(masks)


class VarArray:
    """Parameters plus config; calling it runs :func:`forward`."""

    def __init__(self, cfg=PRESETS["XT"], seed=0, params=None, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)

    def __call__(self, spec):
        return forward(self.params, self.cfg, spec)

    def masks(self, spec):
        """Numpy masks without recording anything on a tape."""
        with ag.no_grad():
            return forward(self.params, self.cfg, spec).values.astype(np.float64)

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def copy(self, trainable=True):
        params = {k: Tensor(p.data.copy(), requires_grad=trainable, name=k)
                  for k, p in self.params.items()}
        return VarArray(self.cfg, params=params)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        return self


def choose_channels(num_channels, k, rng):
    if not 1 <= k <= num_channels:
        raise ValueError(f"k={k} outside [1, {num_channels}]")
    rng = np.random.default_rng(rng)
    return np.sort(rng.choice(num_channels, size=k, replace=False))


def select_channels(spec, k, seed=None):
    """Random subset of ``k`` distinct channels, original order kept."""
    idx = choose_channels(spec.shape[0], k, seed)
    return spec[idx]
