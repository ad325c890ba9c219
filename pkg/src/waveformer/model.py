"""Full network assembly: patch embedding, wavelet-attention encoder, IDWT decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import autograd as ad
from .attention import AttentionConfig, BlockParams, multilevel_attention_block, wavelet_attention_block
from .autograd import Var
from .tensor import Prng, trunc_normal
from .wavelet import get_filter


class Variant(str, Enum):
    SIMPLE_UP = "simple-up"
    RESIDUAL_UP = "residual-up"
    HF_REF = "hf-ref"
    RESIDUAL_UP_MLA = "residual-up-mla"


@dataclass
class ModelConfig:
    in_channels: int = 4
    num_classes: int = 4
    base_channels: int = 48
    input_extent: int = 96
    stage_depths: tuple = (2, 2, 2, 2)
    stage_dwt_levels: tuple = (3, 2, 1, 0)
    variant: Variant = Variant.RESIDUAL_UP
    window: int | None = None  # None: edge of the coarsest attention grid
    mlp_ratio: int = 4
    heads: tuple | None = None  # None: channels // 16 per stage, at least 1
    wavelet: str = "haar"
    upsample: str = "idwt"
    se_ratio: int = 4

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.stage_dwt_levels = tuple(int(v) for v in self.stage_dwt_levels)
        if self.heads is not None:
            self.heads = tuple(int(v) for v in self.heads)

    # derived quantities
    @property
    def dims(self) -> tuple:
        return tuple(self.base_channels * 2 ** s for s in range(4))

    @property
    def grids(self) -> tuple:
        return tuple(self.input_extent // 2 ** (s + 1) for s in range(4))

    @property
    def attn_window(self) -> int:
        if self.window is not None:
            return self.window
        return self.grids[0] // 2 ** self.stage_dwt_levels[0]

    @property
    def stage_heads(self) -> tuple:
        if self.heads is not None:
            return self.heads
        return tuple(max(1, d // 16) for d in self.dims)

    def attention_config(self, stage: int) -> AttentionConfig:
        return AttentionConfig(self.stage_heads[stage], self.dims[stage], self.attn_window)

    def validate(self) -> "ModelConfig":
        errors = []
        if self.input_extent % 32:
            errors.append(f"input_extent {self.input_extent} must be divisible by 32")
        if len(self.stage_depths) != 4 or len(self.stage_dwt_levels) != 4:
            errors.append("stage_depths and stage_dwt_levels need exactly 4 entries")
        if min(self.in_channels, self.num_classes, self.base_channels, self.mlp_ratio, self.se_ratio) < 1:
            errors.append("channel counts and ratios must be positive")
        if self.num_classes < 2:
            errors.append("num_classes must be >= 2")
        if self.upsample not in ("idwt", "nearest"):
            errors.append(f"upsample must be 'idwt' or 'nearest', got {self.upsample!r}")
        try:
            get_filter(self.wavelet)
        except ValueError as exc:
            errors.append(str(exc))
        if errors:
            raise ValueError("; ".join(errors))
        if len(self.stage_heads) != 4:
            errors.append("heads needs exactly 4 entries")
        for s in range(4):
            grid, m, dim = self.grids[s], self.stage_dwt_levels[s], self.dims[s]
            if m < 0 or grid % 2 ** m:
                errors.append(f"stage {s + 1} grid {grid} not divisible by 2^{m}")
                continue
            if s < 3 and m < 1:
                errors.append(f"stage {s + 1} needs m >= 1 to relay detail bands to the decoder")
            coarse = grid // 2 ** m
            if coarse % self.attn_window:
                errors.append(f"window {self.attn_window} does not divide stage {s + 1} attention grid {coarse}")
            if self.variant is Variant.RESIDUAL_UP_MLA:
                for j in range(1, m + 1):
                    if (grid // 2 ** j) % self.attn_window:
                        errors.append(f"window {self.attn_window} does not divide stage {s + 1} level-{j} grid")
            if s < len(self.stage_heads) and dim % self.stage_heads[s]:
                errors.append(f"stage {s + 1} dim {dim} not divisible by {self.stage_heads[s]} heads")
        if errors:
            raise ValueError("; ".join(errors))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


def toy_config(**overrides) -> ModelConfig:
    base = dict(in_channels=2, num_classes=3, base_channels=8, input_extent=32)
    base.update(overrides)
    return ModelConfig(**base).validate()


# -- parameter layout --------------------------------------------------------

# init kinds: "ones", "zeros", "tn" (truncated normal 0.02), "he" (fan-in scaled normal)


@dataclass
class _Spec:
    shape: tuple
    init: str


def _linear_spec(out: dict, name: str, n_out: int, n_in: int, zero: bool = False):
    out[f"{name}_w"] = _Spec((n_out, n_in), "zeros" if zero else "tn")
    out[f"{name}_b"] = _Spec((n_out,), "zeros")


def _conv_spec(out: dict, name: str, c_out: int, c_in: int, k: int, zero: bool = False):
    out[f"{name}_w"] = _Spec((c_out, c_in, k, k, k), "zeros" if zero else "he")
    out[f"{name}_b"] = _Spec((c_out,), "zeros")


def _res_block_spec(out: dict, prefix: str, c: int):
    _conv_spec(out, f"{prefix}.conv1", c, c, 3)
    _conv_spec(out, f"{prefix}.conv2", c, c, 3, zero=True)


def _res_up_spec(out: dict, prefix: str, c_in: int, c_out: int):
    _conv_spec(out, f"{prefix}.up", c_out, c_in, 2)
    out[f"{prefix}.dw_w"] = _Spec((c_out, 1, 3, 3, 3), "he")
    out[f"{prefix}.dw_b"] = _Spec((c_out,), "zeros")
    _conv_spec(out, f"{prefix}.pw1", 2 * c_out, c_out, 1)
    _conv_spec(out, f"{prefix}.pw2", c_out, 2 * c_out, 1, zero=True)


def _simple_up_spec(out: dict, prefix: str, c_in: int, c_out: int):
    _conv_spec(out, f"{prefix}.up", c_out, c_in, 4)


UPSAMPLER_CHAINS = {"up3": ((4, 2), (2, 1)), "up2": ((2, 1),)}


def param_specs(cfg: ModelConfig) -> dict:
    """Construction-ordered map of parameter name to shape and init kind."""
    C, P, K = cfg.base_channels, cfg.in_channels, cfg.num_classes
    dims = cfg.dims
    out: dict = {}
    _conv_spec(out, "embed", C, P, 2)
    for s in range(4):
        d, hidden = dims[s], cfg.mlp_ratio * dims[s]
        for b in range(cfg.stage_depths[s]):
            pre = f"enc{s + 1}.blk{b + 1}"
            out[f"{pre}.ln1_g"] = _Spec((d,), "ones")
            out[f"{pre}.ln1_b"] = _Spec((d,), "zeros")
            _linear_spec(out, f"{pre}.qkv", 3 * d, d)
            _linear_spec(out, f"{pre}.proj", d, d, zero=True)
            out[f"{pre}.ln2_g"] = _Spec((d,), "ones")
            out[f"{pre}.ln2_b"] = _Spec((d,), "zeros")
            _linear_spec(out, f"{pre}.fc1", hidden, d)
            _linear_spec(out, f"{pre}.fc2", d, hidden, zero=True)
        if s < 3:
            _conv_spec(out, f"merge{s + 1}", dims[s + 1], d, 2)
    c8 = dims[3]
    _linear_spec(out, "se.fc1", c8 // cfg.se_ratio, c8)
    _linear_spec(out, "se.fc2", c8, c8 // cfg.se_ratio)
    _res_block_spec(out, "bottleneck", c8)
    for i in (3, 2, 1):
        c_out = dims[i - 1]
        _conv_spec(out, f"dec{i}.proj", c_out, dims[i], 1)
        if cfg.variant is Variant.HF_REF:
            for k in range(7):
                pre = f"dec{i}.hf{k + 1}"
                out[f"{pre}.dw_w"] = _Spec((c_out, 1, 3, 3, 3), "zeros")
                out[f"{pre}.dw_b"] = _Spec((c_out,), "zeros")
                out[f"{pre}.gate_w"] = _Spec((c_out,), "zeros")
                out[f"{pre}.gate_b"] = _Spec((c_out,), "zeros")
        _res_block_spec(out, f"dec{i}.res", c_out)
    for name, chain in UPSAMPLER_CHAINS.items():
        for j, (a, b) in enumerate(chain):
            pre = f"{name}.{j + 1}"
            if cfg.variant is Variant.SIMPLE_UP:
                _simple_up_spec(out, pre, C * a, C * b)
            else:
                _res_up_spec(out, pre, C * a, C * b)
    _conv_spec(out, "fuse", C, 4 * C, 1)
    _conv_spec(out, "out_up", C, C, 2)
    _conv_spec(out, "head", K, C, 1)
    return out


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s.shape)) for s in param_specs(cfg).values())


def count_params_by_module(cfg: ModelConfig) -> dict:
    groups: dict = {}
    for name, s in param_specs(cfg).items():
        key = name.split(".")[0]
        if key.endswith(("_w", "_b")):
            key = key[:-2]
        groups[key] = groups.get(key, 0) + int(np.prod(s.shape))
    return groups


class ParamStore:
    """Named parameter arrays, iterated in lexicographic name order."""

    def __init__(self, tensors: dict):
        self._t = {k: tensors[k] for k in sorted(tensors)}

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list:
        return list(self._t)

    def total(self) -> int:
        return sum(int(v.size) for v in self._t.values())

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._t.items()})

    def as_vars(self, requires_grad: bool = False) -> dict:
        return {k: Var(v, requires_grad=requires_grad) for k, v in self._t.items()}

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._t.items()})


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    prng = Prng(seed)
    tensors = {}
    for name, s in param_specs(cfg).items():
        if s.init == "ones":
            tensors[name] = np.ones(s.shape, dtype)
        elif s.init == "zeros":
            tensors[name] = np.zeros(s.shape, dtype)
        elif s.init == "tn":
            tensors[name] = trunc_normal(prng, s.shape, 0.02, dtype=dtype)
        else:
            fan_in = int(np.prod(s.shape[1:]))
            tensors[name] = trunc_normal(prng, s.shape, np.sqrt(2.0 / fan_in), dtype=dtype)
    return ParamStore(tensors)


# -- forward -----------------------------------------------------------------


@dataclass
class EncoderOutput:
    stage_tokens: list = field(default_factory=list)
    stage_hf: list = field(default_factory=list)


def _p(params, name):
    v = params[name]
    return v if isinstance(v, Var) else Var(v)


def _note(trace, label, v):
    if trace is not None:
        trace.append((label, tuple(v.shape)))


def patch_embed(x: Var, params) -> Var:
    if any(n % 2 for n in x.shape[1:]):
        raise ValueError(f"patch embedding needs even extents, got {x.shape[1:]}")
    return ad.conv3d(x, _p(params, "embed_w"), _p(params, "embed_b"), stride=2)


def patch_merge(z: Var, params, stage: int) -> Var:
    if any(n % 2 for n in z.shape[1:]):
        raise ValueError(f"patch merging needs even extents, got {z.shape[1:]}")
    return ad.conv3d(z, _p(params, f"merge{stage}_w"), _p(params, f"merge{stage}_b"), stride=2)


def _block(params, prefix: str) -> BlockParams:
    return BlockParams(**{n: _p(params, f"{prefix}.{n}") for n in BlockParams.names()})


def encoder_forward(x_in: Var, params, cfg: ModelConfig, trace=None) -> EncoderOutput:
    enc = EncoderOutput()
    wavelet = get_filter(cfg.wavelet)
    z = x_in
    for s in range(4):
        m = cfg.stage_dwt_levels[s]
        acfg = cfg.attention_config(s)
        hfs = []
        for b in range(cfg.stage_depths[s]):
            bp = _block(params, f"enc{s + 1}.blk{b + 1}")
            if cfg.variant is Variant.RESIDUAL_UP_MLA and m >= 1:
                z, hf = multilevel_attention_block(z, m, bp, acfg, wavelet, cfg.upsample)
            else:
                z, hf = wavelet_attention_block(z, m, bp, acfg, wavelet, cfg.upsample)
            if hf is not None:
                hfs.append(hf)
        enc.stage_tokens.append(z)
        _note(trace, f"encoder stage {s + 1} tokens", z)
        if s < 3:
            hf = hfs[0]
            for h in hfs[1:]:
                hf = hf + h
            if len(hfs) > 1:
                hf = hf * (1.0 / len(hfs))
            enc.stage_hf.append(hf)
            _note(trace, f"encoder stage {s + 1} HF bands", hf)
            z = patch_merge(z, params, s + 1)
    return enc


def se_bottleneck(z4: Var, params, prefix: str = "se") -> Var:
    """Squeeze-and-excitation channel gating."""
    c = z4.shape[0]
    pooled = z4.reshape(c, -1).mean(axis=1)
    h = ad.relu(ad.linear(pooled, _p(params, f"{prefix}.fc1_w"), _p(params, f"{prefix}.fc1_b")))
    gate = ad.sigmoid(ad.linear(h, _p(params, f"{prefix}.fc2_w"), _p(params, f"{prefix}.fc2_b")))
    return z4 * gate.reshape(c, 1, 1, 1)


def res_block(x: Var, params, prefix: str) -> Var:
    h = ad.conv3d(x, _p(params, f"{prefix}.conv1_w"), _p(params, f"{prefix}.conv1_b"), padding=1)
    h = ad.conv3d(ad.gelu(h), _p(params, f"{prefix}.conv2_w"), _p(params, f"{prefix}.conv2_b"), padding=1)
    return x + h


def hf_refine(hf: Var, params, prefix: str) -> Var:
    """Per-band depthwise filtering with a sigmoid channel gate, added residually."""
    out = []
    for k in range(7):
        band = hf[k]
        pre = f"{prefix}.hf{k + 1}"
        conv = ad.depthwise_conv3d(band, _p(params, f"{pre}.dw_w"), _p(params, f"{pre}.dw_b"), padding=1)
        c = band.shape[0]
        pooled = conv.reshape(c, -1).mean(axis=1)
        gate = ad.sigmoid(pooled * _p(params, f"{pre}.gate_w") + _p(params, f"{pre}.gate_b"))
        out.append(band + conv * gate.reshape(c, 1, 1, 1))
    return ad.stack(out)


def idwt_upsample_stage(z_in: Var, hf: Var, skip: Var, params, prefix: str, refine: bool = False,
                        wavelet="haar") -> Var:
    proj = ad.conv3d(z_in, _p(params, f"{prefix}.proj_w"), _p(params, f"{prefix}.proj_b"))
    if hf.shape[0] != 7 or hf.shape[1:] != proj.shape:
        raise ValueError(f"detail bands {hf.shape} incompatible with projected input {proj.shape}")
    if skip.shape != (proj.shape[0],) + tuple(2 * n for n in proj.shape[1:]):
        raise ValueError(f"skip {skip.shape} does not match upsampled shape of {proj.shape}")
    if refine:
        hf = hf_refine(hf, params, prefix)
    up = ad.idwt3d(ad.concat([proj.reshape((1,) + proj.shape), hf], axis=0), get_filter(wavelet))
    return res_block(up + skip, params, f"{prefix}.res")


def _upsampler(x: Var, params, name: str, variant: Variant) -> Var:
    for j in range(len(UPSAMPLER_CHAINS[name])):
        pre = f"{name}.{j + 1}"
        if variant is Variant.SIMPLE_UP:
            x = ad.conv3d(x, _p(params, f"{pre}.up_w"), _p(params, f"{pre}.up_b"),
                          stride=2, padding=1, transposed=True)
            continue
        u = ad.conv3d(x, _p(params, f"{pre}.up_w"), _p(params, f"{pre}.up_b"), stride=2, transposed=True)
        h = ad.depthwise_conv3d(u, _p(params, f"{pre}.dw_w"), _p(params, f"{pre}.dw_b"), padding=1)
        h = ad.gelu(ad.conv3d(h, _p(params, f"{pre}.pw1_w"), _p(params, f"{pre}.pw1_b")))
        x = u + ad.conv3d(h, _p(params, f"{pre}.pw2_w"), _p(params, f"{pre}.pw2_b"))
    return x


def decode(enc: EncoderOutput, x_in: Var, params, cfg: ModelConfig, trace=None) -> Var:
    refine = cfg.variant is Variant.HF_REF
    z = se_bottleneck(enc.stage_tokens[3], params)
    z = res_block(z, params, "bottleneck")
    _note(trace, "bottleneck z_enc", z)
    dec = {}
    for i in (3, 2, 1):
        z = idwt_upsample_stage(z, enc.stage_hf[i - 1], enc.stage_tokens[i - 1], params, f"dec{i}",
                                refine, cfg.wavelet)
        dec[i] = z
        _note(trace, f"decoder stage {i}", z)
    u3 = _upsampler(dec[3], params, "up3", cfg.variant)
    u2 = _upsampler(dec[2], params, "up2", cfg.variant)
    agg = ad.concat([u3, u2, dec[1]], axis=0)
    _note(trace, "aggregate", agg)
    f = ad.conv3d(ad.concat([agg, x_in], axis=0), _p(params, "fuse_w"), _p(params, "fuse_b"))
    f = ad.gelu(f)
    out = ad.gelu(ad.conv3d(f, _p(params, "out_up_w"), _p(params, "out_up_b"), stride=2, transposed=True))
    _note(trace, "Z_out", out)
    logits = ad.conv3d(out, _p(params, "head_w"), _p(params, "head_b"))
    _note(trace, "logits", logits)
    return logits


def forward(params, x, cfg: ModelConfig, trace=None) -> Var:
    """Logits ``(num_classes, H, W, D)`` for one volume ``(P, H, W, D)``."""
    x = ad.as_var(x)
    if x.shape != (cfg.in_channels,) + (cfg.input_extent,) * 3:
        raise ValueError(f"input shape {x.shape} does not match config "
                         f"{(cfg.in_channels,) + (cfg.input_extent,) * 3}")
    x_in = patch_embed(x, params)
    _note(trace, "patch embedding", x_in)
    enc = encoder_forward(x_in, params, cfg, trace)
    return decode(enc, x_in, params, cfg, trace)


def predict(params, x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    with ad.no_grad():
        logits = forward(params, x, cfg).data
    return np.argmax(logits, axis=0)


def expected_shapes(cfg: ModelConfig) -> list:
    """The shape chain the architecture must produce, derived from the config alone."""
    C, H = cfg.base_channels, cfg.input_extent
    rows = [("patch embedding", (C,) + (H // 2,) * 3)]
    for s in range(4):
        g = H // 2 ** (s + 1)
        rows.append((f"encoder stage {s + 1} tokens", (C * 2 ** s,) + (g,) * 3))
        if s < 3:
            rows.append((f"encoder stage {s + 1} HF bands", (7, C * 2 ** s) + (g // 2,) * 3))
    rows.append(("bottleneck z_enc", (8 * C,) + (H // 16,) * 3))
    for i in (3, 2, 1):
        rows.append((f"decoder stage {i}", (C * 2 ** (i - 1),) + (H // 2 ** i,) * 3))
    rows.append(("aggregate", (3 * C,) + (H // 2,) * 3))
    rows.append(("Z_out", (C,) + (H,) * 3))
    rows.append(("logits", (cfg.num_classes,) + (H,) * 3))
    return rows
