"""Full network assembly: toy encoder, aggregated skips, ViTM bottleneck,
FRM/BiFFM decoder, and the sigmoid mask head.

The encoder is a plain 4-stage convolutional stand-in with the stage
interface the architecture needs (feature maps at strides 2, 4, 8, 16).
Skip n concatenates the FMCAB-processed stage output with the max-pooled
previous skip, so skip widths are cumulative over the encoder widths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import blocks
from .engine import (
    BatchNormState,
    ParamStore,
    Tensor,
    batch_norm,
    bilinear_resize,
    concat,
    conv2d,
    max_pool2x2,
    relu,
    sigmoid,
)
from .errors import ConfigurationError, DimensionError


@dataclass
class ModelConfig:
    in_channels: int = 3
    input_size: tuple = (64, 64)
    # Sized for a single desk-class core: the decoder identity concats make
    # channel counts cumulative, so wide defaults blow past memory fast.
    encoder_widths: tuple = (8, 16, 32, 64)
    decoder_widths: tuple = (16, 8, 8, 8)
    heads: int = 4
    fmcab_reduction: int = 4
    p_exponent: float = 1.0
    shuffle_groups: int = 4
    skip_mode: str = "literal_s4"
    seed: int = 0

    def validate(self):
        h, w = self.input_size
        if h % 16 != 0 or w % 16 != 0:
            raise ConfigurationError(
                f"input_size: {h}x{w} must be divisible by 16 (four stride-2 stages)"
            )
        for name in ("encoder_widths", "decoder_widths"):
            widths = getattr(self, name)
            if len(widths) != 4 or any(v <= 0 for v in widths):
                raise ConfigurationError(f"{name}: need 4 positive widths, got {widths}")
        if self.in_channels < 1:
            raise ConfigurationError(f"in_channels: must be positive, got {self.in_channels}")
        c4 = self.encoder_widths[3]
        if c4 % self.heads != 0:
            raise ConfigurationError(f"heads: {self.heads} does not divide bottleneck width {c4}")
        if c4 % 2 != 0:
            raise ConfigurationError(f"encoder_widths: bottleneck width {c4} must be even")
        for wd in self.decoder_widths:
            if (2 * wd) % self.shuffle_groups != 0:
                raise ConfigurationError(
                    f"shuffle_groups: {self.shuffle_groups} does not divide {2 * wd}"
                )
        if self.skip_mode not in ("literal_s4", "stage_matched"):
            raise ConfigurationError(f"skip_mode: unknown value {self.skip_mode!r}")
        if self.p_exponent <= 0:
            raise ConfigurationError(f"p_exponent: must be > 0, got {self.p_exponent}")

    @property
    def bottleneck_size(self):
        return (self.input_size[0] // 16, self.input_size[1] // 16)

    def skip_widths(self):
        widths = []
        total = 0
        for w in self.encoder_widths:
            total += w
            widths.append(total)
        return widths


@dataclass
class EncoderStageParams:
    conv1_w: Tensor
    conv1_b: Tensor
    bn1_scale: Tensor
    bn1_shift: Tensor
    bn1_state: BatchNormState
    conv2_w: Tensor
    conv2_b: Tensor
    bn2_scale: Tensor
    bn2_shift: Tensor
    bn2_state: BatchNormState
    fmcab: blocks.FmcabParams


@dataclass
class DecoderBlockParams:
    frm_up: blocks.FrmParams
    biffm: blocks.BiffmParams
    frm_fuse: blocks.FrmParams
    out_channels: int


@dataclass
class ModelParams:
    config: ModelConfig
    store: ParamStore
    stages: list
    vitm: blocks.VitmParams
    decoder: list
    head_w: Tensor
    head_b: Tensor
    bn_states: dict = field(default_factory=dict)


@dataclass
class ForwardTrace:
    skips: list
    f_enc: Tensor
    decoder: list
    f_out: Tensor


def build_model(config: ModelConfig) -> ModelParams:
    config.validate()
    store = ParamStore(config.seed)
    bn_states = {}

    stages = []
    cin = config.in_channels
    for i, cout in enumerate(config.encoder_widths):
        p = f"enc{i + 1}"
        stage = EncoderStageParams(
            conv1_w=store.conv_weight(f"{p}.conv1.w", cout, cin, 3, 3),
            conv1_b=store.zeros(f"{p}.conv1.b", (cout,)),
            bn1_scale=store.ones(f"{p}.bn1.scale", (cout,)),
            bn1_shift=store.zeros(f"{p}.bn1.shift", (cout,)),
            bn1_state=BatchNormState(cout),
            conv2_w=store.conv_weight(f"{p}.conv2.w", cout, cout, 3, 3),
            conv2_b=store.zeros(f"{p}.conv2.b", (cout,)),
            bn2_scale=store.ones(f"{p}.bn2.scale", (cout,)),
            bn2_shift=store.zeros(f"{p}.bn2.shift", (cout,)),
            bn2_state=BatchNormState(cout),
            fmcab=blocks.FmcabParams.build(
                store,
                f"{p}.fmcab",
                cout,
                reduction=config.fmcab_reduction,
                p_exponent=config.p_exponent,
            ),
        )
        bn_states[f"{p}.bn1"] = stage.bn1_state
        bn_states[f"{p}.bn2"] = stage.bn2_state
        stages.append(stage)
        cin = cout

    bh, bw = config.bottleneck_size
    vitm = blocks.VitmParams.build(
        store, "vitm", config.encoder_widths[3], bh * bw, heads=config.heads
    )

    skip_widths = config.skip_widths()
    decoder = []
    prev = config.encoder_widths[3]
    for i, cout in enumerate(config.decoder_widths):
        p = f"dec{i + 1}"
        skip_c = skip_widths[3] if config.skip_mode == "literal_s4" else skip_widths[3 - i]
        frm_up = blocks.FrmParams.build(store, f"{p}.frm_up", prev, cout, upsample=True)
        u_channels = frm_up.out_channels
        biffm = blocks.BiffmParams.build(
            store,
            f"{p}.biffm",
            u_channels,
            skip_c,
            width=cout,
            shuffle_groups=config.shuffle_groups,
        )
        frm_fuse = blocks.FrmParams.build(
            store, f"{p}.frm_fuse", biffm.out_channels, cout, upsample=False
        )
        out_channels = frm_fuse.out_channels + u_channels
        bn_states[f"{p}.frm_up.bn"] = frm_up.bn_state
        bn_states[f"{p}.frm_fuse.bn"] = frm_fuse.bn_state
        decoder.append(DecoderBlockParams(frm_up, biffm, frm_fuse, out_channels))
        prev = out_channels

    head_w = store.conv_weight("head.w", 1, prev, 1, 1)
    head_b = store.zeros("head.b", (1,))

    return ModelParams(
        config=config,
        store=store,
        stages=stages,
        vitm=vitm,
        decoder=decoder,
        head_w=head_w,
        head_b=head_b,
        bn_states=bn_states,
    )


def _stage_forward(x, stage, mode):
    t = relu(
        batch_norm(
            conv2d(x, stage.conv1_w, stage.conv1_b, pad=1),
            stage.bn1_scale,
            stage.bn1_shift,
            stage.bn1_state,
            mode,
        )
    )
    t = relu(
        batch_norm(
            conv2d(t, stage.conv2_w, stage.conv2_b, pad=1),
            stage.bn2_scale,
            stage.bn2_shift,
            stage.bn2_state,
            mode,
        )
    )
    return max_pool2x2(t)


def encoder_forward(f_in, params, mode="train"):
    """Run the four stages; returns (stage outputs, aggregated skips)."""
    cfg = params.config
    if f_in.ndim != 4 or f_in.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"encoder input must be Nx{cfg.in_channels}xHxW, got {f_in.shape}"
        )
    outputs = []
    skips = []
    t = f_in
    for i, stage in enumerate(params.stages):
        t = _stage_forward(t, stage, mode)
        outputs.append(t)
        attended = blocks.fmcab_forward(t, stage.fmcab, mode)
        if i == 0:
            skips.append(attended)
        else:
            skips.append(concat([attended, max_pool2x2(skips[-1])], axis=1))
    return outputs, skips


def model_forward(f_in, params, mode="train", rng=None) -> ForwardTrace:
    cfg = params.config
    h, w = cfg.input_size
    if f_in.shape[2] != h or f_in.shape[3] != w:
        raise DimensionError(
            f"input spatial size {f_in.shape[2]}x{f_in.shape[3]} != configured {h}x{w}"
        )
    stage_outputs, skips = encoder_forward(f_in, params, mode)
    f_enc = blocks.vitm_forward(stage_outputs[3], params.vitm)

    decoder_outputs = []
    prev = f_enc
    for i, block in enumerate(params.decoder):
        u = blocks.frm_forward(prev, block.frm_up, mode, rng)
        skip = skips[3] if cfg.skip_mode == "literal_s4" else skips[3 - i]
        fused = blocks.biffm_forward(u, skip, block.biffm)
        reconstructed = blocks.frm_forward(fused, block.frm_fuse, mode, rng)
        matched = bilinear_resize(u, reconstructed.shape[2], reconstructed.shape[3])
        prev = concat([reconstructed, matched], axis=1)
        decoder_outputs.append(prev)

    f_out = sigmoid(conv2d(prev, params.head_w, params.head_b))
    return ForwardTrace(skips=skips, f_enc=f_enc, decoder=decoder_outputs, f_out=f_out)


def param_count(params: ModelParams) -> int:
    return params.store.param_count()
