"""Declarative network construction, parameter accounting, and execution.

Two families are supported. The proposed family stacks a 3x3x3 conv
block, four (inception block, max-pool) pairs, and a global average pool
per input pipeline; the baseline family stacks four (conv block,
max-pool) pairs with a doubling channel plan and flattens. Both families
fuse their structurally identical pipelines late: the per-pipeline
feature vectors are concatenated and pushed through dropout, dense and
softmax. Pipelines never share weights.

An inception block runs four bands on the same input and concatenates
their outputs along channels:

    band 1: 1x1x1 bottleneck -> 3x3x3 conv -> 3x3x3 conv
    band 2: 1x1x1 bottleneck -> 3x3x3 conv
    band 3: 3x3x3 max-pool (stride 1) -> 1x1x1 conv
    band 4: 1x1x1 conv

Every convolution is followed by batch norm and ReLU. The block widens
the channel count by roughly 1.5x (see ``channel_rule``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import layers
from .errors import InvalidConfig, InvalidMode, ShapeMismatch
from .layers import BatchNormParams, ConvParams, DenseParams

ROI_INPUTS_4 = ("smri_l", "smri_r", "dti_l", "dti_r")
ROI_INPUTS_SMRI = ("smri_l", "smri_r")
ROI_INPUTS_DTI = ("dti_l", "dti_r")
_ALLOWED_INPUT_SETS = (
    frozenset(ROI_INPUTS_DTI),
    frozenset(ROI_INPUTS_SMRI),
    frozenset(ROI_INPUTS_4),
)

ROI_SIDE = 29
PIPE_POOL = (3, 2, "same")  # pool size, stride, padding between blocks
BAND3_POOL = (3, 1, "same")  # spatial-preserving pool inside an inception band


def channel_rule(n: int) -> tuple[int, tuple[int, int, int, int]]:
    """Output channel count and per-band widths of an inception block.

    Total is 1.5 * n rounded half-up; each band gets floor(total / 4)
    channels and the remainder (0..3) goes to band 2, then band 1, then
    band 3, keeping the four bands as balanced as possible.
    """
    if n < 4:
        raise InvalidConfig(f"inception block needs >= 4 input channels, got {n}")
    total = (3 * n + 1) // 2
    base = total // 4
    widths = [base, base, base, base]
    for band in (1, 0, 2)[: total - 4 * base]:
        widths[band] += 1
    return total, tuple(widths)


def bottleneck_width(n: int) -> int:
    """Width of the leading 1x1x1 convolutions in bands 1 and 2."""
    return max(4, n // 2)


# ---------------------------------------------------------------------------
# block and network specs
# ---------------------------------------------------------------------------

BLOCK_KINDS = (
    "conv_block",
    "inception_block",
    "maxpool",
    "global_avgpool",
    "flatten",
    "dropout",
    "dense",
    "softmax",
    "concat",
)


@dataclass(frozen=True)
class BlockSpec:
    """One unit of the declarative graph; attrs depend on kind."""

    kind: str
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise InvalidConfig(f"unknown block kind {self.kind!r}")


def build_conv_block(s: int, n_filters: int) -> BlockSpec:
    """3D convolution (same padding, stride 1) + batch norm + ReLU."""
    if s % 2 == 0:
        raise InvalidConfig(f"conv block kernel size must be odd, got {s}")
    if n_filters < 1:
        raise InvalidConfig(f"conv block needs >= 1 filter, got {n_filters}")
    return BlockSpec("conv_block", {"kernel": s, "filters": n_filters})


def build_inception_block(n_in: int) -> BlockSpec:
    """Four-band inception unit for n_in input channels."""
    total, widths = channel_rule(n_in)
    return BlockSpec(
        "inception_block",
        {
            "in_channels": n_in,
            "out_channels": total,
            "band_widths": widths,
            "bottleneck": bottleneck_width(n_in),
        },
    )


@dataclass(frozen=True)
class PipelineSpec:
    input_name: str
    blocks: tuple[BlockSpec, ...]


@dataclass(frozen=True)
class NetworkSpec:
    """Full fusion network: siamese pipelines plus a shared tail."""

    pipelines: tuple[PipelineSpec, ...]
    tail: tuple[BlockSpec, ...]
    class_count: int
    input_side: int = ROI_SIDE
    family: str = "proposed"
    preset: str = "custom"

    def __post_init__(self):
        if self.class_count < 2:
            raise InvalidConfig(f"need >= 2 classes, got {self.class_count}")
        if not self.pipelines:
            raise InvalidConfig("network needs at least one pipeline")
        first = self.pipelines[0].blocks
        for p in self.pipelines[1:]:
            if p.blocks != first:  # siamese: identical structure, own weights
                raise InvalidConfig("pipelines must be structurally identical")
        if self.family == "proposed":
            if first[-1].kind != "global_avgpool":
                raise InvalidConfig("proposed pipelines must end in global_avgpool")
            tail_kinds = tuple(b.kind for b in self.tail)
            if tail_kinds != ("concat", "dropout", "dense", "softmax"):
                raise InvalidConfig(
                    "proposed fusion tail must be concat -> dropout -> dense -> softmax"
                )

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(p.input_name for p in self.pipelines)


def _check_pipeline_inputs(pipeline_inputs: Iterable[str]) -> tuple[str, ...]:
    names = tuple(pipeline_inputs)
    if len(set(names)) != len(names):
        raise InvalidConfig(f"duplicate pipeline inputs: {names}")
    if frozenset(names) not in _ALLOWED_INPUT_SETS:
        raise InvalidConfig(
            f"unsupported input set {sorted(names)}; expected both sides of one "
            "modality or all four ROIs"
        )
    return names


def pooled_extent(d: int, pool: int, stride: int, padding: str = "same") -> int:
    if padding == "same":
        return -(-d // stride)
    return (d - pool) // stride + 1


def build_pipeline(f0: int, input_side: int = ROI_SIDE) -> tuple[BlockSpec, ...]:
    """Proposed pipeline: conv block, 4 x (inception + max-pool), global avg pool."""
    if f0 < 4:
        raise InvalidConfig(f"f0 must be >= 4 so inception bands stay non-empty, got {f0}")
    side = input_side
    blocks = [build_conv_block(3, f0)]
    ch = f0
    for _ in range(4):
        blocks.append(build_inception_block(ch))
        ch = blocks[-1].attrs["out_channels"]
        nxt = pooled_extent(side, *PIPE_POOL)
        if nxt >= side or nxt < 1:
            raise InvalidConfig(
                f"input side {input_side} too small for four pooling stages"
            )
        blocks.append(
            BlockSpec("maxpool", {"pool": PIPE_POOL[0], "stride": PIPE_POOL[1], "padding": PIPE_POOL[2]})
        )
        side = nxt
    blocks.append(BlockSpec("global_avgpool"))
    return tuple(blocks)


def pipeline_feature_width(f0: int) -> int:
    """Length of the per-pipeline feature vector (channel_rule applied 4x)."""
    ch = f0
    for _ in range(4):
        ch = channel_rule(ch)[0]
    return ch


def build_fusion_network(
    pipeline_inputs: Iterable[str],
    f0: int = 8,
    class_count: int = 2,
    keep_prob: float = 0.5,
    input_side: int = ROI_SIDE,
    preset: str = "custom",
) -> NetworkSpec:
    """Proposed inception network with one pipeline per input ROI."""
    names = _check_pipeline_inputs(pipeline_inputs)
    blocks = build_pipeline(f0, input_side)
    pipelines = tuple(PipelineSpec(n, blocks) for n in names)
    tail = (
        BlockSpec("concat"),
        BlockSpec("dropout", {"keep_prob": keep_prob}),
        BlockSpec("dense", {"width": class_count}),
        BlockSpec("softmax"),
    )
    return NetworkSpec(
        pipelines, tail, class_count, input_side, family="proposed", preset=preset
    )


def build_alexnet_baseline(
    pipeline_inputs: Iterable[str],
    g0: int = 8,
    class_count: int = 2,
    keep_prob: float = 0.5,
    hidden: int = 64,
    input_side: int = ROI_SIDE,
    preset: str = "custom",
) -> NetworkSpec:
    """Comparison network: 4 conv blocks with doubling channels, flatten, MLP tail."""
    names = _check_pipeline_inputs(pipeline_inputs)
    if g0 < 1 or hidden < 1:
        raise InvalidConfig(f"g0 and hidden width must be >= 1, got {g0}, {hidden}")
    side = input_side
    blocks: list[BlockSpec] = []
    for stage in range(4):
        blocks.append(build_conv_block(3, g0 * 2**stage))
        nxt = pooled_extent(side, *PIPE_POOL)
        if nxt >= side or nxt < 1:
            raise InvalidConfig(
                f"input side {input_side} too small for four pooling stages"
            )
        blocks.append(
            BlockSpec("maxpool", {"pool": PIPE_POOL[0], "stride": PIPE_POOL[1], "padding": PIPE_POOL[2]})
        )
        side = nxt
    blocks.append(BlockSpec("flatten"))
    pipelines = tuple(PipelineSpec(n, tuple(blocks)) for n in names)
    tail = (
        BlockSpec("concat"),
        BlockSpec("dropout", {"keep_prob": keep_prob}),
        BlockSpec("dense", {"width": hidden, "activation": "relu"}),
        BlockSpec("dense", {"width": class_count}),
        BlockSpec("softmax"),
    )
    return NetworkSpec(
        pipelines, tail, class_count, input_side, family="alexnet", preset=preset
    )


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESETS = {
    "proposed-4roi": ("proposed", ROI_INPUTS_4),
    "proposed-2roi-smri": ("proposed", ROI_INPUTS_SMRI),
    "proposed-2roi-dti": ("proposed", ROI_INPUTS_DTI),
    "alexnet-4roi": ("alexnet", ROI_INPUTS_4),
    "alexnet-2roi-smri": ("alexnet", ROI_INPUTS_SMRI),
    "alexnet-2roi-dti": ("alexnet", ROI_INPUTS_DTI),
}

DEFAULT_F0 = 8
DEFAULT_G0 = 8
DEFAULT_HIDDEN = 64


def build_preset(
    name: str,
    class_count: int = 2,
    keep_prob: float = 0.5,
    f0: int | None = None,
) -> NetworkSpec:
    if name not in PRESETS:
        raise InvalidConfig(
            f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}"
        )
    family, inputs = PRESETS[name]
    if family == "proposed":
        return build_fusion_network(
            inputs, f0 or DEFAULT_F0, class_count, keep_prob, preset=name
        )
    return build_alexnet_baseline(
        inputs, f0 or DEFAULT_G0, class_count, keep_prob, DEFAULT_HIDDEN, preset=name
    )


# ---------------------------------------------------------------------------
# lowering: blocks -> primitive layer nodes
# ---------------------------------------------------------------------------


@dataclass
class Node:
    kind: str  # conv | bn | relu | maxpool | gap | flatten | branch
    name: str
    attrs: dict = field(default_factory=dict)
    bands: tuple = ()  # only for kind == "branch"


def _conv_bn_relu(prefix: str, c_in: int, c_out: int, k: int) -> list[Node]:
    return [
        Node("conv", f"{prefix}/conv", {"k": k, "c_in": c_in, "c_out": c_out}),
        Node("bn", f"{prefix}/bn", {"c": c_out}),
        Node("relu", f"{prefix}/relu"),
    ]


def _lower_pipeline(prefix: str, blocks: tuple[BlockSpec, ...], c_in: int) -> list[Node]:
    nodes: list[Node] = []
    ch = c_in
    for i, blk in enumerate(blocks):
        base = f"{prefix}/blk{i}"
        if blk.kind == "conv_block":
            nodes += _conv_bn_relu(base, ch, blk.attrs["filters"], blk.attrs["kernel"])
            ch = blk.attrs["filters"]
        elif blk.kind == "inception_block":
            if blk.attrs["in_channels"] != ch:
                raise InvalidConfig(
                    f"{base}: inception block declares {blk.attrs['in_channels']} "
                    f"input channels but receives {ch}"
                )
            b = blk.attrs["bottleneck"]
            w1, w2, w3, w4 = blk.attrs["band_widths"]
            band1 = (
                _conv_bn_relu(f"{base}/band1/c0", ch, b, 1)
                + _conv_bn_relu(f"{base}/band1/c1", b, w1, 3)
                + _conv_bn_relu(f"{base}/band1/c2", w1, w1, 3)
            )
            band2 = _conv_bn_relu(f"{base}/band2/c0", ch, b, 1) + _conv_bn_relu(
                f"{base}/band2/c1", b, w2, 3
            )
            band3 = [
                Node(
                    "maxpool",
                    f"{base}/band3/pool",
                    {"pool": BAND3_POOL[0], "stride": BAND3_POOL[1], "padding": BAND3_POOL[2]},
                )
            ] + _conv_bn_relu(f"{base}/band3/c0", ch, w3, 1)
            band4 = _conv_bn_relu(f"{base}/band4/c0", ch, w4, 1)
            nodes.append(
                Node(
                    "branch",
                    base,
                    {"widths": (w1, w2, w3, w4)},
                    bands=(band1, band2, band3, band4),
                )
            )
            ch = blk.attrs["out_channels"]
        elif blk.kind == "maxpool":
            nodes.append(Node("maxpool", base, dict(blk.attrs)))
        elif blk.kind == "global_avgpool":
            nodes.append(Node("gap", base))
        elif blk.kind == "flatten":
            nodes.append(Node("flatten", base))
        else:
            raise InvalidConfig(f"block kind {blk.kind!r} not valid inside a pipeline")
    return nodes


# ---------------------------------------------------------------------------
# parameter specs, counting, initialization support
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str  # conv_weight | dense_weight | bias | gamma | beta | running_mean | running_var
    fan_in: int = 0
    fan_out: int = 0

    @property
    def trainable(self) -> bool:
        return self.kind not in ("running_mean", "running_var")


def _node_param_specs(node: Node) -> list[ParamSpec]:
    if node.kind == "conv":
        k, ci, co = node.attrs["k"], node.attrs["c_in"], node.attrs["c_out"]
        return [
            ParamSpec(f"{node.name}/w", (co, ci, k, k, k), "conv_weight",
                      fan_in=ci * k**3, fan_out=co * k**3),
            ParamSpec(f"{node.name}/b", (co,), "bias"),
        ]
    if node.kind == "bn":
        c = node.attrs["c"]
        return [
            ParamSpec(f"{node.name}/gamma", (c,), "gamma"),
            ParamSpec(f"{node.name}/beta", (c,), "beta"),
            ParamSpec(f"{node.name}/rm", (c,), "running_mean"),
            ParamSpec(f"{node.name}/rv", (c,), "running_var"),
        ]
    if node.kind == "dense":
        fi, fo = node.attrs["f_in"], node.attrs["f_out"]
        return [
            ParamSpec(f"{node.name}/w", (fo, fi), "dense_weight", fan_in=fi, fan_out=fo),
            ParamSpec(f"{node.name}/b", (fo,), "bias"),
        ]
    if node.kind == "branch":
        specs: list[ParamSpec] = []
        for band in node.bands:
            for n in band:
                specs += _node_param_specs(n)
        return specs
    return []


@dataclass
class ParamReport:
    per_layer: dict[str, int]
    total: int


def count_parameters(spec: NetworkSpec) -> ParamReport:
    """Exact trainable parameter counts per layer (running stats excluded)."""
    net = Network.structure_only(spec)
    per_layer: dict[str, int] = {}
    for ps in net.param_specs():
        if not ps.trainable:
            continue
        layer = ps.name.rsplit("/", 1)[0]
        per_layer[layer] = per_layer.get(layer, 0) + int(np.prod(ps.shape))
    return ParamReport(per_layer, sum(per_layer.values()))


# ---------------------------------------------------------------------------
# the executor
# ---------------------------------------------------------------------------


class Network:
    """Executable network: a lowered NetworkSpec plus its parameter store.

    The parameter store maps tensor names to numpy arrays and is owned
    exclusively by one trainer at a time; infer-mode forward with frozen
    parameters is safe to share.
    """

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray] | None = None):
        self.spec = spec
        self.pipeline_nodes: list[list[Node]] = []
        feat_widths: list[int] = []
        for i, pipe in enumerate(spec.pipelines):
            nodes = _lower_pipeline(f"pipe{i}", pipe.blocks, 1)
            self.pipeline_nodes.append(nodes)
            feat_widths.append(self._pipeline_feature_width(pipe.blocks))
        self.feature_widths = feat_widths
        self.tail_nodes = self._lower_tail(sum(feat_widths))
        self.params = params
        if params is not None:
            self._check_store(params)
        self._caches = None  # set by a train-mode forward

    # -- construction helpers ------------------------------------------

    @classmethod
    def structure_only(cls, spec: NetworkSpec) -> "Network":
        return cls(spec, params=None)

    def _pipeline_feature_width(self, blocks: tuple[BlockSpec, ...]) -> int:
        side = self.spec.input_side
        ch = 1
        for blk in blocks:
            if blk.kind == "conv_block":
                ch = blk.attrs["filters"]
            elif blk.kind == "inception_block":
                ch = blk.attrs["out_channels"]
            elif blk.kind == "maxpool":
                side = pooled_extent(side, blk.attrs["pool"], blk.attrs["stride"], blk.attrs["padding"])
            elif blk.kind == "global_avgpool":
                return ch
            elif blk.kind == "flatten":
                return ch * side**3
        raise InvalidConfig("pipeline must end in global_avgpool or flatten")

    def _lower_tail(self, concat_width: int) -> list[Node]:
        nodes: list[Node] = []
        width = concat_width
        for i, blk in enumerate(self.spec.tail):
            base = f"tail/blk{i}"
            if blk.kind == "concat":
                continue  # fusion concat is performed by the executor itself
            if blk.kind == "dropout":
                nodes.append(Node("dropout", base, {"keep_prob": blk.attrs["keep_prob"]}))
            elif blk.kind == "dense":
                nodes.append(
                    Node("dense", base, {"f_in": width, "f_out": blk.attrs["width"]})
                )
                width = blk.attrs["width"]
                if blk.attrs.get("activation") == "relu":
                    nodes.append(Node("relu", f"{base}/relu"))
            elif blk.kind == "softmax":
                nodes.append(Node("softmax", base))
            else:
                raise InvalidConfig(f"block kind {blk.kind!r} not valid in the tail")
        if width != self.spec.class_count:
            raise InvalidConfig(
                f"tail ends with width {width}, expected {self.spec.class_count} classes"
            )
        return nodes

    def param_specs(self) -> list[ParamSpec]:
        specs: list[ParamSpec] = []
        for nodes in self.pipeline_nodes:
            for n in nodes:
                specs += _node_param_specs(n)
        for n in self.tail_nodes:
            specs += _node_param_specs(n)
        return specs

    def _check_store(self, params: dict[str, np.ndarray]) -> None:
        for ps in self.param_specs():
            if ps.name not in params:
                raise ShapeMismatch(f"parameter store is missing {ps.name}")
            if tuple(params[ps.name].shape) != ps.shape:
                raise ShapeMismatch(
                    f"{ps.name}: store shape {params[ps.name].shape} != spec {ps.shape}"
                )

    # -- parameter views -------------------------------------------------

    def _conv_params(self, name: str) -> ConvParams:
        return ConvParams(self.params[f"{name}/w"], self.params[f"{name}/b"])

    def _bn_params(self, name: str) -> BatchNormParams:
        p = self.params
        return BatchNormParams(
            p[f"{name}/gamma"], p[f"{name}/beta"], p[f"{name}/rm"], p[f"{name}/rv"]
        )

    def _dense_params(self, name: str) -> DenseParams:
        return DenseParams(self.params[f"{name}/w"], self.params[f"{name}/b"])

    # -- forward ----------------------------------------------------------

    def _forward_nodes(self, nodes, x, mode, rng, caches):
        # pipeline activations flow in the channel-major batch layout
        # [C, N, D, H, W]; the tail sees feature matrices [N, F]
        for node in nodes:
            if node.kind == "conv":
                cache = (node, x)
                x = layers.conv3d_forward_cm(x, self._conv_params(node.name))
            elif node.kind == "bn":
                x, bn_cache = layers.batchnorm3d_forward_cm(
                    x, self._bn_params(node.name), mode
                )
                cache = (node, bn_cache)
            elif node.kind == "relu":
                cache = (node, x)
                x = layers.relu(x)
            elif node.kind == "maxpool":
                x, mp_cache = layers.maxpool3d_forward_cm(
                    x, node.attrs["pool"], node.attrs["stride"], node.attrs["padding"]
                )
                cache = (node, mp_cache)
            elif node.kind == "gap":
                cache = (node, x.shape)
                x = layers.avgpool3d_global_cm(x).T  # -> [N, C]
            elif node.kind == "flatten":
                cache = (node, x.shape)
                x = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(
                    x.shape[1], -1
                )
            elif node.kind == "dropout":
                x, mask = layers.dropout(x, node.attrs["keep_prob"], mode, rng)
                cache = (node, mask)
            elif node.kind == "dense":
                cache = (node, x)
                x = layers.dense_forward(x, self._dense_params(node.name))
            elif node.kind == "softmax":
                x = layers.softmax(x)
                cache = (node, x)
            elif node.kind == "branch":
                outs = []
                band_caches = []
                for band in node.bands:
                    sub: list = []
                    outs.append(self._forward_nodes(band, x, mode, rng, sub))
                    band_caches.append(sub)
                cache = (node, (x.shape, band_caches))
                x = np.concatenate(outs, axis=0)
            else:
                raise InvalidConfig(f"unknown node kind {node.kind!r}")
            if caches is not None:
                caches.append(cache)
        return x

    def forward_batch(
        self,
        inputs: dict[str, np.ndarray],
        mode: str = "infer",
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Run a batch through every pipeline and the fusion tail.

        inputs maps each pipeline input name to a [N, 1, S, S, S] array.
        Returns class probabilities [N, K]. In train mode the caches
        needed by backward_batch are retained.
        """
        if self.params is None:
            raise InvalidMode("network has no parameter store attached")
        if mode not in ("train", "infer"):
            raise InvalidConfig(f"mode must be 'train' or 'infer', got {mode!r}")
        missing = [n for n in self.spec.input_names if n not in inputs]
        if missing:
            raise ShapeMismatch(f"missing pipeline inputs: {missing}")
        n = None
        side = self.spec.input_side
        for name in self.spec.input_names:
            arr = inputs[name]
            if arr.ndim != 5 or arr.shape[1] != 1 or arr.shape[2:] != (side,) * 3:
                raise ShapeMismatch(
                    f"input {name!r} must be [N, 1, {side}, {side}, {side}], got {arr.shape}"
                )
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise ShapeMismatch("pipeline inputs disagree on batch size")

        collect = mode == "train"
        pipe_caches: list[list] = []
        feats = []
        for pname, nodes in zip(self.spec.input_names, self.pipeline_nodes):
            sub: list = [] if collect else None
            # [N, 1, S, S, S] -> channel-major [1, N, S, S, S]; a pure
            # view since the channel extent is 1
            x = inputs[pname].swapaxes(0, 1)
            feats.append(self._forward_nodes(nodes, x, mode, rng, sub))
            pipe_caches.append(sub)
        fused = np.concatenate(feats, axis=1)
        tail_caches: list = [] if collect else None
        probs = self._forward_nodes(self.tail_nodes, fused, mode, rng, tail_caches)
        if collect:
            self._caches = {"pipes": pipe_caches, "tail": tail_caches, "batch": n}
        else:
            self._caches = None
        return probs

    def forward(
        self,
        inputs: dict[str, np.ndarray],
        mode: str = "infer",
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Single-volume convenience wrapper: inputs are [1, S, S, S] each."""
        batched = {k: v[None] for k, v in inputs.items()}
        return self.forward_batch(batched, mode, rng)[0]

    # -- backward ---------------------------------------------------------

    def _backward_nodes(self, caches, grad, grads, stop_entry=False):
        for i in range(len(caches) - 1, -1, -1):
            node, cache = caches[i]
            if node.kind == "conv":
                # the entry conv of a pipeline does not need dL/dinput
                # unless the caller asked for input gradients
                need = not (stop_entry and i == 0)
                grad, cg = layers.conv3d_backward_cm(
                    cache, self._conv_params(node.name), grad, need_input_grad=need
                )
                grads[f"{node.name}/w"] = cg.weights
                grads[f"{node.name}/b"] = cg.bias
            elif node.kind == "bn":
                grad, bg = layers.batchnorm3d_backward_cm(cache, grad)
                grads[f"{node.name}/gamma"] = bg.gamma
                grads[f"{node.name}/beta"] = bg.beta
            elif node.kind == "relu":
                grad = layers.relu_backward(cache, grad)
            elif node.kind == "maxpool":
                grad = layers.maxpool3d_backward_cm(cache, grad)
            elif node.kind == "gap":
                grad = layers.avgpool3d_global_backward_cm(cache, grad.T)
            elif node.kind == "flatten":
                c, n = cache[0], cache[1]
                grad = np.ascontiguousarray(
                    grad.reshape((n, c) + cache[2:]).transpose(1, 0, 2, 3, 4)
                )
            elif node.kind == "dropout":
                grad = layers.dropout_backward(cache, node.attrs["keep_prob"], grad)
            elif node.kind == "dense":
                grad, dg = layers.dense_backward(
                    cache, self._dense_params(node.name), grad
                )
                grads[f"{node.name}/w"] = dg.weights
                grads[f"{node.name}/b"] = dg.bias
            elif node.kind == "softmax":
                # the caller supplies the fused softmax+cross-entropy
                # gradient w.r.t. the logits, so this node is transparent
                continue
            elif node.kind == "branch":
                in_shape, band_caches = cache
                widths = node.attrs["widths"]
                grad_in = np.zeros(in_shape, dtype=grad.dtype)
                offset = 0
                for band_cache, w in zip(band_caches, widths):
                    g_band = grad[offset : offset + w]
                    offset += w
                    grad_in += self._backward_nodes(band_cache, g_band, grads)
                grad = grad_in
        return grad

    def backward_batch(
        self, targets: np.ndarray, need_input_grads: bool = False
    ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Gradients of the mean cross-entropy w.r.t. every trainable tensor.

        Must follow a train-mode forward on the same batch. Returns
        (parameter gradients, input gradients); the latter are keyed by
        pipeline input name and only computed when ``need_input_grads``
        is set (training has no use for them).
        """
        if self._caches is None:
            raise InvalidMode("backward requires a preceding train-mode forward")
        caches = self._caches
        self._caches = None
        n = caches["batch"]
        if targets.shape != (n, self.spec.class_count):
            raise ShapeMismatch(
                f"targets shape {targets.shape} != {(n, self.spec.class_count)}"
            )
        # tail caches end with softmax; its stored output combines with
        # the targets into the fused cross-entropy logit gradient
        probs = self._tail_probs(caches)
        grad = (probs - targets) / n
        grads: dict[str, np.ndarray] = {}
        grad = self._backward_nodes(caches["tail"], grad, grads)
        input_grads: dict[str, np.ndarray] = {}
        offset = 0
        for pname, width, pipe_cache in zip(
            self.spec.input_names, self.feature_widths, caches["pipes"]
        ):
            g = grad[:, offset : offset + width]  # tail layout is [N, F]
            offset += width
            g_in = self._backward_nodes(
                pipe_cache, g, grads, stop_entry=not need_input_grads
            )
            if need_input_grads:
                input_grads[pname] = g_in.swapaxes(0, 1)  # back to [N, 1, S, S, S]
        return grads, input_grads

    def _tail_probs(self, caches) -> np.ndarray:
        node, cache = caches["tail"][-1]
        if node.kind != "softmax":
            raise InvalidConfig("fusion tail must end in softmax")
        return cache

    # -- gradient-check support -------------------------------------------

    def selection_state(self) -> bytes:
        """Digest of the active piecewise-linear branches of the last
        train-mode forward (ReLU signs and max-pool argmax picks).

        Finite-difference verification must discard perturbations that
        flip any of these selections: the loss is not differentiable
        across such a flip, so a central difference there measures the
        kink, not the gradient.
        """
        if self._caches is None:
            raise InvalidMode("selection state requires a preceding train-mode forward")
        digest = hashlib.sha256()

        def walk(entries):
            for node, cache in entries:
                if node.kind == "relu":
                    digest.update((cache > 0).tobytes())
                elif node.kind == "maxpool":
                    digest.update(cache["argmax"].tobytes())
                elif node.kind == "branch":
                    _, band_caches = cache
                    for band in band_caches:
                        walk(band)

        for pipe in self._caches["pipes"]:
            walk(pipe)
        walk(self._caches["tail"])
        return digest.digest()


# ---------------------------------------------------------------------------
# architecture description export
# ---------------------------------------------------------------------------


def describe(spec: NetworkSpec) -> dict:
    """Layer-by-layer report: output shapes and trainable parameter counts."""
    report = count_parameters(spec)
    pipelines = []
    for i, pipe in enumerate(spec.pipelines):
        side = spec.input_side
        ch = 1
        rows = []
        for j, blk in enumerate(pipe.blocks):
            name = f"pipe{i}/blk{j}"
            if blk.kind == "conv_block":
                ch = blk.attrs["filters"]
                out = [ch, side, side, side]
            elif blk.kind == "inception_block":
                ch = blk.attrs["out_channels"]
                out = [ch, side, side, side]
            elif blk.kind == "maxpool":
                side = pooled_extent(side, blk.attrs["pool"], blk.attrs["stride"], blk.attrs["padding"])
                out = [ch, side, side, side]
            elif blk.kind == "global_avgpool":
                out = [ch]
            elif blk.kind == "flatten":
                out = [ch * side**3]
            else:
                out = []
            params = sum(
                v for k, v in report.per_layer.items() if k == name or k.startswith(name + "/")
            )
            rows.append(
                {"name": name, "kind": blk.kind, "output_shape": out, "parameters": params}
            )
        pipelines.append({"input": pipe.input_name, "layers": rows})
    net = Network.structure_only(spec)
    width = sum(net.feature_widths)
    tail_rows = [
        {"name": "tail/concat", "kind": "concat", "output_shape": [width], "parameters": 0}
    ]
    for j, blk in enumerate(spec.tail):
        if blk.kind == "concat":
            continue
        name = f"tail/blk{j}"
        if blk.kind == "dense":
            width = blk.attrs["width"]
        params = sum(
            v for k, v in report.per_layer.items() if k == name or k.startswith(name + "/")
        )
        tail_rows.append(
            {"name": name, "kind": blk.kind, "output_shape": [width], "parameters": params}
        )
    return {
        "preset": spec.preset,
        "family": spec.family,
        "class_count": spec.class_count,
        "input_side": spec.input_side,
        "inputs": list(spec.input_names),
        "pipelines": pipelines,
        "tail": tail_rows,
        "total_parameters": report.total,
    }


def describe_json(spec: NetworkSpec) -> str:
    return json.dumps(describe(spec), indent=2)
