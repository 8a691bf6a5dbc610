"""
Dilated Wide Activation Network (DWAN)
======================================

Topology (s = intensity_scale):

    input x s ─ head conv 3x3x32 ─┬─ local pathway:  4 wide-activation blocks (dilation 1) ─┐
                                  └─ global pathway: 4 wide-activation blocks (2,4,8,16)  ─┴─ concat ─ fuse conv 3x3x1 ─┐
    input x s ─ skip conv 3x3x1 ─────────────────────────────────────────────────────────────────────────────────── add ─ tail conv 3x3x1 ─ x 1/s ─ output

Each wide-activation block is conv 3x3 (32->128) + ReLU + conv 3x3 (128->32)
with a residual add around it. In the global pathway only the first (wide)
conv of block k is dilated. No normalization layers.

The "residual" initialization starts the network at the identity map: every
block's second conv and the fuse conv are zero, the skip and tail convs are
centered unit impulses, and the remaining convs are He-normal. The "he"
scheme draws every weight He-normal.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import autodiff as ad
from .exceptions import InvalidArgumentError, ShapeMismatchError, WeightFileError
from .tensor import Tensor, default_dtype
from .tensor_io import decode_named_tensors, encode_named_tensors
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class DwanSpec:
    base_channels: int = 32
    expansion_channels: int = 128
    blocks_per_pathway: int = 4
    global_dilations: Tuple[int, ...] = (2, 4, 8, 16)
    kernel: int = 3
    # a power of two keeps scale-in / scale-out exact
    intensity_scale: float = 1.0 / 128.0

    def __post_init__(self):
        object.__setattr__(self, "global_dilations", tuple(int(d) for d in self.global_dilations))
        object.__setattr__(self, "intensity_scale", float(self.intensity_scale))
        if self.base_channels < 1 or self.expansion_channels < 1:
            raise InvalidArgumentError("channel counts must be positive")
        if self.blocks_per_pathway < 1:
            raise InvalidArgumentError("blocks_per_pathway must be >= 1")
        if len(self.global_dilations) != self.blocks_per_pathway:
            raise InvalidArgumentError(
                f"{len(self.global_dilations)} global dilations for {self.blocks_per_pathway} blocks"
            )
        if any(d < 1 for d in self.global_dilations):
            raise InvalidArgumentError(f"dilations must be >= 1, got {self.global_dilations}")
        if self.kernel < 1:
            raise InvalidArgumentError("kernel must be >= 1")
        if not (np.isfinite(self.intensity_scale) and self.intensity_scale > 0):
            raise InvalidArgumentError(f"intensity_scale must be positive, got {self.intensity_scale}")


class ConvLayer(NamedTuple):
    name: str
    in_channels: int
    out_channels: int
    dilation: int
    kernel: int
    pathway: str
    block: int


def conv_layers(spec: DwanSpec) -> List[ConvLayer]:
    """Every conv of the network in parameter order."""
    k, base, wide = spec.kernel, spec.base_channels, spec.expansion_channels
    layers = [ConvLayer("head.conv", 1, base, 1, k, "head", 0)]
    for pathway in ("local", "global"):
        for block in range(1, spec.blocks_per_pathway + 1):
            first_dilation = spec.global_dilations[block - 1] if pathway == "global" else 1
            prefix = f"{pathway}.block{block}"
            layers.append(ConvLayer(f"{prefix}.conv1", base, wide, first_dilation, k, pathway, block))
            layers.append(ConvLayer(f"{prefix}.conv2", wide, base, 1, k, pathway, block))
    layers.append(ConvLayer("fuse.conv", 2 * base, 1, 1, k, "fuse", 0))
    layers.append(ConvLayer("skip.conv", 1, 1, 1, k, "skip", 0))
    layers.append(ConvLayer("tail.conv", 1, 1, 1, k, "tail", 0))
    return layers


class NetworkParameters:
    """Ordered, uniquely named collection of learnable tensors."""

    def __init__(self, items: Sequence[Tuple[str, Tensor]]):
        self._items: List[Tuple[str, Tensor]] = []
        self._index: Dict[str, int] = {}
        for name, tensor in items:
            if name in self._index:
                raise InvalidArgumentError(f"duplicate parameter name {name!r}")
            self._index[name] = len(self._items)
            self._items.append((name, tensor if isinstance(tensor, Tensor) else Tensor(tensor)))

    def __getitem__(self, name: str) -> Tensor:
        return self._items[self._index[name]][1]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> List[str]:
        return [name for name, _ in self._items]

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._items)

    def replace(self, updates: Dict[str, Tensor]) -> "NetworkParameters":
        """New collection with some tensors swapped; order is preserved."""
        unknown = set(updates) - set(self._index)
        if unknown:
            raise InvalidArgumentError(f"unknown parameters {sorted(unknown)}")
        return NetworkParameters([(name, updates.get(name, tensor)) for name, tensor in self._items])

    def scalar_count(self) -> int:
        return sum(tensor.size for _, tensor in self._items)

    def equal(self, other: "NetworkParameters") -> bool:
        if self.names() != other.names():
            return False
        return all(tensor.equal(other[name]) for name, tensor in self._items)

    def astype(self, dtype) -> "NetworkParameters":
        return NetworkParameters([(name, tensor.astype(dtype)) for name, tensor in self._items])

    def __repr__(self) -> str:
        return f"NetworkParameters({len(self)} tensors, {self.scalar_count()} scalars)"


INIT_SCHEMES = ("residual", "he")

ZERO_INIT_LAYERS = ("fuse.conv",)
IMPULSE_INIT_LAYERS = ("skip.conv", "tail.conv")


def _impulse(layer: ConvLayer) -> np.ndarray:
    weight = np.zeros((layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
    weight[0, 0, layer.kernel // 2, layer.kernel // 2] = 1.0
    return weight


def build(spec: DwanSpec, seed: int, scheme: str = "residual") -> NetworkParameters:
    """
    Seeded parameters with zero biases.

    Every weight is first drawn He-normal (std = sqrt(2 / (C*kh*kw))) so both
    schemes consume the same random stream. ``residual`` then zeroes each
    block's second conv and the fuse conv and sets the skip and tail convs to
    unit impulses, so the untrained network returns its input.
    """
    if scheme not in INIT_SCHEMES:
        raise InvalidArgumentError(f"unknown init scheme {scheme!r}, expected one of {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    items = []
    for layer in conv_layers(spec):
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        weight = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        if scheme == "residual":
            if layer.name in ZERO_INIT_LAYERS or layer.name.endswith(".conv2"):
                weight = np.zeros(shape)
            elif layer.name in IMPULSE_INIT_LAYERS:
                weight = _impulse(layer)
        items.append((f"{layer.name}.weight", Tensor(weight, dtype=dtype)))
        items.append((f"{layer.name}.bias", Tensor.zeros((layer.out_channels,), dtype=dtype)))
    logger.info(f"Built DWAN parameters: {len(items)} tensors (seed={seed}, init={scheme})")
    return NetworkParameters(items)


def identity_params(spec: DwanSpec) -> NetworkParameters:
    """All-zero network whose skip and tail convs pass the input through unchanged."""
    dtype = default_dtype()
    items = []
    for layer in conv_layers(spec):
        if layer.name in IMPULSE_INIT_LAYERS:
            weight = _impulse(layer)
        else:
            weight = np.zeros((layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
        items.append((f"{layer.name}.weight", Tensor(weight, dtype=dtype)))
        items.append((f"{layer.name}.bias", Tensor.zeros((layer.out_channels,), dtype=dtype)))
    return NetworkParameters(items)


class DwanGraph(NamedTuple):
    output: ad.Node
    head: ad.Node
    local: ad.Node
    global_: ad.Node


class DwanModel:
    """Wires DWAN parameters into a compute graph."""

    def __init__(self, spec: Optional[DwanSpec] = None):
        self.spec = spec or DwanSpec()
        self.layers = {layer.name: layer for layer in conv_layers(self.spec)}

    def _conv(self, pnodes: Dict[str, ad.Node], name: str, x: ad.Node) -> ad.Node:
        layer = self.layers[name]
        return ad.conv2d(x, pnodes[f"{name}.weight"], pnodes[f"{name}.bias"], dilation=layer.dilation)

    def _pathway(self, pnodes: Dict[str, ad.Node], pathway: str, features: ad.Node) -> ad.Node:
        for block in range(1, self.spec.blocks_per_pathway + 1):
            prefix = f"{pathway}.block{block}"
            wide = ad.relu(self._conv(pnodes, f"{prefix}.conv1", features))
            features = ad.add(features, self._conv(pnodes, f"{prefix}.conv2", wide))
        return features

    def build_graph(self, graph: ad.Graph, pnodes: Dict[str, ad.Node], x: ad.Node) -> DwanGraph:
        if x.value.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatchError("dwan.forward", "input [N,1,H,W]", x.shape)
        scaled = ad.scale(x, self.spec.intensity_scale)
        head = self._conv(pnodes, "head.conv", scaled)
        local = self._pathway(pnodes, "local", head)
        global_ = self._pathway(pnodes, "global", head)
        fused = self._conv(pnodes, "fuse.conv", ad.concat_channels(local, global_))
        summed = ad.add(fused, self._conv(pnodes, "skip.conv", scaled))
        tail = self._conv(pnodes, "tail.conv", summed)
        output = ad.scale(tail, 1.0 / self.spec.intensity_scale)
        return DwanGraph(output, head, local, global_)

    def graph_forward(self, graph: ad.Graph, pnodes: Dict[str, ad.Node], x: ad.Node) -> ad.Node:
        return self.build_graph(graph, pnodes, x).output


def register_parameters(graph: ad.Graph, params: NetworkParameters) -> Dict[str, ad.Node]:
    return {name: graph.parameter(name, tensor) for name, tensor in params}


def forward(params: NetworkParameters, input: Tensor, spec: Optional[DwanSpec] = None) -> Tensor:
    """Inference: [N,1,H,W] -> [N,1,H,W]."""
    input = input if isinstance(input, Tensor) else Tensor(input)
    if input.ndim != 4 or input.shape[1] != 1:
        raise ShapeMismatchError("dwan.forward", "input [N,1,H,W]", input.shape)
    graph = ad.Graph()
    pnodes = register_parameters(graph, params)
    x = graph.constant(input.astype(params["head.conv.weight"].dtype), name="input")
    return DwanModel(spec).graph_forward(graph, pnodes, x).value


def denoise_image(params: NetworkParameters, image: np.ndarray, spec: Optional[DwanSpec] = None) -> np.ndarray:
    """Convenience wrapper for a single 2-D CBF map."""
    dtype = params["head.conv.weight"].dtype
    batch = Tensor(np.asarray(image)[None, None], dtype=dtype)
    return np.array(forward(params, batch, spec).numpy()[0, 0])


# ---------------------------------------------------------------------------
# structural audit and receptive field
# ---------------------------------------------------------------------------

@dataclass
class ArchitectureAudit:
    weight_tensors: int
    bias_tensors: int
    scalar_parameters: int
    expected_scalar_parameters: int
    adds: int
    residual_adds: int
    concats: int
    local_dilations: List[int] = field(default_factory=list)
    global_dilations: List[int] = field(default_factory=list)
    mismatches: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def verify(self) -> "ArchitectureAudit":
        if self.mismatches:
            raise ShapeMismatchError("audit", "DWAN topology", "; ".join(self.mismatches))
        return self


def _conv_layer(node: ad.Node) -> str:
    """Layer name of a traced conv2d node, read from its weight parameter."""
    if node.op != "conv2d":
        return ""
    return (node.inputs[1].name or "").rsplit(".weight", 1)[0]


def _trace(spec: DwanSpec, params: NetworkParameters) -> ad.Graph:
    graph = ad.Graph()
    pnodes = register_parameters(graph, params)
    zeros = Tensor.zeros((1, 1, 4, 4), dtype=params["head.conv.weight"].dtype)
    DwanModel(spec).build_graph(graph, pnodes, graph.constant(zeros))
    return graph


def audit(spec: DwanSpec, params: Optional[NetworkParameters] = None) -> ArchitectureAudit:
    """
    Check parameter names/shapes against the DwanSpec, then trace one forward
    pass and compare the recorded convs, adds and concat with the layer table.
    """
    layers = conv_layers(spec)
    params = params if params is not None else build(spec, seed=0)
    mismatches = []

    expected_names = []
    for layer in layers:
        expected = {
            f"{layer.name}.weight": (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
            f"{layer.name}.bias": (layer.out_channels,),
        }
        for name, shape in expected.items():
            expected_names.append(name)
            if name not in params:
                mismatches.append(f"missing {name}")
            elif params[name].shape != shape:
                mismatches.append(f"{name} has shape {params[name].shape}, expected {shape}")
    extra = sorted(set(params.names()) - set(expected_names))
    if extra:
        mismatches.append(f"unexpected parameters {extra}")

    expected_scalars = sum(l.out_channels * l.in_channels * l.kernel * l.kernel + l.out_channels for l in layers)
    adds = residual_adds = concats = 0
    local_dilations: List[int] = []
    global_dilations: List[int] = []
    if not mismatches:
        graph = _trace(spec, params)
        traced: Dict[str, List[int]] = {}
        for node in graph.nodes:
            if node.op == "conv2d":
                traced.setdefault(_conv_layer(node), []).append(node.attrs["dilation"])
        for layer in layers:
            uses = traced.get(layer.name, [])
            if len(uses) != 1:
                mismatches.append(f"{layer.name} applied {len(uses)} times in the traced graph")
            elif uses[0] != layer.dilation:
                mismatches.append(f"{layer.name} traced with dilation {uses[0]}, expected {layer.dilation}")

        add_nodes = [node for node in graph.nodes if node.op == "add"]
        adds = len(add_nodes)
        residual_adds = sum(
            1 for node in add_nodes if any(_conv_layer(parent).endswith(".conv2") for parent in node.inputs)
        )
        concats = graph.count("concat")
        blocks = spec.blocks_per_pathway
        if residual_adds != 2 * blocks:
            mismatches.append(f"{residual_adds} residual adds traced, expected {2 * blocks}")
        if adds != 2 * blocks + 1:
            mismatches.append(f"{adds} adds traced, expected {2 * blocks + 1}")
        if concats != 1:
            mismatches.append(f"{concats} concats traced, expected 1")

        # dict order follows the tape
        for name, dilations in traced.items():
            if name.endswith(".conv1"):
                target = local_dilations if name.startswith("local.") else global_dilations
                target.extend(dilations)

    return ArchitectureAudit(
        weight_tensors=sum(1 for name in params.names() if name.endswith(".weight")),
        bias_tensors=sum(1 for name in params.names() if name.endswith(".bias")),
        scalar_parameters=params.scalar_count(),
        expected_scalar_parameters=expected_scalars,
        adds=adds,
        residual_adds=residual_adds,
        concats=concats,
        local_dilations=local_dilations,
        global_dilations=global_dilations,
        mismatches=mismatches,
    )


def analytic_receptive_field(spec: DwanSpec, pathway: str = "full") -> int:
    """Width of the receptive field implied by the topology alone."""
    half = spec.kernel // 2

    def pathway_radius(name: str) -> int:
        dilations = spec.global_dilations if name == "global" else (1,) * spec.blocks_per_pathway
        return sum(half * d + half for d in dilations)

    head = half
    if pathway == "local":
        radius = head + pathway_radius("local")
    elif pathway == "global":
        radius = head + pathway_radius("global")
    elif pathway == "full":
        # fuse and tail convs
        radius = head + max(pathway_radius("local"), pathway_radius("global")) + 2 * half
    else:
        raise InvalidArgumentError(f"unknown pathway {pathway!r}")
    return 2 * radius + 1


def empirical_receptive_field(params: NetworkParameters, spec: DwanSpec, pathway: str = "full",
                              size: int = 97, seed: int = 0) -> int:
    """
    Measure the receptive field from the built graph: gradient of the center
    pixel of a tap w.r.t. a random input, width of its nonzero support.
    Zero-initialized layers cut the support, so pass He-initialized params.
    """
    rng = np.random.default_rng(seed)
    dtype = params["head.conv.weight"].dtype
    graph = ad.Graph()
    pnodes = register_parameters(graph, params)
    x = graph.constant(Tensor(rng.uniform(0.0, 1.0, (1, 1, size, size)), dtype=dtype), name="impulse_input")
    taps = DwanModel(spec).build_graph(graph, pnodes, x)
    tap = {"full": taps.output, "local": taps.local, "global": taps.global_}.get(pathway)
    if tap is None:
        raise InvalidArgumentError(f"unknown pathway {pathway!r}")
    center = size // 2
    ad.backward(graph, ad.pixel_sum(tap, center, center))
    support = np.argwhere(x.grad[0, 0] != 0)
    if support.size == 0:
        return 0
    rows = support[:, 0].max() - support[:, 0].min() + 1
    cols = support[:, 1].max() - support[:, 1].min() + 1
    if rows >= size or cols >= size:
        logger.warning(f"receptive field measurement at {size}px touches the border; result is clipped")
    return int(max(rows, cols))


def describe(spec: DwanSpec, params: Optional[NetworkParameters] = None) -> str:
    """Human-readable layer table and audit summary."""
    report = audit(spec, params)
    table = pd.DataFrame(
        [
            {
                "layer": layer.name,
                "kernel": f"{layer.kernel}x{layer.kernel}",
                "in": layer.in_channels,
                "out": layer.out_channels,
                "dilation": layer.dilation,
                "parameters": layer.out_channels * layer.in_channels * layer.kernel ** 2 + layer.out_channels,
            }
            for layer in conv_layers(spec)
        ]
    )
    lines = [
        table.to_string(index=False),
        "",
        f"weight tensors:     {report.weight_tensors}",
        f"bias tensors:       {report.bias_tensors}",
        f"scalar parameters:  {report.scalar_parameters} (expected {report.expected_scalar_parameters})",
        f"adds:               {report.adds} ({report.residual_adds} residual + output skip)",
        f"concats:            {report.concats}",
        f"intensity scale:    {spec.intensity_scale:g}",
        f"local dilations:    {report.local_dilations}",
        f"global dilations:   {report.global_dilations}",
        f"receptive field:    {analytic_receptive_field(spec)} px "
        f"(local {analytic_receptive_field(spec, 'local')}, global {analytic_receptive_field(spec, 'global')})",
    ]
    if report.mismatches:
        lines.append("MISMATCHES:")
        lines.extend(f"  - {message}" for message in report.mismatches)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ASLW persistence
# ---------------------------------------------------------------------------

def save_params(params: NetworkParameters, path: PathLike) -> Path:
    return atomic_write_bytes(path, encode_named_tensors(params.items()))


def load_params(path: PathLike) -> NetworkParameters:
    path = Path(path)
    if not path.exists():
        raise WeightFileError(f"weight file not found: {path}")
    return NetworkParameters(decode_named_tensors(path.read_bytes()))
