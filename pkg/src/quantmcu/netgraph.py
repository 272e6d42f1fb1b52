"""Static network model.

Shape inference, receptive-field arithmetic, patch splitting into dataflow
branches, and MAC/BitOPs/memory accounting. Everything here is pure
integer arithmetic on immutable descriptions; no tensor data is touched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import (
    NetworkFormatError,
    NonPositiveShape,
    SpatialOnly,
    UnevenGrid,
    UnknownBitwidth,
)

LAYER_KINDS = ("conv", "depthwise_conv", "maxpool", "avgpool", "fc")
SPATIAL_KINDS = ("conv", "depthwise_conv", "maxpool", "avgpool")
ACTIVATIONS = ("none", "relu")

# Bitwidths the accounting accepts: sub-byte candidates, the 8-bit
# deployment baseline, and 32 as the "no quantization" sentinel.
VALID_BITWIDTHS = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    out_channels: int | None = None
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise NetworkFormatError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise NetworkFormatError(f"unknown activation {self.activation!r}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise NetworkFormatError(
                f"bad kernel/stride/padding for {self.kind}: "
                f"{self.kernel}/{self.stride}/{self.padding}"
            )
        if self.kind in ("conv", "fc"):
            if self.out_channels is None or self.out_channels < 1:
                raise NetworkFormatError(f"{self.kind} requires out_channels >= 1")
        elif self.out_channels is not None:
            raise NetworkFormatError(f"{self.kind} must not set out_channels")

    @property
    def is_spatial(self) -> bool:
        return self.kind in SPATIAL_KINDS


@dataclass(frozen=True)
class FeatureMapShape:
    """Shape of feature map ``index``; index 0 is the network input."""

    height: int
    width: int
    channels: int
    index: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise NonPositiveShape(
                f"feature map {self.index}: "
                f"{self.height}x{self.width}x{self.channels}"
            )

    @property
    def elements(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class Region:
    """Half-open spatial window [row_start, row_end) x [col_start, col_end)."""

    row_start: int
    row_end: int
    col_start: int
    col_end: int

    def __post_init__(self):
        if self.row_end <= self.row_start or self.col_end <= self.col_start:
            raise NonPositiveShape(f"empty region {self}")

    @property
    def rows(self) -> int:
        return self.row_end - self.row_start

    @property
    def cols(self) -> int:
        return self.col_end - self.col_start

    @property
    def pixels(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]  # (height, width, channels)
    layers: tuple[LayerSpec, ...]
    patch_grid: tuple[int, int] = (1, 1)
    patch_depth: int = 0

    def __post_init__(self):
        if not self.layers:
            raise NetworkFormatError("network needs at least one layer")
        if self.patch_grid[0] < 1 or self.patch_grid[1] < 1:
            raise NetworkFormatError(f"patch grid must be >= 1x1, got {self.patch_grid}")
        if not 0 <= self.patch_depth <= len(self.layers):
            raise NetworkFormatError(
                f"patch depth {self.patch_depth} outside 0..{len(self.layers)}"
            )
        seen_fc = False
        for i, layer in enumerate(self.layers):
            if layer.kind == "fc":
                seen_fc = True
            elif seen_fc:
                raise NetworkFormatError(
                    f"layer {i}: spatial layer after fc is not supported"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class DataflowBranch:
    """One patch's lineage through the patch stage.

    ``regions[d]`` is the window of feature map d this branch reads or
    computes (d = 0..patch_depth). ``overlap_elements[d]`` is this branch's
    proportional share of the elements at depth d that another branch also
    computes.
    """

    patch_id: tuple[int, int]
    regions: tuple[Region, ...]
    overlap_elements: tuple[float, ...]


@dataclass(frozen=True)
class MemoryModel:
    """Feature-map memory: Mem(n, b) = ceil(n * b / 8) bytes.

    ``mem_limit`` is the device budget for each adjacent feature-map pair;
    None means unconstrained.
    """

    mem_limit: int | None = None

    @staticmethod
    def mem(elements: int, bits: int) -> int:
        if bits not in VALID_BITWIDTHS:
            raise UnknownBitwidth(f"unsupported bitwidth {bits}")
        return (elements * bits + 7) // 8

    def fits(self, pair_bytes: int) -> bool:
        return self.mem_limit is None or pair_bytes <= self.mem_limit


def _out_dim(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(net: NetworkSpec) -> list[FeatureMapShape]:
    """Feature-map shapes 0..N; index 0 is the input, index j the output of layer j-1."""
    h, w, c = net.input_shape
    if h < 1 or w < 1 or c < 1:
        raise NonPositiveShape(f"input shape {net.input_shape}")
    shapes = [FeatureMapShape(h, w, c, index=0)]
    for i, layer in enumerate(net.layers):
        prev = shapes[-1]
        if layer.kind == "fc":
            shapes.append(FeatureMapShape(1, 1, layer.out_channels, index=i + 1))
            continue
        oh = _out_dim(prev.height, layer.kernel, layer.stride, layer.padding)
        ow = _out_dim(prev.width, layer.kernel, layer.stride, layer.padding)
        oc = layer.out_channels if layer.kind == "conv" else prev.channels
        if oh < 1 or ow < 1:
            raise NonPositiveShape(
                f"layer {i} ({layer.kind} k={layer.kernel} s={layer.stride}) "
                f"maps {prev.height}x{prev.width} to {oh}x{ow}"
            )
        shapes.append(FeatureMapShape(oh, ow, oc, index=i + 1))
    return shapes


def _invert_layer(layer: LayerSpec, out: Region, in_h: int, in_w: int) -> Region:
    """Minimal input window that determines ``out``, clipped to the map."""
    k, s, p = layer.kernel, layer.stride, layer.padding
    r0 = max(out.row_start * s - p, 0)
    r1 = min((out.row_end - 1) * s - p + k, in_h)
    c0 = max(out.col_start * s - p, 0)
    c1 = min((out.col_end - 1) * s - p + k, in_w)
    if r1 <= r0 or c1 <= c0:
        raise NonPositiveShape(f"receptive window of {out} collapsed after clipping")
    return Region(r0, r1, c0, c1)


def receptive_region(net: NetworkSpec, depth: int, out: Region) -> Region:
    """Depth-0 window whose values determine ``out`` on feature map ``depth``."""
    if not 0 <= depth <= net.num_layers:
        raise ValueError(f"depth {depth} outside 0..{net.num_layers}")
    shapes = infer_shapes(net)
    fm = shapes[depth]
    if not (0 <= out.row_start and out.row_end <= fm.height
            and 0 <= out.col_start and out.col_end <= fm.width):
        raise ValueError(f"region {out} outside the depth-{depth} map")
    region = out
    for j in range(depth - 1, -1, -1):
        layer = net.layers[j]
        if not layer.is_spatial:
            raise SpatialOnly(f"layer {j} ({layer.kind}) has no spatial footprint")
        region = _invert_layer(layer, region, shapes[j].height, shapes[j].width)
    return region


def _tile_bounds(size: int, parts: int, strict: bool) -> list[tuple[int, int]]:
    if parts > size:
        raise UnevenGrid(f"cannot split {size} rows/cols into {parts} tiles")
    if size % parts != 0 and strict:
        raise UnevenGrid(f"{parts} tiles do not divide {size} evenly")
    base = size // parts
    bounds = [(i * base, (i + 1) * base) for i in range(parts)]
    # last tile absorbs the remainder
    bounds[-1] = (bounds[-1][0], size)
    return bounds


def split_patches(net: NetworkSpec, strict: bool = False) -> list[DataflowBranch]:
    """Tile the depth-s map and back-propagate each tile's window per depth."""
    shapes = infer_shapes(net)
    s = net.patch_depth
    fm = shapes[s]
    rows, cols = net.patch_grid
    row_bounds = _tile_bounds(fm.height, rows, strict)
    col_bounds = _tile_bounds(fm.width, cols, strict)

    all_regions: dict[tuple[int, int], list[Region]] = {}
    for r, (r0, r1) in enumerate(row_bounds):
        for c, (c0, c1) in enumerate(col_bounds):
            regions = [Region(r0, r1, c0, c1)]
            for d in range(s, 0, -1):
                layer = net.layers[d - 1]
                if not layer.is_spatial:
                    raise SpatialOnly(
                        f"layer {d - 1} ({layer.kind}) inside the patch stage"
                    )
                regions.append(
                    _invert_layer(layer, regions[-1],
                                  shapes[d - 1].height, shapes[d - 1].width)
                )
            all_regions[(r, c)] = regions[::-1]  # index by depth 0..s

    # Excess elements per depth, attributed proportionally to region size.
    branches = []
    totals = []
    for d in range(s + 1):
        covered = sum(reg[d].pixels for reg in all_regions.values())
        totals.append((covered, max(covered - shapes[d].height * shapes[d].width, 0)))
    for patch_id in sorted(all_regions):
        regions = all_regions[patch_id]
        overlaps = []
        for d in range(s + 1):
            covered, excess = totals[d]
            share = regions[d].pixels / covered if covered else 0.0
            overlaps.append(excess * share * shapes[d].channels)
        branches.append(
            DataflowBranch(patch_id, tuple(regions), tuple(overlaps))
        )
    return branches


def redundancy_ratio(net: NetworkSpec, branches: list[DataflowBranch]) -> float:
    """Input elements read by all branches over unique input elements, minus one."""
    shapes = infer_shapes(net)
    unique = shapes[0].elements
    read = sum(b.regions[0].pixels * shapes[0].channels for b in branches)
    return read / unique - 1.0


def branch_shapes(net: NetworkSpec, branch: DataflowBranch) -> list[FeatureMapShape]:
    """Branch-local feature-map shapes (region extent x map channels)."""
    shapes = infer_shapes(net)
    out = []
    for d, region in enumerate(branch.regions):
        out.append(FeatureMapShape(region.rows, region.cols, shapes[d].channels, index=d))
    return out


def mac_count(net: NetworkSpec, region_shapes: list[FeatureMapShape]) -> list[int]:
    """Per-layer MAC counts for the chain covered by ``region_shapes``.

    ``region_shapes`` holds len+1 consecutive feature-map shapes starting at
    the input, so passing a branch's local shapes counts only its patch
    stage. Pooling layers cost zero MACs.
    """
    macs = []
    for j in range(len(region_shapes) - 1):
        layer = net.layers[j]
        cin = region_shapes[j].channels
        out = region_shapes[j + 1]
        if layer.kind == "conv":
            macs.append(out.elements * layer.kernel ** 2 * cin)
        elif layer.kind == "depthwise_conv":
            macs.append(out.elements * layer.kernel ** 2)
        elif layer.kind == "fc":
            macs.append(region_shapes[j].elements * out.channels)
        else:
            macs.append(0)
    return macs


def bitops(macs: list[int], weight_bits: int, act_bits: list[int]) -> int:
    """Total BitOPs: each layer's MACs weighted by weight and input-map bits."""
    if weight_bits not in VALID_BITWIDTHS:
        raise UnknownBitwidth(f"weight bitwidth {weight_bits}")
    if len(act_bits) < len(macs):
        raise ValueError("need one activation bitwidth per layer input")
    total = 0
    for j, m in enumerate(macs):
        b = act_bits[j]
        if b not in VALID_BITWIDTHS:
            raise UnknownBitwidth(f"activation bitwidth {b}")
        total += m * weight_bits * b
    return total


def peak_memory(bits: list[int], shapes: list[FeatureMapShape],
                mm: MemoryModel) -> int:
    """Largest adjacent-pair footprint; a single map degenerates to its own size."""
    if len(bits) != len(shapes):
        raise ValueError("one bitwidth per feature map required")
    if not shapes:
        raise ValueError("empty feature-map chain")
    sizes = [mm.mem(s.elements, b) for s, b in zip(shapes, bits)]
    if len(sizes) == 1:
        return sizes[0]
    return max(sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1))


# --- network description file ------------------------------------------------

_TOP_KEYS = {"name", "input", "layers", "patch"}
_INPUT_KEYS = {"height", "width", "channels"}
_LAYER_KEYS = {"kind", "kernel", "stride", "padding", "out_channels", "activation"}
_PATCH_KEYS = {"grid", "depth"}


def _require_int(obj, key, where, minimum=None):
    value = obj.get(key)
    if not isinstance(value, int) or isinstance(value, bool):
        raise NetworkFormatError(f"{where}.{key}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise NetworkFormatError(f"{where}.{key}: must be >= {minimum}, got {value}")
    return value


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise NetworkFormatError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise NetworkFormatError(f"{where}: unknown keys {sorted(unknown)}")


def network_from_dict(doc: dict) -> NetworkSpec:
    _check_keys(doc, _TOP_KEYS, "network")
    for key in _TOP_KEYS:
        if key not in doc:
            raise NetworkFormatError(f"network: missing key {key!r}")
    if not isinstance(doc["name"], str):
        raise NetworkFormatError("network.name: expected a string")

    _check_keys(doc["input"], _INPUT_KEYS, "input")
    h = _require_int(doc["input"], "height", "input", 1)
    w = _require_int(doc["input"], "width", "input", 1)
    c = _require_int(doc["input"], "channels", "input", 1)

    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise NetworkFormatError("layers: expected a nonempty array")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        where = f"layers[{i}]"
        _check_keys(entry, _LAYER_KEYS, where)
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise NetworkFormatError(f"{where}.kind: expected one of {LAYER_KINDS}")
        kwargs = {"kind": kind}
        if "kernel" in entry:
            kwargs["kernel"] = _require_int(entry, "kernel", where, 1)
        elif kind != "fc":
            raise NetworkFormatError(f"{where}: {kind} requires kernel")
        if "stride" in entry:
            kwargs["stride"] = _require_int(entry, "stride", where, 1)
        if "padding" in entry:
            kwargs["padding"] = _require_int(entry, "padding", where, 0)
        if "out_channels" in entry:
            kwargs["out_channels"] = _require_int(entry, "out_channels", where, 1)
        if "activation" in entry:
            if entry["activation"] not in ACTIVATIONS:
                raise NetworkFormatError(
                    f"{where}.activation: expected one of {ACTIVATIONS}"
                )
            kwargs["activation"] = entry["activation"]
        try:
            layers.append(LayerSpec(**kwargs))
        except NetworkFormatError as exc:
            raise NetworkFormatError(f"{where}: {exc}") from None

    _check_keys(doc["patch"], _PATCH_KEYS, "patch")
    grid = doc["patch"].get("grid")
    if (not isinstance(grid, list) or len(grid) != 2
            or not all(isinstance(g, int) and not isinstance(g, bool) for g in grid)):
        raise NetworkFormatError("patch.grid: expected [rows, cols]")
    depth = _require_int(doc["patch"], "depth", "patch", 0)

    try:
        net = NetworkSpec(
            name=doc["name"],
            input_shape=(h, w, c),
            layers=tuple(layers),
            patch_grid=(grid[0], grid[1]),
            patch_depth=depth,
        )
        infer_shapes(net)  # surfaces NonPositiveShape early
    except (NetworkFormatError, NonPositiveShape) as exc:
        raise NetworkFormatError(str(exc)) from None
    return net


def load_network(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkFormatError(
                f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}"
            ) from None
    return network_from_dict(doc)
