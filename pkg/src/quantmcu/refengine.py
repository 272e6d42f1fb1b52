"""Minimal tensor interpreter for desk-scale networks.

Forward passes are written as explicit kernel-tap loops with float64
accumulation in a fixed (dy, dx, cin) order, so a branch executed on a
sub-region is bitwise identical to the same pixels of the layer-based
pass. That property is what makes patch-based execution checkable against
the conventional one.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import actstats
from .errors import (
    EmptyCalibration,
    MissingRange,
    ShapeMismatch,
    TensorFormatError,
)
from .netgraph import (
    DataflowBranch,
    LayerSpec,
    NetworkSpec,
    Region,
    infer_shapes,
)

QMTN_MAGIC = b"QMTN"
QMTN_VERSION = 1
QMTN_DTYPE_F32 = 0


# --- tensor file format -------------------------------------------------------

def save_tensor(path, array) -> None:
    """Write one little-endian QMTN record (float32, row-major)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = QMTN_MAGIC + struct.pack(
        "<BBBB", QMTN_VERSION, QMTN_DTYPE_F32, arr.ndim, 0
    )
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.tobytes())


def _parse_record(buf: bytes, offset: int, where: str) -> tuple[np.ndarray, int]:
    if len(buf) - offset < 8:
        raise TensorFormatError(f"{where}: truncated header")
    if buf[offset:offset + 4] != QMTN_MAGIC:
        raise TensorFormatError(f"{where}: bad magic {buf[offset:offset + 4]!r}")
    version, dtype, rank, _pad = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != QMTN_VERSION:
        raise TensorFormatError(f"{where}: unsupported version {version}")
    if dtype != QMTN_DTYPE_F32:
        raise TensorFormatError(f"{where}: unsupported dtype {dtype}")
    offset += 8
    if len(buf) - offset < 4 * rank:
        raise TensorFormatError(f"{where}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    nbytes = 4 * count
    if len(buf) - offset < nbytes:
        raise TensorFormatError(f"{where}: truncated payload")
    arr = np.frombuffer(buf[offset:offset + nbytes], dtype="<f4").reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError(f"{where}: non-finite values")
    return arr.astype(np.float32), offset + nbytes


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = _parse_record(buf, 0, str(path))
    if end != len(buf):
        raise TensorFormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


@dataclass(frozen=True)
class CalibrationSet:
    samples: tuple[np.ndarray, ...]
    paths: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.samples)


def load_calibration(directory) -> CalibrationSet:
    """All ``.qmtn`` files in ``directory``, lexicographically ordered."""
    root = Path(directory)
    paths = sorted(p for p in root.glob("*.qmtn") if p.is_file())
    if not paths:
        raise EmptyCalibration(f"no .qmtn files in {directory}")
    samples = tuple(load_tensor(p) for p in paths)
    return CalibrationSet(samples=samples, paths=tuple(str(p) for p in paths))


def calibration_from_arrays(arrays) -> CalibrationSet:
    """In-memory calibration set (used by the estimator API and tests)."""
    samples = tuple(np.asarray(a, dtype=np.float32) for a in arrays)
    if not samples:
        raise EmptyCalibration("no calibration samples")
    return CalibrationSet(samples=samples, paths=tuple("<memory>" for _ in samples))


# --- weights ------------------------------------------------------------------

@dataclass(frozen=True)
class WeightSet:
    """Per-layer kernels and biases; entries are None for pooling layers."""

    kernels: tuple[np.ndarray | None, ...]
    biases: tuple[np.ndarray | None, ...]
    seed: int | None = None

    def quantized8(self) -> "WeightSet":
        """Kernels fake-quantized to 8 bits per tensor; biases kept as-is."""
        kernels = []
        for k in self.kernels:
            if k is None:
                kernels.append(None)
            else:
                rng = actstats.calibration_range(k)
                kernels.append(actstats.fake_quantize(k, 8, rng))
        return WeightSet(kernels=tuple(kernels), biases=self.biases, seed=self.seed)


def _kernel_shape(layer: LayerSpec, cin: int) -> tuple[int, ...] | None:
    if layer.kind == "conv":
        return (layer.kernel, layer.kernel, cin, layer.out_channels)
    if layer.kind == "depthwise_conv":
        return (layer.kernel, layer.kernel, cin)
    if layer.kind == "fc":
        return None  # resolved from the flattened input below
    return None


def synthetic_weights(net: NetworkSpec, seed: int) -> WeightSet:
    """Gaussian kernels with variance 1/fan_in and zero biases, from one seed."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(net)
    kernels, biases = [], []
    for j, layer in enumerate(net.layers):
        cin = shapes[j].channels
        if layer.kind == "conv":
            fan_in = layer.kernel ** 2 * cin
            shape = (layer.kernel, layer.kernel, cin, layer.out_channels)
            cout = layer.out_channels
        elif layer.kind == "depthwise_conv":
            fan_in = layer.kernel ** 2
            shape = (layer.kernel, layer.kernel, cin)
            cout = cin
        elif layer.kind == "fc":
            fan_in = shapes[j].elements
            shape = (fan_in, layer.out_channels)
            cout = layer.out_channels
        else:
            kernels.append(None)
            biases.append(None)
            continue
        kernels.append(
            rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape).astype(np.float32)
        )
        biases.append(np.zeros(cout, dtype=np.float32))
    return WeightSet(kernels=tuple(kernels), biases=tuple(biases), seed=seed)


def save_weight_pack(path, ws: WeightSet) -> None:
    """Concatenated QMTN records: kernel then bias for each parameterized layer."""
    chunks = []
    for k, b in zip(ws.kernels, ws.biases):
        if k is None:
            continue
        for arr in (k, b):
            arr = np.ascontiguousarray(arr, dtype="<f4")
            chunks.append(
                QMTN_MAGIC
                + struct.pack("<BBBB", QMTN_VERSION, QMTN_DTYPE_F32, arr.ndim, 0)
                + struct.pack(f"<{arr.ndim}I", *arr.shape)
                + arr.tobytes()
            )
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_weight_pack(path, net: NetworkSpec) -> WeightSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    shapes = infer_shapes(net)
    offset = 0
    kernels, biases = [], []
    for j, layer in enumerate(net.layers):
        if layer.kind in ("maxpool", "avgpool"):
            kernels.append(None)
            biases.append(None)
            continue
        where = f"{path} layer {j}"
        kernel, offset = _parse_record(buf, offset, where)
        bias, offset = _parse_record(buf, offset, where)
        cin = shapes[j].channels
        if layer.kind == "conv":
            expect = (layer.kernel, layer.kernel, cin, layer.out_channels)
        elif layer.kind == "depthwise_conv":
            expect = (layer.kernel, layer.kernel, cin)
        else:
            expect = (shapes[j].elements, layer.out_channels)
        if tuple(kernel.shape) != expect:
            raise ShapeMismatch(
                f"{where}: kernel shape {kernel.shape}, expected {expect}"
            )
        if bias.shape != (shapes[j + 1].channels,):
            raise ShapeMismatch(f"{where}: bias shape {bias.shape}")
        kernels.append(kernel)
        biases.append(bias)
    if offset != len(buf):
        raise TensorFormatError(f"{path}: {len(buf) - offset} trailing bytes")
    return WeightSet(kernels=tuple(kernels), biases=tuple(biases), seed=None)


# --- forward passes -----------------------------------------------------------

def _spatial_forward(layer: LayerSpec, kernel, bias, x_in: np.ndarray,
                     in_offset: tuple[int, int], out: Region) -> np.ndarray:
    """Evaluate one spatial layer over ``out`` given input-region values.

    ``x_in`` holds the values of the input window that the region math
    guarantees covers every tap of every output pixel in ``out``; anything
    else the taps touch is padding.
    """
    k, stride = layer.kernel, layer.stride
    pad_fill = -np.inf if layer.kind == "maxpool" else 0.0
    buf_r0 = out.row_start * stride
    buf_c0 = out.col_start * stride
    buf_h = (out.rows - 1) * stride + k
    buf_w = (out.cols - 1) * stride + k
    cin = x_in.shape[2]
    buf = np.full((buf_h, buf_w, cin), pad_fill, dtype=np.float32)
    r_off = in_offset[0] + layer.padding - buf_r0
    c_off = in_offset[1] + layer.padding - buf_c0
    # clip the available window to the buffer (interior values the taps
    # never read may fall outside it)
    src_r0 = max(0, -r_off)
    src_c0 = max(0, -c_off)
    src_r1 = min(x_in.shape[0], buf_h - r_off)
    src_c1 = min(x_in.shape[1], buf_w - c_off)
    buf[r_off + src_r0:r_off + src_r1, c_off + src_c0:c_off + src_c1] = \
        x_in[src_r0:src_r1, src_c0:src_c1]

    taps = [
        buf[dy:dy + out.rows * stride:stride, dx:dx + out.cols * stride:stride]
        for dy in range(k) for dx in range(k)
    ]
    if layer.kind == "maxpool":
        acc = taps[0].astype(np.float64)
        for t in taps[1:]:
            acc = np.maximum(acc, t)
    elif layer.kind == "avgpool":
        acc = np.zeros((out.rows, out.cols, cin), dtype=np.float64)
        for t in taps:
            acc += t
        acc /= k * k
    elif layer.kind == "depthwise_conv":
        acc = np.zeros((out.rows, out.cols, cin), dtype=np.float64)
        i = 0
        for dy in range(k):
            for dx in range(k):
                acc += taps[i].astype(np.float64) * kernel[dy, dx][None, None, :]
                i += 1
        acc += bias
    else:  # conv
        cout = kernel.shape[3]
        acc = np.zeros((out.rows, out.cols, cout), dtype=np.float64)
        i = 0
        for dy in range(k):
            for dx in range(k):
                t64 = taps[i].astype(np.float64)
                for ci in range(cin):
                    acc += t64[:, :, ci:ci + 1] * kernel[dy, dx, ci][None, None, :]
                i += 1
        acc += bias
    if layer.activation == "relu":
        acc = np.maximum(acc, 0.0)
    return acc.astype(np.float32)


def _fc_forward(layer: LayerSpec, kernel, bias, x_in: np.ndarray) -> np.ndarray:
    acc = x_in.reshape(-1).astype(np.float64) @ kernel.astype(np.float64) + bias
    if layer.activation == "relu":
        acc = np.maximum(acc, 0.0)
    return acc.astype(np.float32).reshape(1, 1, -1)


def _check_input(net: NetworkSpec, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if tuple(arr.shape) != tuple(net.input_shape):
        raise ShapeMismatch(
            f"input shape {arr.shape}, network expects {net.input_shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatch("input contains non-finite values")
    return arr


def forward_fp(net: NetworkSpec, weights: WeightSet, x) -> list[np.ndarray]:
    """All feature maps 0..N of the float forward pass; map 0 is the input."""
    arr = _check_input(net, x)
    shapes = infer_shapes(net)
    maps = [arr]
    for j, layer in enumerate(net.layers):
        if layer.kind == "fc":
            maps.append(_fc_forward(layer, weights.kernels[j], weights.biases[j],
                                    maps[-1]))
        else:
            out = Region(0, shapes[j + 1].height, 0, shapes[j + 1].width)
            maps.append(
                _spatial_forward(layer, weights.kernels[j], weights.biases[j],
                                 maps[-1], (0, 0), out)
            )
    return maps


def _quantize_map(arr, bits, value_range, index):
    if bits == actstats.IDENTITY_BITS:
        return arr
    if value_range is None:
        raise MissingRange(f"no calibration range for feature map {index}")
    return actstats.fake_quantize(arr, bits, value_range)


def forward_quant(net: NetworkSpec, weights: WeightSet, x,
                  bits: list[int], ranges: list) -> list[np.ndarray]:
    """Fake-quantized forward pass.

    Each feature map i is replaced by its (bits[i], ranges[i]) quantization
    before the next layer consumes it; the returned maps are the quantized
    ones. Weights are fake-quantized to 8 bits per tensor.
    """
    arr = _check_input(net, x)
    shapes = infer_shapes(net)
    if len(bits) != len(shapes) or len(ranges) != len(shapes):
        raise ShapeMismatch(
            f"need {len(shapes)} bitwidths/ranges, got {len(bits)}/{len(ranges)}"
        )
    # the all-32 plan is the identity: it must reproduce forward_fp bit for
    # bit, so it leaves the weights untouched as well
    identity = all(b == actstats.IDENTITY_BITS for b in bits)
    qw = weights if identity else weights.quantized8()
    maps = [_quantize_map(arr, bits[0], ranges[0], 0)]
    for j, layer in enumerate(net.layers):
        if layer.kind == "fc":
            raw = _fc_forward(layer, qw.kernels[j], qw.biases[j], maps[-1])
        else:
            out = Region(0, shapes[j + 1].height, 0, shapes[j + 1].width)
            raw = _spatial_forward(layer, qw.kernels[j], qw.biases[j],
                                   maps[-1], (0, 0), out)
        maps.append(_quantize_map(raw, bits[j + 1], ranges[j + 1], j + 1))
    return maps


def forward_branch(net: NetworkSpec, weights: WeightSet, x, branch: DataflowBranch,
                   bits: list[int] | None = None, ranges: list | None = None,
                   quantized_weights: WeightSet | None = None) -> list[np.ndarray]:
    """Run the patch stage on one branch's regions.

    Returns the branch-local feature maps 0..patch_depth. With ``bits``
    given, each region map is fake-quantized (against the branch's own
    calibration ranges) before the next layer reads it.
    """
    arr = _check_input(net, x)
    ws = weights
    if bits is not None:
        ws = quantized_weights if quantized_weights is not None else weights.quantized8()
    r0 = branch.regions[0]
    region_map = arr[r0.row_start:r0.row_end, r0.col_start:r0.col_end, :]
    if bits is not None:
        region_map = _quantize_map(region_map, bits[0], ranges[0], 0)
    maps = [region_map]
    for d in range(1, len(branch.regions)):
        layer = net.layers[d - 1]
        in_region = branch.regions[d - 1]
        raw = _spatial_forward(
            layer, ws.kernels[d - 1], ws.biases[d - 1], maps[-1],
            (in_region.row_start, in_region.col_start), branch.regions[d],
        )
        if bits is not None:
            raw = _quantize_map(raw, bits[d], ranges[d], d)
        maps.append(raw)
    return maps


def forward_tail(net: NetworkSpec, weights: WeightSet, fmap: np.ndarray,
                 start_layer: int, bits: list[int] | None = None,
                 ranges: list | None = None) -> np.ndarray:
    """Run layers ``start_layer``.. end from an existing full feature map.

    ``weights`` are used as given (pass already-quantized kernels for a
    quantized pass). With ``bits``/``ranges`` (one entry per produced map,
    i.e. depths start_layer+1..N), each output is fake-quantized before the
    next layer reads it. Returns the final map.
    """
    shapes = infer_shapes(net)
    for j in range(start_layer, net.num_layers):
        layer = net.layers[j]
        if layer.kind == "fc":
            fmap = _fc_forward(layer, weights.kernels[j], weights.biases[j], fmap)
        else:
            out = Region(0, shapes[j + 1].height, 0, shapes[j + 1].width)
            fmap = _spatial_forward(layer, weights.kernels[j], weights.biases[j],
                                    fmap, (0, 0), out)
        if bits is not None:
            fmap = _quantize_map(fmap, bits[j - start_layer],
                                 ranges[j - start_layer], j + 1)
    return fmap


def stitch(branches: list[DataflowBranch], branch_maps: list[np.ndarray],
           depth: int, full_shape: tuple[int, int, int]) -> np.ndarray:
    """Assemble the depth-``depth`` tiles of all branches into the full map."""
    out = np.zeros(full_shape, dtype=np.float32)
    for branch, bmap in zip(branches, branch_maps):
        reg = branch.regions[depth]
        out[reg.row_start:reg.row_end, reg.col_start:reg.col_end, :] = bmap
    return out


# --- calibration --------------------------------------------------------------

@dataclass
class CalibrationPools:
    """Raw activation pools from calibration runs.

    ``full_maps[sample][depth]`` holds the layer-based feature maps;
    branch pools are views into them, valid because branch execution is
    bitwise identical on its regions.
    """

    net: NetworkSpec
    branches: list[DataflowBranch]
    full_maps: list[list[np.ndarray]]

    @property
    def num_samples(self) -> int:
        return len(self.full_maps)

    def branch_sample_values(self, branch_index: int, depth: int,
                             sample: int) -> np.ndarray:
        reg = self.branches[branch_index].regions[depth]
        fmap = self.full_maps[sample][depth]
        return fmap[reg.row_start:reg.row_end, reg.col_start:reg.col_end, :].ravel()

    def branch_pool(self, branch_index: int, depth: int) -> np.ndarray:
        return np.concatenate(
            [self.branch_sample_values(branch_index, depth, s)
             for s in range(self.num_samples)]
        )

    def full_pool(self, depth: int) -> np.ndarray:
        return np.concatenate(
            [self.full_maps[s][depth].ravel() for s in range(self.num_samples)]
        )


def calibrate(net: NetworkSpec, weights: WeightSet, cal: CalibrationSet,
              branches: list[DataflowBranch]) -> CalibrationPools:
    """Pool per-branch region activations (depths <= patch_depth) and full maps."""
    if len(cal) == 0:
        raise EmptyCalibration("calibration set is empty")
    full_maps = [forward_fp(net, weights, sample) for sample in cal.samples]
    return CalibrationPools(net=net, branches=list(branches), full_maps=full_maps)
