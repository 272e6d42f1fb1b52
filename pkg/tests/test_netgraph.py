import json

import numpy as np
import pytest

import oracles
from netgen import random_spatial_net
from quantmcu.errors import (
    NetworkFormatError,
    NonPositiveShape,
    SpatialOnly,
    UnevenGrid,
    UnknownBitwidth,
)
from quantmcu.netgraph import (
    FeatureMapShape,
    LayerSpec,
    MemoryModel,
    NetworkSpec,
    Region,
    bitops,
    branch_shapes,
    infer_shapes,
    load_network,
    mac_count,
    network_from_dict,
    peak_memory,
    receptive_region,
    redundancy_ratio,
    split_patches,
)


def simple_net(layers, input_shape=(32, 32, 3), grid=(1, 1), depth=0):
    return NetworkSpec(name="t", input_shape=input_shape, layers=tuple(layers),
                       patch_grid=grid, patch_depth=depth)


class TestInferShapes:
    def test_same_padding_identity(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 8)])
        out = infer_shapes(net)[1]
        assert (out.height, out.width, out.channels) == (32, 32, 8)

    def test_pool_halving(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 8),
                          LayerSpec("maxpool", 2, 2, 0)])
        out = infer_shapes(net)[2]
        assert (out.height, out.width, out.channels) == (16, 16, 8)

    def test_strided_conv(self):
        # floor((32 + 2 - 3)/2) + 1 = 16
        net = simple_net([LayerSpec("conv", 3, 1, 1, 8),
                          LayerSpec("conv", 3, 2, 1, 16)])
        out = infer_shapes(net)[2]
        assert (out.height, out.width, out.channels) == (16, 16, 16)

    def test_fc_flattens(self):
        net = simple_net([LayerSpec("fc", out_channels=10)])
        out = infer_shapes(net)[1]
        assert (out.height, out.width, out.channels) == (1, 1, 10)

    def test_depthwise_preserves_channels(self):
        net = simple_net([LayerSpec("depthwise_conv", 3, 1, 1)])
        assert infer_shapes(net)[1].channels == 3

    def test_nonpositive_shape_error(self):
        net = simple_net([LayerSpec("conv", 7, 1, 0, 4)], input_shape=(4, 4, 1))
        with pytest.raises(NonPositiveShape):
            infer_shapes(net)

    def test_fc_before_spatial_rejected(self):
        with pytest.raises(NetworkFormatError):
            simple_net([LayerSpec("fc", out_channels=10),
                        LayerSpec("conv", 3, 1, 1, 8)])

    def test_zero_size_map_rejected(self):
        with pytest.raises(NonPositiveShape):
            FeatureMapShape(0, 4, 4)


class TestReceptiveRegion:
    def test_depth_zero_identity(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 8)], input_shape=(8, 8, 1))
        out = Region(1, 5, 2, 6)
        assert receptive_region(net, 0, out) == out

    def test_two_convs_k3(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 4),
                          LayerSpec("conv", 3, 1, 1, 4)],
                         input_shape=(8, 8, 1))
        got = receptive_region(net, 2, Region(0, 4, 0, 8))
        assert (got.row_start, got.row_end) == (0, 6)

    def test_strided_conv(self):
        net = simple_net([LayerSpec("conv", 3, 2, 1, 4)], input_shape=(8, 8, 1))
        got = receptive_region(net, 1, Region(2, 4, 0, 4))
        assert (got.row_start, got.row_end) == (3, 8)

    def test_fc_rejected(self):
        net = simple_net([LayerSpec("fc", out_channels=4)], input_shape=(4, 4, 1))
        with pytest.raises(SpatialOnly):
            receptive_region(net, 1, Region(0, 1, 0, 1))

    def test_matches_pixel_marking_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(40):
            net = random_spatial_net(rng)
            shapes = infer_shapes(net)
            depth = int(rng.integers(0, net.num_layers + 1))
            fm = shapes[depth]
            r0 = int(rng.integers(0, fm.height))
            r1 = int(rng.integers(r0 + 1, fm.height + 1))
            c0 = int(rng.integers(0, fm.width))
            c1 = int(rng.integers(c0 + 1, fm.width + 1))
            out = Region(r0, r1, c0, c1)
            got = receptive_region(net, depth, out)
            want = oracles.receptive_bbox(net, depth, out)
            assert want is not None
            assert (got.row_start, got.row_end, got.col_start, got.col_end) == want


class TestSplitPatches:
    def two_conv_net(self):
        return simple_net(
            [LayerSpec("conv", 3, 1, 1, 1), LayerSpec("conv", 3, 1, 1, 1)],
            input_shape=(8, 8, 1), grid=(2, 2), depth=2)

    def test_single_tile_no_overlap(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 1)],
                         input_shape=(8, 8, 1), grid=(1, 1), depth=1)
        branches = split_patches(net)
        assert len(branches) == 1
        assert all(ov == 0 for ov in branches[0].overlap_elements)
        assert redundancy_ratio(net, branches) == 0.0

    def test_two_conv_redundancy(self):
        net = self.two_conv_net()
        branches = split_patches(net)
        assert len(branches) == 4
        for b in branches:
            assert b.regions[0].pixels == 36
        assert sum(b.regions[0].pixels for b in branches) == 144
        assert redundancy_ratio(net, branches) == pytest.approx(1.25)

    def test_depth_zero_tiles_input(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 1)],
                         input_shape=(8, 8, 1), grid=(2, 2), depth=0)
        branches = split_patches(net)
        assert all(b.regions[0].pixels == 16 for b in branches)
        assert redundancy_ratio(net, branches) == 0.0

    def test_strict_uneven_grid_rejected(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 1)],
                         input_shape=(9, 9, 1), grid=(2, 2), depth=1)
        with pytest.raises(UnevenGrid):
            split_patches(net, strict=True)

    def test_uneven_grid_pads_last_tile(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 1)],
                         input_shape=(9, 9, 1), grid=(2, 2), depth=1)
        branches = split_patches(net)
        tiles = [b.regions[-1] for b in branches]
        assert tiles[0].rows == 4 and tiles[-1].rows == 5

    def test_tiles_partition_split_map(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            net = random_spatial_net(rng, with_patches=True)
            shapes = infer_shapes(net)
            fm = shapes[net.patch_depth]
            branches = split_patches(net)
            cover = np.zeros((fm.height, fm.width), dtype=int)
            for b in branches:
                t = b.regions[-1]
                cover[t.row_start:t.row_end, t.col_start:t.col_end] += 1
            assert (cover == 1).all()

    def test_branch_input_matches_oracle(self):
        net = self.two_conv_net()
        for b in split_patches(net):
            tile = b.regions[-1]
            want = oracles.receptive_bbox(net, 2, tile)
            got = b.regions[0]
            assert (got.row_start, got.row_end, got.col_start, got.col_end) == want


class TestMacsAndBitops:
    def test_conv_macs(self):
        net = simple_net([LayerSpec("conv", 3, 1, 1, 8)])
        assert mac_count(net, infer_shapes(net)) == [32 * 32 * 8 * 9 * 3]

    def test_pool_macs_zero(self):
        net = simple_net([LayerSpec("maxpool", 2, 2, 0)])
        assert mac_count(net, infer_shapes(net)) == [0]

    def test_fc_macs(self):
        net = simple_net([LayerSpec("fc", out_channels=10)],
                         input_shape=(8, 8, 1))
        assert mac_count(net, infer_shapes(net)) == [640]

    def test_depthwise_macs(self):
        net = simple_net([LayerSpec("depthwise_conv", 3, 1, 1)])
        assert mac_count(net, infer_shapes(net)) == [32 * 32 * 3 * 9]

    def test_bitops_examples(self):
        assert bitops([100], 8, [8]) == 6400
        assert bitops([100], 8, [4]) == 3200
        assert bitops([100, 50], 8, [8, 2]) == 7200

    def test_bitops_unknown_bitwidth(self):
        with pytest.raises(UnknownBitwidth):
            bitops([100], 8, [3])
        with pytest.raises(UnknownBitwidth):
            bitops([100], 5, [8])

    def test_bitops_monotone_in_bits(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            macs = [int(m) for m in rng.integers(0, 1000, size=4)]
            bits = [int(b) for b in rng.choice([2, 4, 8], size=4)]
            base = bitops(macs, 8, bits)
            for i in range(4):
                if bits[i] == 2:
                    continue
                lowered = list(bits)
                lowered[i] = {8: 4, 4: 2}[bits[i]]
                assert bitops(macs, 8, lowered) <= base

    def test_branch_macs_at_least_layer_macs(self):
        # equality only for splits whose receptive fields do not grow
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 30:
            net = random_spatial_net(rng, with_patches=True)
            if any(l.stride > l.kernel for l in net.layers[:net.patch_depth]):
                continue  # strided subsampling skips dead pixels by design
            checked += 1
            shapes = infer_shapes(net)
            layer_macs = sum(mac_count(net, shapes[:net.patch_depth + 1]))
            branch_macs = sum(
                sum(mac_count(net, branch_shapes(net, b)))
                for b in split_patches(net)
            )
            assert branch_macs >= layer_macs
            exact = all(
                (l.kernel == l.stride and l.padding == 0) or
                (l.kernel == 1 and l.stride == 1)
                for l in net.layers[:net.patch_depth]
            )
            if exact:
                assert branch_macs == layer_macs


class TestPeakMemory:
    def shapes_of(self, elements):
        return [FeatureMapShape(1, 1, n, index=i) for i, n in enumerate(elements)]

    def test_three_map_example(self):
        shapes = self.shapes_of([3072, 4096, 2048])
        assert peak_memory([8, 8, 8], shapes, MemoryModel()) == 7168

    def test_single_map(self):
        shapes = self.shapes_of([3072])
        assert peak_memory([8], shapes, MemoryModel()) == 3072

    def test_empty_chain_rejected(self):
        with pytest.raises(ValueError):
            peak_memory([], [], MemoryModel())

    def test_matches_bruteforce_and_monotone(self):
        rng = np.random.default_rng(5)
        mm = MemoryModel()
        for _ in range(50):
            n = int(rng.integers(1, 6))
            elems = [int(e) for e in rng.integers(1, 5000, size=n)]
            bits = [int(b) for b in rng.choice([2, 4, 8], size=n)]
            shapes = self.shapes_of(elems)
            got = peak_memory(bits, shapes, mm)
            sizes = [mm.mem(e, b) for e, b in zip(elems, bits)]
            if n == 1:
                assert got == sizes[0]
            else:
                assert got == max(sizes[i] + sizes[i + 1] for i in range(n - 1))
            for i in range(n):
                if bits[i] == 8:
                    continue
                raised = list(bits)
                raised[i] = 8
                assert peak_memory(raised, shapes, mm) >= got

    def test_mem_rounds_up(self):
        assert MemoryModel.mem(3, 2) == 1
        assert MemoryModel.mem(5, 2) == 2
        assert MemoryModel.mem(1024, 8) == 1024


class TestNetworkFile:
    def valid_doc(self):
        return {
            "name": "demo",
            "input": {"height": 8, "width": 8, "channels": 1},
            "layers": [
                {"kind": "conv", "kernel": 3, "stride": 1, "padding": 1,
                 "out_channels": 4, "activation": "relu"},
                {"kind": "maxpool", "kernel": 2, "stride": 2},
                {"kind": "fc", "out_channels": 10},
            ],
            "patch": {"grid": [2, 2], "depth": 1},
        }

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "net.json"
        path.write_text(json.dumps(self.valid_doc()))
        net = load_network(path)
        assert net.name == "demo"
        assert net.patch_grid == (2, 2)
        assert net.layers[0].activation == "relu"
        assert net.layers[1].out_channels is None

    def test_unknown_top_key(self):
        doc = self.valid_doc()
        doc["extra"] = 1
        with pytest.raises(NetworkFormatError, match="unknown keys"):
            network_from_dict(doc)

    def test_unknown_layer_key(self):
        doc = self.valid_doc()
        doc["layers"][0]["dilation"] = 2
        with pytest.raises(NetworkFormatError, match="unknown keys"):
            network_from_dict(doc)

    def test_missing_kernel(self):
        doc = self.valid_doc()
        del doc["layers"][0]["kernel"]
        with pytest.raises(NetworkFormatError, match="kernel"):
            network_from_dict(doc)

    def test_pool_with_out_channels(self):
        doc = self.valid_doc()
        doc["layers"][1]["out_channels"] = 4
        with pytest.raises(NetworkFormatError):
            network_from_dict(doc)

    def test_bad_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"name": "x",\n  "input": }')
        with pytest.raises(NetworkFormatError, match="line 2"):
            load_network(path)

    def test_bad_grid(self):
        doc = self.valid_doc()
        doc["patch"]["grid"] = [2]
        with pytest.raises(NetworkFormatError, match="grid"):
            network_from_dict(doc)
