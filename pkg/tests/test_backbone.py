"""Gated convolution layers, the 3-layer CNN, residual blocks, and heads."""

import pytest
import torch
import torch.nn.functional as F

from gatedcl.backbone import (ArchSpec, ContinualGatedNet, GatedResidualBlock,
                              head_forward)
from gatedcl.errors import ConfigError, GatingError
from gatedcl.gates import init_linear_


def fresh_net(seed=0, num_classes=2, tasks=(1,)):
    g = torch.Generator().manual_seed(seed)
    net = ContinualGatedNet(ArchSpec.simple_cnn(), g)
    for t in tasks:
        net.register_task(t, num_classes, g)
    return net, g


def force_gates(net, task_id, pattern_fn):
    """Pin every gate module to a fixed eval-mode decision pattern."""
    for i, site in enumerate(net.sites()):
        module = site.gate_module(task_id)
        with torch.no_grad():
            module.fc2.weight.zero_()
            module.fc2.bias.copy_(pattern_fn(i, site.out_channels))


class TestGatedForward:
    def test_all_open_gates_reproduce_ungated_stack_bitwise(self):
        net, g = fresh_net()
        force_gates(net, 1, lambda i, c: torch.full((c,), 50.0))
        x = torch.randn(3, 1, 28, 28, generator=g)
        net.eval()
        out, _ = net.forward_stream(x, 1, gate_mode="eval")
        h = x.contiguous(memory_format=torch.channels_last)
        for unit in net.units:
            h = unit.site.conv(h)
            if unit.pool:
                h = F.max_pool2d(h, 2)
            h = F.relu(h)
        assert torch.equal(out, h)

    def test_all_closed_gates_zero_the_map(self):
        net, g = fresh_net()
        force_gates(net, 1, lambda i, c: torch.full((c,), -50.0))
        x = torch.randn(2, 1, 28, 28, generator=g)
        net.eval()
        out, _ = net.forward_stream(x, 1, gate_mode="eval")
        assert torch.equal(out, torch.zeros_like(out))

    def test_random_pattern_equals_dense_conv_with_zeroed_channels(self):
        net, g = fresh_net(seed=5)
        patterns = {}

        def pattern(i, c):
            bits = (torch.rand(c, generator=g) > 0.5).float()
            patterns[i] = bits
            return bits * 100.0 - 50.0
        force_gates(net, 1, pattern)
        x = torch.randn(2, 1, 28, 28, generator=g)
        net.eval()
        out, _ = net.forward_stream(x, 1, gate_mode="eval")
        h = x.contiguous(memory_format=torch.channels_last)
        for i, unit in enumerate(net.units):
            h = unit.site.conv(h)
            if unit.pool:
                h = F.max_pool2d(h, 2)
            h = F.relu(h) * patterns[i][None, :, None, None]
        assert torch.equal(out, h)

    def test_intermediate_map_shapes(self):
        net, g = fresh_net()
        x = torch.randn(2, 1, 28, 28, generator=g)
        net.eval()
        _, records = net.forward_stream(x, 1, gate_mode="eval", collect=True)
        assert [r.map_shape for r in records] == [
            (100, 14, 14), (100, 7, 7), (100, 7, 7)]

    def test_multihead_shape_and_determinism(self):
        net, g = fresh_net(num_classes=3)
        x = torch.randn(4, 1, 28, 28, generator=g)
        net.eval()
        a = net.forward_multihead(x, 1)
        b = net.forward_multihead(x, 1)
        assert a.shape == (4, 3)
        assert torch.isfinite(a).all()
        assert torch.equal(a, b)

    def test_unknown_task_rejected(self):
        net, g = fresh_net()
        with pytest.raises(ConfigError):
            net.forward_multihead(torch.zeros(1, 1, 28, 28), 9)

    def test_duplicate_task_registration_rejected(self):
        net, g = fresh_net()
        with pytest.raises(ConfigError):
            net.register_task(1, 2, g)


class TestArchitecture:
    def test_simple_cnn_spec_invariants(self):
        arch = ArchSpec.simple_cnn()
        assert arch.num_layers == 3
        assert arch.filters == 100
        net = ContinualGatedNet(arch)
        assert len(net.units) == 3
        assert [u.pool for u in net.units] == [True, True, False]
        assert all(s.out_channels == 100 for s in net.sites())

    def test_head_input_width_matches_last_layer(self):
        net, _ = fresh_net()
        assert net.head(1).in_features == 100

    def test_arch_spec_roundtrip(self):
        arch = ArchSpec.simple_cnn()
        assert ArchSpec.from_dict(arch.to_dict()) == arch


class TestHeadForward:
    def test_zero_features_zero_bias(self):
        head = torch.nn.Linear(4, 3)
        with torch.no_grad():
            head.bias.zero_()
        out = head_forward(torch.zeros(2, 4), head)
        assert torch.equal(out, torch.zeros(2, 3))

    def test_identity_toy_head(self):
        head = torch.nn.Linear(2, 2)
        with torch.no_grad():
            head.weight.copy_(torch.eye(2))
            head.bias.zero_()
        out = head_forward(torch.tensor([[1.0, 0.0]]), head)
        assert out.tolist() == [[1.0, 0.0]]

    def test_matches_naive_dot_product_oracle(self):
        g = torch.Generator().manual_seed(9)
        head = torch.nn.Linear(6, 4)
        init_linear_(head, g)
        feats = torch.randn(5, 6, generator=g)
        out = head_forward(feats, head)
        w, b = head.weight.detach(), head.bias.detach()
        for i in range(5):
            for j in range(4):
                expected = float(b[j]) + sum(
                    float(w[j, k]) * float(feats[i, k]) for k in range(6))
                assert out[i, j].item() == pytest.approx(expected, rel=1e-5)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(GatingError):
            head_forward(torch.zeros(1, 5), torch.nn.Linear(4, 2))


class TestGatedResidualBlock:
    def _block(self, stride, in_c=8, out_c=8, seed=0):
        g = torch.Generator().manual_seed(seed)
        block = GatedResidualBlock(in_c, out_c, stride, (16, 16), g)
        block.register_task(1, g)
        for site in block.sites():
            site.register_task(1, g)
        return block, g

    def test_plain_block_has_two_gate_sites(self):
        block, _ = self._block(stride=1)
        assert not block.downsampling
        assert block.gate_sites_per_stream() == 2
        assert block.shortcut is None

    def test_downsampling_block_gates_the_shortcut(self):
        block, _ = self._block(stride=2, in_c=8, out_c=16)
        assert block.downsampling
        assert block.gate_sites_per_stream() == 3
        assert block.shortcut is not None

    def test_forward_shapes(self):
        block, g = self._block(stride=2, in_c=8, out_c=16)
        from gatedcl.backbone import StreamContext
        block.eval()
        ctx = StreamContext(task_id=1, gate_mode="eval")
        out = block.forward_stream(torch.randn(2, 8, 16, 16, generator=g), ctx)
        assert out.shape == (2, 16, 8, 8)
        assert len(ctx.records) == 3

    def test_per_task_batchnorm_copies_are_isolated(self):
        block, g = self._block(stride=1)
        block.register_task(2, g)
        for site in block.sites():
            site.register_task(2, g)
        from gatedcl.backbone import StreamContext
        block.train()
        x = torch.randn(8, 8, 16, 16, generator=g)
        block.forward_stream(x, StreamContext(task_id=2, gate_mode="eval"))
        # task 1 statistics untouched by the task-2 pass
        assert torch.equal(block.bn1["1"].running_mean,
                           torch.zeros_like(block.bn1["1"].running_mean))
        assert not torch.equal(block.bn1["2"].running_mean,
                               torch.zeros_like(block.bn1["2"].running_mean))
