"""Relevance estimation, freezing/re-initialization, gradient masking, and
capacity accounting."""

import pytest
import torch

from gatedcl.backbone import FREE, ArchSpec, ContinualGatedNet
from gatedcl.consolidation import (RelevanceTable, apply_grad_mask,
                                   capacity_report, compute_relevance,
                                   consolidate, estimate_firing,
                                   mask_frozen_grads_)
from gatedcl.errors import ConsolidationError


def tiny_net(filters=4, layers=1, image=8, seed=0, tasks=(1,), classes=2):
    g = torch.Generator().manual_seed(seed)
    arch = ArchSpec(kind="simple_cnn", in_channels=1, image_hw=(image, image),
                    num_layers=layers, filters=filters)
    net = ContinualGatedNet(arch, g)
    for t in tasks:
        net.register_task(t, classes, g)
    return net, g


def pin_gates(net, task_id, biases):
    """Input-independent gate logits via a zeroed hidden path."""
    for site, b in zip(net.sites(), biases):
        module = site.gate_module(task_id)
        with torch.no_grad():
            module.fc2.weight.zero_()
            module.fc2.bias.copy_(torch.tensor(b))


class TestRelevance:
    def test_always_closed_gate_scores_zero(self):
        net, g = tiny_net(filters=3)
        pin_gates(net, 1, [[-50.0, -50.0, -50.0]])
        r = compute_relevance(net, torch.rand(5, 1, 8, 8, generator=g), 1,
                              stochastic=True, generator=g)
        assert torch.equal(r[0], torch.zeros(3))

    def test_always_open_gate_scores_one(self):
        net, g = tiny_net(filters=3)
        pin_gates(net, 1, [[50.0, 50.0, 50.0]])
        r = compute_relevance(net, torch.rand(5, 1, 8, 8, generator=g), 1,
                              stochastic=True, generator=g)
        assert torch.equal(r[0], torch.ones(3))

    def test_deterministic_mode_counts_eval_patterns(self):
        # eval patterns (1,0), (1,1), (1,0) over three inputs -> r = (1, 1/3)
        net, _ = tiny_net(filters=2)
        site = net.sites()[0]
        module = site.gate_module(1)
        with torch.no_grad():
            module.fc1.weight.zero_()
            module.fc1.weight[0, 0] = 1.0
            module.fc1.bias.zero_()
            module.fc2.weight.zero_()
            module.fc2.weight[0, 0] = 1.0
            module.fc2.weight[1, 0] = 1.0
            module.fc2.bias.copy_(torch.tensor([-0.5, -2.0]))
        inputs = torch.stack([torch.full((1, 8, 8), v)
                              for v in (1.0, 3.0, 1.0)])
        r = estimate_firing(net, inputs, 1, stochastic=False)
        assert r[0].tolist() == pytest.approx([1.0, 1.0 / 3.0])

    def test_empty_validation_set_rejected(self):
        net, _ = tiny_net()
        with pytest.raises(ConsolidationError):
            compute_relevance(net, torch.zeros(0, 1, 8, 8), 1)

    def test_stochastic_estimate_tracks_sigmoid(self):
        net, g = tiny_net(filters=1)
        pin_gates(net, 1, [[0.8]])
        inputs = torch.rand(400, 1, 8, 8, generator=g)
        r = compute_relevance(net, inputs, 1, samples_per_input=10,
                              stochastic=True, generator=g)
        expected = torch.sigmoid(torch.tensor(0.8)).item()
        assert abs(r[0].item() - expected) < 0.03


class TestConsolidate:
    def test_threshold_rule_freezes_and_reinitializes(self):
        net, g = tiny_net(filters=3)
        site = net.sites()[0]
        before = site.conv.weight.detach().clone()
        relevance = [torch.tensor([0.9, 0.0, 0.4])]
        report = consolidate(net, relevance, 1, threshold=0.0, generator=g)
        assert site.owner.tolist() == [1, FREE, 1]
        assert report.frozen_per_site == [2]
        assert report.reinit_per_site == [1]
        assert torch.equal(site.conv.weight[0], before[0])
        assert torch.equal(site.conv.weight[2], before[2])
        assert not torch.equal(site.conv.weight[1], before[1])

    def test_all_zero_relevance_reinitializes_everything(self):
        net, g = tiny_net(filters=3)
        site = net.sites()[0]
        before = site.conv.weight.detach().clone()
        consolidate(net, [torch.zeros(3)], 1, generator=g)
        assert site.owner.tolist() == [FREE] * 3
        for k in range(3):
            assert not torch.equal(site.conv.weight[k], before[k])

    def test_prior_ownership_wins(self):
        net, g = tiny_net(filters=3, tasks=(1, 2))
        site = net.sites()[0]
        consolidate(net, [torch.tensor([1.0, 0.0, 0.0])], 1, generator=g)
        frozen_kernel = site.conv.weight[0].detach().clone()
        consolidate(net, [torch.zeros(3)], 2, generator=g)
        assert site.owner[0].item() == 1
        assert torch.equal(site.conv.weight[0], frozen_kernel)

    def test_double_consolidation_rejected(self):
        net, g = tiny_net()
        consolidate(net, [torch.zeros(4)], 1, generator=g)
        with pytest.raises(ConsolidationError):
            consolidate(net, [torch.zeros(4)], 1, generator=g)

    def test_consolidation_locks_task_modules(self):
        net, g = tiny_net()
        consolidate(net, [torch.ones(4)], 1, generator=g)
        assert all(not p.requires_grad
                   for p in net.sites()[0].gate_module(1).parameters())
        assert all(not p.requires_grad for p in net.head(1).parameters())

    def test_frozen_set_only_grows(self):
        net, g = tiny_net(filters=4, tasks=(1, 2, 3))
        frozen_history = []
        for t, r in zip((1, 2, 3), ([1.0, 0, 0, 0], [0, 1.0, 0, 0],
                                    [0, 0, 0, 0])):
            consolidate(net, [torch.tensor(r)], t, generator=g)
            frozen_history.append(set(
                (net.sites()[0].owner != FREE).nonzero().flatten().tolist()))
        assert frozen_history[0] <= frozen_history[1] <= frozen_history[2]

    def test_reinitialized_kernels_stay_trainable(self):
        net, g = tiny_net(filters=2)
        consolidate(net, [torch.tensor([1.0, 0.0])], 1, generator=g)
        net.register_task(2, 2, g)
        pin_gates(net, 2, [[50.0, 50.0]])
        net.train()
        x = torch.rand(4, 1, 8, 8, generator=g)
        logits = net.forward_multihead(x, 2, gate_mode="eval")
        logits.sum().backward()
        mask_frozen_grads_(net)
        site = net.sites()[0]
        assert torch.equal(site.conv.weight.grad[0],
                           torch.zeros_like(site.conv.weight.grad[0]))
        assert site.conv.weight.grad[1].abs().sum() > 0


class TestStrictMask:
    def test_consolidated_stream_is_immutable_under_free_kernel_churn(self):
        net, g = tiny_net(filters=4, classes=2)
        x = torch.rand(6, 1, 8, 8, generator=g)
        net.eval()
        relevance = compute_relevance(net, x, 1, stochastic=False)
        consolidate(net, relevance, 1, generator=g)
        before = net.forward_multihead(x, 1, gate_mode="eval", strict_mask=True)
        # simulate later-task training on whatever stayed free
        site = net.sites()[0]
        free = site.owner == FREE
        with torch.no_grad():
            site.conv.weight[free] += torch.randn(
                int(free.sum()), *site.conv.weight.shape[1:], generator=g)
        after = net.forward_multihead(x, 1, gate_mode="eval", strict_mask=True)
        assert torch.equal(before, after)

    def test_permitted_snapshot_matches_frozen_set(self):
        net, g = tiny_net(filters=4)
        consolidate(net, [torch.tensor([1.0, 0.0, 0.5, 0.0])], 1, generator=g)
        site = net.sites()[0]
        assert site.permitted_mask(1).tolist() == [True, False, True, False]


class TestGradMask:
    def test_no_frozen_kernels_leaves_gradients_alone(self):
        grads = torch.randn(5, 3, 3, 3)
        owner = torch.full((5,), FREE)
        assert torch.equal(apply_grad_mask(grads, owner), grads)

    def test_all_frozen_zeroes_everything(self):
        grads = torch.randn(5, 3, 3, 3)
        owner = torch.ones(5, dtype=torch.long)
        assert torch.equal(apply_grad_mask(grads, owner),
                           torch.zeros_like(grads))

    def test_mixed_ownership_matches_boolean_oracle(self):
        g = torch.Generator().manual_seed(3)
        grads = torch.randn(6, 2, 3, 3, generator=g)
        owner = torch.tensor([FREE, 1, FREE, 2, 2, FREE])
        masked = apply_grad_mask(grads, owner)
        oracle = grads.clone()
        for k in range(6):
            if owner[k] != FREE:
                oracle[k] = 0
        assert torch.equal(masked, oracle)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConsolidationError):
            apply_grad_mask(torch.zeros(4, 1), torch.zeros(5, dtype=torch.long))


class TestCapacity:
    def test_fresh_simple_cnn_has_all_kernels_free(self):
        g = torch.Generator().manual_seed(0)
        net = ContinualGatedNet(ArchSpec.simple_cnn(), g)
        report = capacity_report(net)
        assert [l.free for l in report.layers] == [100, 100, 100]
        assert not report.saturated

    def test_counts_after_freezing(self):
        net, g = tiny_net(filters=100)
        r = torch.zeros(100)
        r[:30] = 1.0
        consolidate(net, [r], 1, generator=g)
        layer = capacity_report(net).layers[0]
        assert (layer.free, layer.frozen) == (70, 30)
        assert layer.by_task == {1: 30}

    def test_attribution_sums_to_frozen_count(self):
        net, g = tiny_net(filters=6, tasks=(1, 2))
        consolidate(net, [torch.tensor([1.0, 1, 0, 0, 0, 0.0])], 1, generator=g)
        consolidate(net, [torch.tensor([0.0, 0, 1, 0, 0, 0.0])], 2, generator=g)
        for layer in capacity_report(net).layers:
            assert sum(layer.by_task.values()) == layer.frozen

    def test_saturation_flag(self):
        net, g = tiny_net(filters=2)
        consolidate(net, [torch.ones(2)], 1, generator=g)
        assert capacity_report(net).saturated


class TestRelevanceTable:
    def test_rows_are_keyed_by_site_kernel_task(self):
        table = RelevanceTable()
        table.put(0, 1, torch.tensor([0.5, 0.25]))
        rows = list(table.rows())
        assert rows == [
            {"site": 0, "kernel": 0, "task": 1, "relevance": 0.5},
            {"site": 0, "kernel": 1, "task": 1, "relevance": 0.25}]
        assert table.tasks() == [1]
