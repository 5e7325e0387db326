import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from minmax_routing.batched import ProblemBatch, batch_rollout
from minmax_routing.errors import ConfigError
from minmax_routing.instances import TaskKind, generate_uniform
from minmax_routing.model import DecodeMode, ModelConfig, RoutingPolicy
from minmax_routing.training import (
    FinetuneConfig,
    TrainConfig,
    default_agent_count,
    finetune,
    paper_profile,
    parameter_checksums,
    reinforce_loss,
    reinforce_step,
    shared_baseline,
    symmetric_batch,
    symmetric_coords,
    toy_profile,
    train,
)

TINY = ModelConfig(embed_dim=16, num_heads=2, feedforward_dim=32)


def tiny_policy(seed=0):
    torch.manual_seed(seed)
    return RoutingPolicy(TINY)


class TestConfigs:
    def test_paper_profile_values(self):
        model_cfg, train_cfg = paper_profile()
        assert model_cfg.embed_dim == 128
        assert train_cfg.batch_size == 512
        assert train_cfg.learning_rate == 1e-4
        assert train_cfg.epochs == 100
        assert train_cfg.epoch_size == 1_280_000
        assert train_cfg.train_n == 50
        assert train_cfg.steps == 100 * 1_280_000 // 512

    def test_toy_profile_values(self):
        model_cfg, train_cfg = toy_profile()
        assert model_cfg.embed_dim == 64
        assert train_cfg.train_n == 10 and train_cfg.agents == 2
        assert train_cfg.batch_size == 128
        assert train_cfg.total_steps == 20_000

    def test_symmetric_count_minimum(self):
        with pytest.raises(ConfigError):
            TrainConfig(num_symmetric=1)

    def test_finetune_needs_budget(self):
        with pytest.raises(ConfigError):
            FinetuneConfig(target_n=200)
        cfg = FinetuneConfig(target_n=200, budget_steps=10)
        assert cfg.learning_rate == 1e-5
        assert cfg.batch_size == 128

    def test_agent_ratio_rule(self):
        for n in (50, 200, 500, 1000):
            m = default_agent_count(n)
            assert 10 <= n / m <= 20


class TestSymmetricBatch:
    def test_identity_first_and_count(self):
        inst = generate_uniform(TaskKind.MTSP, 6, 2, 0)
        variants = symmetric_batch(inst, 4, np.random.default_rng(0))
        assert len(variants) == 4
        assert np.array_equal(variants[0].city_coords, inst.city_coords)

    def test_isometry(self):
        inst = generate_uniform(TaskKind.MTSP, 8, 2, 1)
        base = np.linalg.norm(
            inst.all_coords[:, None] - inst.all_coords[None, :], axis=2
        )
        for variant in symmetric_batch(inst, 5, np.random.default_rng(1)):
            dist = np.linalg.norm(
                variant.all_coords[:, None] - variant.all_coords[None, :], axis=2
            )
            assert np.allclose(dist, base, atol=1e-12)

    def test_seeded_determinism(self):
        inst = generate_uniform(TaskKind.MTSP, 6, 2, 0)
        a = symmetric_batch(inst, 3, np.random.default_rng(5))
        b = symmetric_batch(inst, 3, np.random.default_rng(5))
        for va, vb in zip(a, b):
            assert np.array_equal(va.city_coords, vb.city_coords)

    def test_minimum_two(self):
        inst = generate_uniform(TaskKind.MTSP, 6, 2, 0)
        with pytest.raises(ValueError):
            symmetric_batch(inst, 1, np.random.default_rng(0))

    def test_tensor_twin_isometry(self):
        gen = torch.Generator().manual_seed(0)
        coords = ProblemBatch.sample(TaskKind.MTSP, 3, 6, 2, generator=gen).coords.double()
        out = symmetric_coords(coords, 4, gen).view(3, 4, 8, 2)
        assert torch.allclose(out[:, 0], coords)
        base = torch.cdist(coords, coords)
        for l in range(4):
            assert torch.allclose(torch.cdist(out[:, l], out[:, l]), base, atol=1e-9)


class TestSharedBaseline:
    def test_mean(self):
        assert shared_baseline([2, 4]) == 3

    def test_constant_costs_zero_advantage(self):
        costs = [1.7, 1.7, 1.7]
        b = shared_baseline(costs)
        assert all(c - b == 0 for c in costs)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            shared_baseline([])

    @given(st.lists(st.floats(0.1, 100, allow_nan=False), min_size=1, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_advantages_sum_to_zero(self, costs):
        b = shared_baseline(costs)
        total = sum(c - b for c in costs)
        assert abs(total) <= 1e-9 * len(costs) * max(abs(c) for c in costs)


class TestReinforceLoss:
    def test_constant_costs_give_zero_gradient(self):
        logp = torch.randn(3, 4, requires_grad=True)
        costs = torch.full((3, 4), 2.5)
        loss, advantage = reinforce_loss(costs, logp)
        loss.backward()
        assert torch.all(advantage == 0)
        assert torch.all(logp.grad == 0)

    def test_descent_direction(self):
        # Lower-than-baseline rollouts must receive positive log-prob pressure.
        logp = torch.zeros(1, 2, requires_grad=True)
        costs = torch.tensor([[1.0, 3.0]])
        loss, _ = reinforce_loss(costs, logp)
        loss.backward()
        # d loss / d logp = advantage / K; gradient descent then increases the
        # log probability of the cheap rollout and decreases the expensive one.
        assert logp.grad[0, 0] < 0 < logp.grad[0, 1]


class TestGradientCheck:
    def test_matches_finite_differences(self):
        torch.manual_seed(4)
        policy = RoutingPolicy(ModelConfig(embed_dim=8, num_heads=2, feedforward_dim=32))
        policy.double().eval()
        gen = torch.Generator().manual_seed(0)
        n, m, bsz, num_sym = 4, 2, 2, 2
        coords = ProblemBatch.sample(TaskKind.MTSP, bsz, n, m, generator=gen, dtype=torch.float64).coords
        sym = symmetric_coords(coords, num_sym, gen)
        batch = ProblemBatch(TaskKind.MTSP, n, m, sym, torch.ones(sym.shape[0], dtype=torch.float64))
        with torch.no_grad():
            rollout = batch_rollout(policy, batch, DecodeMode.SAMPLE, generator=gen)
        forced = rollout.sequences
        costs = rollout.cost.view(bsz, num_sym)
        assert (costs - costs.mean(1, keepdim=True)).abs().max() > 0

        def loss_value():
            result = batch_rollout(policy, batch, forced=forced)
            loss, _ = reinforce_loss(costs, result.log_prob.view(bsz, num_sym))
            return loss

        policy.zero_grad(set_to_none=True)
        loss_value().backward()
        analytic = {
            name: {k: p.grad.clone() for k, p in module.named_parameters()}
            for name, module in policy.parameter_groups().items()
        }

        eps = 1e-4
        with torch.no_grad():
            for name, module in policy.parameter_groups().items():
                fd_sq, diff_sq = 0.0, 0.0
                for key, param in module.named_parameters():
                    flat = param.view(-1)
                    grad_flat = analytic[name][key].view(-1)
                    for idx in range(flat.numel()):
                        orig = flat[idx].item()
                        flat[idx] = orig + eps
                        up = loss_value().item()
                        flat[idx] = orig - eps
                        down = loss_value().item()
                        flat[idx] = orig
                        fd = (up - down) / (2 * eps)
                        fd_sq += fd * fd
                        diff_sq += (fd - grad_flat[idx].item()) ** 2
                rel = math.sqrt(diff_sq) / max(math.sqrt(fd_sq), 1e-12)
                assert rel <= 1e-3, f"{name}: relative gradient error {rel:.2e}"


class TestReinforceStep:
    def test_metrics_finite_and_complete(self):
        policy = tiny_policy()
        policy.train()
        gen = torch.Generator().manual_seed(0)
        optimizer = torch.optim.Adam(policy.parameters(), lr=1e-4)
        coords = ProblemBatch.sample(TaskKind.MTSP, 8, 6, 2, generator=gen).coords
        metrics = reinforce_step(policy, optimizer, coords, 4, gen, TaskKind.MTSP, 6, 2)
        assert set(metrics) == {"loss", "mean_cost", "mean_abs_advantage", "grad_norm"}
        assert all(np.isfinite(v) for v in metrics.values())
        assert metrics["mean_cost"] > 0

    def test_parameters_change(self):
        policy = tiny_policy()
        policy.train()
        gen = torch.Generator().manual_seed(0)
        optimizer = torch.optim.Adam(policy.parameters(), lr=1e-2)
        before = parameter_checksums(policy)
        coords = ProblemBatch.sample(TaskKind.MTSP, 8, 6, 2, generator=gen).coords
        reinforce_step(policy, optimizer, coords, 4, gen, TaskKind.MTSP, 6, 2)
        assert parameter_checksums(policy) != before


class TestTrainLoop:
    def test_run_directory_contents(self, tmp_path):
        policy = tiny_policy()
        cfg = TrainConfig(
            batch_size=4, num_symmetric=2, train_n=5, train_m=2,
            total_steps=6, checkpoint_every=5, seed=0,
        )
        history = train(policy, cfg, tmp_path / "run", log_every=2)
        assert (tmp_path / "run" / "train_config.json").exists()
        assert (tmp_path / "run" / "model_config.json").exists()
        assert (tmp_path / "run" / "checkpoint_final.pt").exists()
        assert (tmp_path / "run" / "checkpoint_0000005.pt").exists()
        lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "step,mean_cost,loss,grad_norm"
        assert len(lines) > 1
        assert history and history[-1]["step"] == 6

    def test_seeded_determinism(self, tmp_path):
        sums = []
        for attempt in range(2):
            policy = tiny_policy(seed=3)
            cfg = TrainConfig(
                batch_size=4, num_symmetric=2, train_n=5, train_m=2,
                total_steps=10, checkpoint_every=0, seed=17,
            )
            train(policy, cfg, None)
            sums.append(parameter_checksums(policy))
        assert sums[0] == sums[1]


class TestFinetune:
    def test_only_context_changes(self, tmp_path):
        policy = tiny_policy()
        before = parameter_checksums(policy)
        cfg = FinetuneConfig(
            target_n=8, target_m=2, batch_size=4, num_symmetric=2, budget_steps=5, seed=0
        )
        finetune(policy, cfg, tmp_path / "ft")
        after = parameter_checksums(policy)
        assert after["theta_en"] == before["theta_en"]
        assert after["theta_de"] == before["theta_de"]
        assert after["theta_context"] != before["theta_context"]

    def test_zero_budget_changes_nothing(self):
        policy = tiny_policy()
        before = parameter_checksums(policy)
        cfg = FinetuneConfig(target_n=8, target_m=2, batch_size=4, budget_steps=0)
        finetune(policy, cfg, None)
        assert parameter_checksums(policy) == before

    def test_target_scale_ratio_default(self):
        cfg = FinetuneConfig(target_n=200, budget_steps=1)
        assert 10 <= cfg.target_n / cfg.agents <= 20
