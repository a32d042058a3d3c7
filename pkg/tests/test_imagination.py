import numpy as np
import pytest
import torch

from dreamcell.dynamics import DynamicsConfig, DynamicsModel, ShortcutConfig
from dreamcell.heads import AgentHeads, MTPConfig, policy_log_prob
from dreamcell.imagination import (
    RLConfig, imagine, lambda_returns, pmpo_partition, pmpo_terms, value_loss,
)
from dreamcell.transformer import AttentionConfig

torch.manual_seed(0)


def oracle_lambda_returns(r, v, c, gamma, lam):
    """Forward n-step-mixture expansion with explicit telescoping products:
    an independent, non-recursive path to the same quantity."""
    T = len(r)
    out = np.zeros(T)
    for t in range(T):
        total = 0.0
        for k in range(t, T - 1):
            prod = 1.0
            for j in range(t, k):
                prod *= gamma * lam * c[j]
            total += prod * (r[k] + gamma * c[k] * (1 - lam) * v[k])
        prod = 1.0
        for j in range(t, T - 1):
            prod *= gamma * lam * c[j]
        total += prod * v[T - 1]
        out[t] = total
    return out


def test_lambda_returns_base_case():
    R = lambda_returns(torch.tensor([3.0]), torch.tensor([2.0]),
                       torch.tensor([1.0]), 0.997, 0.95)
    assert R.item() == 2.0


def test_lambda_returns_spec_example():
    r = torch.tensor([1.0, 0.0])
    v = torch.tensor([0.0, 2.0])
    c = torch.tensor([1.0, 1.0])
    R = lambda_returns(r, v, c, 0.997, 0.95)
    assert abs(R[1].item() - 2.0) < 1e-7
    expect = 1.0 + 0.997 * (0.05 * 0.0 + 0.95 * 2.0)
    assert abs(R[0].item() - expect) < 1e-6
    assert abs(expect - 2.8943) < 1e-4


def test_lambda_returns_termination():
    r = torch.tensor([1.0, 5.0, 0.0])
    v = torch.tensor([7.0, 3.0, 9.0])
    c = torch.tensor([0.0, 1.0, 1.0])
    R = lambda_returns(r, v, c, 0.997, 0.95)
    assert R[0].item() == 1.0  # c=0 cuts off everything behind it


def test_lambda_returns_oracle_1000_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        T = int(rng.integers(1, 9))
        r = rng.normal(size=T)
        v = rng.normal(size=T)
        c = rng.integers(0, 2, size=T).astype(float)
        gamma = rng.uniform(0.9, 0.999)
        lam = rng.uniform(0.8, 0.99)
        ours = lambda_returns(torch.tensor(r), torch.tensor(v), torch.tensor(c),
                              gamma, lam).numpy()
        ref = oracle_lambda_returns(r, v, c, gamma, lam)
        assert np.abs(ours - ref).max() < 1e-6


def test_lambda_returns_batched():
    r = torch.randn(4, 6)
    v = torch.randn(4, 6)
    c = torch.randint(0, 2, (4, 6)).float()
    R = lambda_returns(r, v, c, 0.99, 0.9)
    for b in range(4):
        Rb = lambda_returns(r[b], v[b], c[b], 0.99, 0.9)
        assert torch.allclose(R[b], Rb)


def test_pmpo_partition():
    A = torch.tensor([1.0, -1.0, 0.0])
    pos = pmpo_partition(A)
    assert pos.tolist() == [True, False, True]  # A = 0 joins D+
    assert pmpo_partition(torch.tensor([2.0, 3.0])).all()
    assert (pos.long().sum() + (~pos).long().sum()) == 3


def test_pmpo_balanced_cancellation():
    logits = torch.zeros(2, 11)  # identical states -> equal log-probs
    actions = torch.zeros(2, 3, dtype=torch.long)
    pos = torch.tensor([True, False])
    loss, _ = pmpo_terms(logits, actions, pos, logits.clone(), alpha=0.5, beta=0.0)
    assert abs(loss.item()) < 1e-7


def test_pmpo_prior_match_zero_kl():
    logits = torch.randn(3, 11)
    actions = torch.randint(0, 2, (3, 3))
    pos = torch.tensor([True, True, False])
    _, kl = pmpo_terms(logits, actions, pos, logits.clone(), 0.5, 0.3)
    assert kl.abs().item() < 1e-6


def test_pmpo_degenerate_is_bc_gradient():
    logits = torch.randn(1, 11, requires_grad=True)
    actions = torch.tensor([[2, 1, 1]])
    pos = torch.tensor([True])
    loss, _ = pmpo_terms(logits, actions, pos, logits.detach(), alpha=1.0, beta=0.0)
    loss.backward()
    g_pmpo = logits.grad.clone()
    logits.grad = None
    nll = -policy_log_prob(logits, actions).mean()
    nll.backward()
    assert torch.allclose(g_pmpo, logits.grad, atol=1e-6)


def test_pmpo_advantage_scale_invariance():
    torch.manual_seed(1)
    logits = torch.randn(6, 11)
    actions = torch.randint(0, 2, (6, 3))
    prior = torch.randn(6, 11)
    A = torch.randn(6)
    loss_a, _ = pmpo_terms(logits, actions, pmpo_partition(A), prior)
    loss_b, _ = pmpo_terms(logits, actions, pmpo_partition(A * 10.0), prior)
    assert torch.equal(loss_a, loss_b)


def test_empty_negative_set():
    logits = torch.randn(3, 11)
    actions = torch.randint(0, 2, (3, 3))
    pos = torch.ones(3, dtype=torch.bool)
    loss, _ = pmpo_terms(logits, actions, pos, logits.clone(), 0.5, 0.0)
    lp = policy_log_prob(logits, actions)
    assert torch.allclose(loss, -0.5 * lp.mean(), atol=1e-6)


def test_value_loss_gradcheck():
    torch.manual_seed(2)
    heads = AgentHeads(dim=8, mtp=MTPConfig(horizon=1)).double()
    states = torch.randn(2, 4, 8, dtype=torch.float64)
    returns = torch.randn(2, 4, dtype=torch.float64) * 3

    def loss_fn():
        return value_loss(heads, states, returns)

    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(0)
    checked = failed = 0
    h = 1e-3
    for p in heads.value.parameters():
        flat, gflat = p.data.view(-1), p.grad.view(-1)
        for i in rng.choice(len(flat), size=min(8, len(flat)), replace=False):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            g = gflat[i].item()
            checked += 1
            if abs(fd - g) / max(abs(fd), abs(g), 1e-8) > 1e-4:
                failed += 1
    assert failed / checked <= 0.01


def _tiny_model():
    cfg = DynamicsConfig(
        spatial=4, channels=4, registers=2,
        core=AttentionConfig(layers=2, dim=32, q_heads=2, kv_heads=1,
                             temporal_period=2, window=6),
        shortcut=ShortcutConfig(k_max=8, k_inf=2),
        mtp=MTPConfig(horizon=2))
    return DynamicsModel(cfg)


def test_imagine_shapes_and_determinism():
    model = _tiny_model()
    rl = RLConfig(horizon=3)
    B = 2
    ctx = torch.rand(B, 2, 4, 4) * 1.6 - 0.8
    task = torch.zeros(B, dtype=torch.long)
    traj_a = imagine(model, ctx, None, task, rl,
                     generator=torch.Generator().manual_seed(0))
    traj_b = imagine(model, ctx, None, task, rl,
                     generator=torch.Generator().manual_seed(0))
    assert traj_a.states.shape == (B, 4, 32)
    assert traj_a.actions.shape == (B, 3, 3)
    assert traj_a.latents.shape == (B, 3, 4, 4)
    assert traj_a.returns.shape == (B, 4)
    assert torch.equal(traj_a.latents, traj_b.latents)
    assert torch.equal(traj_a.actions, traj_b.actions)
    # one rollout per context: batch dim preserved
    assert torch.isfinite(traj_a.advantages).all()
    assert torch.allclose(traj_a.returns[:, -1], traj_a.values[:, -1])


def test_imagine_horizon_zero():
    model = _tiny_model()
    rl = RLConfig(horizon=0)
    ctx = torch.rand(1, 2, 4, 4) * 1.6 - 0.8
    traj = imagine(model, ctx, None, torch.zeros(1, dtype=torch.long), rl,
                   generator=torch.Generator().manual_seed(0))
    assert traj.states.shape[1] == 1  # only the context tip
    assert traj.actions.shape[1] == 0
    assert torch.allclose(traj.returns, traj.values)


def test_imagine_requires_context():
    model = _tiny_model()
    with pytest.raises(ValueError):
        imagine(model, torch.zeros(1, 0, 4, 4), None,
                torch.zeros(1, dtype=torch.long), RLConfig(horizon=1))
