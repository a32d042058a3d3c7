import math

import numpy as np
import pytest
import torch
from scipy import stats

from dreamcell.dynamics import (
    DynamicsConfig, DynamicsModel, ShortcutConfig, commit_frame, corrupt,
    generate, prefill_context, rollout_frame, sample_schedule,
    shortcut_forcing_loss, x_to_v,
)
from dreamcell.heads import MTPConfig
from dreamcell.transformer import AttentionConfig

torch.manual_seed(0)


def tiny_config(window=6, layers=2, dim=32, spatial=4, channels=4, k_max=8):
    return DynamicsConfig(
        spatial=spatial, channels=channels, registers=2,
        core=AttentionConfig(layers=layers, dim=dim, q_heads=2, kv_heads=1,
                             temporal_period=2, window=window),
        shortcut=ShortcutConfig(k_max=k_max, k_inf=4),
        mtp=MTPConfig(horizon=2))


# ------------------------------------------------------------ schedules

def test_schedule_d1_forces_sigma0():
    g = torch.Generator().manual_seed(0)
    sigma, d = sample_schedule((2000,), 1, g)
    assert (d == 1.0).all()
    assert (sigma == 0.0).all()


def test_schedule_frequencies_chi2():
    g = torch.Generator().manual_seed(1)
    sigma, d = sample_schedule((10_000,), 4, g)
    counts = [(d == 1.0).sum().item(), (d == 0.5).sum().item(),
              (d == 0.25).sum().item()]
    assert sum(counts) == 10_000
    chi2 = stats.chisquare(counts)
    assert chi2.pvalue > 0.01


def test_schedule_grid_invariants():
    g = torch.Generator().manual_seed(2)
    sigma, d = sample_schedule((5000,), 16, g)
    assert (sigma + d <= 1.0 + 1e-9).all()
    ratio = (sigma / d).double()
    assert ((ratio - ratio.round()).abs() < 1e-9).all()
    # sigma grid frequencies for a fixed d are uniform too
    mask = d == 0.25
    vals, counts = torch.unique(sigma[mask], return_counts=True)
    assert set(vals.tolist()) == {0.0, 0.25, 0.5, 0.75}
    assert stats.chisquare(counts.numpy()).pvalue > 0.01


# ------------------------------------------------------------ corrupt / x_to_v

def test_corrupt_endpoints():
    z1, z0 = torch.ones(2, 3), torch.zeros(2, 3)
    assert torch.equal(corrupt(z1, z0, torch.tensor(1.0)), z1)
    assert torch.equal(corrupt(z1, z0, torch.tensor(0.0)), z0)
    out = corrupt(torch.full((1,), 2.0), torch.zeros(1), torch.tensor(0.25))
    assert torch.allclose(out, torch.tensor([0.5]))


def test_x_to_v_examples():
    z = torch.randn(4)
    assert torch.allclose(x_to_v(z, z, torch.tensor(0.0)), torch.zeros(4))
    v = x_to_v(torch.tensor([1.0]), torch.tensor([0.5]), torch.tensor(0.5))
    assert torch.allclose(v, torch.tensor([1.0]))
    # round trip: z + v * (1 - sigma) = x_pred exactly
    x_pred, z_noisy = torch.randn(8), torch.randn(8)
    sigma = torch.tensor(0.75)
    v = x_to_v(x_pred, z_noisy, sigma)
    assert torch.allclose(z_noisy + v * 0.25, x_pred, atol=1e-6)
    with pytest.raises(ValueError):
        x_to_v(x_pred, z_noisy, torch.tensor(0.99), d_min=1 / 16)


def test_ramp_weight():
    cfg = ShortcutConfig()
    w = cfg.ramp(torch.tensor([0.0, 0.5, 1.0]))
    assert torch.allclose(w, torch.tensor([0.1, 0.55, 1.0]))


# ------------------------------------------------------------ shortcut loss

class StubModel:
    """Callable standing in for the dynamics net: returns a fixed function
    of the inputs so loss branches can be checked in closed form."""

    def __init__(self, cfg, fn):
        self.cfg = cfg
        self.fn = fn

    def __call__(self, z, sigma, d, *args, **kwargs):
        return self.fn(z, sigma, d), None


def test_flow_branch_zero_for_perfect_model():
    cfg = tiny_config(k_max=4)
    B, T = 2, 3
    z1 = torch.randn(B, T, cfg.spatial, cfg.channels)
    model = StubModel(cfg, lambda z, s, d: z1)
    sigma = torch.full((B, T), 0.25)
    d = torch.full((B, T), 0.25)  # d == d_min: flow branch everywhere
    loss, parts, _ = shortcut_forcing_loss(model, z1, None, schedule=(sigma, d))
    assert loss.item() < 1e-12
    assert parts["flow"] < 1e-12


def test_bootstrap_identity_linear_flow():
    """With an exact x-predictor, the d-step v-target equals the endpoint of
    two explicit d/2 Euler steps (hand-rolled oracle)."""
    cfg = tiny_config(k_max=8)
    B, T = 2, 3
    z1 = torch.randn(B, T, cfg.spatial, cfg.channels, dtype=torch.float64)
    z0 = torch.randn_like(z1)
    sigma = torch.full((B, T), 0.25, dtype=torch.float64)
    d = torch.full((B, T), 0.25, dtype=torch.float64)  # bootstrap: d > 1/8
    z_noisy = corrupt(z1, z0, sigma)

    model = StubModel(cfg, lambda z, s, dd: z1)  # exact predictor
    # internal target construction
    b1 = (z1 - z_noisy) / (1 - sigma)[..., None, None]
    z_mid = z_noisy + b1 * (d / 2)[..., None, None]
    b2 = (z1 - z_mid) / (1 - sigma - d / 2)[..., None, None]
    v_tgt = (b1 + b2) / 2
    one_step = z_noisy + v_tgt * d[..., None, None]

    # independent oracle: two explicit half steps of Euler with the exact model
    euler = z_noisy.clone()
    for s_val in (sigma, sigma + d / 2):
        v = (z1 - euler) / (1 - s_val)[..., None, None]
        euler = euler + v * (d / 2)[..., None, None]
    assert torch.allclose(one_step, euler, atol=1e-12)

    # the loss built from that target vanishes for the exact model
    loss, parts, _ = shortcut_forcing_loss(model, z1, None,
                                           schedule=(sigma.float(), d.float()))
    assert loss.item() < 1e-10


def test_xv_duality_at_sigma_zero():
    cfg = tiny_config(k_max=4)
    B, T = 1, 2
    z1 = torch.randn(B, T, cfg.spatial, cfg.channels)
    fixed = torch.randn_like(z1)
    model = StubModel(cfg, lambda z, s, d: fixed)
    sigma = torch.zeros(B, T)
    d = torch.full((B, T), 0.5)
    noise = torch.randn_like(z1)
    loss, _, _ = shortcut_forcing_loss(model, z1, None, schedule=(sigma, d),
                                       noise=noise)
    # by hand: z_noisy = noise at sigma=0; b1 = fixed - noise;
    # z_mid = noise + b1/4; b2 = (fixed - z_mid)/0.75; v_pred = fixed - noise
    z_noisy = noise
    b1 = fixed - z_noisy
    z_mid = z_noisy + b1 * 0.25
    b2 = (fixed - z_mid) / 0.75
    v_tgt = (b1 + b2) / 2
    expect = ((fixed - z_noisy) - v_tgt).pow(2).mean(dim=(-1, -2)) * 0.1  # w(0)
    assert torch.allclose(loss, expect.mean(), atol=1e-6)


def test_schedule_violation_rejected():
    cfg = tiny_config(k_max=4)
    z1 = torch.randn(1, 2, cfg.spatial, cfg.channels)
    model = StubModel(cfg, lambda z, s, d: z1)
    bad_sigma = torch.full((1, 2), 0.3)
    d = torch.full((1, 2), 0.25)
    with pytest.raises(ValueError):
        shortcut_forcing_loss(model, z1, None, schedule=(bad_sigma, d))


# ------------------------------------------------------------ model + sampling

def test_encode_actions_structure():
    model = DynamicsModel(tiny_config())
    none_tok = model.encode_actions(None, shape=(1, 1))
    a = torch.tensor([[[1, 0, 0]]])
    b = torch.tensor([[[1, 0, 1]]])
    tok_a = model.encode_actions(a)
    tok_b = model.encode_actions(b)
    assert not torch.allclose(none_tok, tok_a)
    diff = (tok_b - tok_a).squeeze()
    expect = model.use_embed.weight[1] - model.use_embed.weight[0]
    assert torch.allclose(diff, expect, atol=1e-6)
    assert tok_a.shape == (1, 1, 1, model.cfg.core.dim)  # S_a = 1


def test_rollout_k1_is_x_prediction():
    cfg = tiny_config()
    model = DynamicsModel(cfg)
    g = torch.Generator().manual_seed(0)
    z_ctx = torch.rand(1, 2, cfg.spatial, cfg.channels) * 1.6 - 0.8
    cache, _ = prefill_context(model, z_ctx, None, None, g)
    torch.manual_seed(5)
    with torch.no_grad():
        z = rollout_frame(model, cache, None, None, k_inf=1, generator=None)
    # replay: same noise draw, single Euler step of length 1 from sigma=0
    torch.manual_seed(5)
    z0 = torch.randn(1, 1, cfg.spatial, cfg.channels)
    with torch.no_grad():
        x_pred, _ = model(z0, torch.zeros(1, 1), torch.ones(1, 1),
                          cache=cache, commit=False)
    assert torch.allclose(z, x_pred.squeeze(1), atol=1e-6)


def test_rollout_forward_count_and_determinism():
    cfg = tiny_config()
    model = DynamicsModel(cfg)
    g = torch.Generator().manual_seed(0)
    z_ctx = torch.rand(1, 3, cfg.spatial, cfg.channels) * 1.6 - 0.8
    cache, _ = prefill_context(model, z_ctx, None, None, g)
    model.forward_count = 0
    with torch.no_grad():
        z = rollout_frame(model, cache, None, None, k_inf=4,
                          generator=torch.Generator().manual_seed(7))
    assert model.forward_count == 4
    with torch.no_grad():
        z2 = rollout_frame(model, cache, None, None, k_inf=4,
                           generator=torch.Generator().manual_seed(7))
    assert torch.equal(z, z2)


def test_sampling_grid_closure():
    cfg = ShortcutConfig(k_max=16, k_inf=4)
    for k in range(cfg.k_inf):
        sigma = k / cfg.k_inf
        assert abs(sigma * cfg.k_max - round(sigma * cfg.k_max)) < 1e-9
        assert sigma + 1 / cfg.k_inf <= 1.0


def test_generate_lengths_and_ring():
    cfg = tiny_config(window=4)
    model = DynamicsModel(cfg)
    g = torch.Generator().manual_seed(0)
    z_ctx = torch.rand(1, 2, cfg.spatial, cfg.channels) * 1.6 - 0.8
    with torch.no_grad():
        empty = generate(model, z_ctx, None, None, 0, generator=g)
        assert empty.shape[1] == 0
        n = cfg.core.window + 6
        out = generate(model, z_ctx, None, None, n,
                       generator=torch.Generator().manual_seed(1))
    assert out.shape == (1, n, cfg.spatial, cfg.channels)


def test_generation_causal_in_actions():
    cfg = tiny_config()
    model = DynamicsModel(cfg)
    z_ctx = torch.rand(1, 2, cfg.spatial, cfg.channels) * 1.6 - 0.8
    acts_a = torch.zeros(1, 3, 3, dtype=torch.long)
    acts_b = acts_a.clone()
    acts_b[0, 2] = torch.tensor([2, 1, 1])  # differ only at the last step
    with torch.no_grad():
        out_a = generate(model, z_ctx, None, acts_a, 3,
                         generator=torch.Generator().manual_seed(3))
        out_b = generate(model, z_ctx, None, acts_b, 3,
                         generator=torch.Generator().manual_seed(3))
    assert torch.equal(out_a[:, :2], out_b[:, :2])
    assert not torch.equal(out_a[:, 2], out_b[:, 2])


def test_image_mode_isolation():
    cfg = tiny_config()
    model = DynamicsModel(cfg)
    B, T = 2, 4
    z = torch.rand(B, T, cfg.spatial, cfg.channels)
    sigma = torch.full((B, T), 0.5)
    d = torch.full((B, T), 0.25)
    z2 = z.clone()
    z2[:, 0] += 0.5
    flag = torch.tensor([True, False])
    with torch.no_grad():
        a, _ = model(z, sigma, d, image_mode=flag)
        b, _ = model(z2, sigma, d, image_mode=flag)
    assert torch.equal(a[0, 1:], b[0, 1:])
    assert not torch.equal(a[1, 1:], b[1, 1:])


def test_gradcheck_shortcut_loss_both_branches():
    torch.manual_seed(2)
    cfg = tiny_config(layers=2, dim=16, spatial=2, channels=2, k_max=4)
    model = DynamicsModel(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.15)  # generic point, no tiny-grad coords
    B, T = 2, 4
    z1 = (torch.rand(B, T, 2, 2, dtype=torch.float64) * 1.6 - 0.8)
    actions = torch.randint(0, 2, (B, T, 3))
    noise = torch.randn(B, T, 2, 2, dtype=torch.float64)
    # both branches present: flow steps (d = 1/4 = d_min) and bootstrap steps
    sigma = torch.tensor([[0.25, 0.0, 0.5, 0.75],
                          [0.5, 0.25, 0.0, 0.25]], dtype=torch.float64)
    d = torch.tensor([[0.25, 0.5, 0.5, 0.25],
                      [0.5, 0.25, 1.0, 0.25]], dtype=torch.float64)

    # freeze the stop-gradient side: finite differences must not see the
    # bootstrap targets move with the parameters
    from dreamcell.dynamics import bootstrap_targets, corrupt as _corrupt
    z_noisy = _corrupt(z1, noise, sigma)
    v_tgt = bootstrap_targets(model, z_noisy, sigma, d, actions)

    def loss_fn():
        loss, _, _ = shortcut_forcing_loss(model, z1, actions,
                                           schedule=(sigma, d), noise=noise,
                                           targets=v_tgt)
        return loss

    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(1)
    checked = failed = 0
    h = 1e-3
    for p in model.parameters():
        if p.grad is None:
            continue
        flat, gflat = p.data.view(-1), p.grad.view(-1)
        for i in rng.choice(len(flat), size=min(6, len(flat)), replace=False):
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
    assert checked >= 100
    assert failed / checked <= 0.01


@pytest.mark.slow
def test_loss_decrease_and_action_selection():
    """Two-frame synthetic task: the action's use bit selects the latent
    pattern of frame 1. Flow loss must collapse and 4-step sampling must
    recover the right pattern sign."""
    torch.manual_seed(3)
    cfg = tiny_config(window=4, layers=2, dim=48, spatial=4, channels=4, k_max=8)
    model = DynamicsModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    pattern = torch.randn(4, 4).sign() * 0.7
    g = torch.Generator().manual_seed(0)

    def batch(B=32):
        use = torch.randint(0, 2, (B,), generator=g)
        z1 = torch.zeros(B, 2, 4, 4)
        z1[:, 0] = 0.1
        z1[:, 1] = torch.where(use.view(-1, 1, 1).bool(), pattern, -pattern)
        actions = torch.zeros(B, 2, 3, dtype=torch.long)
        actions[:, 1, 2] = use
        return z1, actions

    first = None
    flow = None
    for step in range(2000):
        z1, actions = batch(32)
        loss, parts, _ = shortcut_forcing_loss(model, z1, actions, generator=g)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if parts["flow_frac"] > 0:
            flow = parts["flow"]
            if first is None:
                first = flow
    assert flow < 0.1 * first

    hits = 0
    trials = 40
    with torch.no_grad():
        for i in range(trials):
            use = i % 2
            ctx = torch.full((1, 1, 4, 4), 0.1)
            act = torch.tensor([[[0, 0, use]]])
            out = generate(model, ctx, None, act, 1,
                           generator=torch.Generator().manual_seed(i))
            want = pattern if use else -pattern
            acc = ((out[0, 0].sign() == want.sign()).float().mean())
            hits += float(acc)
    assert hits / trials >= 0.95
