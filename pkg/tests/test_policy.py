import math

import numpy as np
import pytest
import torch

from batchlab import policy
from batchlab.env import BatchState
from batchlab.policy import PolicyContext, PolicyNet
from batchlab.trainer import subtb_fl_loss


def _ctx(n=7, seed=0, train=False):
    r = np.random.default_rng(seed)
    x = r.normal(size=n)
    if not train:
        return PolicyContext.build(x)
    from batchlab.data import TrainSet
    m = 4
    return PolicyContext.build(x, TrainSet(np.arange(m), r.normal(size=m), r.normal(size=m)))


def _randomise(net, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return net


def test_state_order_invariance_is_exact():
    net = _randomise(PolicyNet(hidden=32, train_context=True), 1)
    ctx = _ctx(train=True)
    prep = net.prepare(ctx)
    with torch.no_grad():
        a = net.evaluate(prep, torch.tensor([[4, 0, 2]]))
        b = net.evaluate(prep, torch.tensor([[2, 4, 0]]))
    assert torch.equal(a[0], b[0]) and torch.equal(a[2], b[2])
    assert torch.equal(a[1][0, [0, 1, 2]], b[1][0, [1, 2, 0]])
    o1 = net.encode(ctx, BatchState((4, 0, 2), 3))
    o2 = net.encode(ctx, BatchState((2, 4, 0), 3))
    np.testing.assert_array_equal(o1.forward_logits, o2.forward_logits)
    np.testing.assert_array_equal(o1.backward_logits, o2.backward_logits)
    assert o1.log_flow == o2.log_flow


def test_train_context_invariance():
    from batchlab.data import TrainSet
    net = _randomise(PolicyNet(hidden=16, train_context=True), 2)
    r = np.random.default_rng(0)
    x, tx, ty = r.normal(size=5), r.normal(size=4), r.normal(size=4)
    perm = np.array([2, 0, 3, 1])
    c1 = PolicyContext.build(x, TrainSet(np.arange(4), tx, ty))
    c2 = PolicyContext.build(x, TrainSet(np.arange(4), tx[perm], ty[perm]))
    o1, o2 = net.encode(c1, BatchState((1,), 2)), net.encode(c2, BatchState((1,), 2))
    np.testing.assert_allclose(o1.forward_logits, o2.forward_logits, rtol=1e-13)


def test_pool_permutation_equivariance():
    net = _randomise(PolicyNet(hidden=16), 3)
    r = np.random.default_rng(1)
    x = r.normal(size=6)
    perm = r.permutation(6)
    inv = np.argsort(perm)
    o1 = net.encode(PolicyContext.build(x), BatchState((1, 4), 3))
    o2 = net.encode(PolicyContext.build(x[perm]), BatchState(tuple(inv[[1, 4]]), 3))
    np.testing.assert_allclose(o1.forward_logits, o2.forward_logits[inv], rtol=1e-12)


def test_zero_heads_give_uniform_policy():
    net = PolicyNet(hidden=32)
    out = net.encode(_ctx(), BatchState((1, 5), 4))
    allowed = np.isfinite(out.forward_logits)
    assert allowed.sum() == 5 and not allowed[1] and not allowed[5]
    probs = np.exp([policy.log_pf(out, a) for a in np.flatnonzero(allowed)])
    np.testing.assert_allclose(probs, 0.2, rtol=1e-14)
    out3 = net.encode(_ctx(), BatchState((0, 2, 6), 4))
    for e in (0, 2, 6):
        assert policy.log_pb(out3, e) == pytest.approx(-math.log(3), abs=1e-14)
    out1 = net.encode(_ctx(), BatchState((3,), 4))
    assert policy.log_pb(out1, 3) == 0.0


def test_log_pf_normalised_and_errors():
    net = _randomise(PolicyNet(hidden=16), 4)
    out = net.encode(_ctx(), BatchState((2,), 3))
    total = sum(math.exp(policy.log_pf(out, a)) for a in range(7) if a != 2)
    assert total == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        policy.log_pf(out, 2)
    with pytest.raises(ValueError):
        policy.log_pb(out, 5)


def test_masked_index_never_sampled():
    logits = torch.tensor([0.0, 5.0, float("-inf"), 1.0, float("-inf")], dtype=torch.float64)
    rng = np.random.default_rng(0)
    draws = policy.sample_actions(logits.expand(100_000, -1), 0.1, rng)
    assert not np.isin(draws, [2, 4]).any()


def _within_3_sigma(counts, probs):
    n = counts.sum()
    sd = np.sqrt(n * probs * (1 - probs))
    return np.all(np.abs(counts - n * probs) <= 3 * sd)


def test_epsilon_one_is_uniform():
    logits = torch.tensor([0.0, 9.0, float("-inf"), -4.0], dtype=torch.float64)
    draws = policy.sample_actions(logits.expand(100_000, -1), 1.0, np.random.default_rng(1))
    counts = np.bincount(draws, minlength=4)
    assert counts[2] == 0
    assert _within_3_sigma(counts[[0, 1, 3]], np.full(3, 1 / 3))


def test_epsilon_zero_softmax_frequencies():
    logits = torch.tensor([0.0, math.log(3)], dtype=torch.float64)
    draws = policy.sample_actions(logits.expand(100_000, -1), 0.0, np.random.default_rng(2))
    assert _within_3_sigma(np.bincount(draws, minlength=2), np.array([0.25, 0.75]))


def test_single_allowed_action_and_terminal():
    rng = np.random.default_rng(0)
    out = policy.PolicyOutput(np.array([-np.inf, 0.3, -np.inf]), np.zeros(2), 0.0, (0, 2))
    assert all(policy.sample_action(out, 0.0, rng) == 1 for _ in range(50))
    done = policy.PolicyOutput(np.full(3, -np.inf), np.zeros(3), 0.0, (0, 1, 2))
    with pytest.raises(ValueError):
        policy.sample_action(done, 0.1, rng)


def _fixed_loss(actions, ctx, weights=None):
    actions = torch.as_tensor(actions)

    def loss(net):
        prep = net.prepare(ctx)
        s, b = actions.shape
        rows = torch.arange(s)
        lpf, lpb, flows = [], [], []
        for k in range(b):
            fwd, bwd, flow = net.evaluate(prep, actions[:, :k])
            if k:
                lpb.append(torch.log_softmax(bwd, -1)[:, k - 1])
            flows.append(flow)
            lpf.append(torch.log_softmax(fwd, -1)[rows, actions[:, k]])
        _, bwd, _ = net.evaluate(prep, actions, forward=False)
        lpb.append(torch.log_softmax(bwd, -1)[:, -1])
        ell = torch.linspace(0, 1.5, b + 1, dtype=torch.float64).expand(s, -1)
        return subtb_fl_loss(torch.stack(lpf, 1), torch.stack(lpb, 1), torch.stack(flows, 1), ell, 0.9).sum()

    return loss


def test_gradient_of_constant_is_zero():
    net = PolicyNet(hidden=8)
    g = policy.gradient(lambda n: torch.tensor(3.0, dtype=torch.float64), net)
    assert g.shape == net.flat_params().shape and not g.any()


def test_gradient_matches_finite_differences():
    net = _randomise(PolicyNet(hidden=16, train_context=True), 5, scale=0.4)
    ctx = _ctx(n=6, seed=3, train=True)
    loss = _fixed_loss([[0, 3, 5], [2, 1, 4]], ctx)
    g = policy.gradient(loss, net)
    theta = net.flat_params()
    coords = np.random.default_rng(0).choice(len(theta), size=120, replace=False)
    h = 1e-4
    worst = 0.0
    with torch.no_grad():
        for c in coords:
            t = theta.copy()
            t[c] += h
            net.set_flat_params(t)
            up = float(loss(net))
            t[c] -= 2 * h
            net.set_flat_params(t)
            down = float(loss(net))
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(g[c]), 1e-6)
            worst = max(worst, abs(fd - g[c]) / scale)
    net.set_flat_params(theta)
    assert worst < 1e-4


def test_duplicate_trajectory_doubles_gradient():
    net = _randomise(PolicyNet(hidden=8), 6)
    ctx = _ctx(n=5)
    g1 = policy.gradient(_fixed_loss([[0, 3]], ctx), net)
    g2 = policy.gradient(_fixed_loss([[0, 3], [0, 3]], ctx), net)
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=1e-15)


def test_non_finite_reports_layer():
    net = PolicyNet(hidden=8)
    with torch.no_grad():
        net.pool_encoder[0].weight[0, 0] = float("nan")
    with pytest.raises(policy.NonFiniteError, match="pool_encoder"):
        policy.gradient(_fixed_loss([[0, 1]], _ctx(n=4)), net)


def test_adam_zero_gradient_is_noop():
    p = [torch.tensor([1.0, -2.0], dtype=torch.float64)]
    st = policy.AdamState.zeros_like(p)
    policy.adam_step(p, [torch.zeros(2, dtype=torch.float64)], st, 0.001)
    assert torch.equal(p[0], torch.tensor([1.0, -2.0], dtype=torch.float64))


def test_adam_first_and_second_step():
    p = [torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)]
    g = [torch.tensor([0.3, -4.0, 1e-3], dtype=torch.float64)]
    st = policy.AdamState.zeros_like(p)
    before = p[0].clone()
    policy.adam_step(p, g, st, 0.001)
    step1 = before - p[0]
    # bias-corrected first step: lr * g / (|g| + eps)
    np.testing.assert_allclose(step1.numpy(), 0.001 * g[0].numpy() / (np.abs(g[0].numpy()) + 1e-8), rtol=1e-12)
    before = p[0].clone()
    policy.adam_step(p, g, st, 0.001)
    step2 = (before - p[0]).abs()
    assert torch.all(step2 < 0.001)
    np.testing.assert_allclose(step2.numpy(), 0.001, rtol=1e-4)


def test_checkpoint_roundtrip(tmp_path):
    net = _randomise(PolicyNet(hidden=8, train_context=True), 7)
    params = list(net.parameters())
    st = policy.AdamState.zeros_like(params)
    policy.adam_step(params, [torch.ones_like(p) for p in params], st, 0.01)
    policy.save_checkpoint(tmp_path / "p.npz", net, st)
    net2, st2 = policy.load_checkpoint(tmp_path / "p.npz")
    np.testing.assert_array_equal(net.flat_params(), net2.flat_params())
    assert st2.t == 1
    for a, b in zip(st.v, st2.v):
        assert torch.equal(a, b)
    assert net2.arch == net.arch


def test_output_scale_and_trunk_layers(tmp_path):
    base = _randomise(PolicyNet(hidden=8, seed=0), 9)
    scaled = PolicyNet(hidden=8, seed=0, output_scale=10.0)
    scaled.set_flat_params(base.flat_params())
    ctx = _ctx()
    o1, o2 = base.encode(ctx, BatchState((1,), 3)), scaled.encode(ctx, BatchState((1,), 3))
    np.testing.assert_allclose(o2.forward_logits, 10 * o1.forward_logits, rtol=1e-14)
    assert o2.log_flow == pytest.approx(10 * o1.log_flow, rel=1e-14)
    # the backward policy is not scaled
    np.testing.assert_array_equal(o1.backward_logits, o2.backward_logits)
    deep = PolicyNet(hidden=8, trunk_layers=3, output_scale=2.0)
    assert len(deep.trunk_extra) == 4
    policy.save_checkpoint(tmp_path / "d.npz", deep)
    back, _ = policy.load_checkpoint(tmp_path / "d.npz")
    assert back.arch == deep.arch and back.output_scale == 2.0
    with pytest.raises(ValueError):
        PolicyNet(hidden=8, trunk_layers=0)
    with pytest.raises(ValueError):
        PolicyNet(hidden=8, output_scale=0.0)
