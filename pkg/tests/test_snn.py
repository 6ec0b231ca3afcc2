import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import lif_ode_spike_times
from spikegait.errors import InvalidArgument, NumericError, StateError
from spikegait.snn import (
    DynamicConfig,
    DynamicStream,
    LifParams,
    MoseLayer,
    SpikingGate,
    SpikingLayer,
    SurrogateConfig,
    expert_params,
    geometric_mean,
    lif_backward,
    lif_step,
    mose_backward,
    record_forward,
    smooth_step,
    spike,
    surrogate_grad,
    synaptic_current,
)

D = torch.float64


def run_lif(params, drive, steps):
    u = torch.tensor([params.u_reset], dtype=D)
    us, ss = [], []
    for _ in range(steps):
        u, s = lif_step(u, torch.tensor([drive], dtype=D), params)
        us.append(float(u))
        ss.append(float(s))
    return us, ss


# --- single neuron -----------------------------------------------------------

@pytest.mark.parametrize("tau", [2.0, 8.0, 32.0])
def test_zero_input_decay_is_geometric(tau):
    p = LifParams(tau=tau, u_th=10.0)
    u = torch.tensor([0.9], dtype=D)
    for n in range(1, 101):
        u, s = lif_step(u, torch.zeros(1, dtype=D), p)
        assert float(s) == 0.0
        assert abs(float(u) - 0.9 * (1 - 1 / tau) ** n) <= 1e-12


@pytest.mark.parametrize("tau,R,drive", [(4.0, 1.0, 0.7), (8.0, 2.0, 0.45), (32.0, 32.0, 0.02)])
def test_subthreshold_steady_state(tau, R, drive):
    p = LifParams(tau=tau, R=R)
    us, ss = run_lif(p, drive, int(tau * 20))
    assert sum(ss) == 0
    assert abs(us[-1] - R * drive) < 1e-6


@pytest.mark.parametrize("tau", [4.0, 8.0])
@pytest.mark.parametrize("drive", [1.3, 2.0, 4.0])
def test_suprathreshold_period_matches_ode(tau, drive):
    p = LifParams(tau=tau)
    _, ss = run_lif(p, drive, 200)
    steps = [i + 1 for i, s in enumerate(ss) if s]
    period = (steps[-1] - steps[0]) / (len(steps) - 1)
    ode = lif_ode_spike_times(drive, tau, 1.0, steps=200, substeps=100)
    ode_period = (ode[-1] - ode[0]) / (len(ode) - 1)
    assert abs(period - ode_period) <= 1.0
    assert abs(steps[0] - ode[0]) <= 1.0


def test_hard_reset_and_threshold_inclusive():
    p = LifParams(tau=2.0, u_th=1.0, u_reset=-0.25)
    # one step from u_reset with R I = 2.25 lands exactly on u_th
    u, s = lif_step(torch.tensor([-0.25], dtype=D), torch.tensor([2.25], dtype=D), p)
    assert float(s) == 1.0 and float(u) == -0.25


def test_parameter_validation():
    with pytest.raises(InvalidArgument):
        LifParams(tau=0.4)
    with pytest.raises(InvalidArgument):
        LifParams(tau=2.0, u_th=0.0, u_reset=0.0)
    with pytest.raises(InvalidArgument):
        SurrogateConfig(beta=0)
    with pytest.raises(InvalidArgument):
        SurrogateConfig(kind="arctan")
    with pytest.raises(NumericError):
        lif_step(torch.zeros(1), torch.tensor([float("nan")]), LifParams(tau=2.0))


# --- surrogate ---------------------------------------------------------------

@given(st.floats(-5, 5), st.floats(0.5, 10))
def test_surrogate_is_derivative_of_smooth_step(x, beta):
    t = torch.tensor([x], dtype=D, requires_grad=True)
    smooth_step(t, beta).backward()
    expected = beta / (2 * (1 + beta * abs(x)) ** 2)
    assert float(t.grad) == pytest.approx(expected, rel=1e-12)
    assert float(surrogate_grad(t.detach(), beta)) == pytest.approx(expected, rel=1e-12)


def test_hard_spike_uses_surrogate_backward():
    x = torch.tensor([-0.3, 0.0, 0.2], dtype=D, requires_grad=True)
    s = spike(x, SurrogateConfig(beta=4.0))
    assert s.tolist() == [0.0, 1.0, 1.0]
    s.sum().backward()
    expected = [4.0 / (2 * (1 + 4 * abs(v)) ** 2) for v in (-0.3, 0.0, 0.2)]
    np.testing.assert_allclose(x.grad.numpy(), expected, rtol=1e-14)


def test_smooth_layer_passes_torch_gradcheck():
    g = torch.Generator().manual_seed(0)
    layer = SpikingLayer(3, 2, LifParams(tau=4.0, R=4.0), generator=g, dtype=D)
    seq = torch.rand(5, 2, 3, dtype=D, generator=g, requires_grad=True)
    w = layer.weight.detach().clone().requires_grad_()

    def f(s, w):
        return torch.func.functional_call(layer, {"weight": w}, (s,), {"smooth": True})

    assert torch.autograd.gradcheck(f, (seq, w))


# --- synapses ----------------------------------------------------------------

def test_synaptic_current_matches_loop():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 3))
    s = (rng.random((2, 3, 5)) < 0.5).astype(float)
    got = synaptic_current(torch.tensor(s), torch.tensor(w)).numpy()
    for b in range(2):
        for o in range(4):
            for x in range(5):
                assert got[b, o, x] == pytest.approx(sum(w[o, i] * s[b, i, x] for i in range(3)), abs=1e-14)
    prev = torch.ones(2, 4, 5, dtype=D)
    decayed = synaptic_current(torch.tensor(s), torch.tensor(w), prev, decay=0.5).numpy()
    np.testing.assert_allclose(decayed, got + 0.5, atol=1e-14)


def test_patch_synapses_match_neighbourhood_sum():
    g = torch.Generator().manual_seed(1)
    layer = SpikingLayer(2, 3, LifParams(tau=2.0, u_th=1e9), generator=g, dtype=D, kernel_size=3)
    x = (torch.rand(1, 1, 2, 4, 5, generator=g, dtype=D) < 0.5).to(D)
    rec = []
    layer(x, record=rec)
    w = layer.weight.detach().reshape(3, 2, 3, 3).numpy()
    xs = np.pad(x[0, 0].numpy(), ((0, 0), (1, 1), (1, 1)))
    current = np.zeros((3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                current[o, i, j] = np.sum(w[o] * xs[:, i:i + 3, j:j + 3])
    # one step from rest: u = (dt / tau) * R * I
    np.testing.assert_allclose(rec[0][0].numpy(), current / 2.0, atol=1e-13)


def test_kernel_size_must_be_odd():
    with pytest.raises(InvalidArgument):
        SpikingLayer(2, 2, LifParams(tau=2.0), kernel_size=2)


def test_channel_mismatch():
    layer = SpikingLayer(3, 2, LifParams(tau=2.0))
    with pytest.raises(InvalidArgument):
        layer(torch.zeros(4, 1, 5))


# --- time-constant regimes ---------------------------------------------------

def test_slow_expert_integrates_sparse_input_fast_expert_does_not():
    seq = torch.zeros(64, 1, 1, dtype=D)
    seq[::8] = 1.0
    rates = {}
    for tau in (2.0, 32.0):
        layer = SpikingLayer(1, 1, expert_params(tau), dtype=D)
        with torch.no_grad():
            layer.weight.fill_(0.4)
        rates[tau] = float(layer(seq).detach().sum())
    assert rates[2.0] == 0 and rates[32.0] > 0


def test_fast_expert_tracks_dense_bursts():
    # a burst of 3 consecutive spikes after a long silence, repeated
    seq = torch.zeros(60, 1, 1, dtype=D)
    for start in range(0, 60, 20):
        seq[start:start + 3] = 1.0
    layer = SpikingLayer(1, 1, expert_params(2.0), dtype=D)
    with torch.no_grad():
        layer.weight.fill_(0.6)
    out = layer(seq)[:, 0, 0]
    fired = torch.nonzero(out).flatten().tolist()
    assert fired and all(f % 20 < 4 for f in fired)


def test_expert_input_gain_is_tau_independent():
    for tau in (2.0, 8.0, 32.0):
        p = expert_params(tau)
        u, _ = lif_step(torch.zeros(1, dtype=D), torch.tensor([0.3], dtype=D), p)
        assert float(u) == pytest.approx(0.3, abs=1e-15)


# --- mixture -----------------------------------------------------------------

def _mose(taus=(2.0, 8.0, 32.0), seed=0, **kw):
    g = torch.Generator().manual_seed(seed)
    return MoseLayer(4, 5, taus, gate_hidden=6, generator=g, dtype=D, init_gain=3.0, **kw)


def _seq(seed=0, shape=(8, 3, 4, 6, 6)):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(*shape, generator=g, dtype=D) < 0.4).to(D)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_one_hot_gate_selects_expert_exactly(k):
    layer, seq = _mose(), _seq()
    alpha = torch.zeros(3, 3, dtype=D)
    alpha[:, k] = 1.0
    mixed, _ = layer(seq, alpha=alpha)
    assert torch.equal(mixed, layer.experts[k](seq))


def test_identical_experts_collapse_to_one():
    layer = _mose(taus=(8.0, 8.0, 8.0), distinct_taus=False)
    with torch.no_grad():
        for e in layer.experts[1:]:
            e.weight.copy_(layer.experts[0].weight)
    seq = _seq(1)
    single = layer.experts[0](seq)
    for seed in range(5):
        a = torch.distributions.Dirichlet(torch.ones(3, dtype=D)).sample((3,))
        mixed, _ = layer(seq, alpha=a)
        assert torch.max(torch.abs(mixed - single)) <= 1e-12


def test_duplicate_taus_rejected_by_default():
    with pytest.raises(InvalidArgument):
        _mose(taus=(8.0, 8.0, 2.0))


def test_gate_output_on_simplex():
    layer = _mose()
    for seed in range(100):
        g = torch.Generator().manual_seed(seed)
        seq = torch.rand(6, 2, 4, 3, 3, generator=g, dtype=D) * 3
        a = layer.gate(seq)
        assert a.shape == (2, 3)
        assert torch.all(a >= 0)
        assert torch.max(torch.abs(a.sum(dim=1) - 1)) <= 1e-12


def test_gate_time_constant_is_geometric_mean():
    layer = _mose()
    assert geometric_mean([2.0, 8.0, 32.0]) == pytest.approx(8.0, rel=1e-14)
    assert layer.gate.layer.params.tau == pytest.approx(8.0, rel=1e-14)


def test_gate_sees_spatial_mean():
    gate = SpikingGate(2, 3, hidden=4, generator=torch.Generator().manual_seed(0), dtype=D, init_gain=3.0)
    seq = _seq(2, (5, 2, 2, 4, 4))
    pooled = seq.flatten(3).mean(3)
    assert torch.equal(gate(seq), gate(pooled))


def test_mixture_time_average_is_alpha_weighted_rate():
    layer, seq = _mose(), _seq(3)
    mixed, alpha = layer(seq)
    rates = [e(seq).mean(0) for e in layer.experts]
    expected = sum(alpha[:, i].reshape(-1, 1, 1, 1) * rates[i] for i in range(3))
    assert torch.allclose(mixed.mean(0), expected, atol=1e-12)


# --- dynamic stream and recorded backward ------------------------------------

def test_dynamic_stream_shapes_and_alphas():
    cfg = DynamicConfig(in_channels=4, widths=(5, 6), gate_hidden=3, input_pool=2, kernel_size=3)
    net = DynamicStream(cfg, torch.Generator().manual_seed(0), dtype=D)
    out = net(torch.rand(2, 5, 4, 8, 8, dtype=D))
    assert out.shape == (2, 6)
    assert len(net.last_alphas) == 2
    for a in net.last_alphas:
        assert torch.allclose(a.sum(1), torch.ones(2, dtype=D), atol=1e-12)
    with pytest.raises(InvalidArgument):
        net(torch.rand(2, 5, 3, 8, 8, dtype=D))


def test_recorded_backward_matches_autograd_and_is_single_use():
    layer, seq = _mose(), _seq(4)
    up = torch.rand(8, 3, 5, 6, 6, dtype=D)
    rec = record_forward(layer, seq, smooth=True)
    grads = mose_backward(rec, up)
    x = seq.clone().requires_grad_()
    out, _ = layer(x, smooth=True)
    ref = torch.autograd.grad(out, [x] + list(layer.parameters()), up)
    assert torch.allclose(grads["inputs"][0], ref[0], atol=1e-12)
    for (name, _), r in zip(layer.named_parameters(), ref[1:]):
        assert torch.allclose(grads["params"][name], r, atol=1e-12)
    with pytest.raises(StateError):
        mose_backward(rec, up)


def test_backward_without_forward():
    with pytest.raises(StateError):
        lif_backward(None, torch.zeros(1))
