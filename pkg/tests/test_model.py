import inspect
import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from spikegait.errors import DegenerateBatch, DegenerateEmbedding, FormatError, InvalidArgument, NumericError
from spikegait.model import (
    SGD,
    GaitModel,
    LossWeights,
    ModelConfig,
    ce_loss,
    fuse,
    load_model_blobs,
    model_blobs,
    read_checkpoint,
    sgd_step,
    total_loss,
    triplet_loss,
    write_checkpoint,
)
from spikegait.snn import DynamicConfig, MoseLayer
from spikegait.static import StaticConfig

D = torch.float64


# --- published defaults ------------------------------------------------------

def test_published_defaults():
    sig = inspect.signature(sgd_step).parameters
    assert sig["lr"].default == 0.1
    assert sig["weight_decay"].default == 0.0005
    assert LossWeights().lambda_d == 0.2
    assert len(inspect.signature(MoseLayer).parameters["taus"].default) == 3
    assert StaticConfig().input_size == 64


# --- fusion ------------------------------------------------------------------

def test_fuse_unit_norm():
    rng = np.random.default_rng(0)
    for _ in range(20):
        fs, fd = torch.tensor(rng.standard_normal((4, 3))), torch.tensor(rng.standard_normal((4, 2)))
        w, b = torch.tensor(rng.standard_normal((6, 5))), torch.tensor(rng.standard_normal(6))
        out = fuse(fs, fd, w, b)
        assert torch.max(torch.abs(out.norm(dim=1) - 1)) <= 1e-9


def test_fuse_zero_features_gives_normalised_bias():
    b = torch.tensor([3.0, 4.0], dtype=D)
    out = fuse(torch.zeros(1, 2, dtype=D), torch.zeros(1, 1, dtype=D), torch.ones(2, 3, dtype=D), b)
    assert torch.allclose(out[0], b / 5, atol=1e-15)
    with pytest.raises(DegenerateEmbedding):
        fuse(torch.zeros(1, 2, dtype=D), torch.zeros(1, 1, dtype=D), torch.ones(2, 3, dtype=D), torch.zeros(2, dtype=D))


def test_fuse_errors():
    w, b = torch.ones(2, 3, dtype=D), torch.ones(2, dtype=D)
    with pytest.raises(InvalidArgument):
        fuse(torch.ones(1, 2, dtype=D), torch.ones(1, 2, dtype=D), w, b)
    with pytest.raises(InvalidArgument):
        fuse(None, None, w, b)
    with pytest.raises(NumericError):
        fuse(torch.tensor([[float("inf"), 0.0]], dtype=D), torch.ones(1, 1, dtype=D), w, b)


def test_fuse_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    args = [torch.tensor(rng.standard_normal(s), requires_grad=True) for s in [(2, 3), (2, 2), (4, 5), (4,)]]
    probe = torch.tensor(rng.standard_normal((2, 4)))

    def f(*a):
        return (fuse(*a) * probe).sum()

    f(*args).backward()
    h = 1e-6
    for k, t in enumerate(args):
        for i in range(t.numel()):
            plus = [a.detach().clone() for a in args]
            minus = [a.detach().clone() for a in args]
            plus[k].view(-1)[i] += h
            minus[k].view(-1)[i] -= h
            fd = (float(f(*plus)) - float(f(*minus))) / (2 * h)
            g = float(t.grad.view(-1)[i])
            assert abs(g - fd) <= 1e-5 * max(abs(g), abs(fd), 1e-3)


# --- cross-entropy -----------------------------------------------------------

def _ce_reference(logits, label):
    m = max(logits)
    return -(logits[label] - m - math.log(math.fsum(math.exp(v - m) for v in logits)))


def test_ce_uniform_and_saturated():
    assert float(ce_loss(torch.zeros(7, dtype=D), 3)) == pytest.approx(math.log(7), abs=1e-15)
    logits = torch.zeros(5, dtype=D)
    logits[2] = 1000
    assert float(ce_loss(logits, 2)) < 1e-6


@given(st.integers(0, 2**32 - 1))
def test_ce_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((6, 5)) * 10
    logits[0, 1] = 1e4
    logits[1, 3] = -1e4
    labels = rng.integers(0, 5, 6)
    ref = math.fsum(_ce_reference(logits[i].tolist(), labels[i]) for i in range(6)) / 6
    got = float(ce_loss(torch.tensor(logits), labels.tolist()))
    assert math.isfinite(got)
    assert got == pytest.approx(ref, abs=1e-10)


# --- triplet -----------------------------------------------------------------

def _triplet_reference(emb, labels, margin):
    """Enumerate every (a, p, n) triple; keep the batch-hard one per anchor."""
    n = len(labels)
    dist = lambda i, j: math.sqrt(sum((x - y) ** 2 for x, y in zip(emb[i], emb[j])))  # noqa: E731
    per_anchor = {}
    for a, p, q in itertools.product(range(n), repeat=3):
        if p == a or labels[p] != labels[a] or labels[q] == labels[a]:
            continue
        dp, dn = dist(a, p), dist(a, q)
        best = per_anchor.get(a)
        if best is None:
            per_anchor[a] = (dp, dn)
        else:
            per_anchor[a] = (max(best[0], dp), min(best[1], dn))
    losses = [max(0.0, dp - dn + margin) for dp, dn in per_anchor.values()]
    return math.fsum(losses) / len(losses)


@given(st.integers(0, 2**32 - 1))
def test_triplet_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((8, 4)) * 0.3
    labels = [0, 0, 0, 0, 1, 1, 1, 1]
    rng.shuffle(labels)
    ref = _triplet_reference(emb.tolist(), labels, 0.2)
    assert float(triplet_loss(torch.tensor(emb), labels, 0.2)) == pytest.approx(ref, abs=1e-10)


def test_triplet_trivial_cases():
    same = torch.ones(4, 3, dtype=D)
    assert float(triplet_loss(same, [0, 0, 1, 1], 0.3)) == pytest.approx(0.3, abs=1e-10)
    apart = torch.tensor([[0.0, 0], [0.01, 0], [5, 0], [5.01, 0]], dtype=D)
    assert float(triplet_loss(apart, [0, 0, 1, 1], 0.2)) == 0.0
    with pytest.raises(DegenerateBatch):
        triplet_loss(apart, [0, 0, 0, 0])
    with pytest.raises(DegenerateBatch):
        triplet_loss(apart, [0, 1, 2, 3])


def test_triplet_rotation_invariant():
    rng = np.random.default_rng(4)
    emb = torch.tensor(rng.standard_normal((10, 5)))
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    labels = [0, 0, 1, 1, 2, 2, 0, 1, 2, 3]
    a = float(triplet_loss(emb, labels))
    b = float(triplet_loss(emb @ torch.tensor(q), labels))
    assert a == pytest.approx(b, abs=1e-9)


# --- total loss --------------------------------------------------------------

def test_total_loss():
    assert total_loss(1.0, 0.5, 2.0, LossWeights(0.2)) == pytest.approx(1.9, abs=1e-15)
    assert total_loss(1.0, 0.5, 2.0, LossWeights(0.0)) == 1.5
    with pytest.raises(InvalidArgument):
        LossWeights(lambda_d=-0.1)
    with pytest.raises(InvalidArgument):
        LossWeights(triplet_margin=-1)


# --- optimiser ---------------------------------------------------------------

def test_sgd_zero_gradient_and_zero_lr():
    p = [torch.tensor([1.5, -2.0], dtype=D)]
    sgd_step(p, [torch.zeros(2, dtype=D)], weight_decay=0.0, momentum=0.7)
    assert p[0].tolist() == [1.5, -2.0]
    before = p[0].clone()
    sgd_step(p, [torch.rand(2, dtype=D)], lr=0.0)
    assert torch.equal(p[0], before)


def test_sgd_single_step_arithmetic():
    p = [torch.tensor([1.0], dtype=D)]
    sgd_step(p, [torch.tensor([1.0], dtype=D)], lr=0.1, weight_decay=0.0, momentum=0.0)
    assert float(p[0]) == pytest.approx(0.9, abs=1e-15)


def test_sgd_three_step_trajectory():
    lr, wd, mu = 0.1, 5e-4, 0.9
    grads = [0.3, -0.2, 0.5]
    p, v = 1.0, 0.0
    for i, g in enumerate(grads):
        d = g + wd * p
        v = d if i == 0 else mu * v + d
        p = p - lr * v
    t = [torch.tensor([1.0], dtype=D)]
    bufs = None
    for g in grads:
        t, bufs = sgd_step(t, [torch.tensor([g], dtype=D)], bufs, lr, wd, mu)
    assert abs(float(t[0]) - p) <= 1e-12


def test_sgd_non_finite_gradient_aborts_untouched():
    p = [torch.tensor([1.0], dtype=D), torch.tensor([2.0], dtype=D)]
    with pytest.raises(NumericError):
        sgd_step(p, [torch.tensor([0.5], dtype=D), torch.tensor([float("nan")], dtype=D)])
    assert p[0].item() == 1.0 and p[1].item() == 2.0


# --- model and checkpoints ---------------------------------------------------

def _tiny_cfg(streams="dual"):
    return ModelConfig(
        n_classes=3, streams=streams, embed_dim=4,
        dynamic=DynamicConfig(in_channels=2, widths=(3,), gate_hidden=2, input_pool=1),
        static=StaticConfig(in_channels=2, widths=(3,), embed_dim=3, teacher_dim=2, input_size=8),
    )


def _batch(b=4, t=3):
    g = torch.Generator().manual_seed(7)
    return torch.rand(b, t, 2, 8, 8, generator=g), torch.rand(b, 2, 8, 8, generator=g)


@pytest.mark.parametrize("streams", ["dual", "static", "dynamic"])
def test_model_streams(streams):
    m = GaitModel(_tiny_cfg(streams))
    out = m(*_batch())
    assert out["f_gait"].shape == (4, 4) and out["logits"].shape == (4, 3)
    assert (out["f_s"] is None) == (streams == "dynamic")
    assert (out["f_d"] is None) == (streams == "static")
    losses = m.losses(out, [0, 0, 1, 1], torch.zeros(4, 2), LossWeights())
    assert all(torch.isfinite(v) for v in losses.values())
    if streams == "dynamic":
        assert float(losses["align"]) == 0.0


def test_model_init_is_seeded():
    a, b = GaitModel(_tiny_cfg()), GaitModel(_tiny_cfg())
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    with pytest.raises(InvalidArgument):
        ModelConfig(streams="triple")


def test_checkpoint_round_trip_with_momentum(tmp_path):
    m = GaitModel(_tiny_cfg())
    opt = SGD(m.named_parameters(), lr=0.01)
    out = m(*_batch())
    m.losses(out, [0, 0, 1, 1], torch.zeros(4, 2), LossWeights())["total"].backward()
    opt.step()
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, model_blobs(m, opt), meta="iteration = 1\nnote = ünïcode")
    blobs, meta = read_checkpoint(path)
    assert meta.endswith("ünïcode")
    assert any(k.startswith("optim.momentum.") for k in blobs)
    fresh = GaitModel(ModelConfig(**{**_tiny_cfg().__dict__, "seed": 99}))
    load_model_blobs(fresh, blobs)
    for (n, p), (_, q) in zip(m.named_parameters(), fresh.named_parameters()):
        assert torch.equal(p, q), n
    opt2 = SGD(fresh.named_parameters())
    opt2.load_state_blobs(blobs)
    for a, b in zip(opt.buffers, opt2.buffers):
        assert torch.equal(a, b)
    write_checkpoint(tmp_path / "again.ckpt", model_blobs(fresh, opt2), meta="iteration = 1\nnote = ünïcode")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"JUNK")
    with pytest.raises(FormatError):
        read_checkpoint(p)
    write_checkpoint(p, {"w": torch.ones(3, 2)})
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_checkpoint(p)
    p.write_bytes(raw + b"xx")
    with pytest.raises(FormatError):
        read_checkpoint(p)
    m = GaitModel(_tiny_cfg())
    with pytest.raises(FormatError):
        load_model_blobs(m, {})
    blobs = {n: np.zeros(1) for n, _ in m.named_parameters()}
    with pytest.raises(FormatError):
        load_model_blobs(m, blobs)
