import numpy as np
import pytest
import torch
from torch import nn

from vutsim.layers import MultiHeadAttention, masked_max
from vutsim.numeric import (CheckpointError, NumericError, ParamStore, evaluate_with_gradients, grad_check,
                            load_checkpoint, relative_error, save_checkpoint)


def test_square():
    ps = ParamStore({"x": torch.tensor(3.0, dtype=torch.float64)})
    v = evaluate_with_gradients(lambda: ps["x"] ** 2, ps)
    assert v == 9.0 and ps.grad("x") == 6.0


def test_softmax_sum_has_zero_gradient(rng):
    ps = ParamStore({"z": rng.normal(size=7)})
    v = evaluate_with_gradients(lambda: torch.softmax(ps["z"], 0).sum(), ps)
    assert v == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(ps.grad("z"), 0.0, atol=1e-15)


def test_gradients_zeroed_between_evaluations():
    ps = ParamStore({"x": torch.tensor(2.0, dtype=torch.float64)})
    evaluate_with_gradients(lambda: ps["x"] ** 2, ps)
    evaluate_with_gradients(lambda: ps["x"] ** 2, ps)
    assert ps.grad("x") == 4.0


def test_mlp_matches_central_differences():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(5, 8), nn.Tanh(), nn.Linear(8, 8), nn.Softplus(), nn.Linear(8, 1)).double()
    x = torch.randn(4, 5, dtype=torch.float64)
    ps = ParamStore(net)
    report = grad_check(lambda: net(x).pow(2).sum(), ps, max_full=0, n_sample=20)
    assert report.n_checked >= 20 and report.ok


def test_linear_map_exact():
    w = np.array([0.3, -1.2, 2.5])
    x = torch.tensor([1.0, 2.0, -0.5], dtype=torch.float64)
    ps = ParamStore({"w": w})
    report = grad_check(lambda: (ps["w"] * x).sum(), ps)
    assert report.ok and max(report.max_rel_error.values()) < 1e-9


def test_wrong_gradient_is_flagged():
    class Doubled(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 4.0 * x  # true derivative is 2x

    ps = ParamStore({"x": np.array([1.0, -2.0, 0.5])})
    report = grad_check(lambda: Doubled.apply(ps["x"]), ps)
    assert not report.ok and len(report.failures) == 3
    assert report.to_dict()["ok"] is False


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-10) == pytest.approx(1e-10 / 1e-8)


def test_sum_of_gradients_linearity(rng):
    a, b = rng.normal(size=6), rng.normal(size=6)
    ps = ParamStore({"x": rng.normal(size=6)})
    f = lambda: torch.tanh(ps["x"] @ torch.as_tensor(a))  # noqa: E731
    g = lambda: torch.sigmoid(ps["x"] @ torch.as_tensor(b))  # noqa: E731
    evaluate_with_gradients(f, ps)
    gf = ps.grad("x")
    evaluate_with_gradients(g, ps)
    gg = ps.grad("x")
    evaluate_with_gradients(lambda: f() + g(), ps)
    assert np.allclose(ps.grad("x"), gf + gg, atol=1e-14)


def test_nonfinite_names_offending_module():
    class Boom(nn.Module):
        def forward(self, x):
            return torch.log(x)

    net = nn.Sequential(nn.Linear(2, 2), Boom()).double()
    with torch.no_grad():
        net[0].weight.fill_(-1.0)
        net[0].bias.fill_(-1.0)
    ps = ParamStore(net)
    with pytest.raises(NumericError) as exc:
        evaluate_with_gradients(lambda: net(torch.ones(1, 2, dtype=torch.float64)).sum(), ps)
    assert exc.value.node == "1"


def test_repeat_evaluation_bit_identical():
    torch.manual_seed(1)
    net = nn.LSTM(3, 5, batch_first=True).double()
    x = torch.randn(2, 7, 3, dtype=torch.float64)
    ps = ParamStore(net)
    f = lambda: net(x)[0].sum()  # noqa: E731
    v1 = evaluate_with_gradients(f, ps)
    g1 = [ps.grad(n) for n in ps]
    v2 = evaluate_with_gradients(f, ps)
    assert v1 == v2 and all(np.array_equal(a, ps.grad(n)) for a, n in zip(g1, ps))


# --- attention conventions ----------------------------------------------------

def test_attention_rows_sum_to_one_and_masked_rows_zero(rng):
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2).double()
    q = torch.randn(2, 5, 8, dtype=torch.float64)
    k = torch.randn(2, 6, 8, dtype=torch.float64)
    mask = torch.as_tensor(rng.random((2, 5, 6)) > 0.4)
    mask[0, 2] = False
    out, w = attn(q, k, mask, return_weights=True)
    sums = w.sum(-1)
    allowed = mask.any(-1)
    assert torch.allclose(sums[allowed.unsqueeze(1).expand_as(sums)], torch.tensor(1.0, dtype=torch.float64),
                          atol=1e-12)
    assert torch.all(w[~mask.unsqueeze(1).expand_as(w)] == 0)
    assert torch.all(out[0, 2] == 0)
    assert torch.isfinite(out).all()


def test_softmax_rows_positive(rng):
    z = torch.as_tensor(rng.normal(scale=30, size=(50, 9)))
    p = torch.softmax(z, -1)
    assert torch.all(p >= 0) and torch.allclose(p.sum(-1), torch.ones(50, dtype=torch.float64), atol=1e-12)


def test_masked_max_matches_elementwise_oracle(rng):
    h = torch.as_tensor(rng.normal(size=(3, 7, 4)))
    mask = torch.as_tensor(rng.random((3, 7)) > 0.5)
    mask[1] = False
    out = masked_max(h, mask, dim=-2)
    for i in range(3):
        sel = h[i][mask[i]]
        expect = sel.max(0).values if len(sel) else torch.zeros(4, dtype=torch.float64)
        assert torch.equal(out[i], expect)


# --- checkpoint format --------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32(rng.normal(size=5))}
    meta = {"config_hash": "abc", "steps": 7, "seed": 1}
    save_checkpoint(tmp_path / "c.ckpt", arrays, meta)
    back, m = load_checkpoint(tmp_path / "c.ckpt")
    assert m == meta and list(back) == list(arrays)
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "c.ckpt", {"w": np.array([1.0, 2.0], dtype=np.float32)}, {})
    blob = (tmp_path / "c.ckpt").read_bytes()
    assert blob[:4] == b"VCKP"
    assert blob[4:8] == (1).to_bytes(4, "little")
    assert blob[-8:] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_checkpoint_rejects_garbage_and_shape_mismatch(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
    net = nn.Linear(2, 3)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        ParamStore(net).load_state({"weight": np.zeros((2, 2)), "bias": np.zeros(3)})
    with pytest.raises(CheckpointError, match="lacks"):
        ParamStore(net).load_state({"weight": np.zeros((3, 2))})
