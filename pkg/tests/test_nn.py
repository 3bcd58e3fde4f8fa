import math

import numpy as np
import pytest
import torch
from torch import nn

from signnav.nn import (CHECKPOINT_MAGIC, ConvEncoder, GRUCell, NonFiniteError, clipped_step,
                        decode_checkpoint, encode_checkpoint, finite_difference_grad, forward_backward,
                        gru_cell, load_checkpoint, load_module_state, make_optimizer, mlp, relative_error,
                        save_checkpoint)

@pytest.fixture(autouse=True)
def _float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def fd_check(loss_fn, module, tol, eps=1e-5):
    grads = forward_backward(loss_fn, module)
    params = dict(module.named_parameters())
    fd = finite_difference_grad(loss_fn, params, eps)
    for name in params:
        err = relative_error(grads[name], fd[name])
        assert err < tol, (name, err)


def test_square_gradient():
    x = torch.tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad.item() == 6.0


def test_linear_gradient_is_column_sums():
    A = torch.randn(4, 3)
    x = torch.randn(3, requires_grad=True)
    (A @ x).sum().backward()
    assert torch.allclose(x.grad, A.sum(0))


def test_detach_examples():
    x = torch.tensor(2.0, requires_grad=True)
    (x.detach() * x).backward()
    assert x.grad.item() == 2.0
    y = torch.tensor(2.0, requires_grad=True)
    loss = y.detach() ** 2
    assert not loss.requires_grad


def test_mlp_gradients_match_finite_differences():
    torch.manual_seed(0)
    net = mlp([5, 8, 8, 3], out_gain=1.0)
    x = torch.randn(4, 5)
    fd_check(lambda: (net(x) ** 2).sum(), net, 1e-4)


def test_conv_encoder_gradients_match_finite_differences():
    torch.manual_seed(1)
    enc = ConvEncoder(2, 8, 8, features=6, channels=(3, 4, 4))
    x = torch.rand(2, 2, 8, 8)
    fd_check(lambda: (enc(x) ** 2).sum(), enc, 1e-4)


def test_log_softmax_cross_entropy_gradient():
    torch.manual_seed(2)
    lin = nn.Linear(4, 5)
    x = torch.randn(3, 4)
    target = torch.softmax(torch.randn(3, 5), -1)
    fd_check(lambda: -(target * torch.log_softmax(lin(x), -1)).sum(), lin, 1e-4)


def test_gru_zero_weights_zero_output():
    h = torch.zeros(2, 4)
    x = torch.randn(2, 3)
    out = gru_cell(h, x, torch.zeros(12, 3), torch.zeros(12, 4), torch.zeros(12), torch.zeros(12))
    assert torch.equal(out, torch.zeros(2, 4))


def test_gru_saturated_update_gate_keeps_state():
    torch.manual_seed(3)
    cell = GRUCell(3, 4)
    with torch.no_grad():
        cell.bias_ih[4:8] = 50.0
    h = torch.rand(2, 4) * 2 - 1
    out = cell(torch.randn(2, 3), h)
    assert torch.max(torch.abs(out - h)) < 1e-3


def test_gru_matches_torch_reference_gate_order():
    torch.manual_seed(4)
    cell = GRUCell(3, 5)
    ref = nn.GRUCell(3, 5)
    with torch.no_grad():
        # torch orders gates (reset, update, new) identically
        ref.weight_ih.copy_(cell.weight_ih)
        ref.weight_hh.copy_(cell.weight_hh)
        ref.bias_ih.copy_(torch.randn(15))
        ref.bias_hh.copy_(torch.randn(15))
        cell.bias_ih.copy_(ref.bias_ih)
        cell.bias_hh.copy_(ref.bias_hh)
    x, h = torch.randn(4, 3), torch.rand(4, 5)
    assert torch.allclose(cell(x, h), ref(x, h), atol=1e-12)


def test_gru_output_bounded():
    torch.manual_seed(5)
    cell = GRUCell(3, 16)
    h = torch.rand(8, 16) * 1.98 - 0.99
    for _ in range(20):
        h = cell(torch.randn(8, 3) * 10, h)
        assert h.abs().max() < 1.0


def test_gru_unroll_gradient_matches_finite_differences():
    torch.manual_seed(6)
    cell = GRUCell(3, 4)
    xs = torch.randn(5, 2, 3)

    def loss():
        h = torch.zeros(2, 4)
        for t in range(5):
            h = cell(xs[t], h)
        return (h ** 2).sum()

    fd_check(loss, cell, 1e-3)


def test_non_finite_loss_names_path():
    lin = nn.Linear(2, 1)
    with pytest.raises(NonFiniteError, match="policy.loss"):
        forward_backward(lambda: lin(torch.ones(1, 2)).sum() * math.inf, lin, "policy.loss")


def test_non_finite_gradient_names_parameter():
    lin = nn.Linear(2, 1)
    with torch.no_grad():
        lin.weight.fill_(0.0)

    def loss():
        return torch.sqrt(lin(torch.ones(1, 2)).abs()).sum() * 0 + torch.sqrt(lin.weight.abs()).sum()

    with pytest.raises(NonFiniteError) as info:
        forward_backward(loss, lin)
    assert info.value.name == "weight"


def test_zero_gradient_step_leaves_parameters():
    torch.manual_seed(7)
    net = mlp([3, 4, 2])
    before = {k: v.clone() for k, v in net.state_dict().items()}
    opt = make_optimizer(net.parameters())
    for p in net.parameters():
        p.grad = torch.zeros_like(p)
    clipped_step(opt, net.parameters(), 0.5)
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k])


def test_clipped_step_reports_pre_clip_norm():
    p = nn.Parameter(torch.zeros(4))
    p.grad = torch.full((4,), 3.0)
    opt = torch.optim.SGD([p], lr=1.0)
    norm = clipped_step(opt, [p], 0.5)
    assert norm == pytest.approx(6.0)
    assert torch.allclose(p.detach(), torch.full((4,), -0.25))


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    torch.manual_seed(8)
    net = mlp([3, 4, 2])
    tensors = {k: v for k, v in net.state_dict().items()}
    tensors["steps"] = np.array([1, 2, 3], dtype=np.int64)
    path = tmp_path / "a.bin"
    save_checkpoint(path, tensors, {"note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert encode_checkpoint(loaded, meta) == path.read_bytes()
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)
    other = mlp([3, 4, 2])
    load_module_state(other, loaded)
    for k, v in other.state_dict().items():
        assert torch.equal(v, tensors[k])


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.bin")
    with pytest.raises(ValueError):
        decode_checkpoint(b"garbage" * 4)
    with pytest.raises(KeyError):
        load_module_state(mlp([2, 2]), {})
