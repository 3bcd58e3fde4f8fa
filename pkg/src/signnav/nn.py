"""Small differentiable building blocks on top of torch autograd.

Layers used by the navigation model and the collision predictor, a
finite-difference gradient oracle, finiteness checks that name the
offending parameter, and a stable checkpoint container.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

LEARNING_RATE = 2.5e-4
GRAD_CLIP = 0.5


class NonFiniteError(FloatingPointError):
    """A loss or gradient contained NaN/inf; ``name`` is the offending path."""

    def __init__(self, name: str, what: str = "value"):
        super().__init__(f"non-finite {what} in {name}")
        self.name = name


# --------------------------------------------------------------------------
# Initialization


def orthogonal_(layer: nn.Module, gain: float = math.sqrt(2.0)) -> nn.Module:
    for name, p in layer.named_parameters(recurse=False):
        if name.startswith("weight") and p.dim() >= 2:
            nn.init.orthogonal_(p, gain=gain)
        elif name.startswith("bias"):
            nn.init.zeros_(p)
    return layer


def fan_in_uniform_(conv: nn.Conv2d) -> nn.Conv2d:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(conv.weight, -bound, bound)
    nn.init.uniform_(conv.bias, -bound, bound)
    return conv


def dense(n_in: int, n_out: int, gain: float = math.sqrt(2.0)) -> nn.Linear:
    return orthogonal_(nn.Linear(n_in, n_out), gain)


def mlp(sizes: Iterable[int], out_gain: float = 1.0) -> nn.Sequential:
    sizes = list(sizes)
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        layers.append(dense(sizes[i], sizes[i + 1], out_gain if last else math.sqrt(2.0)))
        if not last:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


# --------------------------------------------------------------------------
# Layers


def gru_cell(h_prev: torch.Tensor, x: torch.Tensor, weight_ih: torch.Tensor, weight_hh: torch.Tensor,
             bias_ih: torch.Tensor, bias_hh: torch.Tensor) -> torch.Tensor:
    """One GRU step with gate order (reset, update, candidate).

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    u = sigmoid(W_iu x + b_iu + W_hu h + b_hu)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - u) * n + u * h
    """
    gi = x @ weight_ih.t() + bias_ih
    gh = h_prev @ weight_hh.t() + bias_hh
    i_r, i_u, i_n = gi.chunk(3, dim=-1)
    h_r, h_u, h_n = gh.chunk(3, dim=-1)
    reset = torch.sigmoid(i_r + h_r)
    update = torch.sigmoid(i_u + h_u)
    candidate = torch.tanh(i_n + reset * h_n)
    return (1.0 - update) * candidate + update * h_prev


class GRUCell(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight_ih = nn.Parameter(torch.empty(3 * hidden_size, input_size))
        self.weight_hh = nn.Parameter(torch.empty(3 * hidden_size, hidden_size))
        self.bias_ih = nn.Parameter(torch.zeros(3 * hidden_size))
        self.bias_hh = nn.Parameter(torch.zeros(3 * hidden_size))
        for w in (self.weight_ih, self.weight_hh):
            for chunk in w.data.chunk(3, dim=0):
                nn.init.orthogonal_(chunk)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return gru_cell(h, x, self.weight_ih, self.weight_hh, self.bias_ih, self.bias_hh)


class ConvEncoder(nn.Module):
    """Three stride-2 3x3 convolutions followed by a dense projection."""

    def __init__(self, in_channels: int, height: int, width: int, features: int = 256,
                 channels: tuple[int, int, int] = (16, 32, 32)):
        super().__init__()
        convs = []
        c_in = in_channels
        h, w = height, width
        for c_out in channels:
            convs.append(fan_in_uniform_(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)))
            convs.append(nn.ReLU())
            c_in = c_out
            h, w = (h + 1) // 2, (w + 1) // 2
        self.convs = nn.Sequential(*convs)
        self.fc = dense(c_in * h * w, features)
        self.features = features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.convs(x)
        return torch.relu(self.fc(y.flatten(1)))


# --------------------------------------------------------------------------
# Gradients


def check_finite(named: Iterable[tuple[str, torch.Tensor]], what: str = "value") -> None:
    for name, t in named:
        if t is not None and not torch.isfinite(t).all():
            raise NonFiniteError(name, what)


def forward_backward(loss_fn: Callable[[], torch.Tensor], module: nn.Module,
                     name: str = "loss") -> dict[str, torch.Tensor]:
    """Evaluate a scalar loss, backpropagate, and return gradients by parameter name."""
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    check_finite([(name, loss.detach())])
    loss.backward()
    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p))
             for n, p in module.named_parameters()}
    check_finite(grads.items(), "gradient")
    return grads


@torch.no_grad()
def finite_difference_grad(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
                           eps: float = 1e-4) -> dict[str, torch.Tensor]:
    """Central-difference gradient of ``loss_fn`` w.r.t. each tensor in ``params``.

    Perturbs each entry in place; only forward evaluations are used.
    """
    grads = {}
    for name, p in params.items():
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor) over the whole tensor."""
    num = (a - b).abs().max().item()
    den = max(a.abs().max().item(), b.abs().max().item(), floor)
    return num / den


def make_optimizer(params, lr: float = LEARNING_RATE) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, eps=1e-5)


def clipped_step(optimizer: torch.optim.Optimizer, params, max_norm: float = GRAD_CLIP) -> float:
    """Clip the global gradient norm, step, and return the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    norm = torch.nn.utils.clip_grad_norm_(params, max_norm)
    optimizer.step()
    return float(norm)


# --------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"SIGNCKPT"
#   4 bytes   format version (uint32, currently 1)
#   8 bytes   header length N (uint64)
#   N bytes   UTF-8 JSON header: {"metadata": {str: str},
#             "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
#             serialized with sorted keys and no whitespace
#   payload   raw little-endian tensor bytes, C order, in header order

CHECKPOINT_MAGIC = b"SIGNCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def encode_checkpoint(tensors: Mapping[str, torch.Tensor | np.ndarray],
                      metadata: Mapping[str, str] | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for {name}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": {str(k): str(v) for k, v in (metadata or {}).items()},
                         "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return (CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header
            + b"".join(blobs))


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
        tensors[e["name"]] = arr
    return tensors, header["metadata"]


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray],
                    metadata: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, metadata))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def load_module_state(module: nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy tensors named ``prefix + parameter name`` into ``module``."""
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in tensors]
    if missing:
        raise KeyError(f"checkpoint lacks {missing[:3]}...")
    module.load_state_dict({k: torch.as_tensor(np.array(tensors[prefix + k])).to(state[k].dtype)
                            for k in state})
