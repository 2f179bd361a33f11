"""Differentiable-evaluation contract, finite-difference gradient checks, checkpoints.

Reverse-mode derivatives come from torch autograd; ``grad_check`` is an
independent central-difference oracle that only ever calls the forward
function.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
from torch import nn


class NumericError(FloatingPointError):
    def __init__(self, node: str, message: str = ""):
        self.node = node
        super().__init__(f"non-finite value at node '{node}'" + (f": {message}" if message else ""))


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named parameter arrays with gradient buffers of the same shape.

    Wraps either an ``nn.Module`` (parameters registered by the module) or a
    plain mapping of name to tensor.
    """

    def __init__(self, source):
        if isinstance(source, nn.Module):
            self.module: Optional[nn.Module] = source
            self._params = OrderedDict(source.named_parameters())
        else:
            self.module = None
            self._params = OrderedDict()
            for name, value in dict(source).items():
                t = value if isinstance(value, torch.Tensor) else torch.as_tensor(np.asarray(value))
                self._params[name] = t.detach().clone().requires_grad_(True)
        self._shapes = {k: tuple(v.shape) for k, v in self._params.items()}

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    @property
    def names(self) -> list[str]:
        return list(self._params)

    def shape(self, name: str) -> tuple:
        return self._shapes[name]

    def count(self) -> int:
        return int(sum(p.numel() for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad.zero_()

    def grad(self, name: str) -> np.ndarray:
        p = self._params[name]
        if p.grad is None:
            return np.zeros(self._shapes[name])
        return p.grad.detach().cpu().numpy().copy()

    def values(self, name: str) -> np.ndarray:
        return self._params[name].detach().cpu().numpy().copy()

    def get_coord(self, name: str, index: int) -> float:
        return float(self._params[name].detach().reshape(-1)[index])

    def set_coord(self, name: str, index: int, value: float) -> None:
        with torch.no_grad():
            self._params[name].view(-1)[index] = value

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in self._params.items())

    def load_state(self, arrays: dict) -> None:
        missing = [k for k in self._params if k not in arrays]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameter '{missing[0]}'")
        for name, p in self._params.items():
            arr = np.asarray(arrays[name])
            if tuple(arr.shape) != self._shapes[name]:
                raise CheckpointError(
                    f"shape mismatch for '{name}': checkpoint {tuple(arr.shape)} vs model {self._shapes[name]}")
            with torch.no_grad():
                p.copy_(torch.as_tensor(arr, dtype=p.dtype))


# ---------------------------------------------------------------------------

def _nonfinite_hooks(module: nn.Module):
    handles = []
    for name, sub in module.named_modules():
        if not name:
            continue

        def hook(mod, inputs, output, _name=name):
            outs = output if isinstance(output, (tuple, list)) else (output,)
            for o in outs:
                if isinstance(o, torch.Tensor) and o.is_floating_point() and not torch.isfinite(o).all():
                    raise NumericError(_name)
        handles.append(sub.register_forward_hook(hook))
    return handles


def evaluate_with_gradients(function: Callable[[], torch.Tensor], params: ParamStore) -> float:
    """Evaluate a scalar ``function()`` and populate the gradients in ``params``.

    Gradient buffers are zeroed first, so the stored gradients belong to this
    evaluation only.
    """
    params.zero_grad()
    handles = _nonfinite_hooks(params.module) if params.module is not None else []
    try:
        value = function()
    finally:
        for h in handles:
            h.remove()
    if not torch.isfinite(value).all():
        raise NumericError("output")
    if value.numel() != 1:
        raise ValueError("function must return a scalar")
    value.backward()
    return float(value.detach())


@dataclass
class GradReport:
    epsilon: float
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)   # (name, flat index, analytic, numeric, rel)
    n_checked: int = 0

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
            "checked_coordinates": self.n_checked,
            "ok": self.ok,
            "parameters": {k: {"max_rel_error": self.max_rel_error[k], "passed": self.passed[k]}
                           for k in self.max_rel_error},
            "failures": [list(f) for f in self.failures],
        }


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _sample_coordinates(params: ParamStore, max_full: int, n_sample: int, seed: int):
    total = params.count()
    if total <= max_full:
        return [(name, i) for name in params for i in range(params[name].numel())]
    # at least one coordinate per parameter, the rest proportional to size
    rng = np.random.default_rng(seed)
    coords = []
    sizes = np.array([params[n].numel() for n in params], dtype=float)
    extra = np.maximum(0, n_sample - len(sizes))
    share = extra * sizes / sizes.sum()
    alloc = 1 + np.floor(share).astype(int)
    # largest remainders take the leftover so the total is exactly n_sample
    for j in np.argsort(-(share - np.floor(share)), kind="stable")[: int(extra - np.floor(share).sum())]:
        alloc[j] += 1
    for name, k, size in zip(params.names, alloc, sizes.astype(int)):
        idx = rng.choice(size, size=min(k, size), replace=False)
        coords.extend((name, int(i)) for i in sorted(idx))
    return coords


def grad_check(function: Callable[[], torch.Tensor], params: ParamStore, epsilon: float = 1e-5,
               tolerance: float = 1e-4, max_full: int = 2000, n_sample: int = 256,
               seed: int = 0) -> GradReport:
    """Compare autograd gradients with central differences.

    Every coordinate is checked when the store holds at most ``max_full``
    scalars; otherwise a seeded subsample of ``n_sample`` coordinates (at
    least one per parameter) is used.
    """
    evaluate_with_gradients(function, params)
    analytic = {name: params.grad(name).reshape(-1) for name in params}
    report = GradReport(epsilon=epsilon, tolerance=tolerance)
    for name in params:
        report.max_rel_error[name] = 0.0
        report.passed[name] = True
    with torch.no_grad():
        for name, i in _sample_coordinates(params, max_full, n_sample, seed):
            x0 = params.get_coord(name, i)
            params.set_coord(name, i, x0 + epsilon)
            fp = float(function())
            params.set_coord(name, i, x0 - epsilon)
            fm = float(function())
            params.set_coord(name, i, x0)
            num = (fp - fm) / (2.0 * epsilon)
            a = float(analytic[name][i])
            rel = relative_error(a, num)
            report.n_checked += 1
            report.max_rel_error[name] = max(report.max_rel_error[name], rel)
            if rel > tolerance:
                report.passed[name] = False
                report.failures.append((name, i, a, num, rel))
    return report


# ---------------------------------------------------------------------------
# checkpoint format v1
#
#   magic "VCKP" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
#   u32 n_entries | n x (u16 name_len | u8 ndim | name | ndim x u32 dims | float32 LE data)

_MAGIC = b"VCKP"
CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, arrays: dict, metadata: dict) -> None:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw_name = name.encode()
        parts.append(struct.pack("<HB", len(raw_name), a.ndim) + raw_name)
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    metadata = json.loads(blob[off:off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(n):
        name_len, ndim = struct.unpack_from("<HB", blob, off)
        off += 3
        name = blob[off:off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return arrays, metadata


def iter_finite(tensors: Iterable[tuple[str, torch.Tensor]]) -> Optional[str]:
    """Name of the first non-finite tensor, or None."""
    for name, t in tensors:
        if not torch.isfinite(t).all():
            return name
    return None
