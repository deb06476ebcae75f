"""Dense tensor primitives, AdamW, the cosine schedule and checkpoint I/O.

Tensors are ``torch.Tensor`` and reverse-mode differentiation is torch's
autograd tape.  The wrappers here pin the small surface the transformer
uses and add the shape checks the rest of the package relies on.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.dim() >= 1 and b.dim() >= 1, "matmul needs at least 1-d operands")
    _check(
        a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0],
        f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}",
    )
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    # bias add along the trailing axis is the only broadcast allowed
    _check(
        a.shape == b.shape or (b.dim() == 1 and a.shape[-1] == b.shape[0]),
        f"add shape mismatch: {tuple(a.shape)} + {tuple(b.shape)}",
    )
    return a + b


def scale(a: Tensor, s: float) -> Tensor:
    return a * s


def transpose(a: Tensor, dim0: int = -2, dim1: int = -1) -> Tensor:
    return a.transpose(dim0, dim1)


def concat(tensors: Iterable[Tensor], dim: int = 0) -> Tensor:
    tensors = list(tensors)
    _check(len(tensors) > 0, "concat of nothing")
    return torch.cat(tensors, dim=dim)


def slice_(a: Tensor, start: int, stop: int, dim: int = 0) -> Tensor:
    _check(0 <= start <= stop <= a.shape[dim], f"slice [{start}:{stop}] out of range for extent {a.shape[dim]}")
    return a.narrow(dim, start, stop - start)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    """Softmax along ``dim``; ``-inf`` entries get weight exactly 0.

    torch's kernel subtracts the row max before exponentiating.
    """
    return torch.softmax(x, dim=dim)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


MIN_GEMM_ROWS = 32


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` whose rows do not depend on how many rows are passed.

    BLAS switches to a different kernel for very short inputs, which changes
    the low bits.  Short inputs are zero-padded so a row computed alone
    matches the same row computed inside a large batch.
    """
    _check(x.shape[-1] == weight.shape[1], f"linear expects last dim {weight.shape[1]}, got {x.shape[-1]}")
    rows = x.numel() // max(x.shape[-1], 1)
    if 0 < rows < MIN_GEMM_ROWS:
        flat = x.reshape(rows, x.shape[-1])
        flat = torch.cat([flat, flat.new_zeros(MIN_GEMM_ROWS - rows, x.shape[-1])])
        return F.linear(flat, weight, bias)[:rows].reshape(*x.shape[:-1], weight.shape[0])
    return F.linear(x, weight, bias)


def cross_entropy(logits: Tensor, target: Tensor | int, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy, ``-log softmax(logits)[target]``."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    k = logits.shape[-1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= k):
        raise ValueError(f"target out of range for {k} classes")
    return F.cross_entropy(logits, target, reduction=reduction)


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[Tensor]:
    """Gradient of a scalar ``loss`` with respect to each of ``params``."""
    if loss.dim() != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    """Cosine decay from ``lr_init`` at step 0 to ``lr_min`` at the final step."""
    if total_steps <= 1:
        return lr_init
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            p.mul_(1.0 - self.lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / c1)

    def state_dict(self) -> dict[str, Tensor]:
        state = {"t": torch.tensor(self.t, dtype=torch.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m
            state[f"v.{i}"] = v
        return state


# --- checkpoint container -------------------------------------------------
#
# layout:  MAGIC | u64 little-endian manifest length | manifest (UTF-8 JSON) | data
# manifest: {"version": 1, "meta": {...}, "tensors": [{name, shape, dtype, offset, nbytes}]}

MAGIC = b"FOVITCKPT\n"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def save_checkpoint(path, tensors: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": dict(meta or {}), "tensors": entries},
        indent=1,
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n))
        data = fh.read()
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(e["shape"]))
    return tensors, manifest["meta"]


def reference_mode(seed: int | None = None) -> None:
    """Single-worker deterministic execution."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)
