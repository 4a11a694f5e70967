"""Reverse-mode differentiable tensor ops, seeded RNG substreams and checkpoints.

Tensors are ``torch.Tensor``; autograd records the tape. The wrappers here add
the shape checks, explicit RNG threading and the one-shot ``backward`` guard
the rest of the package relies on.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .mesh import GraphOperator


class ShapeError(ValueError):
    pass


def _shape(t) -> tuple:
    return tuple(t.shape)


def _check(cond: bool, op: str, a, b) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {_shape(a)} and {_shape(b)}")


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.dim() == 2 and b.dim() == 2 and a.shape[1] == b.shape[0], "matmul", a, b)
    return a @ b


def sparse_dense_matmul(op: GraphOperator, x: torch.Tensor) -> torch.Tensor:
    """``x @ L_scaled`` for a feature matrix ``x`` of shape (d, N)."""
    n = op.n_vertices
    if x.dim() != 2 or x.shape[1] != n:
        raise ShapeError(f"sparse_dense_matmul: incompatible shapes {(n, n)} and {_shape(x)}")
    lt = op.torch_scaled(x.dtype)
    # L_scaled is symmetric, so x @ L = (L @ x^T)^T
    return torch.sparse.mm(lt, x.t()).t()


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: incompatible shapes {_shape(a)} and {_shape(b)}") from None
    return a + b


def concat(tensors: Sequence[torch.Tensor], axis: int = 0) -> torch.Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        same = t.dim() == ref.dim() and all(
            s == r for k, (s, r) in enumerate(zip(t.shape, ref.shape)) if k != axis % ref.dim()
        )
        _check(same, "concat", ref, t)
    return torch.cat(list(tensors), dim=axis)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x)


def power(x: torch.Tensor, exponent: float) -> torch.Tensor:
    return torch.pow(x, exponent)


def sum(x: torch.Tensor, axis=None) -> torch.Tensor:  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=axis)


def mean(x: torch.Tensor, axis=None) -> torch.Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int | str = "same") -> torch.Tensor:
    """3D convolution of a (C, D, H, W) volume with a (C_out, C, k, k, k) kernel.

    ``padding="same"`` zero-pads by ``k // 2``.
    """
    if x.dim() != 4 or weight.dim() != 5 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: incompatible shapes {_shape(x)} and {_shape(weight)}")
    if padding == "same":
        padding = weight.shape[-1] // 2
    return F.conv3d(x.unsqueeze(0), weight, bias, stride=stride, padding=padding)[0]


def upsample_nearest(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Nearest-neighbour x2 upsampling of (C, D, H, W), cropped to ``size``."""
    up = x.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    return up[:, : size[0], : size[1], : size[2]]


def dropout(x: torch.Tensor, rate: float, train: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not train or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = torch.rand(x.shape, generator=generator, dtype=x.dtype) < keep
    return x * mask.to(x.dtype) / keep


def trilinear_gather(features: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    from .volume import trilinear_sample

    return trilinear_sample(features, points)


# ---------------------------------------------------------------------------
# backward


class BackwardError(RuntimeError):
    pass


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    A loss may be differentiated once; a second call without a fresh forward
    pass raises.
    """
    if loss.numel() != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    if getattr(loss, "_backward_done", False):
        raise BackwardError("backward called twice on the same forward pass")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any parameter")
    loss.backward()
    loss._backward_done = True


def finite_difference_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central difference gradient of the scalar ``fn()`` w.r.t. ``x`` (perturbed in place)."""
    g = torch.zeros_like(x)
    data = x.data
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            orig = data[idx].item()
            data[idx] = orig + h
            fp = float(fn())
            data[idx] = orig - h
            fm = float(fn())
            data[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
    return g


def gradient_error(fn: Callable[[], torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-5,
                   atol: float = 1e-8) -> float:
    """Max elementwise relative error between autograd and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, atol)``.
    """
    for x in inputs:
        x.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else torch.zeros_like(x)
        numeric = finite_difference_grad(fn, x, h)
        denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(atol, dtype=x.dtype))
        worst = max(worst, float(((analytic - numeric).abs() / denom).max()))
    return worst


# ---------------------------------------------------------------------------
# randomness and initialization


def substream_seed(root: int, name: str) -> int:
    """Deterministic child seed for a named stage (``data``, ``augment``, ``dropout``, ``init``...)."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def numpy_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root, name))


def torch_rng(root: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(root, name))
    return g


def glorot_uniform(shape: Sequence[int], fan_in: int, fan_out: int, generator: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(tuple(shape), generator=generator, dtype=torch.float64) * 2 - 1).mul_(bound)


# ---------------------------------------------------------------------------
# checkpoint file
#
# layout:
#   b"MDCKPT1\n"
#   uint64 little-endian: manifest byte length
#   manifest: UTF-8 JSON {"meta": {...}, "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}]}
#   raw buffers, little-endian, C order, offsets relative to the first buffer byte

CKPT_MAGIC = b"MDCKPT1\n"
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "u1"}
_DTYPE_NAMES = {np.dtype(v).type: k for k, v in _DTYPES.items()}


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        key = _DTYPE_NAMES.get(arr.dtype.type)
        if key is None:
            raise TypeError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": key, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    start = len(CKPT_MAGIC)
    (mlen,) = struct.unpack_from("<Q", data, start)
    start += 8
    manifest = json.loads(data[start:start + mlen])
    base = start + mlen
    out = {}
    for e in manifest["tensors"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return out, manifest["meta"]
