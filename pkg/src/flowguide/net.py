"""Conditional velocity network: residual MLP with explicit gradients.

The net maps (x_t, t, condition) to a 2D velocity. Conditioning is a
learnable embedding table with one extra row for the null token; time enters
through fixed log-spaced sinusoidal features. Forward can bypass arbitrary
residual blocks (layer-skip weak signals) and read an auxiliary velocity
head tapped at an intermediate depth (branch weak signals). Backward is
exact reverse-mode differentiation over a recorded trace; everything is
float64 numpy.

All trainable tensors are views into one contiguous buffer so the optimizer
runs a handful of fused passes instead of per-tensor updates.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FGVN"
CHECKPOINT_VERSION = 1

NULL_COND = 0  # condition value meaning "unconditional"


@dataclass(frozen=True)
class Arch:
    d_c: int = 16
    d_h: int = 128
    n_blocks: int = 4
    branch_index: int | None = 1
    n_freqs: int = 16
    freq_min: float = 1.0
    freq_max: float = 1000.0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("need at least one residual block")
        if self.d_c <= 0 or self.d_h <= 0:
            raise ValueError("d_c and d_h must be positive")
        if self.branch_index is not None and not (1 <= self.branch_index < self.n_blocks):
            raise ValueError(
                f"branch_index must satisfy 1 <= b < n_blocks, got {self.branch_index}"
            )

    @property
    def enc_dim(self) -> int:
        return 2 + 2 * self.n_freqs

    @property
    def in_dim(self) -> int:
        return self.enc_dim + self.d_c


def _tensor_shapes(arch: Arch, num_classes: int):
    shapes = [
        ("embed", (num_classes + 1, arch.d_c)),
        ("in_w", (arch.in_dim, arch.d_h)),
        ("in_b", (arch.d_h,)),
    ]
    for i in range(arch.n_blocks):
        shapes += [
            (f"blocks.{i}.w1", (arch.d_h, arch.d_h)),
            (f"blocks.{i}.b1", (arch.d_h,)),
            (f"blocks.{i}.w2", (arch.d_h, arch.d_h)),
            (f"blocks.{i}.b2", (arch.d_h,)),
        ]
    shapes += [("out_w", (arch.d_h, 2)), ("out_b", (2,))]
    if arch.branch_index is not None:
        shapes += [("br_w", (arch.d_h, 2)), ("br_b", (2,))]
    return shapes


@dataclass
class Block:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


class NetParams:
    """All learnable state; tensor attributes are views into `flat`."""

    def __init__(self, arch: Arch, num_classes: int, flat: np.ndarray, time_freqs: np.ndarray, version: int = 1):
        shapes = _tensor_shapes(arch, num_classes)
        total = sum(int(np.prod(s)) for _, s in shapes)
        if flat.shape != (total,):
            raise ValueError(f"flat buffer has {flat.shape}, expected ({total},)")
        self.arch = arch
        self.num_classes = int(num_classes)
        self.flat = flat
        self.time_freqs = time_freqs
        self.version = version
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for key, shape in shapes:
            size = int(np.prod(shape))
            self._views[key] = flat[offset : offset + size].reshape(shape)
            offset += size
        self.embed = self._views["embed"]
        self.in_w = self._views["in_w"]
        self.in_b = self._views["in_b"]
        self.blocks = [
            Block(
                self._views[f"blocks.{i}.w1"],
                self._views[f"blocks.{i}.b1"],
                self._views[f"blocks.{i}.w2"],
                self._views[f"blocks.{i}.b2"],
            )
            for i in range(arch.n_blocks)
        ]
        self.out_w = self._views["out_w"]
        self.out_b = self._views["out_b"]
        self.br_w = self._views.get("br_w")
        self.br_b = self._views.get("br_b")


@dataclass
class ForwardTrace:
    """Cached activations for one batch; consumed exactly once by backward."""

    h0: np.ndarray
    rows: np.ndarray
    block_data: list  # per block: (z_in, u, sig, a) or None if skipped
    z_final: np.ndarray
    z_tap: np.ndarray | None
    skip_blocks: frozenset
    consumed: bool = False


@dataclass
class ForwardResult:
    velocity: np.ndarray
    branch_velocity: np.ndarray | None = None
    trace: ForwardTrace | None = None


@dataclass
class OptState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_params(arch: Arch, num_classes: int, seed) -> NetParams:
    """Fan-in scaled init; output heads start at zero so an untrained net
    predicts the zero velocity for every input."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    rng = np.random.default_rng(seed)
    shapes = _tensor_shapes(arch, num_classes)
    flat = np.zeros(sum(int(np.prod(s)) for _, s in shapes))
    freqs = np.logspace(np.log10(arch.freq_min), np.log10(arch.freq_max), arch.n_freqs)
    params = NetParams(arch, num_classes, flat, freqs)
    params.embed[...] = rng.standard_normal(params.embed.shape)
    params.in_w[...] = rng.standard_normal(params.in_w.shape) / np.sqrt(arch.in_dim)
    for blk in params.blocks:
        blk.w1[...] = rng.standard_normal(blk.w1.shape) / np.sqrt(arch.d_h)
        blk.w2[...] = rng.standard_normal(blk.w2.shape) / np.sqrt(arch.d_h)
    # out_w/out_b/br_w/br_b stay zero
    return params


def param_items(params: NetParams):
    """Trainable tensors, in flat-buffer (and checkpoint) order."""
    return params._views.items()


def param_count(params: NetParams) -> int:
    return params.flat.size


def copy_params(params: NetParams) -> NetParams:
    return NetParams(
        params.arch,
        params.num_classes,
        params.flat.copy(),
        params.time_freqs.copy(),
        params.version,
    )


def params_equal(a: NetParams, b: NetParams) -> bool:
    return (
        a.arch == b.arch
        and a.num_classes == b.num_classes
        and np.array_equal(a.flat, b.flat)
        and np.array_equal(a.time_freqs, b.time_freqs)
    )


def _cond_rows(params: NetParams, cond, n: int) -> np.ndarray:
    """Map condition values (0 = null, 1..CLS = class) to embedding rows."""
    if cond is None:
        return np.full(n, params.num_classes, dtype=np.int64)
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    if np.any(cond < 0) or np.any(cond > params.num_classes):
        raise ValueError("condition out of range")
    return np.where(cond == NULL_COND, params.num_classes, cond - 1)


def forward(
    params: NetParams,
    x,
    t,
    cond=None,
    skip_blocks=(),
    want_branch: bool = False,
    want_trace: bool = False,
) -> ForwardResult:
    """Evaluate the net on a batch.

    x: (B, 2) or (2,); t: scalar or (B,); cond: scalar/array of condition
    values (0 or None = null token). skip_blocks bypasses residual blocks
    with the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 2)
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    skip = frozenset(int(i) for i in skip_blocks)
    if skip and not skip <= set(range(params.arch.n_blocks)):
        raise ValueError(f"skip_blocks {sorted(skip)} outside valid block indices")
    if want_branch and params.br_w is None:
        raise ValueError("net has no branch head")

    rows = _cond_rows(params, cond, n)
    phase = t[:, None] * params.time_freqs[None, :]
    h0 = np.concatenate([x, np.sin(phase), np.cos(phase), params.embed[rows]], axis=1)
    z = h0 @ params.in_w
    z += params.in_b

    b_idx = params.arch.branch_index
    z_tap = None
    block_data = []
    for i, blk in enumerate(params.blocks):
        if i == b_idx:
            z_tap = z
        if i in skip:
            block_data.append(None)
            continue
        z_in = z
        u = z_in @ blk.w1
        u += blk.b1
        sig = 1.0 / (1.0 + np.exp(-u))
        a = u * sig
        z = a @ blk.w2
        z += blk.b2
        z += z_in
        block_data.append((z_in, u, sig, a))

    velocity = z @ params.out_w
    velocity += params.out_b
    branch_velocity = None
    if want_branch:
        branch_velocity = z_tap @ params.br_w + params.br_b

    trace = None
    if want_trace:
        trace = ForwardTrace(h0, rows, block_data, z, z_tap, skip)
    if single:
        velocity = velocity[0]
        if branch_velocity is not None:
            branch_velocity = branch_velocity[0]
    return ForwardResult(velocity, branch_velocity, trace)


def backward(params: NetParams, trace: ForwardTrace, grad_velocity, grad_branch=None) -> dict:
    """Exact gradients of sum_b <grad_velocity_b, v_b> (+ branch term) with
    respect to every trainable tensor. Gradients are summed over the batch;
    bypassed blocks get zeros; the trace is single-use."""
    if trace.consumed:
        raise RuntimeError("forward trace already consumed by a backward pass")
    trace.consumed = True
    grad_velocity = np.asarray(grad_velocity, dtype=np.float64).reshape(-1, 2)
    n = trace.h0.shape[0]
    if grad_velocity.shape[0] != n:
        raise ValueError("grad_velocity batch size does not match trace")
    if grad_branch is not None:
        grad_branch = np.asarray(grad_branch, dtype=np.float64).reshape(-1, 2)
        if grad_branch.shape[0] != n:
            raise ValueError("grad_branch batch size does not match trace")
        if trace.z_tap is None:
            raise ValueError("trace has no branch tap; forward with want_branch=True")

    arch = params.arch
    grads: dict[str, np.ndarray] = {}

    grads["out_w"] = trace.z_final.T @ grad_velocity
    grads["out_b"] = grad_velocity.sum(axis=0)
    delta = grad_velocity @ params.out_w.T

    b_idx = arch.branch_index
    for i in range(arch.n_blocks - 1, -1, -1):
        blk = params.blocks[i]
        data = trace.block_data[i]
        if data is None:
            grads[f"blocks.{i}.w1"] = np.zeros_like(blk.w1)
            grads[f"blocks.{i}.b1"] = np.zeros_like(blk.b1)
            grads[f"blocks.{i}.w2"] = np.zeros_like(blk.w2)
            grads[f"blocks.{i}.b2"] = np.zeros_like(blk.b2)
        else:
            z_in, u, sig, a = data
            grads[f"blocks.{i}.w2"] = a.T @ delta
            grads[f"blocks.{i}.b2"] = delta.sum(axis=0)
            # silu'(u) = sig + a * (1 - sig), reusing stored activations
            dsilu = a * sig
            np.subtract(a, dsilu, out=dsilu)
            dsilu += sig
            delta_u = delta @ blk.w2.T
            delta_u *= dsilu
            grads[f"blocks.{i}.w1"] = z_in.T @ delta_u
            grads[f"blocks.{i}.b1"] = delta_u.sum(axis=0)
            delta = delta + delta_u @ blk.w1.T
        if i == b_idx and grad_branch is not None:
            # delta now sits at the branch tap (input of block b_idx)
            grads["br_w"] = trace.z_tap.T @ grad_branch
            grads["br_b"] = grad_branch.sum(axis=0)
            delta = delta + grad_branch @ params.br_w.T

    if params.br_w is not None and "br_w" not in grads:
        grads["br_w"] = np.zeros_like(params.br_w)
        grads["br_b"] = np.zeros_like(params.br_b)

    grads["in_w"] = trace.h0.T @ delta
    grads["in_b"] = delta.sum(axis=0)
    delta_h0 = delta @ params.in_w.T
    onehot = np.zeros((n, params.num_classes + 1))
    onehot[np.arange(n), trace.rows] = 1.0
    grads["embed"] = onehot.T @ delta_h0[:, arch.enc_dim :]
    return grads


def flatten_grads(params: NetParams, grads: dict) -> np.ndarray:
    views = params._views
    if grads.keys() != views.keys():
        missing = views.keys() - grads.keys()
        extra = grads.keys() - views.keys()
        raise ValueError(f"gradient keys mismatch (missing {missing}, extra {extra})")
    parts = []
    for key, p in views.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {key}: {g.shape} vs {p.shape}")
        parts.append(np.asarray(g).ravel())
    return np.concatenate(parts)


def init_opt_state(params: NetParams, lr: float = 1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> OptState:
    return OptState(lr=lr, m=np.zeros_like(params.flat), v=np.zeros_like(params.flat), beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: NetParams, grads: dict, opt: OptState):
    """Bias-corrected adaptive-moment update, in place."""
    g = flatten_grads(params, grads)
    if not np.all(np.isfinite(g)):
        for key in params._views:
            if not np.all(np.isfinite(grads[key])):
                raise ValueError(f"non-finite gradient in {key}")
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    m, v = opt.m, opt.v
    m *= opt.beta1
    m += (1.0 - opt.beta1) * g
    v *= opt.beta2
    g *= g  # g is our scratch copy
    v += (1.0 - opt.beta2) * g
    # p -= lr * (m / c1) / (sqrt(v / c2) + eps), folded into two scalars
    denom = np.sqrt(v)
    denom += opt.eps * np.sqrt(c2)
    np.divide(m, denom, out=denom)
    denom *= opt.lr * np.sqrt(c2) / c1
    params.flat -= denom
    return params, opt


def velocity_fn(params: NetParams, skip_blocks=(), branch: bool = False):
    """Adapter: (x, t, cond) -> velocity array, for samplers and oracles."""
    if branch:

        def fn(x, t, cond=None):
            return forward(params, x, t, cond, want_branch=True).branch_velocity

    else:

        def fn(x, t, cond=None):
            return forward(params, x, t, cond, skip_blocks=skip_blocks).velocity

    return fn


# -- checkpoint container ----------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..3    magic  b"FGVN"
#   u32           container version (1)
#   u32           num_classes
#   u32 u32 u32   d_c, d_h, n_blocks
#   i32           branch_index (-1 if absent)
#   u32           n_freqs
#   f64 f64       freq_min, freq_max
#   tensors       time_freqs, then every trainable tensor in param_items
#                 order, raw little-endian float64, shapes implied by header
#   32 bytes      sha256 over everything above

_HEADER = struct.Struct("<4sIIIIIiIdd")


def save_checkpoint(params: NetParams, path):
    arch = params.arch
    header = _HEADER.pack(
        MAGIC,
        CHECKPOINT_VERSION,
        params.num_classes,
        arch.d_c,
        arch.d_h,
        arch.n_blocks,
        -1 if arch.branch_index is None else arch.branch_index,
        arch.n_freqs,
        arch.freq_min,
        arch.freq_max,
    )
    body = bytearray(header)
    body += np.ascontiguousarray(params.time_freqs, dtype="<f8").tobytes()
    meta_lines = [
        "# flowguide checkpoint sidecar",
        f"container_version {CHECKPOINT_VERSION}",
        f"num_classes {params.num_classes}",
        f"d_c {arch.d_c}",
        f"d_h {arch.d_h}",
        f"n_blocks {arch.n_blocks}",
        f"branch_index {-1 if arch.branch_index is None else arch.branch_index}",
        f"n_freqs {arch.n_freqs}",
    ]
    for key, arr in param_items(params):
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        meta_lines.append(f"tensor {key} {'x'.join(str(s) for s in arr.shape)}")
    digest = hashlib.sha256(bytes(body)).digest()
    body += digest
    with open(path, "wb") as fh:
        fh.write(bytes(body))
    meta_lines.append(f"sha256 {digest.hex()}")
    with open(str(path) + ".meta", "w") as fh:
        fh.write("\n".join(meta_lines) + "\n")


def load_checkpoint(path) -> NetParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + 32:
        raise ValueError("checkpoint file truncated")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError("checkpoint checksum mismatch")
    (magic, version, num_classes, d_c, d_h, n_blocks, b_idx, n_freqs, fmin, fmax) = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise ValueError("not a flowguide checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    arch = Arch(
        d_c=d_c,
        d_h=d_h,
        n_blocks=n_blocks,
        branch_index=None if b_idx < 0 else b_idx,
        n_freqs=n_freqs,
        freq_min=fmin,
        freq_max=fmax,
    )
    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += size * 8
        return arr.astype(np.float64)

    freqs = take((n_freqs,))
    shapes = _tensor_shapes(arch, num_classes)
    flat = np.zeros(sum(int(np.prod(s)) for _, s in shapes))
    params = NetParams(arch, num_classes, flat, freqs, version=version)
    for _, arr in param_items(params):
        arr[...] = take(arr.shape)
    if offset != len(payload):
        raise ValueError("checkpoint has trailing bytes")
    return params
