"""Policy/value network with hand-written reverse-mode gradients.

Shared ReLU trunk over the 4-plane observation — two dense layers of
width 128, optionally preceded by two 3x3 same-padding convolution layers
(the convolutional stem is what makes one policy generalize across maze
layouts; the pure dense trunk has to memorize each maze separately and
only suits single-maze experiments). The trunk feeds a 5-way
action-logits head and a scalar value head.

Everything is float64: the finite-difference gradient checks in the test
suite demand it. Convolutions are evaluated as nine shifted matrix
products, which keeps both passes in BLAS instead of gather/scatter.
Parameters round-trip through a flat vector for checkpointing.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import CheckpointError

_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]


def _shift_regions(H: int, W: int, dr: int, dc: int):
    """Slices (src, dst) such that dst_region of the output reads
    src_region of the input shifted by (dr, dc) under zero padding."""
    src = (slice(max(0, dr), H + min(0, dr)), slice(max(0, dc), W + min(0, dc)))
    dst = (slice(max(0, -dr), H + min(0, -dr)), slice(max(0, -dc), W + min(0, -dc)))
    return src, dst


def conv3x3_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 same-padding convolution; x is (B, H, W, C_in), kernel (9, C_in, C_out)."""
    B, H, W, C_in = x.shape
    C_out = bias.size
    out = np.broadcast_to(bias, (B, H, W, C_out)).copy()
    for k, (dr, dc) in enumerate(_OFFSETS):
        src, dst = _shift_regions(H, W, dr, dc)
        patch = x[:, src[0], src[1], :]
        h, w = patch.shape[1], patch.shape[2]
        out[:, dst[0], dst[1], :] += (patch.reshape(-1, C_in) @ kernel[k]).reshape(B, h, w, C_out)
    return out


def conv3x3_backward(x: np.ndarray, kernel: np.ndarray, d_out: np.ndarray):
    """Gradients for conv3x3_forward; returns (d_x, d_kernel, d_bias)."""
    B, H, W, C_in = x.shape
    C_out = kernel.shape[2]
    d_x = np.zeros_like(x)
    d_kernel = np.zeros_like(kernel)
    for k, (dr, dc) in enumerate(_OFFSETS):
        src, dst = _shift_regions(H, W, dr, dc)
        patch = x[:, src[0], src[1], :].reshape(-1, C_in)
        grad = d_out[:, dst[0], dst[1], :].reshape(-1, C_out)
        d_kernel[k] = patch.T @ grad
        d_x[:, src[0], src[1], :] += (grad @ kernel[k].T).reshape(B, src[0].stop - src[0].start, -1, C_in)
    d_bias = d_out.sum(axis=(0, 1, 2))
    return d_x, d_kernel, d_bias


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # make the factorization unique
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class PolicyValueNet:
    """Deterministic forward pass; exact analytic backward pass.

    With ``conv_channels`` set, observations are reshaped to their four
    planes and run through two 3x3 convolution layers before the dense
    stack; ``grid`` gives the plane shape (height, width). Without it the
    flat observation feeds the dense stack directly.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: tuple[int, int] = (128, 128),
        n_actions: int = 5,
        rng: np.random.Generator | None = None,
        conv_channels: tuple[int, int] | None = None,
        grid: tuple[int, int] | None = None,
    ):
        self.input_dim = int(input_dim)
        self.hidden = (int(hidden[0]), int(hidden[1]))
        self.n_actions = int(n_actions)
        self.conv_channels = tuple(int(c) for c in conv_channels) if conv_channels else None
        if self.conv_channels:
            if grid is None:
                raise ValueError("conv trunk needs the plane shape (height, width)")
            self.grid = (int(grid[0]), int(grid[1]))
            if 4 * self.grid[0] * self.grid[1] != self.input_dim:
                raise ValueError(f"input_dim {input_dim} is not 4 x {grid[0]} x {grid[1]}")
        else:
            self.grid = None
        if rng is None:
            rng = np.random.default_rng(0)
        h1, h2 = self.hidden
        root2 = float(np.sqrt(2.0))
        self.params: dict[str, np.ndarray] = {}
        if self.conv_channels:
            c1, c2 = self.conv_channels
            # He-style fan-in scaling per 3x3 tap block.
            self.params["K1"] = rng.standard_normal((9, 4, c1)) * np.sqrt(2.0 / (9 * 4))
            self.params["c1"] = np.zeros(c1)
            self.params["K2"] = rng.standard_normal((9, c1, c2)) * np.sqrt(2.0 / (9 * c1))
            self.params["c2"] = np.zeros(c2)
            dense_in = self.grid[0] * self.grid[1] * c2
        else:
            dense_in = self.input_dim
        self.dense_in = dense_in
        self.params.update({
            "W1": _orthogonal(rng, h1, dense_in, root2),
            "b1": np.zeros(h1),
            "W2": _orthogonal(rng, h2, h1, root2),
            "b2": np.zeros(h2),
            "Wp": _orthogonal(rng, self.n_actions, h2, 0.01),
            "bp": np.zeros(self.n_actions),
            "Wv": _orthogonal(rng, 1, h2, 1.0),
            "bv": np.zeros(1),
        })
        self.param_keys = tuple(self.params.keys())

    # -- architecture identity ------------------------------------------------

    @property
    def arch_descriptor(self) -> str:
        stem = ""
        if self.conv_channels:
            stem = "conv3x3:{}x{}:{},{};".format(self.grid[0], self.grid[1], *self.conv_channels)
        return stem + "dense:{}-{}-{};heads:{},1".format(
            self.input_dim, self.hidden[0], self.hidden[1], self.n_actions
        )

    @property
    def arch_hash(self) -> int:
        digest = hashlib.sha256(self.arch_descriptor.encode()).digest()
        return int.from_bytes(digest[:8], "big")

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward / backward ---------------------------------------------------

    def forward(self, obs: np.ndarray):
        """Return (logits (B,A), values (B,), cache for backward)."""
        x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        p = self.params
        conv_cache = None
        if self.conv_channels:
            B = x.shape[0]
            H, W = self.grid
            planes = x.reshape(B, 4, H, W).transpose(0, 2, 3, 1)
            u1 = conv3x3_forward(planes, p["K1"], p["c1"])
            r1 = np.maximum(u1, 0.0)
            u2 = conv3x3_forward(r1, p["K2"], p["c2"])
            r2 = np.maximum(u2, 0.0)
            feat = r2.reshape(B, -1)
            conv_cache = (planes, u1, r1, u2)
        else:
            feat = x
        z1 = feat @ p["W1"].T + p["b1"]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ p["W2"].T + p["b2"]
        a2 = np.maximum(z2, 0.0)
        logits = a2 @ p["Wp"].T + p["bp"]
        values = (a2 @ p["Wv"].T + p["bv"])[:, 0]
        cache = (feat, z1, a1, z2, a2, conv_cache)
        return logits, values, cache

    def policy_value(self, obs: np.ndarray):
        logits, values, _ = self.forward(obs)
        return logits, values

    def backward(self, cache, d_logits: np.ndarray, d_values: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradients at logits and values."""
        feat, z1, a1, z2, a2, conv_cache = cache
        p = self.params
        d_values = d_values.reshape(-1, 1)
        grads = {
            "Wp": d_logits.T @ a2,
            "bp": d_logits.sum(axis=0),
            "Wv": d_values.T @ a2,
            "bv": d_values.sum(axis=0),
        }
        d_a2 = d_logits @ p["Wp"] + d_values @ p["Wv"]
        d_z2 = d_a2 * (z2 > 0.0)
        grads["W2"] = d_z2.T @ a1
        grads["b2"] = d_z2.sum(axis=0)
        d_a1 = d_z2 @ p["W2"]
        d_z1 = d_a1 * (z1 > 0.0)
        grads["W1"] = d_z1.T @ feat
        grads["b1"] = d_z1.sum(axis=0)
        if self.conv_channels:
            planes, u1, r1, u2 = conv_cache
            B = planes.shape[0]
            H, W = self.grid
            d_feat = d_z1 @ p["W1"]
            d_r2 = d_feat.reshape(B, H, W, self.conv_channels[1]) * (u2 > 0.0)
            d_r1, grads["K2"], grads["c2"] = conv3x3_backward(r1, p["K2"], d_r2)
            d_u1 = d_r1 * (u1 > 0.0)
            _, grads["K1"], grads["c1"] = conv3x3_backward(planes, p["K1"], d_u1)
        return grads

    # -- flat parameter vector ------------------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_keys])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters, got {flat.size}")
        i = 0
        for k in self.param_keys:
            shape = self.params[k].shape
            n = self.params[k].size
            self.params[k] = flat[i : i + n].reshape(shape).copy()
            i += n


class Adam:
    """Adam moments for the net's parameter dict."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if not self.m:
            self.m = {k: np.zeros_like(p) for k, p in params.items()}
            self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)

    def state_flat(self, net: PolicyValueNet) -> np.ndarray:
        """Moments packed for resume files; empty state packs as zeros."""
        if not self.m:
            return np.concatenate([np.zeros(2 * net.param_count), [0.0]])
        m = np.concatenate([self.m[k].ravel() for k in net.param_keys])
        v = np.concatenate([self.v[k].ravel() for k in net.param_keys])
        return np.concatenate([m, v, [float(self.t)]])

    def load_state_flat(self, net: PolicyValueNet, flat: np.ndarray) -> None:
        n = net.param_count
        if flat.size != 2 * n + 1:
            raise CheckpointError("optimizer state size mismatch")
        self.t = int(flat[-1])
        self.m, self.v = {}, {}
        i = 0
        for k in net.param_keys:
            shape = net.params[k].shape
            size = net.params[k].size
            self.m[k] = flat[i : i + size].reshape(shape).copy()
            self.v[k] = flat[n + i : n + i + size].reshape(shape).copy()
            i += size


_CKPT_MAGIC = b"BPNET1\n"


def save_checkpoint(path, net: PolicyValueNet) -> None:
    """Flat-parameter binary: magic, arch_hash, param_count, float64 payload."""
    flat = net.get_flat()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<QQ", net.arch_hash, net.param_count))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path, net: PolicyValueNet) -> PolicyValueNet:
    """Load parameters into ``net``, verifying the architecture hash."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = fh.read(16)
        if len(header) != 16:
            raise CheckpointError(f"{path}: truncated header")
        arch_hash, param_count = struct.unpack("<QQ", header)
        if arch_hash != net.arch_hash:
            raise CheckpointError(
                f"{path}: checkpoint architecture {arch_hash:#x} does not match {net.arch_descriptor}"
            )
        if param_count != net.param_count:
            raise CheckpointError(f"{path}: parameter count {param_count} != {net.param_count}")
        payload = fh.read()
    expected = param_count * 8
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    net.set_flat(np.frombuffer(payload, dtype="<f8"))
    return net
