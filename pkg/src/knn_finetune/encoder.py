"""Feed-forward encoder D -> H -> d with tanh, l2-normalized output, linear head.

All forward/backward functions accept a single feature vector of shape (D,)
or a batch of shape (n, D); outputs follow the same leading shape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from ._streams import HEAD_INIT, INIT, substream

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderParams:
    W1: np.ndarray  # (D, H)
    b1: np.ndarray  # (H,)
    W2: np.ndarray  # (H, d)
    b2: np.ndarray  # (d,)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "EncoderParams":
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    def copy(self) -> "EncoderParams":
        return EncoderParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})


@dataclass(frozen=True)
class HeadParams:
    W: np.ndarray  # (d, C)
    b: np.ndarray  # (C,)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    @classmethod
    def from_dict(cls, d) -> "HeadParams":
        return cls(W=d["W"], b=d["b"])


@dataclass(frozen=True)
class Representation:
    h: np.ndarray
    z: np.ndarray


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_encoder(seed: int, dims: tuple[int, int, int]) -> EncoderParams:
    D, H, d = dims
    if min(dims) < 1:
        raise ValueError(f"encoder dims must be positive, got {dims}")
    rng = substream(seed, INIT)
    return EncoderParams(
        W1=_glorot(rng, D, H), b1=np.zeros(H), W2=_glorot(rng, H, d), b2=np.zeros(d)
    )


def init_head(seed: int, d: int, num_classes: int) -> HeadParams:
    rng = substream(seed, HEAD_INIT)
    return HeadParams(W=_glorot(rng, d, num_classes), b=np.zeros(num_classes))


def _check_input(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.W1.shape[0]:
        raise ShapeError(f"expected input of dimension {params.W1.shape[0]}, got shape {x.shape}")
    return x


def normalize(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise l2 normalization returning ``(z, norms)``.

    Rows with norm below ``NORM_EPS`` map to the first basis vector.
    """
    h = np.asarray(h, dtype=np.float64)
    norms = np.linalg.norm(h, axis=-1)
    z = h / np.maximum(norms, NORM_EPS)[..., None]
    degenerate = norms < NORM_EPS
    if np.any(degenerate):
        e1 = np.zeros(h.shape[-1])
        e1[0] = 1.0
        z = np.where(degenerate[..., None], e1, z)
    return z, norms


def encode(params: EncoderParams, x) -> Representation:
    x = _check_input(params, x)
    a = np.tanh(x @ params.W1 + params.b1)
    h = a @ params.W2 + params.b2
    z, _ = normalize(h)
    return Representation(h=h, z=z)


def linear_head(head: HeadParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != head.W.shape[0]:
        raise ShapeError(f"head expects dimension {head.W.shape[0]}, got shape {h.shape}")
    return h @ head.W + head.b


def head_backward(head: HeadParams, h, grad_logits) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of a scalar loss w.r.t. the head params and its input ``h``."""
    h = np.atleast_2d(h)
    g = np.atleast_2d(grad_logits)
    grads = {"W": h.T @ g, "b": g.sum(axis=0)}
    grad_h = g @ head.W.T
    return grads, grad_h.reshape(np.shape(grad_logits)[:-1] + (head.W.shape[0],))


def encoder_backward(params: EncoderParams, x, grad_h=None, grad_z=None):
    """Backpropagate upstream gradients on ``h`` and ``z`` to params and input.

    The normalization Jacobian is ``(I - z z^T) / ||h||``.  Rows that took
    the degenerate fallback contribute no gradient through ``z``.  For batched
    inputs the parameter gradients are summed over rows.

    Returns ``(grads, grad_x)`` where ``grads`` has the keys of
    :class:`EncoderParams`.
    """
    x = _check_input(params, x)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    pre = X @ params.W1 + params.b1
    a = np.tanh(pre)
    h = a @ params.W2 + params.b2

    g_h = np.zeros_like(h) if grad_h is None else np.atleast_2d(np.asarray(grad_h, dtype=np.float64))
    if g_h.shape != h.shape:
        raise ShapeError(f"grad_h shape {g_h.shape} does not match h {h.shape}")
    if grad_z is not None:
        g_z = np.atleast_2d(np.asarray(grad_z, dtype=np.float64))
        if g_z.shape != h.shape:
            raise ShapeError(f"grad_z shape {g_z.shape} does not match z {h.shape}")
        z, norms = normalize(h)
        ok = norms >= NORM_EPS
        proj = g_z - z * np.sum(z * g_z, axis=1, keepdims=True)
        g_h = g_h + np.where(ok[:, None], proj / np.where(ok, norms, 1.0)[:, None], 0.0)

    grads = {"W2": a.T @ g_h, "b2": g_h.sum(axis=0)}
    g_a = g_h @ params.W2.T
    g_pre = g_a * (1.0 - a * a)
    grads["W1"] = X.T @ g_pre
    grads["b1"] = g_pre.sum(axis=0)
    grad_x = g_pre @ params.W1.T
    return grads, (grad_x[0] if single else grad_x)


# --- checkpoint file -------------------------------------------------------
#
# Layout, all little-endian:
#   magic        4 bytes  b"KNNC"
#   version      uint32
#   D, H, d, C   4 x uint32
#   seed         int64
#   step         uint64
#   config_len   uint32, followed by config_len bytes of UTF-8 config echo
#   floats       float64 array: query W1, b1, W2, b2, key W1, b1, W2, b2,
#                head W, b (row-major)

CHECKPOINT_MAGIC = b"KNNC"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI4IqQI")


@dataclass
class Checkpoint:
    query: EncoderParams
    key: EncoderParams
    head: HeadParams
    seed: int
    step: int
    config_echo: str = ""

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.query.dims

    @property
    def num_classes(self) -> int:
        return self.head.W.shape[1]


def _param_arrays(ckpt: Checkpoint) -> list[np.ndarray]:
    arrays = list(ckpt.query.as_dict().values()) + list(ckpt.key.as_dict().values())
    return arrays + [ckpt.head.W, ckpt.head.b]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    D, H, d = ckpt.dims
    echo = ckpt.config_echo.encode("utf-8")
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, D, H, d, ckpt.num_classes,
        ckpt.seed, ckpt.step, len(echo),
    )
    body = np.concatenate([a.ravel() for a in _param_arrays(ckpt)]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(echo)
        fh.write(body.tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, D, H, d, C, seed, step, echo_len = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    off = _HEADER.size
    echo = raw[off : off + echo_len].decode("utf-8")
    off += echo_len
    flat = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
    enc_shapes = [(D, H), (H,), (H, d), (d,)]
    shapes = enc_shapes + enc_shapes + [(d, C), (C,)]
    expected = sum(int(np.prod(s)) for s in shapes)
    if flat.size != expected:
        raise CheckpointError(f"{path}: expected {expected} floats, found {flat.size}")
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[pos : pos + n].reshape(s))
        pos += n
    names = ["W1", "b1", "W2", "b2"]
    return Checkpoint(
        query=EncoderParams.from_dict(dict(zip(names, arrays[0:4]))),
        key=EncoderParams.from_dict(dict(zip(names, arrays[4:8]))),
        head=HeadParams(W=arrays[8], b=arrays[9]),
        seed=seed,
        step=step,
        config_echo=echo,
    )
