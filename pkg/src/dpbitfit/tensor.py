"""Dense float64 arrays, batched primitives, seeded Gaussian streams and the
allocation ledger.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Everything
here is a thin, shape-checked layer over numpy so that the rest of the
package can speak in terms of the ``B x T x d`` layout used for per-sample
gradient work.
"""
from __future__ import annotations

import contextlib
import contextvars
import hashlib
import threading
from collections import defaultdict

import numpy as np

from .errors import ConfigurationError, DimensionError, ParameterError, UnledgeredAllocation

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batched product ``out[b,t,j] = sum_k a[b,t,k] w[k,j]``.

    A rank-2 ``a`` is treated as a single batch element (B=1) and the result
    keeps rank 3.
    """
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(w.shape)}")
    return np.matmul(a, w)


def add_bias(s: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.ndim != 1 or s.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias of shape {tuple(b.shape)} does not match {tuple(s.shape)}")
    return s + b


def sum_over_T(g: np.ndarray) -> np.ndarray:
    """Reduce ``B x T x p`` to ``B x p``; this is the whole per-sample bias gradient."""
    if g.ndim != 3:
        raise DimensionError(f"sum_over_T expects rank 3, got shape {tuple(g.shape)}")
    return g.sum(axis=1)


def frobenius_sq(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=DTYPE).ravel()
    return float(np.dot(x, x))


def row_norms_sq(x: np.ndarray) -> np.ndarray:
    """Squared Frobenius norm of every leading-axis slice."""
    flat = x.reshape(x.shape[0], -1)
    return np.einsum("ij,ij->i", flat, flat)


def conv_output_size(h: int, w: int, kernel, stride, padding) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def unfold2d(x: np.ndarray, kernel, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    """Lower ``B x C x H x W`` images to ``B x T x d`` patch rows.

    ``T = oH*oW`` in row-major output order and ``d = C*kH*kW`` with column
    ``c*kH*kW + i*kW + j`` holding kernel offset ``(i, j)`` of channel ``c``.
    """
    if x.ndim != 4:
        raise DimensionError(f"unfold2d expects B x C x H x W, got {tuple(x.shape)}")
    B, C, H, W = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh, ow = conv_output_size(H, W, kernel, stride, padding)
    if oh < 1 or ow < 1 or min(kh, kw, sh, sw) < 1 or min(ph, pw) < 0:
        raise ConfigurationError(
            f"unfold2d: input {H}x{W} with kernel {kernel}, stride {stride}, padding {padding} "
            f"gives output {oh}x{ow}"
        )
    img = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((B, C, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = img[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3).reshape(B, oh * ow, C * kh * kw))


def fold2d(cols: np.ndarray, image_shape, kernel, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    """Adjoint of :func:`unfold2d`: scatter-add patch rows back onto the image."""
    B, C, H, W = image_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh, ow = conv_output_size(H, W, kernel, stride, padding)
    if cols.shape != (B, oh * ow, C * kh * kw):
        raise DimensionError(f"fold2d: columns {tuple(cols.shape)} do not match image {tuple(image_shape)}")
    c6 = cols.reshape(B, oh, ow, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += c6[:, :, i, j]
    return img[:, :, ph:ph + H, pw:pw + W]


class SeededRng:
    """Named random stream on a Philox counter-based generator.

    The key is derived from ``(seed, stream)`` so independent streams of the
    same seed never overlap.
    """

    def __init__(self, seed: int, stream: str = "default"):
        self.seed = int(seed)
        self.stream = stream
        digest = hashlib.blake2b(f"{self.seed}:{stream}".encode(), digest_size=16).digest()
        key = int.from_bytes(digest, "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def standard_normal(self, n: int) -> np.ndarray:
        # Box-Muller over (0,1] x [0,1) uniforms, pairs interleaved row-major
        m = (n + 1) // 2
        u = self._gen.random(2 * m)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m, dtype=DTYPE)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n]


def gaussian(shape, std: float, rng: SeededRng, mean: float = 0.0) -> np.ndarray:
    if std < 0:
        raise ParameterError(f"gaussian: std must be non-negative, got {std}")
    shape = tuple(int(s) for s in np.atleast_1d(np.asarray(shape, dtype=np.int64)))
    n = int(np.prod(shape, dtype=np.int64))
    if std == 0:
        return np.full(shape, mean, dtype=DTYPE)
    return (mean + std * rng.standard_normal(n)).reshape(shape)


class AllocationLedger:
    """Byte accounting for tensors registered under string tags.

    ``tagged_totals`` accumulates every registration (it never decreases),
    ``tagged_live`` tracks what is currently held. In strict mode
    :meth:`check` raises for arrays that were never registered.
    """

    def __init__(self, strict: bool = False):
        self.strict = strict
        self.live_bytes = 0
        self.peak_bytes = 0
        self.tagged_totals: dict[str, int] = defaultdict(int)
        self.tagged_live: dict[str, int] = defaultdict(int)
        self.tagged_peak: dict[str, int] = defaultdict(int)
        self._entries: dict[int, tuple[str, int, np.ndarray]] = {}
        self._ids: dict[int, int] = defaultdict(int)
        self._next = 0
        self._lock = threading.Lock()

    def alloc(self, arr: np.ndarray, tag: str) -> int:
        nbytes = int(arr.nbytes)
        with self._lock:
            handle = self._next
            self._next += 1
            self._entries[handle] = (tag, nbytes, arr)
            self._ids[id(arr)] += 1
            self.live_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            self.tagged_totals[tag] += nbytes
            self.tagged_live[tag] += nbytes
            self.tagged_peak[tag] = max(self.tagged_peak[tag], self.tagged_live[tag])
        return handle

    def release(self, handle: int) -> None:
        with self._lock:
            tag, nbytes, arr = self._entries.pop(handle)
            self._ids[id(arr)] -= 1
            if not self._ids[id(arr)]:
                del self._ids[id(arr)]
            self.live_bytes -= nbytes
            self.tagged_live[tag] -= nbytes

    def is_tracked(self, arr: np.ndarray) -> bool:
        return id(arr) in self._ids

    def check(self, arr: np.ndarray, what: str = "tensor") -> None:
        if self.strict and not self.is_tracked(arr):
            raise UnledgeredAllocation(f"{what} of shape {tuple(arr.shape)} is not registered in the ledger")

    @contextlib.contextmanager
    def active(self):
        token = _ACTIVE.set(self)
        try:
            yield self
        finally:
            _ACTIVE.reset(token)


_ACTIVE: contextvars.ContextVar[AllocationLedger | None] = contextvars.ContextVar("ledger", default=None)


def current_ledger() -> AllocationLedger | None:
    return _ACTIVE.get()


def track(arr: np.ndarray, tag: str):
    """Register ``arr`` with the active ledger, if any; returns a release token."""
    ledger = _ACTIVE.get()
    return None if ledger is None else (ledger, ledger.alloc(arr, tag))


def untrack(token) -> None:
    if token is not None:
        ledger, handle = token
        ledger.release(handle)


def check_tracked(arr: np.ndarray, what: str) -> None:
    ledger = _ACTIVE.get()
    if ledger is not None:
        ledger.check(arr, what)
