"""Minimal reverse-mode autodiff over dense float32 numpy arrays.

The op set is exactly what a small decoder-only transformer and
scale-vector training need: matmul, elementwise arithmetic with a single
channel-axis broadcast, layer norm, softmax, GELU, embedding lookup,
reshape/transpose plumbing and a cross-entropy head.

Determinism contract: every forward op is a fixed sequence of numpy
calls, and matmul accumulates sequentially over the inner dimension so
its result is bitwise identical to a scalar triple loop with the inner
dimension innermost.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

# When enabled, every forward op asserts its output is finite.
NAN_CHECK = False


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _check_finite(data: np.ndarray, op: str) -> None:
    if NAN_CHECK and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")


def seq_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with sequential accumulation over the inner axis.

    Bitwise-identical to the k-innermost scalar triple loop in float32.
    Supports (..., m, k) @ (k, n) and (..., m, k) @ (..., k, n) with
    equal leading dimensions.
    """
    out = np.zeros(a.shape[:-1] + b.shape[-1:], dtype=np.float32)
    for kk in range(a.shape[-1]):
        out += a[..., :, kk : kk + 1] * b[..., kk : kk + 1, :]
    return out


class Tensor:
    """A float32 array plus an optional gradient buffer on a build-as-you-go tape."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_hp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None
        # Full-precision value of scalar reductions (64-bit accumulation).
        self._hp: float | None = None

    # ---- construction helpers -------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _make(self, data: np.ndarray, prev: tuple[Tensor, ...], backward) -> "Tensor":
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in prev)
        if out.requires_grad:
            out._prev = prev
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(np.float32, copy=False)

    # ---- elementwise ----------------------------------------------------

    def _binary_shapes(self, other: "Tensor", op: str) -> None:
        a, b = self.shape, other.shape
        # Allowed: identical shapes, or b a vector broadcast over the last axis.
        if a == b:
            return
        if len(b) == 1 and len(a) >= 1 and a[-1] == b[0]:
            return
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")

    @staticmethod
    def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        if g.shape == shape:
            return g
        # Gradient of the channel-vector operand: sum over leading axes.
        axes = tuple(range(g.ndim - 1))
        return g.sum(axis=axes, dtype=np.float64).astype(np.float32)

    def add(self, other: "Tensor") -> "Tensor":
        self._binary_shapes(other, "add")
        data = self.data + other.data
        _check_finite(data, "add")

        def backward(out):
            self._accum(out.grad)
            other._accum(self._reduce_to(out.grad, other.shape))

        return self._make(data, (self, other), backward)

    def sub(self, other: "Tensor") -> "Tensor":
        self._binary_shapes(other, "sub")
        data = self.data - other.data
        _check_finite(data, "sub")

        def backward(out):
            self._accum(out.grad)
            other._accum(-self._reduce_to(out.grad, other.shape))

        return self._make(data, (self, other), backward)

    def mul(self, other: "Tensor") -> "Tensor":
        self._binary_shapes(other, "mul")
        data = self.data * other.data
        _check_finite(data, "mul")

        def backward(out):
            self._accum(out.grad * other.data)
            other._accum(self._reduce_to(out.grad * self.data, other.shape))

        return self._make(data, (self, other), backward)

    def div(self, other: "Tensor") -> "Tensor":
        self._binary_shapes(other, "div")
        if np.any(other.data == 0.0):
            raise NumericError("div: division by zero")
        data = self.data / other.data
        _check_finite(data, "div")

        def backward(out):
            self._accum(out.grad / other.data)
            other._accum(self._reduce_to(-out.grad * data / other.data, other.shape))

        return self._make(data, (self, other), backward)

    def scale_const(self, c: float) -> "Tensor":
        c = np.float32(c)
        data = self.data * c

        def backward(out):
            self._accum(out.grad * c)

        return self._make(data, (self,), backward)

    def add_const(self, c: np.ndarray) -> "Tensor":
        """Add a constant array (no gradient for the constant); used for masks."""
        data = self.data + _f32(c)

        def backward(out):
            self._accum(out.grad)

        return self._make(data, (self,), backward)

    # ---- channel scaling (the one named-axis broadcast) ------------------

    def scale_channels(self, s: "Tensor", axis: int = -1) -> "Tensor":
        """Multiply by a length-c vector broadcast along `axis`."""
        if len(s.shape) != 1 or self.shape[axis] != s.shape[0]:
            raise ShapeError(
                f"scale_channels: vector {s.shape} does not match axis {axis} "
                f"of {self.shape}"
            )
        ax = axis % self.data.ndim
        bshape = [1] * self.data.ndim
        bshape[ax] = s.shape[0]
        sv = s.data.reshape(bshape)
        data = self.data * sv
        _check_finite(data, "scale_channels")

        def backward(out):
            self._accum(out.grad * sv)
            axes = tuple(i for i in range(out.grad.ndim) if i != ax)
            gs = (out.grad * self.data).sum(axis=axes, dtype=np.float64)
            s._accum(gs.astype(np.float32))

        return self._make(data, (self, s), backward)

    def div_channels(self, s: "Tensor", axis: int = -1) -> "Tensor":
        """Divide by a length-c vector broadcast along `axis`."""
        if len(s.shape) != 1 or self.shape[axis] != s.shape[0]:
            raise ShapeError(
                f"div_channels: vector {s.shape} does not match axis {axis} "
                f"of {self.shape}"
            )
        if np.any(s.data == 0.0):
            raise NumericError("div_channels: division by zero")
        ax = axis % self.data.ndim
        bshape = [1] * self.data.ndim
        bshape[ax] = s.shape[0]
        sv = s.data.reshape(bshape)
        data = self.data / sv
        _check_finite(data, "div_channels")

        def backward(out):
            self._accum(out.grad / sv)
            axes = tuple(i for i in range(out.grad.ndim) if i != ax)
            gs = (-out.grad * data / sv).sum(axis=axes, dtype=np.float64)
            s._accum(gs.astype(np.float32))

        return self._make(data, (self, s), backward)

    # ---- matmul ----------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: need 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: leading dimensions differ: {a.shape} vs {b.shape}")
        data = seq_matmul(a, b)
        _check_finite(data, "matmul")

        def backward(out):
            g = out.grad
            # Backward uses library matmul; only the forward carries the
            # bit-exact summation-order contract.
            ga = np.matmul(g, np.swapaxes(b, -1, -2), dtype=np.float32)
            self._accum(ga)
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                gb = np.matmul(a2.T, g2, dtype=np.float32)
            else:
                gb = np.matmul(np.swapaxes(a, -1, -2), g, dtype=np.float32)
            other._accum(gb)

        return self._make(data, (self, other), backward)

    # ---- shape plumbing --------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        data = self.data.reshape(shape)

        def backward(out):
            self._accum(out.grad.reshape(self.data.shape))

        return self._make(data, (self,), backward)

    def transpose(self, *axes: int) -> "Tensor":
        data = np.ascontiguousarray(self.data.transpose(axes))
        inv = np.argsort(axes)

        def backward(out):
            self._accum(out.grad.transpose(inv))

        return self._make(data, (self,), backward)

    # ---- nonlinearities --------------------------------------------------

    def gelu(self) -> "Tensor":
        x = self.data
        c = np.float32(np.sqrt(2.0 / np.pi))
        a = np.float32(0.044715)
        u = c * (x + a * x * x * x)
        t = np.tanh(u)
        data = np.float32(0.5) * x * (np.float32(1.0) + t)
        _check_finite(data, "gelu")

        def backward(out):
            du = c * (np.float32(1.0) + np.float32(3.0) * a * x * x)
            local = np.float32(0.5) * (np.float32(1.0) + t) + np.float32(0.5) * x * (
                np.float32(1.0) - t * t
            ) * du
            self._accum(out.grad * local)

        return self._make(data, (self,), backward)

    def softmax(self) -> "Tensor":
        """Softmax over the last axis."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        data = e / e.sum(axis=-1, keepdims=True)
        _check_finite(data, "softmax")

        def backward(out):
            g = out.grad
            dot = (g * data).sum(axis=-1, keepdims=True)
            self._accum(data * (g - dot))

        return self._make(data, (self,), backward)

    def layer_norm(self, gamma: "Tensor", beta: "Tensor", eps: float = 1e-5) -> "Tensor":
        """Normalize over the last axis, then scale/shift per channel."""
        d = self.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(
                f"layer_norm: gamma {gamma.shape} / beta {beta.shape} "
                f"do not match feature dim {d}"
            )
        if eps < 0:
            raise NumericError("layer_norm: eps must be >= 0")
        x = self.data
        mean = x.mean(axis=-1, keepdims=True, dtype=np.float32)
        xmu = x - mean
        var = np.mean(xmu * xmu, axis=-1, keepdims=True, dtype=np.float32)
        inv = np.float32(1.0) / np.sqrt(var + np.float32(eps))
        xhat = xmu * inv
        data = xhat * gamma.data + beta.data
        _check_finite(data, "layer_norm")

        def backward(out):
            g = out.grad
            gamma._accum((g * xhat).sum(axis=tuple(range(g.ndim - 1)), dtype=np.float64).astype(np.float32))
            beta._accum(g.sum(axis=tuple(range(g.ndim - 1)), dtype=np.float64).astype(np.float32))
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float32)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float32)
            self._accum(inv * (dxhat - m1 - xhat * m2))

        return self._make(data, (self, gamma, beta), backward)

    # ---- lookup ----------------------------------------------------------

    def embed(self, ids: np.ndarray) -> "Tensor":
        """Row lookup: self is a (rows, d) table, ids an integer array."""
        ids = np.asarray(ids)
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= self.shape[0]:
            raise IndexError(
                f"embed: index out of range for table with {self.shape[0]} rows"
            )
        data = self.data[ids]

        def backward(out):
            if not self.requires_grad:
                return
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            np.add.at(self.grad, ids.reshape(-1), out.grad.reshape(-1, self.shape[1]))

        return self._make(data, (self,), backward)

    # ---- reductions ------------------------------------------------------

    def sum(self) -> "Tensor":
        hp = self.data.sum(dtype=np.float64)
        data = np.float32(hp)

        def backward(out):
            self._accum(np.full_like(self.data, out.grad))

        out = self._make(data, (self,), backward)
        out._hp = float(hp)
        return out

    def cross_entropy(self, targets: np.ndarray) -> "Tensor":
        """Mean negative log-likelihood of integer targets; logits are (N, V)."""
        logits = self.data
        if logits.ndim != 2:
            raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        n, v = logits.shape
        if targets.shape[0] != n:
            raise ShapeError(
                f"cross_entropy: {targets.shape[0]} targets for {n} positions"
            )
        if targets.min(initial=0) < 0 or targets.max(initial=-1) >= v:
            raise IndexError(f"cross_entropy: target out of range [0, {v})")
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        sume = e.sum(axis=-1, keepdims=True)
        logp = z - np.log(sume)
        nll = -logp[np.arange(n), targets]
        # 64-bit mean keeps long-sequence losses stable.
        hp = nll.sum(dtype=np.float64) / n
        data = np.float32(hp)
        _check_finite(data, "cross_entropy")

        def backward(out):
            p = e / sume
            p[np.arange(n), targets] -= np.float32(1.0)
            self._accum(p * (out.grad / np.float32(n)))

        out = self._make(data, (self,), backward)
        out._hp = float(hp)
        return out

    # ---- autodiff driver -------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.shape != ():
            raise ContractError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node)

    def item(self) -> float:
        return float(self.data)


def finite_diff_check(f, x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between autodiff and central finite differences.

    `f` maps a Tensor to a scalar Tensor. Relative error uses an absolute
    floor of 1e-6 so near-zero gradients do not blow up the ratio.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    x.grad = None
    loss = f(x)
    loss.backward()
    ad = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    def value(t: Tensor) -> float:
        return t._hp if t._hp is not None else float(t.data)

    flat = x.data.reshape(-1)
    fd = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        xp = np.float32(orig + h)
        xm = np.float32(orig - h)
        flat[i] = xp
        fp = value(f(x))
        flat[i] = xm
        fm = value(f(x))
        flat[i] = orig
        # Divide by the step actually applied after float32 rounding.
        fd[i] = (fp - fm) / (float(xp) - float(xm))
    fd = fd.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-6)
    return float(np.max(np.abs(fd - ad) / denom))
