"""Differentiable objectives: loss, gradient, and exact Hessian-vector products.

Three objective families:

* ``QuadraticObjective``   -- L(w) = 1/2 w'Hw for a dense symmetric H.
* ``MlpObjective``         -- fully-connected network with MSE loss
                              (1/2n) sum_i ||f(x_i) - y_i||^2.  Gradients by
                              reverse mode; HVPs by forward-over-reverse
                              tangent propagation (exact, not finite
                              differences).
* ``TaylorObjective``      -- frozen quadratic model of another objective at an
                              anchor point, with the anchor Hessian applied
                              lazily through the parent's HVP.

Non-finite parameters yield an infinite loss / NaN gradient rather than an
exception; the training loop turns that into a diverged record.
"""

from __future__ import annotations

import math

import numpy as np

from .params import BlockLayout, LayoutError, ParamVector


class Objective:
    layout: BlockLayout

    def loss(self, w: ParamVector) -> float:
        raise NotImplementedError

    def grad(self, w: ParamVector) -> ParamVector:
        raise NotImplementedError

    def hvp(self, w: ParamVector, d: ParamVector) -> ParamVector:
        raise NotImplementedError

    def hvp_at(self, w: ParamVector):
        """Bind w: returns d -> hvp(w, d).  Safe to call concurrently."""
        return lambda d: self.hvp(w, d)

    def hvp_multi(self, w: ParamVector, D: np.ndarray) -> np.ndarray:
        """Hessian applied to the rows of D (m x dim).  Subclasses may batch."""
        return np.stack([self.hvp(w, ParamVector(self.layout, row)).data for row in D])

    def hvp_multi_at(self, w: ParamVector):
        return lambda D: self.hvp_multi(w, D)

    def _check(self, w: ParamVector):
        if w.layout is not self.layout and w.layout != self.layout:
            raise LayoutError("parameter layout does not match objective layout")

    def _nan_vector(self) -> ParamVector:
        return ParamVector(self.layout, np.full(self.layout.total_dim, np.nan))


class QuadraticObjective(Objective):
    """L(w) = 1/2 w'Hw; H symmetrized at construction."""

    def __init__(self, H, layout: BlockLayout | None = None):
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError("H must be a square matrix")
        self.H = 0.5 * (H + H.T)
        self.layout = layout or BlockLayout.flat(H.shape[0])
        if self.layout.total_dim != H.shape[0]:
            raise LayoutError("layout dimension does not match H")

    def loss(self, w):
        self._check(w)
        if not w.is_finite():
            return math.inf
        return 0.5 * float(w.data @ (self.H @ w.data))

    def grad(self, w):
        self._check(w)
        if not w.is_finite():
            return self._nan_vector()
        return ParamVector(self.layout, self.H @ w.data)

    def hvp(self, w, d):
        self._check(d)
        return ParamVector(self.layout, self.H @ d.data)

    def hvp_multi(self, w, D):
        return np.asarray(D) @ self.H  # H symmetric

    def dense_hessian(self) -> np.ndarray:
        return self.H.copy()


def mlp_layout(dims: list[int]) -> BlockLayout:
    """Layers named layer{i}.weight (fan_in x fan_out) and layer{i}.bias."""
    blocks = []
    for i in range(len(dims) - 1):
        blocks.append((f"layer{i}.weight", (dims[i], dims[i + 1])))
        blocks.append((f"layer{i}.bias", (dims[i + 1],)))
    return BlockLayout.of(*blocks)


class MlpObjective(Objective):
    """Fully-connected net, MSE loss (1/2n)||f(X) - Y||_F^2.

    activation: "tanh" (smooth; default) or "relu" (HVP identities only hold
    away from preactivation kinks).
    """

    def __init__(self, dims: list[int], X, Y, activation: str = "tanh"):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError("X and Y must be 2-D with matching row counts")
        if X.shape[1] != dims[0] or Y.shape[1] != dims[-1]:
            raise ValueError(f"dims {dims} do not match data shapes {X.shape}, {Y.shape}")
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.dims = list(int(d) for d in dims)
        self.X, self.Y = X, Y
        self.n = X.shape[0]
        self.activation = activation
        self.layout = mlp_layout(self.dims)
        self.n_layers = len(self.dims) - 1

    def init_params(self, seed: int) -> ParamVector:
        """Scaled-Gaussian fan-in init (std 1/sqrt(fan_in)), zero biases."""
        from .params import RngState

        rng = RngState(seed)
        blocks = {}
        for i in range(self.n_layers):
            fan_in, fan_out = self.dims[i], self.dims[i + 1]
            blocks[f"layer{i}.weight"] = rng.normal(fan_in * fan_out).reshape(fan_in, fan_out) / np.sqrt(fan_in)
            blocks[f"layer{i}.bias"] = np.zeros(fan_out)
        return ParamVector.from_blocks(self.layout, blocks)

    def _weights(self, w: ParamVector):
        Ws, bs = [], []
        for i in range(self.n_layers):
            Ws.append(w.block(f"layer{i}.weight"))
            bs.append(w.block(f"layer{i}.bias"))
        return Ws, bs

    def _act(self, Z):
        if self.activation == "tanh":
            return np.tanh(Z)
        return np.maximum(Z, 0.0)

    def _act_prime(self, Z, A):
        if self.activation == "tanh":
            return 1.0 - A * A
        return (Z > 0.0).astype(np.float64)

    def _act_second(self, Z, A):
        if self.activation == "tanh":
            return -2.0 * A * (1.0 - A * A)
        return np.zeros_like(Z)

    def _forward(self, w: ParamVector):
        Ws, bs = self._weights(w)
        As, Zs = [self.X], []
        for i in range(self.n_layers):
            Z = As[-1] @ Ws[i] + bs[i]
            Zs.append(Z)
            As.append(self._act(Z) if i < self.n_layers - 1 else Z)
        return Ws, bs, Zs, As

    def loss(self, w):
        self._check(w)
        if not w.is_finite():
            return math.inf
        _, _, _, As = self._forward(w)
        R = As[-1] - self.Y
        return float(np.sum(R * R)) / (2.0 * self.n)

    def grad(self, w):
        self._check(w)
        if not w.is_finite():
            return self._nan_vector()
        Ws, _, Zs, As = self._forward(w)
        D = (As[-1] - self.Y) / self.n
        blocks = {}
        for i in range(self.n_layers - 1, -1, -1):
            blocks[f"layer{i}.weight"] = As[i].T @ D
            blocks[f"layer{i}.bias"] = D.sum(axis=0)
            if i > 0:
                B = D @ Ws[i].T
                D = B * self._act_prime(Zs[i - 1], As[i])
        return ParamVector.from_blocks(self.layout, blocks)

    def hvp(self, w, d):
        """Exact Hessian-vector product by forward-over-reverse propagation."""
        self._check(w)
        self._check(d)
        if not w.is_finite() or not d.is_finite():
            return self._nan_vector()
        Ws, _, Zs, As = self._forward(w)
        Vs, vbs = self._weights(d)

        # forward tangent pass
        RAs, RZs = [np.zeros_like(self.X)], []
        for i in range(self.n_layers):
            RZ = RAs[-1] @ Ws[i] + As[i] @ Vs[i] + vbs[i]
            RZs.append(RZ)
            if i < self.n_layers - 1:
                RAs.append(self._act_prime(Zs[i], As[i + 1]) * RZ)
            else:
                RAs.append(RZ)

        # reverse pass with tangents
        D = (As[-1] - self.Y) / self.n
        RD = RAs[-1] / self.n
        blocks = {}
        for i in range(self.n_layers - 1, -1, -1):
            blocks[f"layer{i}.weight"] = RAs[i].T @ D + As[i].T @ RD
            blocks[f"layer{i}.bias"] = RD.sum(axis=0)
            if i > 0:
                B = D @ Ws[i].T
                RB = RD @ Ws[i].T + D @ Vs[i].T
                phi1 = self._act_prime(Zs[i - 1], As[i])
                phi2 = self._act_second(Zs[i - 1], As[i])
                RD = RB * phi1 + B * phi2 * RZs[i - 1]
                D = B * phi1
        return ParamVector.from_blocks(self.layout, blocks)

    def hvp_multi(self, w, D_rows):
        """Batched HVP: tangent propagation for all directions at once.

        D_rows is (m, total_dim); the untangled quantities (activations and the
        loss backward pass) are shared across directions, so the whole batch
        costs little more than one direction.
        """
        D_rows = np.asarray(D_rows, dtype=np.float64)
        if D_rows.ndim != 2 or D_rows.shape[1] != self.layout.total_dim:
            raise LayoutError("direction batch must be (m, total_dim)")
        if not np.all(np.isfinite(D_rows)) or not w.is_finite():
            return np.full_like(D_rows, np.nan)
        m = D_rows.shape[0]
        Ws, _, Zs, As = self._forward(w)
        Vs, vbs = [], []
        for i in range(self.n_layers):
            sl_w = self.layout.slice_of(2 * i)
            sl_b = self.layout.slice_of(2 * i + 1)
            Vs.append(D_rows[:, sl_w].reshape(m, self.dims[i], self.dims[i + 1]))
            vbs.append(D_rows[:, sl_b])

        def bmm(X3, W2):
            # (m, n, a) @ (a, b) as one flat gemm
            mm, nn, aa = X3.shape
            return (np.ascontiguousarray(X3).reshape(mm * nn, aa) @ W2).reshape(mm, nn, -1)

        RAs, RZs = [np.zeros((m,) + self.X.shape)], []
        for i in range(self.n_layers):
            RZ = bmm(RAs[-1], Ws[i])
            RZ += np.matmul(As[i][None, :, :], Vs[i])
            RZ += vbs[i][:, None, :]
            RZs.append(RZ)
            if i < self.n_layers - 1:
                RAs.append(self._act_prime(Zs[i], As[i + 1])[None] * RZ)
            else:
                RAs.append(RZ)

        D = (As[-1] - self.Y) / self.n
        RD = RAs[-1] / self.n
        out = np.empty((m, self.layout.total_dim))
        for i in range(self.n_layers - 1, -1, -1):
            HW = np.matmul(RAs[i].transpose(0, 2, 1), D[None, :, :])
            HW += np.matmul(As[i].T[None, :, :], RD)
            out[:, self.layout.slice_of(2 * i)] = HW.reshape(m, -1)
            out[:, self.layout.slice_of(2 * i + 1)] = RD.sum(axis=1)
            if i > 0:
                B = D @ Ws[i].T
                RB = bmm(RD, Ws[i].T)
                RB += np.matmul(D[None, :, :], Vs[i].transpose(0, 2, 1))
                phi1 = self._act_prime(Zs[i - 1], As[i])
                phi2 = self._act_second(Zs[i - 1], As[i])
                RB *= phi1[None]
                RB += (B * phi2)[None] * RZs[i - 1]
                RD = RB
                D = B * phi1
        return out


class TaylorObjective(Objective):
    """Frozen quadratic model: L(a) + <g_a, w-a> + 1/2 (w-a)' H_a (w-a)."""

    def __init__(self, anchor: ParamVector, anchor_loss: float, anchor_grad: ParamVector,
                 hvp_fn, hvp_multi_fn=None):
        self.layout = anchor.layout
        self.anchor = anchor
        self.anchor_loss = float(anchor_loss)
        self.anchor_grad = anchor_grad
        self._hvp_fn = hvp_fn
        self._hvp_multi_fn = hvp_multi_fn

    def loss(self, w):
        self._check(w)
        if not w.is_finite():
            return math.inf
        delta = w.data - self.anchor.data
        if not delta.any():
            return self.anchor_loss
        dv = ParamVector(self.layout, delta)
        hd = self._hvp_fn(dv)
        return self.anchor_loss + float(self.anchor_grad.data @ delta) + 0.5 * float(delta @ hd.data)

    def grad(self, w):
        self._check(w)
        if not w.is_finite():
            return self._nan_vector()
        delta = w.data - self.anchor.data
        if not delta.any():
            return self.anchor_grad
        hd = self._hvp_fn(ParamVector(self.layout, delta))
        return ParamVector(self.layout, self.anchor_grad.data + hd.data)

    def hvp(self, w, d):
        # constant in w: always the anchor Hessian
        self._check(d)
        return self._hvp_fn(d)

    def hvp_multi(self, w, D):
        if self._hvp_multi_fn is not None:
            return self._hvp_multi_fn(D)
        return super().hvp_multi(w, D)


def make_taylor(obj: Objective, anchor: ParamVector) -> TaylorObjective:
    """Quadratic model of obj at anchor (loss/grad pinned bit-exactly there)."""
    return TaylorObjective(anchor, obj.loss(anchor), obj.grad(anchor),
                           obj.hvp_at(anchor), obj.hvp_multi_at(anchor))
