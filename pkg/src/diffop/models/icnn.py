"""Input convex neural network with closed-form input and parameter derivatives.

Architecture for input ``v`` (dimension ``nv``), hidden widths ``w_1..w_K``
and output dimension ``n_out``::

    z_1 = softplus(Wv_1 v + b_1)
    z_k = softplus(softplus(A_k) z_{k-1} + Wv_k v + b_k),   k = 2..K
    y   = softplus(A_out) z_K + Wv_out v + b_out

The hidden-to-hidden weights are ``softplus`` of free reals, so they stay
positive for every parameter vector and each output is convex in ``v``.
With every free parameter at zero and one hidden unit the hidden activation
is ``softplus(0) = ln 2`` and the output is ``ln(2)**2``.
"""

from dataclasses import dataclass

import numpy as np

from ..exceptions import DimensionMismatch
from ..numkit import sigmoid, softplus


@dataclass(frozen=True)
class IcnnLayout:
    n_in: int
    widths: tuple
    n_out: int

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1 or not self.widths or min(self.widths) < 1:
            raise DimensionMismatch(f"invalid ICNN layout {self}")

    @property
    def layers(self):
        """List of (rows, z_cols or None) for every affine stage, output last."""
        out = [(self.widths[0], None)]
        for k in range(1, len(self.widths)):
            out.append((self.widths[k], self.widths[k - 1]))
        out.append((self.n_out, self.widths[-1]))
        return out

    @property
    def n_params(self):
        total = 0
        for rows, zcols in self.layers:
            total += rows * (zcols or 0) + rows * self.n_in + rows
        return total

    def unflatten(self, theta):
        """Split a flat vector into ``[(A or None, Wv, b), ...]`` views."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise DimensionMismatch(f"ICNN expects {self.n_params} params, got {theta.size}")
        out, pos = [], 0
        for rows, zcols in self.layers:
            A = None
            if zcols:
                A = theta[pos : pos + rows * zcols].reshape(rows, zcols)
                pos += rows * zcols
            Wv = theta[pos : pos + rows * self.n_in].reshape(rows, self.n_in)
            pos += rows * self.n_in
            b = theta[pos : pos + rows]
            pos += rows
            out.append((A, Wv, b))
        return out

    def index_maps(self):
        """Flat-parameter indices shaped like each block (same layout as unflatten)."""
        return self.unflatten(np.arange(self.n_params, dtype=float))

    def init_params(self, rng, scale=0.1, z_offset=-3.0):
        """Small random weights; ``z_offset`` starts the z-path near zero weight."""
        blocks = []
        for rows, zcols in self.layers:
            if zcols:
                blocks.append(z_offset + scale * rng.standard_normal(rows * zcols))
            blocks.append(scale * rng.standard_normal(rows * self.n_in))
            blocks.append(np.zeros(rows))
        return np.concatenate(blocks)


class Icnn:
    """Evaluator for one :class:`IcnnLayout`.

    ``forward`` returns the output only; ``derivs`` returns the output with
    its input Jacobian ``Gv (n_out, nv)``, input Hessians
    ``Hvv (n_out, nv, nv)`` and, when requested, the parameter Jacobian
    ``Gt (n_out, p)`` and the mixed block ``Hvt (n_out, nv, p)``.
    """

    def __init__(self, layout):
        self.layout = layout
        self._idx = [
            tuple(None if blk is None else blk.astype(int) for blk in layer)
            for layer in layout.index_maps()
        ]

    @property
    def n_params(self):
        return self.layout.n_params

    def forward(self, theta, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.layout.n_in:
            raise DimensionMismatch(f"ICNN input has {v.shape[-1]} entries, expected {self.layout.n_in}")
        layers = self.layout.unflatten(theta)
        a = None
        for k, (A, Wv, b) in enumerate(layers):
            pre = v @ Wv.T + b
            if A is not None:
                pre = pre + a @ softplus(A).T
            a = pre if k == len(layers) - 1 else softplus(pre)
        return a

    def hidden(self, theta, v):
        """Activations of the first hidden layer (useful for sanity checks)."""
        A, Wv, b = self.layout.unflatten(theta)[0]
        return softplus(np.asarray(v, float) @ Wv.T + b)

    def derivs(self, theta, v, with_theta=True):
        lay = self.layout
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.size != lay.n_in:
            raise DimensionMismatch(f"ICNN input has {v.size} entries, expected {lay.n_in}")
        nv, p = lay.n_in, lay.n_params
        layers = lay.unflatten(theta)
        last = len(layers) - 1
        val = Gv = Hvv = Gt = Hvt = None
        for k, ((A, Wv, b), (iA, iWv, ib)) in enumerate(zip(layers, self._idx)):
            rows = b.size
            rr = np.arange(rows)
            pre = Wv @ v + b
            pGv = Wv.copy()
            if A is None:
                pHvv = np.zeros((rows, nv, nv))
            else:
                Wz = softplus(A)
                dWz = sigmoid(A)
                pre = pre + Wz @ val
                pGv = pGv + Wz @ Gv
                pHvv = np.einsum("jl,lab->jab", Wz, Hvv)
            if with_theta:
                pGt = np.zeros((rows, p)) if A is None else Wz @ Gt
                np.add.at(pGt, (rr[:, None], iWv), np.broadcast_to(v, iWv.shape))
                pGt[rr, ib] += 1.0
                if A is None:
                    pHvt = np.zeros((rows, nv, p))
                else:
                    pHvt = np.einsum("jl,lap->jap", Wz, Hvt)
                    pGt[rr[:, None], iA] += dWz * val[None, :]
                    # d/dA_jl of (Wz Gv)_j. = dWz_jl * Gv_l.
                    jj = np.repeat(rr, A.shape[1])
                    ll = np.tile(np.arange(A.shape[1]), rows)
                    pHvt[jj, :, iA.reshape(-1)] += (dWz.reshape(-1)[:, None]) * Gv[ll, :]
                pHvt[rr[:, None], np.arange(nv)[None, :], iWv] += 1.0
            if k == last:
                val, Gv, Hvv = pre, pGv, pHvv
                if with_theta:
                    Gt, Hvt = pGt, pHvt
                break
            s1 = sigmoid(pre)
            s2 = s1 * (1.0 - s1)
            val = softplus(pre)
            Hvv = s2[:, None, None] * pGv[:, :, None] * pGv[:, None, :] + s1[:, None, None] * pHvv
            Gv = s1[:, None] * pGv
            if with_theta:
                Hvt = s2[:, None, None] * pGv[:, :, None] * pGt[:, None, :] + s1[:, None, None] * pHvt
                Gt = s1[:, None] * pGt
        return val, Gv, Hvv, Gt, Hvt


def icnn_forward(layout, theta, v):
    return Icnn(layout).forward(theta, v)
