"""Dependence measures between latent subspaces.

Empirical distance correlation (differentiable, usable as a training
penalty), the Donsker-Varadhan lower bound on mutual information with a
neural statistics network, and the oracles used to validate both.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParamSet, Tensor

DCOV_NEG_TOL = 1e-9
DEGENERATE_TOL = 1e-12


class DegenerateInputError(ValueError):
    """Too few samples, or a constant subspace."""


class NumericalFailure(ArithmeticError):
    pass


@dataclass(frozen=True)
class DependenceEstimate:
    value: float
    kind: str  # "dcor" or "mine-dv"
    batch_size: int


def _as_2d(z) -> Tensor:
    t = z if isinstance(z, Tensor) else Tensor(z)
    if t.data.ndim == 1:
        t = nx.reshape(t, (-1, 1))
    if t.data.ndim != 2:
        raise nx.ShapeError(f"expected an N x d array, got shape {t.shape}")
    return t


def pairwise_euclidean(z: Tensor) -> Tensor:
    """N x N Euclidean distances; the gradient at coincident rows is 0."""
    z = _as_2d(z)
    n = z.shape[0]
    if n < 2:
        raise DegenerateInputError(f"need at least 2 samples, got {n}")
    x = z.data.astype(np.float64)
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, 0.0)

    def vjp(g):
        g = g.astype(np.float64)
        inv = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)
        w = (g + g.T) * inv
        # d||zi - zj|| / dzi = (zi - zj) / ||zi - zj||
        grad = w.sum(axis=1, keepdims=True) * x - w @ x
        return (grad.astype(nx.DTYPE),)

    return nx._emit(dist.astype(nx.DTYPE), (z,), vjp)


def _center_array(d: np.ndarray) -> np.ndarray:
    d = d.astype(np.float64)
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def double_center(D: Tensor) -> Tensor:
    """Subtract row and column means, add back the grand mean.

    The map is linear and self-adjoint, so its vector-Jacobian product is
    itself.
    """
    D = D if isinstance(D, Tensor) else Tensor(D)
    if D.data.ndim != 2 or D.shape[0] != D.shape[1]:
        raise nx.ShapeError(f"distance matrix must be square, got {D.shape}")
    scale_ = max(1.0, float(np.abs(D.data).max()))
    if not np.allclose(D.data, D.data.T, rtol=0, atol=1e-6 * scale_):
        raise ValueError("distance matrix is not symmetric")
    return nx._emit(_center_array(D.data).astype(nx.DTYPE), (D,),
                    lambda g: (_center_array(g).astype(nx.DTYPE),))


def _dcov_sq(A: Tensor, B: Tensor) -> Tensor:
    """``mean(A * B)`` accumulated in float64, with the clamping policy."""
    raw = float(np.mean(A.data.astype(np.float64) * B.data.astype(np.float64)))
    if raw < -DCOV_NEG_TOL:
        raise NumericalFailure(f"negative squared distance covariance {raw:.3e}")
    n2 = A.size
    if raw <= 0.0:
        # clamped: the value is pinned at 0 and so is its gradient
        return nx._emit(np.array(0.0, dtype=nx.DTYPE), (A, B), lambda g: (None, None))
    return nx._emit(np.array(raw, dtype=nx.DTYPE), (A, B),
                    lambda g: (g * B.data / nx.DTYPE(n2), g * A.data / nx.DTYPE(n2)))


def centered_distances(z) -> Tensor:
    return double_center(pairwise_euclidean(_as_2d(z)))


def _check_pair(z1: Tensor, z2: Tensor) -> None:
    if z1.shape[0] != z2.shape[0]:
        raise nx.ShapeError(f"sample counts differ: {z1.shape[0]} vs {z2.shape[0]}")
    if z1.shape[0] < 2:
        raise DegenerateInputError("need at least 2 samples")


def dcov(z1, z2) -> Tensor:
    """Sample distance covariance, ``sqrt(sum_ij A_ij B_ij / N^2)``."""
    z1, z2 = _as_2d(z1), _as_2d(z2)
    _check_pair(z1, z2)
    return nx.sqrt(_dcov_sq(centered_distances(z1), centered_distances(z2)))


def dcor(z1, z2) -> Tensor:
    """Empirical distance correlation in [0, 1], differentiable in both inputs."""
    z1, z2 = _as_2d(z1), _as_2d(z2)
    _check_pair(z1, z2)
    A = centered_distances(z1)
    B = centered_distances(z2)
    v12 = _dcov_sq(A, B)
    v11 = _dcov_sq(A, A)
    v22 = _dcov_sq(B, B)
    if v11.item() < DEGENERATE_TOL or v22.item() < DEGENERATE_TOL:
        raise DegenerateInputError("distance variance vanishes (constant subspace)")
    # dCov12 / sqrt(dCov11 dCov22), written on the squared quantities
    ratio = nx.div(v12, nx.sqrt(nx.mul(v11, v22)))
    out = nx.sqrt(ratio)
    if out.item() > 1.0:
        out = nx._emit(np.array(1.0, dtype=nx.DTYPE), (out,), lambda g: (g,))
    return out


def dcor_value(z1, z2) -> float:
    """Plain-numpy distance correlation (no tape); used by the oracles."""
    a = _center_array(pairwise_euclidean(_as_2d(z1)).data)
    b = _center_array(pairwise_euclidean(_as_2d(z2)).data)
    return _dcor_from_centered(a, b)


def _dcor_from_centered(a: np.ndarray, b: np.ndarray) -> float:
    v12 = max(float(np.mean(a * b)), 0.0)
    v11 = float(np.mean(a * a))
    v22 = float(np.mean(b * b))
    if v11 < DEGENERATE_TOL or v22 < DEGENERATE_TOL:
        raise DegenerateInputError("distance variance vanishes (constant subspace)")
    return min(1.0, math.sqrt(v12 / math.sqrt(v11 * v22)))


def permutation_null(z1, z2, n_perm: int, seed: int) -> tuple[float, np.ndarray]:
    """Observed dCor and its null distribution under row permutations of ``z2``."""
    a = _center_array(pairwise_euclidean(_as_2d(z1)).data)
    b = _center_array(pairwise_euclidean(_as_2d(z2)).data)
    observed = _dcor_from_centered(a, b)
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(a.shape[0])
        # permuting rows of z2 permutes both axes of its centred matrix
        null[i] = _dcor_from_centered(a, b[np.ix_(p, p)])
    return observed, null


def permutation_independence_pvalue(z1, z2, n_perm: int = 200, seed: int = 0) -> float:
    if n_perm < 100:
        raise ValueError("use at least 100 permutations")
    observed, null = permutation_null(z1, z2, n_perm, seed)
    # the observed statistic counts as one of the permutations
    return (1 + int(np.sum(null >= observed))) / (n_perm + 1)


def gaussian_mi_analytic(rho: float) -> float:
    """Mutual information (nats) of a bivariate normal with correlation ``rho``."""
    if not -1.0 < rho < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    return -0.5 * math.log1p(-rho * rho)


# -- MINE ---------------------------------------------------------------------


class MineNet:
    """Statistics network T(z1, z2) -> scalar for the Donsker-Varadhan bound."""

    def __init__(self, d1: int, d2: int, hidden: tuple[int, ...] = (64, 64), seed: int = 0):
        self.d1, self.d2 = d1, d2
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        widths = (d1 + d2, *self.hidden, 1)
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            nx.add_linear(self.params, f"mine.l{i}", fi, fo, rng)
        self.n_layers = len(widths) - 1

    def statistic(self, z1: Tensor, z2: Tensor, frozen: bool = False) -> Tensor:
        if z1.shape[1] != self.d1 or z2.shape[1] != self.d2:
            raise nx.ShapeError(
                f"MineNet expects widths ({self.d1}, {self.d2}), got ({z1.shape[1]}, {z2.shape[1]})")
        p = self.params.frozen() if frozen else self.params
        h = nx.concat_cols(z1, z2)
        for i in range(self.n_layers):
            h = nx.affine(h, p[f"mine.l{i}.W"], p[f"mine.l{i}.b"])
            if i < self.n_layers - 1:
                h = nx.relu(h)
        return h


def mine_dv_bound(net: MineNet, z1: Tensor, z2: Tensor, perm: np.ndarray,
                  frozen: bool = False) -> Tensor:
    """``mean T(joint) - log mean exp T(z1, z2[perm])`` as a tape-aware tensor."""
    z1, z2 = _as_2d(z1), _as_2d(z2)
    _check_pair(z1, z2)
    perm = np.asarray(perm)
    if perm.shape != (z1.shape[0],):
        raise nx.ShapeError("permutation length must match the batch")
    joint = net.statistic(z1, z2, frozen)
    marginal = net.statistic(z1, nx.take_rows(z2, perm), frozen)
    return nx.sub(nx.mean(joint), nx.logmeanexp(marginal))


def mine_dv_estimate(net: MineNet, z1, z2, perm: np.ndarray) -> DependenceEstimate:
    bound = mine_dv_bound(net, _as_2d(z1).detach(), _as_2d(z2).detach(), perm)
    return DependenceEstimate(bound.item(), "mine-dv", _as_2d(z1).shape[0])


def mine_train_step(net: MineNet, z1, z2, optimizer: nx.Optimizer,
                    rng: np.random.Generator) -> DependenceEstimate:
    """One ascent step on the DV bound wrt the statistics network only.

    ``z1`` and ``z2`` are detached here, so nothing upstream of them is
    touched.
    """
    z1 = _as_2d(z1).detach()
    z2 = _as_2d(z2).detach()
    perm = rng.permutation(z1.shape[0])
    net.params.zero_grad()
    with nx.Tape() as tape:
        bound = mine_dv_bound(net, z1, z2, perm)
        loss = nx.scale(bound, -1.0)
    tape.backward(loss)
    optimizer.step()
    return DependenceEstimate(bound.item(), "mine-dv", z1.shape[0])
