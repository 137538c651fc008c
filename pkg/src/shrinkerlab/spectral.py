"""Linearized shrinker operator, its ground state, and generic perturbations.

On a curve (or on rotationally symmetric functions over a revolution
profile) the operator ``L u = Lap u - <x, grad u>/2 + (1/2 + |A|^2) u`` is the
Sturm-Liouville operator

    L u = (1/w) d/ds (w du/ds) + (1/2 + |A|^2) u,   w = exp(-|x|^2/4) [* r]

so a conservative finite-volume discretization is exactly symmetric with
respect to the diagonal Gaussian weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EigenSolveFailure, NotAShrinker, PerturbationTooLarge
from .geometry import GeometrySnapshot, is_embedded
from .errors import AxisCollision, DegenerateGeometry

NOT_A_SHRINKER_TOL = 1e-5


@dataclass
class LinearizedOperator:
    matrix: sp.csr_matrix
    weight: np.ndarray
    shrinker: GeometrySnapshot

    def apply(self, u):
        return self.matrix @ np.asarray(u, dtype=float)

    def inner(self, u, v):
        return float(np.sum(self.weight * u * v))

    def symmetrized(self) -> sp.csr_matrix:
        """W^(1/2) L W^(-1/2), a symmetric matrix with the same spectrum."""
        s = np.sqrt(self.weight)
        return (sp.diags(s) @ self.matrix @ sp.diags(1.0 / s)).tocsr()


@dataclass
class EigenPair:
    eigenvalue: float
    eigenfunction: np.ndarray
    residual: float = 0.0


@dataclass
class PerturbationSpec:
    f: np.ndarray
    s: float
    target: GeometrySnapshot


@dataclass
class Classification:
    label: str
    margin: float
    min_Htilde: float
    max_Htilde: float

    def __str__(self):
        return self.label


def _edges(geom):
    """Edge list (i, j) of the profile polyline; open for capped profiles."""
    n = geom.n_vertices
    i = np.arange(n) if not geom.capped else np.arange(n - 1)
    return i, (i + 1) % n


def assemble_L(shrinker: GeometrySnapshot, check_residual=True) -> LinearizedOperator:
    """Discretize the linearized operator on a shrinker.

    Raises
    ------
    NotAShrinker
        ``max |Htilde| > 1e-5``.
    """
    if check_residual:
        res = float(np.max(np.abs(shrinker.Htilde)))
        if res > NOT_A_SHRINKER_TOL:
            raise NotAShrinker(f"shrinker residual {res:.3e} exceeds {NOT_A_SHRINKER_TOL:g}")
    return _assemble(shrinker)


def _assemble(geom: GeometrySnapshot) -> LinearizedOperator:
    v = geom.vertices
    n = geom.n_vertices
    i, j = _edges(geom)
    h = np.linalg.norm(v[j] - v[i], axis=1)
    mid = 0.5 * (v[i] + v[j])
    gauss_mid = np.exp(-0.25 * np.einsum("ij,ij->i", mid, mid))
    gauss_v = np.exp(-0.25 * np.einsum("ij,ij->i", v, v))
    if geom.mode == "revolution":
        r = v[:, 0]
        flux_w = gauss_mid * 2.0 * np.pi * mid[:, 0]
        # integral of the linear interpolant of 2 pi r over the half edges around each vertex
        cell = np.zeros(n)
        np.add.at(cell, i, 0.5 * h * (3.0 * r[i] + r[j]) / 4.0 * 2.0 * np.pi)
        np.add.at(cell, j, 0.5 * h * (3.0 * r[j] + r[i]) / 4.0 * 2.0 * np.pi)
    else:
        flux_w = gauss_mid
        cell = np.zeros(n)
        np.add.at(cell, i, 0.5 * h)
        np.add.at(cell, j, 0.5 * h)
    weight = gauss_v * cell
    c = flux_w / h
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([c, c, -c, -c])
    K = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    potential = 0.5 + geom.A2
    L = sp.diags(1.0 / weight) @ K + sp.diags(potential)
    return LinearizedOperator(L.tocsr(), weight, geom)


def first_eigenpair(L: LinearizedOperator, tol=1e-12, max_iter=10_000) -> EigenPair:
    """Largest eigenvalue and its positive eigenfunction by shift-invert Lanczos.

    The diffusion part of L is negative semidefinite in the Gaussian inner
    product, so the spectrum lies below ``max(1/2 + |A|^2)``; shifting just
    above that bound makes the largest eigenvalue the one nearest the shift.

    Raises
    ------
    EigenSolveFailure
    """
    S = L.symmetrized().tocsc()
    sigma = 0.5 + float(np.max(L.shrinker.A2)) + 1e-2
    v0 = np.sqrt(L.weight)
    try:
        vals, vecs = spla.eigsh(S, k=1, sigma=sigma, which="LM", v0=v0, tol=tol, maxiter=max_iter)
    except spla.ArpackNoConvergence as exc:
        raise EigenSolveFailure(f"eigsh did not converge: {exc}") from exc
    mu = float(vals[0])
    x = vecs[:, 0]
    phi = x / np.sqrt(L.weight)
    phi = phi / phi[np.argmax(np.abs(phi))]
    resid = float(np.max(np.abs(L.apply(phi) - mu * phi)))
    return EigenPair(mu, phi, resid)


def rayleigh_quotient(L: LinearizedOperator, u) -> float:
    u = np.asarray(u, dtype=float)
    return L.inner(u, L.apply(u)) / L.inner(u, u)


def perturb(spec: PerturbationSpec) -> GeometrySnapshot:
    """Normal graph ``x + s f(x) n(x)`` over the target.

    Raises
    ------
    PerturbationTooLarge
        The graph folds over, leaves r > 0, or (for an embedded target)
        self-intersects.
    """
    g = spec.target
    f = np.asarray(spec.f, dtype=float)
    if f.shape != (g.n_vertices,):
        raise ValueError("f must have one value per vertex")
    new = g.vertices + spec.s * f[:, None] * g.normal
    if g.capped:
        new[0, 0] = 0.0
        new[-1, 0] = 0.0
    # a normal graph that folds over reverses some edge of the target
    e_old, e_new = np.diff(g.vertices, axis=0), np.diff(new, axis=0)
    if not g.capped:
        e_old = np.vstack([e_old, g.vertices[:1] - g.vertices[-1:]])
        e_new = np.vstack([e_new, new[:1] - new[-1:]])
    if np.any(np.einsum("ij,ij->i", e_old, e_new) <= 0.0):
        raise PerturbationTooLarge("normal graph folds over")
    try:
        out = GeometrySnapshot(new, mode=g.mode, immersed=g.immersed, time=g.time)
    except (AxisCollision, DegenerateGeometry) as exc:
        raise PerturbationTooLarge(str(exc)) from exc
    if not g.immersed and not is_embedded(out):
        raise PerturbationTooLarge("perturbed hypersurface self-intersects")
    return out


def classify_perturbation(geom: GeometrySnapshot) -> Classification:
    """Rescaled mean convex / concave / neither, with margin ``min |Htilde|``."""
    ht = geom.Htilde
    lo, hi = float(ht.min()), float(ht.max())
    if lo > 0.0:
        label = "rescaled_mean_convex"
    elif hi < 0.0:
        label = "rescaled_mean_concave"
    else:
        label = "neither"
    return Classification(label, float(np.min(np.abs(ht))), lo, hi)


def expected_label(s: float) -> str:
    return "rescaled_mean_convex" if s < 0 else "rescaled_mean_concave"


def search_amplitude(shrinker: GeometrySnapshot, f, sign: int, min_margin=1e-3, max_halvings=30):
    """Largest amplitude ``s = sign * s0 / 2^k`` whose graph classifies correctly.

    ``s0 = 0.1 / max(f)``; a candidate passes when the classification
    matches the direction (convex for inward, concave for outward) with
    margin at least ``min_margin``.  Since the margin shrinks linearly with
    ``|s|``, the search gives up as soon as a correctly classified candidate
    falls below ``min_margin``.

    Returns
    -------
    (s, perturbed geometry, classification) or None when no candidate passes.
    """
    f = np.asarray(f, dtype=float)
    s = 0.1 / f.max()
    for _ in range(max_halvings):
        cand = sign * s
        try:
            g = perturb(PerturbationSpec(f, cand, shrinker))
        except PerturbationTooLarge:
            s *= 0.5
            continue
        c = classify_perturbation(g)
        if c.label == expected_label(cand) and c.margin >= min_margin:
            return cand, g, c
        if c.margin < min_margin and c.label == expected_label(cand):
            return None
        s *= 0.5
    return None
