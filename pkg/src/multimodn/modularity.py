"""Network modularity of a sequential modular model with M modules and T tasks.

Groups are the modules. The group matrix is tridiagonal: each module owns its
encoder edges plus its task edges, and consecutive modules share one edge.
The score is the trace minus the sum of all entries of the matrix square.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError


def edge_total(n_modalities: int, n_tasks: int) -> int:
    return n_modalities * (n_tasks + 2) - 1


@dataclass
class GroupMatrix:
    matrix: np.ndarray
    edges: int

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def edges_covered(self):
        """Sum of every cell times the edge total (each shared edge is counted in two cells)."""
        return self.matrix.sum() * self.edges


def _check_counts(n_modalities: int, n_tasks: int):
    if int(n_modalities) < 1 or int(n_tasks) < 1:
        raise ContractError("need at least one modality and one task")


def build_group_matrix(n_modalities: int, n_tasks: int, exact: bool = False) -> GroupMatrix:
    """Tridiagonal fraction matrix; ``exact=True`` uses :class:`fractions.Fraction` entries."""
    _check_counts(n_modalities, n_tasks)
    M, T = int(n_modalities), int(n_tasks)
    m = edge_total(M, T)
    one = Fraction(1) if exact else 1.0
    G = np.full((M, M), one * 0, dtype=object if exact else np.float64)
    for i in range(M):
        G[i, i] = one * (T + 1) / m
        if i + 1 < M:
            G[i, i + 1] = G[i + 1, i] = one / m
    if M == 1:
        G[0, 0] = one
    return GroupMatrix(G, m)


def modularity_from_matrix(G) -> float | Fraction:
    """Trace minus the sum of all entries of ``G @ G`` (explicit product)."""
    A = G.matrix if isinstance(G, GroupMatrix) else np.asarray(G)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"group matrix must be square, got shape {A.shape}")
    n = A.shape[0]
    if A.dtype == object:
        trace = sum((A[i, i] for i in range(n)), Fraction(0))
        sq_sum = Fraction(0)
        for i in range(n):
            for j in range(n):
                sq_sum += sum((A[i, k] * A[k, j] for k in range(n)), Fraction(0))
        return trace - sq_sum
    return float(np.trace(A) - (A @ A).sum())


def modularity_closed_form(n_modalities: int, n_tasks: int, exact: bool = False) -> float | Fraction:
    """Closed-form score; valid for two or more modalities."""
    _check_counts(n_modalities, n_tasks)
    M, T = int(n_modalities), int(n_tasks)
    if M < 2:
        raise ContractError("closed form needs at least 2 modalities; use modularity_from_matrix")
    m = edge_total(M, T)
    trace = Fraction(M * (T + 1), m)
    sq_sum = Fraction(M * T * T + 6 * M * T + 9 * M - 4 * T - 10, m * m)
    q = trace - sq_sum
    return q if exact else float(q)


def modularity(n_modalities: int, n_tasks: int, exact: bool = False):
    """Score with its parts: ``(Q, trace, square_sum, m)`` via the explicit matrix."""
    G = build_group_matrix(n_modalities, n_tasks, exact)
    A = G.matrix
    q = modularity_from_matrix(G)
    trace = sum(A[i, i] for i in range(G.size))
    return q, trace, trace - q, G.edges
