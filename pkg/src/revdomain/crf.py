"""Gaussian CRF over a superpixel graph.

With unary ``-(y_i - h_i)^2`` and pairwise ``-1/2 sum_k beta_k S^k_ij (y_i - y_j)^2``
(each unordered edge counted once) the negated energy is the quadratic

    C(y) = y^T A y - 2 h^T y + h^T h,    A = I + L / 2,

where ``L`` is the Laplacian of the edge weights ``w_ij = sum_k beta_k S^k_ij``.
MAP inference is the SPD solve ``A y = h`` and the partition function is a
Gaussian integral, so the likelihood and its gradients are exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .superpixel import SimilarityGraph


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass
class CrfInstance:
    graph: SimilarityGraph
    h: np.ndarray
    y_true: Optional[np.ndarray] = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.h.shape != (self.graph.n_nodes,):
            raise ValueError(f"h has shape {self.h.shape}, graph has {self.graph.n_nodes} nodes")
        if not np.all(np.isfinite(self.h)):
            raise ValueError("unary depths must be finite")
        if self.y_true is not None:
            self.y_true = np.asarray(self.y_true, dtype=np.float64)
            if self.y_true.shape != self.h.shape:
                raise ValueError(f"y_true has shape {self.y_true.shape}, expected {self.h.shape}")


def _check_beta(beta, graph: SimilarityGraph) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (graph.n_channels,):
        raise ValueError(f"beta has shape {beta.shape}, graph has {graph.n_channels} similarity channels")
    if np.any(beta < 0):
        raise ValueError(f"beta must be nonnegative, got {beta}")
    return beta


def system_matrix(graph: SimilarityGraph, beta) -> np.ndarray:
    """``A = I + L / 2`` for edge weights ``S @ beta``."""
    beta = _check_beta(beta, graph)
    p = graph.n_nodes
    a = np.eye(p)
    if len(graph.edges):
        w = graph.edge_weights(beta)
        i, j = graph.edges[:, 0], graph.edges[:, 1]
        np.add.at(a, (i, j), -0.5 * w)
        np.add.at(a, (j, i), -0.5 * w)
        np.add.at(a, (i, i), 0.5 * w)
        np.add.at(a, (j, j), 0.5 * w)
    return a


def _edge_sq(y: np.ndarray, graph: SimilarityGraph) -> np.ndarray:
    if len(graph.edges) == 0:
        return np.zeros(0)
    return (y[graph.edges[:, 0]] - y[graph.edges[:, 1]]) ** 2


def energy(y, instance: CrfInstance, beta) -> float:
    graph = instance.graph
    beta = _check_beta(beta, graph)
    y = np.asarray(y, dtype=np.float64)
    unary = np.sum((y - instance.h) ** 2)
    pair = 0.5 * np.sum(graph.edge_weights(beta) * _edge_sq(y, graph)) if len(graph.edges) else 0.0
    return float(-unary - pair)


def _factor(a: np.ndarray):
    try:
        return cho_factor(a, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise NotPositiveDefiniteError(f"CRF system matrix is not positive definite: {exc}") from exc


def map_inference(instance: CrfInstance, beta) -> np.ndarray:
    """argmax_y Pr(y | x): the solution of ``A y = h``."""
    beta = _check_beta(beta, instance.graph)
    if not np.any(beta) or len(instance.graph.edges) == 0:
        return instance.h.copy()
    return cho_solve(_factor(system_matrix(instance.graph, beta)), instance.h)


def nll(instance: CrfInstance, beta, lambda_beta: float = 0.0):
    """Negative log-likelihood of ``instance.y_true`` with gradients.

    Returns ``(loss, grad_h, grad_beta)`` where

        loss = C(y) - h^T h + h^T A^-1 h + (p/2) log(pi) - (1/2) log det A
               + (lambda_beta / 2) ||beta||^2.
    """
    if instance.y_true is None:
        raise ValueError("nll needs y_true")
    graph = instance.graph
    beta = _check_beta(beta, graph)
    y, h = instance.y_true, instance.h
    p = graph.n_nodes
    a = system_matrix(graph, beta)
    fac = _factor(a)
    mu = cho_solve(fac, h)
    logdet = 2.0 * np.sum(np.log(np.diag(fac[0])))
    ey = _edge_sq(y, graph)
    cost = np.sum((y - h) ** 2) + (0.5 * np.sum(graph.edge_weights(beta) * ey) if len(ey) else 0.0)
    loss = cost - h @ h + h @ mu + 0.5 * p * np.log(np.pi) - 0.5 * logdet + 0.5 * lambda_beta * beta @ beta

    grad_h = 2.0 * (mu - y)
    grad_beta = lambda_beta * beta
    if len(graph.edges):
        i, j = graph.edges[:, 0], graph.edges[:, 1]
        ainv = cho_solve(fac, np.eye(p))
        trace_terms = ainv[i, i] + ainv[j, j] - 2.0 * ainv[i, j]
        s = graph.similarities
        grad_beta = grad_beta + 0.5 * s.T @ ey - 0.5 * s.T @ _edge_sq(mu, graph) - 0.25 * s.T @ trace_terms
    return float(loss), grad_h, grad_beta
