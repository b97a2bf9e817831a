"""Ego-Thing / Ego-Stuff interaction graphs and GCN message passing.

Node order everywhere: the objects first, Ego last. Affinity rows are a
softmax of appearance scores restricted to the pairs that pass a hard
distance gate; the self pair always passes, so no row is ever empty.
"""

from __future__ import annotations

import json
import math
from typing import Sequence

import numpy as np

from droid.diffcore import (
    Tensor,
    add,
    as_tensor,
    gated_softmax,
    layer_norm,
    matmul,
    mul,
    relu,
    transpose,
)
from droid.errors import DroidError

MU_THING = 3.0
MU_STUFF = 0.6
EDGE_THRESHOLD = 0.2


def appearance_relation(x_i, x_j, w, w_prime) -> float:
    """``(w x_i) . (w' x_j) / sqrt(D)`` for column-vector projections."""
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    w, w_prime = np.asarray(w, dtype=np.float64), np.asarray(w_prime, dtype=np.float64)
    if x_i.shape != x_j.shape or w.shape != (x_i.size, x_i.size) or w_prime.shape != w.shape:
        raise DroidError("dim_mismatch", f"features {x_i.shape}/{x_j.shape} vs projections {w.shape}/{w_prime.shape}")
    return float((w @ x_i) @ (w_prime @ x_j) / math.sqrt(x_i.size))


def spatial_gate(p_i, p_j, mu: float) -> int:
    d = float(np.linalg.norm(np.asarray(p_i, dtype=np.float64) - np.asarray(p_j, dtype=np.float64)))
    return int(d <= mu)


def thing_gate(positions: np.ndarray, present: np.ndarray, mu: float = MU_THING) -> np.ndarray:
    """``(..., N, N)`` gate from node positions ``(..., N, 3)``; absent nodes keep only their self loop."""
    diff = positions[..., :, None, :] - positions[..., None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    gate = (dist <= mu) & present[..., :, None] & present[..., None, :]
    n = positions.shape[-2]
    gate |= np.eye(n, dtype=bool)
    return gate.astype(np.float64)


def stuff_gate(stuff_dist: np.ndarray, present: np.ndarray, mu: float = MU_STUFF) -> np.ndarray:
    """``(..., M+1, M+1)`` gate for Stuff nodes plus Ego (last); Stuff-Stuff pairs are closed."""
    m = stuff_dist.shape[-1]
    link = (stuff_dist <= mu) & present
    gate = np.zeros(stuff_dist.shape[:-1] + (m + 1, m + 1))
    gate[..., :m, m] = link
    gate[..., m, :m] = link
    gate[..., np.arange(m + 1), np.arange(m + 1)] = 1.0
    return gate


def affinity(x: Tensor, gate: np.ndarray, w: Tensor, w_prime: Tensor) -> Tensor:
    """Batched affinity ``(..., N, N)`` from node features ``(..., N, D)``.

    ``w``/``w'`` act on column vectors, so with row-vector features the
    projection is ``x @ w.T``.
    """
    d = x.shape[-1]
    left = matmul(x, transpose(w))
    right = matmul(x, transpose(w_prime))
    scores = mul(matmul(left, transpose(right)), 1.0 / math.sqrt(d))
    return gated_softmax(scores, gate)


def build_affinity(features, mode: str, w, w_prime, positions=None, stuff_dist=None,
                   present=None, mu: float | None = None) -> np.ndarray:
    """One frame's affinity matrix (objects then Ego).

    ``mode`` is ``"ego_thing"`` (needs ``positions`` for all N+1 nodes) or
    ``"ego_stuff"`` (needs ``stuff_dist``: each Stuff node's minimum distance
    to Ego).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DroidError("empty_graph", "affinity needs at least one node")
    n = x.shape[0]
    if mode == "ego_thing":
        if positions is None:
            raise DroidError("missing_positions", "ego_thing mode needs node positions")
        pres = np.ones(n, dtype=bool) if present is None else np.asarray(present, dtype=bool)
        gate = thing_gate(np.asarray(positions, dtype=np.float64), pres, MU_THING if mu is None else mu)
    elif mode == "ego_stuff":
        if stuff_dist is None or len(stuff_dist) != n - 1:
            raise DroidError("missing_positions", "ego_stuff mode needs one distance per Stuff node")
        sd = np.asarray(stuff_dist, dtype=np.float64)
        pres = np.ones(n - 1, dtype=bool) if present is None else np.asarray(present, dtype=bool)
        gate = stuff_gate(sd, pres, MU_STUFF if mu is None else mu)
    else:
        raise DroidError("invalid_mode", f"unknown graph mode {mode!r}")
    return affinity(Tensor(x), gate, as_tensor(w), as_tensor(w_prime)).value


def gcn_layer(g, x, weight, gamma=None, beta=None) -> Tensor:
    """``ReLU(LayerNorm(G X W + X))``."""
    g, x, weight = as_tensor(g), as_tensor(x), as_tensor(weight)
    pre = add(matmul(matmul(g, x), weight), x)
    return relu(layer_norm(pre, gamma, beta))


def gcn_preactivation(g, x, weight) -> np.ndarray:
    return add(matmul(matmul(as_tensor(g), as_tensor(x)), as_tensor(weight)), as_tensor(x)).value


def correlation_identify(ego_row: Sequence[float], ids: Sequence[int]) -> int:
    """Object with the largest affinity into Ego; ties go to the lowest id.

    ``ego_row`` is Ego's affinity row (objects first, Ego self-weight last).
    """
    if not ids:
        raise DroidError("no_candidates", "correlation baseline needs at least one Thing node")
    row = np.asarray(ego_row, dtype=np.float64)[: len(ids)]
    best = max(row)
    return min(i for i, v in zip(ids, row) if v == best)


def export_edges(g, threshold: float = EDGE_THRESHOLD) -> list[tuple[int, int, float]]:
    """Undirected edges ``(i, j, weight)`` with averaged weight strictly above ``threshold``."""
    a = np.asarray(g, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DroidError("invalid_affinity", f"affinity must be square, got {a.shape}")
    sym = (a + a.T) / 2.0
    n = a.shape[0]
    return [(i, j, float(sym[i, j])) for i in range(n) for j in range(i + 1, n) if sym[i, j] > threshold]


def graph_json(g, nodes: list[dict], threshold: float = EDGE_THRESHOLD) -> str:
    edges = [{"i": i, "j": j, "weight": w} for i, j, w in export_edges(g, threshold)]
    return json.dumps({"nodes": nodes, "edges": edges, "threshold": threshold}, sort_keys=True, indent=2)
