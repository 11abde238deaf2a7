"""Sparse expert routing: top-k and grouped selection, gate normalization,
the expert-mixture forward pass, and the straight-through router gradient.

A router matrix ``W`` (one row per expert) scores a token ``x`` as
``z = W @ x``; probabilities are ``softmax(z / temperature)``. Plain top-k
picks the k highest-probability experts globally; grouped selection splits
the experts into contiguous blocks and picks ``k / num_groups`` within each
block, which pins the per-block (hence per-device) assignment count.

The straight-through path keeps the ordinary renormalized gate values in
the forward direction while the backward rule differentiates the full
(temperature-scaled) softmax, so every expert's router row receives a
gradient on every token, selected or not.

Ties in any selection are broken toward the lower expert index and
selections are returned in ascending index order. Both choices are
load-bearing: replay verification compares selections index-for-index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from moelab.core import as_matrix, as_vector

__all__ = [
    "RoutingMode",
    "MoeLayerSpec",
    "ExpertBank",
    "RoutingDecision",
    "router_probs",
    "topk_select",
    "grouped_select",
    "gate_weights",
    "route_token",
    "moe_forward",
    "ste_gate_value",
    "ste_backward",
    "router_probs_batch",
    "topk_select_batch",
    "grouped_select_batch",
]

RoutingMode = Literal["plain_topk", "grouped"]


@dataclass(frozen=True)
class MoeLayerSpec:
    """Static shape/selection parameters of one expert-mixture layer."""

    num_experts: int
    active_k: int
    num_groups: int
    model_dim: int
    hidden_dim: int
    temperature: float = 1.0

    def __post_init__(self):
        n, k, g = self.num_experts, self.active_k, self.num_groups
        if not 1 <= k <= n:
            raise ValueError(f"active_k must satisfy 1 <= k <= {n}, got {k}")
        if g < 1 or n % g != 0:
            raise ValueError(f"num_groups must divide num_experts ({n}), got {g}")
        if k % g != 0:
            raise ValueError(f"num_groups must divide active_k ({k}), got {g}")
        if self.model_dim < 1 or self.hidden_dim < 1:
            raise ValueError("model_dim and hidden_dim must be positive")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def group_size(self) -> int:
        return self.num_experts // self.num_groups

    @property
    def k_per_group(self) -> int:
        return self.active_k // self.num_groups


@dataclass
class ExpertBank:
    """Per-expert two-layer FFN parameters.

    Expert ``i`` computes ``w_out[i] @ relu(w_in[i] @ x)`` with shapes
    ``w_in: (N, hidden, d)`` and ``w_out: (N, d, hidden)``.
    """

    w_in: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        self.w_in = np.asarray(self.w_in, dtype=np.float64)
        self.w_out = np.asarray(self.w_out, dtype=np.float64)
        if self.w_in.ndim != 3 or self.w_out.ndim != 3:
            raise ValueError("expert weights must be stacked 3-D arrays")
        n, hidden, d = self.w_in.shape
        if self.w_out.shape != (n, d, hidden):
            raise ValueError(
                f"w_out shape {self.w_out.shape} inconsistent with w_in {self.w_in.shape}"
            )

    @property
    def num_experts(self) -> int:
        return self.w_in.shape[0]

    @property
    def model_dim(self) -> int:
        return self.w_in.shape[2]

    @property
    def param_count(self) -> int:
        return self.w_in.size + self.w_out.size

    def expert_output(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.w_out[i] @ np.maximum(self.w_in[i] @ x, 0.0)

    @classmethod
    def random(cls, rng, spec: MoeLayerSpec) -> "ExpertBank":
        """Gaussian bank with 1/sqrt(fan-in) scaling, drawn w_in then w_out."""
        n, d, h = spec.num_experts, spec.model_dim, spec.hidden_dim
        w_in = rng.normal(n * h * d).reshape(n, h, d) / np.sqrt(d)
        w_out = rng.normal(n * d * h).reshape(n, d, h) / np.sqrt(h)
        return cls(w_in, w_out)


@dataclass
class RoutingDecision:
    """One token's routing outcome: scores, selection, and gate weights.

    ``logits`` is None for decisions reconstructed from a recorded trace,
    where only current probabilities are available.
    """

    probs: np.ndarray
    selected: np.ndarray
    gates: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self):
        self.probs = as_vector(self.probs, "probs")
        self.selected = np.asarray(self.selected, dtype=np.int64)
        self.gates = as_vector(self.gates, "gates")
        n = self.probs.size
        s = self.selected
        if s.ndim != 1 or s.size < 1:
            raise ValueError("selected must be a nonempty 1-D index array")
        if s.size != np.unique(s).size:
            raise ValueError("selected indices must be distinct")
        if np.any(s < 0) or np.any(s >= n):
            raise ValueError(f"selected indices out of range [0, {n})")
        if np.any(np.diff(s) <= 0):
            raise ValueError("selected indices must be sorted ascending")
        if self.gates.shape != s.shape:
            raise ValueError("gates must align positionally with selected")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs must sum to 1 within 1e-12")
        if abs(self.gates.sum() - 1.0) > 1e-12:
            raise ValueError("gates must sum to 1 within 1e-12")
        if self.logits is not None:
            self.logits = as_vector(self.logits, "logits")
            if self.logits.size != n:
                raise ValueError("logits length must match probs")


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def router_probs(x, w_router, temperature: float = 1.0) -> np.ndarray:
    """Routing probabilities ``softmax((W @ x) / temperature)``.

    Computed with max-subtraction; sums to 1 within 1e-12. Raises on a
    non-finite logit, naming the offending expert index.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    xv = as_vector(x, "x")
    w = as_matrix(w_router, "w_router")
    if w.shape[1] != xv.size:
        raise ValueError(f"router shape {w.shape} incompatible with token dim {xv.size}")
    z = (w @ xv) / temperature
    bad = np.flatnonzero(~np.isfinite(z))
    if bad.size:
        raise ValueError(f"non-finite router logit for expert {bad[0]}")
    return _stable_softmax(z)


def topk_select(p, k: int) -> np.ndarray:
    """Indices of the k largest entries, lower index winning ties,
    returned in ascending index order."""
    pv = as_vector(p, "p")
    if not 1 <= k <= pv.size:
        raise ValueError(f"k must satisfy 1 <= k <= {pv.size}, got {k}")
    order = np.argsort(-pv, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def grouped_select(p, spec: MoeLayerSpec) -> np.ndarray:
    """Union of per-group top-(k/G) selections over contiguous expert blocks.

    Group g owns indices [g*N/G, (g+1)*N/G); exactly k/G experts are taken
    from each block, so the result always has exactly ``spec.active_k``
    entries with a fixed per-block count.
    """
    pv = as_vector(p, "p")
    if pv.size != spec.num_experts:
        raise ValueError(
            f"probability vector length {pv.size} != num_experts {spec.num_experts}"
        )
    size, take = spec.group_size, spec.k_per_group
    picks = []
    for g in range(spec.num_groups):
        block = pv[g * size : (g + 1) * size]
        order = np.argsort(-block, kind="stable")
        picks.append(order[:take] + g * size)
    return np.sort(np.concatenate(picks)).astype(np.int64)


def gate_weights(p, selected) -> np.ndarray:
    """Probabilities restricted to the selected set, renormalized to sum 1."""
    pv = as_vector(p, "p")
    s = np.asarray(selected, dtype=np.int64)
    if s.size < 1:
        raise ValueError("selected set must be nonempty")
    if np.any(s < 0) or np.any(s >= pv.size):
        raise ValueError(f"selected indices out of range [0, {pv.size})")
    mass = pv[s].sum()
    if not mass > 0.0:
        raise ValueError("zero probability mass on the selected set")
    return pv[s] / mass


def route_token(
    x, w_router, spec: MoeLayerSpec, mode: RoutingMode = "plain_topk"
) -> RoutingDecision:
    """Full live routing of one token: logits, probs, selection, gates.

    Selection probabilities always use temperature 1; the layer temperature
    only enters the straight-through backward rule.
    """
    xv = as_vector(x, "x")
    w = as_matrix(w_router, "w_router")
    z = w @ xv
    bad = np.flatnonzero(~np.isfinite(z))
    if bad.size:
        raise ValueError(f"non-finite router logit for expert {bad[0]}")
    p = _stable_softmax(z)
    if mode == "grouped":
        s = grouped_select(p, spec)
    elif mode == "plain_topk":
        s = topk_select(p, spec.active_k)
    else:
        raise ValueError(f"unknown routing mode {mode!r}")
    return RoutingDecision(probs=p, selected=s, gates=gate_weights(p, s), logits=z)


def moe_forward(x, bank: ExpertBank, decision: RoutingDecision) -> np.ndarray:
    """Gate-weighted sum of the selected experts' outputs."""
    xv = as_vector(x, "x")
    if xv.size != bank.model_dim:
        raise ValueError(f"token dim {xv.size} != bank model dim {bank.model_dim}")
    if decision.probs.size != bank.num_experts:
        raise ValueError("decision covers a different number of experts than the bank")
    y = np.zeros_like(xv)
    for gate, idx in zip(decision.gates, decision.selected):
        y += gate * bank.expert_output(int(idx), xv)
    return y


def ste_gate_value(z, selected, temperature: float = 1.0) -> np.ndarray:
    """Forward value of the straight-through gates.

    Identical to ``gate_weights(softmax(z), selected)`` by construction:
    the straight-through surrogate only changes the backward rule, and the
    renormalized path avoids the cancellation noise of evaluating the
    stop-gradient expression literally. ``temperature`` is accepted for
    signature symmetry with :func:`ste_backward`; the forward value never
    depends on it.
    """
    del temperature
    zv = as_vector(z, "z")
    return gate_weights(_stable_softmax(zv), selected)


def ste_backward(upstream, z, selected, temperature: float = 1.0) -> np.ndarray:
    """Loss gradient w.r.t. router logits under the straight-through rule.

    With ``p = softmax(z / temperature)`` and upstream cotangents ``u_i``
    on the selected gates, the gradient flows through the unrenormalized
    scaled softmax:

        dL/dz_j = p_j * (u_j - sum_i u_i p_i) / temperature

    where ``u_j`` is zero for unselected experts. Every coordinate is
    generically nonzero, so unselected experts' router rows still learn.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    zv = as_vector(z, "z")
    s = np.asarray(selected, dtype=np.int64)
    up = as_vector(upstream, "upstream")
    if up.shape != s.shape:
        raise ValueError("upstream must align positionally with selected")
    if np.any(s < 0) or np.any(s >= zv.size):
        raise ValueError(f"selected indices out of range [0, {zv.size})")
    p = _stable_softmax(zv / temperature)
    u = np.zeros_like(zv)
    u[s] = up
    return p * (u - u @ p) / temperature


def router_probs_batch(tokens, w_router, temperature: float = 1.0) -> np.ndarray:
    """Row-wise :func:`router_probs` over a (T, d) token batch."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = as_matrix(tokens, "tokens")
    w = as_matrix(w_router, "w_router")
    z = (t @ w.T) / temperature
    if not np.all(np.isfinite(z)):
        tok, exp = np.argwhere(~np.isfinite(z))[0]
        raise ValueError(f"non-finite router logit for expert {exp} (token {tok})")
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def topk_select_batch(probs, k: int) -> np.ndarray:
    """Row-wise :func:`topk_select`: (T, k) ascending indices per token."""
    pm = as_matrix(probs, "probs")
    if not 1 <= k <= pm.shape[1]:
        raise ValueError(f"k must satisfy 1 <= k <= {pm.shape[1]}, got {k}")
    order = np.argsort(-pm, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1).astype(np.int64)


def grouped_select_batch(probs, spec: MoeLayerSpec) -> np.ndarray:
    """Row-wise :func:`grouped_select`: (T, k) ascending indices per token."""
    pm = as_matrix(probs, "probs")
    t = pm.shape[0]
    if pm.shape[1] != spec.num_experts:
        raise ValueError(
            f"probability width {pm.shape[1]} != num_experts {spec.num_experts}"
        )
    blocks = pm.reshape(t, spec.num_groups, spec.group_size)
    order = np.argsort(-blocks, axis=2, kind="stable")[:, :, : spec.k_per_group]
    offsets = (np.arange(spec.num_groups) * spec.group_size)[None, :, None]
    flat = (order + offsets).reshape(t, spec.active_k)
    return np.sort(flat, axis=1).astype(np.int64)
