"""Patch-level mixture-of-experts MLP sublayer.

Routing is cosine similarity between fixed-initialized centroids and the
min-max-scaled, pixel-averaged patch embedding; every pixel of a patch goes
to the same expert set. Experts are sliced MLPs with a per-expert input layer
norm and a trainable correction blend (1 - gamma) * MLP_e(x) + gamma * x_corr.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ScalerParams, Tensor


@dataclass
class Router:
    centroids: Tensor  # E x d, trainable
    scaler: ScalerParams
    temperature: float = 1.0
    top_k: int = 1
    gate_mode: str = "renorm"  # "renorm" | "raw"

    def __post_init__(self):
        c = self.centroids.data
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroids must be a non-empty E x d matrix")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroid rows must be finite")
        if np.any(np.all(c == 0, axis=1)):
            raise ValueError("centroid rows must be non-zero")
        if not 1 <= self.top_k <= c.shape[0]:
            raise ValueError("top_k out of range")
        if self.gate_mode not in ("renorm", "raw"):
            raise ValueError(f"unknown gate mode {self.gate_mode!r}")

    @property
    def num_experts(self) -> int:
        return self.centroids.shape[0]


@dataclass
class ExpertMLP:
    indices: np.ndarray  # permutation indices into the dense hidden dim
    ln_gain: Tensor
    ln_bias: Tensor
    w1: Tensor  # d x d_e (sliced columns)
    b1: Tensor  # d_e
    w2: Tensor  # d_e x d (sliced rows)
    b2: Tensor  # d
    gamma: Tensor  # scalar blend weight, clamped to [0, 1] after each step
    x_corr: Tensor  # d, full-MLP output at the expert's raw-space centroid
    activation: str = "silu"

    def parameters(self) -> dict[str, Tensor]:
        return {"ln.gain": self.ln_gain, "ln.bias": self.ln_bias,
                "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "gamma": self.gamma, "x_corr": self.x_corr}


def expert_forward(x_pixels: Tensor, expert: ExpertMLP) -> Tensor:
    """Run one expert on an n x d pixel batch."""
    h = T.layer_norm(x_pixels, expert.ln_gain, expert.ln_bias)
    a = T.activation(T.add(T.matmul(h, expert.w1), expert.b1), expert.activation)
    out = T.add(T.matmul(a, expert.w2), expert.b2)
    one_minus = T.sub(T.Tensor(1.0), expert.gamma)
    return T.add(T.mul(out, one_minus), T.mul(expert.x_corr, expert.gamma))


@dataclass
class RoutingRecord:
    indices: np.ndarray      # B x P x top_k selected expert ids
    gates: np.ndarray        # B x P x top_k gate values (sum to 1 per patch)
    full_probs: np.ndarray   # B x P x E softmax over all experts
    num_experts: int

    @property
    def expert_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_experts, dtype=np.int64)
        np.add.at(counts, self.indices.reshape(-1), 1)
        return counts


@dataclass
class MoEBlock:
    router: Router
    experts: list[ExpertMLP]

    def __post_init__(self):
        if len(self.experts) != self.router.num_experts:
            raise ValueError("expert count does not match router centroids")

    def parameters(self) -> dict[str, Tensor]:
        out = {"router.centroids": self.router.centroids}
        for e, ex in enumerate(self.experts):
            out.update({f"expert{e}.{k}": v for k, v in ex.parameters().items()})
        return out


def routing_logits(x_captured: Tensor, router: Router) -> Tensor:
    """B x P x E logits from the captured pre-MLP activation.

    Pixel-average each patch, min-max scale (routing only, never the expert
    input), cosine similarity to each centroid, divide by temperature.
    """
    b, p, _, d = x_captured.shape
    if d != router.scaler.channels:
        raise ValueError("activation channels do not match router scaler")
    pooled = T.tmean(x_captured, axis=2)  # B x P x d
    scaled = T.minmax_apply(router.scaler, pooled)
    sims = T.cosine_matrix(T.reshape(scaled, (b * p, d)), router.centroids)
    return T.reshape(T.mul(sims, T.Tensor(1.0 / router.temperature)), (b, p, router.num_experts))


def select_experts(logits: Tensor, top_k: int, gate_mode: str = "renorm"):
    """Softmax over experts, take top_k by probability (ties to the lower
    expert index), gates renormalized to sum to 1 unless gate_mode == "raw".

    Returns (indices ndarray B x P x k, gates Tensor B x P x k,
    full_probs Tensor B x P x E).
    """
    e = logits.shape[-1]
    if top_k > e:
        raise ValueError("top_k exceeds expert count")
    probs = T.softmax(logits, axis=-1)
    order = np.argsort(-probs.data, axis=-1, kind="stable")  # stable => lower index wins ties
    indices = order[..., :top_k]
    gates = T.gather_last(probs, indices)
    if gate_mode == "renorm":
        gates = T.div(gates, T.tsum(gates, axis=-1, keepdims=True))
    return indices, gates, probs


def moe_forward(x: Tensor, captured: Tensor, block: MoEBlock):
    """Apply the MoE sublayer (without the outer residual, which the caller
    adds).

    x is the post-attention activation; captured is the same activation after
    the layer's MLP-input norm, which is the space the router was built in.
    Per-expert outputs are combined in fixed expert-index order.
    """
    b, p, n_px, d = x.shape
    router = block.router
    logits = routing_logits(captured, router)
    indices, gates, probs = select_experts(logits, router.top_k, router.gate_mode)

    flat_x = T.reshape(x, (b * p, n_px, d))
    flat_idx = indices.reshape(b * p, router.top_k)
    # Dense B*P x E gate matrix: zero where an expert was not selected.
    gate_matrix = T.scatter_last(T.reshape(gates, (b * p, router.top_k)),
                                 flat_idx, router.num_experts)
    out = None
    for e in range(router.num_experts):
        rows = np.nonzero((flat_idx == e).any(axis=-1))[0]
        if rows.size == 0:
            continue
        pixels = T.reshape(T.take(flat_x, rows), (rows.size * n_px, d))
        expert_out = T.reshape(expert_forward(pixels, block.experts[e]), (rows.size, n_px, d))
        gate = T.reshape(T.gather_last(T.take(gate_matrix, rows),
                                       np.full((rows.size, 1), e)), (rows.size, 1, 1))
        contrib = T.scatter_rows(T.mul(expert_out, gate), rows, b * p)
        out = contrib if out is None else T.add(out, contrib)
    if out is None:  # unreachable: top_k >= 1 always selects someone
        out = T.mul(flat_x, T.Tensor(0.0))
    record = RoutingRecord(indices=indices, gates=gates.data.copy(),
                           full_probs=probs.data.copy(), num_experts=router.num_experts)
    return T.reshape(out, (b, p, n_px, d)), record


@dataclass
class UtilizationReport:
    load_fractions: np.ndarray  # per-expert share of routed patch slots
    entropy: float              # natural-log entropy of the load distribution
    max_load_ratio: float       # max share / uniform share


def dispatch_stats(record: RoutingRecord) -> UtilizationReport:
    counts = record.expert_counts
    total = counts.sum()
    fractions = counts / total if total else np.zeros_like(counts, dtype=float)
    nonzero = fractions[fractions > 0]
    entropy = float(-(nonzero * np.log(nonzero)).sum()) if nonzero.size else 0.0
    max_ratio = float(fractions.max() * record.num_experts) if total else 0.0
    return UtilizationReport(fractions, entropy, max_ratio)


def export_routing_csv(record: RoutingRecord, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["batch", "patch", "rank", "expert", "gate"])
        b, p, k = record.indices.shape
        for bi in range(b):
            for pi in range(p):
                for r in range(k):
                    writer.writerow([bi, pi, r, int(record.indices[bi, pi, r]),
                                     repr(float(record.gates[bi, pi, r]))])
