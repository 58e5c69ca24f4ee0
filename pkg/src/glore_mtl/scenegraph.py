"""Visual-semantic graph attention head for tool-tissue interaction detection.

Each frame becomes a small star graph: one tissue node joined to each
instrument node. Two parallel graphs carry visual features (pooled encoder
crops, 512-dim) and semantic features (a fixed-seed category embedding,
64-dim). After one attention round on each graph the node features are fused
to 256 dims, and every edge is classified from the fused endpoint features
plus 12 spatial box features, optionally extended with a per-frame global
summary vector (GISF mode) or a compressed penultimate decoder feature
(PF mode).
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BOX_FEATURE_DIM, extract_box_features
from .glore import GISF_DIM
from .labels import NUM_INTERACTION_CLASSES, NUM_NODE_CATEGORIES, TISSUE_NODE_CATEGORY

SPATIAL_FEATURE_DIM = 12
EDGE_MODES = ("NONE", "GISF", "PF")
SEMANTIC_EMBED_DIM = 64
SEMANTIC_EMBED_SEED = 20180901


def validate_scene_topology(semantics, edges) -> int:
    """Check the one-tissue/star-graph invariants; returns the tissue node index."""
    semantics = list(semantics)
    tissue = [i for i, s in enumerate(semantics) if int(s) == TISSUE_NODE_CATEGORY]
    if not tissue:
        raise ValueError("sample has no defective-tissue node")
    if len(tissue) > 1:
        raise ValueError(f"sample has multiple tissue nodes at indices {tissue}")
    tissue_index = tissue[0]
    for s in semantics:
        if not 0 <= int(s) < NUM_NODE_CATEGORIES:
            raise ValueError(f"node semantic id {s} out of range")
    seen = set()
    for t, i in edges:
        if t != tissue_index:
            raise ValueError(f"edge ({t}, {i}) does not start at the tissue node")
        if i == tissue_index or not 0 <= i < len(semantics):
            raise ValueError(f"edge ({t}, {i}) has an invalid instrument endpoint")
        if i in seen:
            raise ValueError(f"instrument node {i} appears in more than one edge")
        seen.add(i)
    return tissue_index


def spatial_features(boxes: torch.Tensor, edges) -> torch.Tensor:
    """12 reals per edge from the two endpoint boxes.

    Layout: tissue box (4), instrument box (4), center offset instrument
    minus tissue (2), log width ratio, log height ratio.
    """
    boxes = torch.as_tensor(boxes, dtype=torch.float32)
    rows = []
    for t, i in edges:
        bt, bi = boxes[t], boxes[i]
        wt, ht = bt[2] - bt[0], bt[3] - bt[1]
        wi, hi = bi[2] - bi[0], bi[3] - bi[1]
        rows.append(
            torch.stack(
                [
                    bt[0], bt[1], bt[2], bt[3],
                    bi[0], bi[1], bi[2], bi[3],
                    (bi[0] + bi[2]) / 2 - (bt[0] + bt[2]) / 2,
                    (bi[1] + bi[3]) / 2 - (bt[1] + bt[3]) / 2,
                    torch.log(wi / wt),
                    torch.log(hi / ht),
                ]
            )
        )
    if not rows:
        return boxes.new_zeros((0, SPATIAL_FEATURE_DIM))
    return torch.stack(rows)


class GraphAttention(nn.Module):
    """Single-head graph attention over undirected edges plus self-loops.

    score(i, j) = leaky_relu(a^T [W h_i || W h_j]); attention is the softmax
    over each node's neighborhood; outputs pass through an ELU.
    """

    def __init__(self, dim: int, negative_slope: float = 0.2):
        super().__init__()
        self.dim = dim
        self.negative_slope = negative_slope
        self.weight = nn.Linear(dim, dim, bias=False)
        self.attn = nn.Parameter(torch.empty(2 * dim))
        nn.init.xavier_uniform_(self.weight.weight)
        bound = 1.0 / math.sqrt(dim)
        nn.init.uniform_(self.attn, -bound, bound)

    def _mask(self, n: int, edges, device) -> torch.Tensor:
        mask = torch.eye(n, dtype=torch.bool, device=device)
        for a, b in edges:
            mask[a, b] = True
            mask[b, a] = True
        return mask

    def attention(self, features: torch.Tensor, edges) -> torch.Tensor:
        """Row-normalized attention coefficients (receiver i over neighbors j)."""
        n = features.shape[0]
        wh = self.weight(features)
        s_recv = wh @ self.attn[: self.dim]
        s_send = wh @ self.attn[self.dim :]
        scores = F.leaky_relu(
            s_recv.unsqueeze(1) + s_send.unsqueeze(0), self.negative_slope
        )
        mask = self._mask(n, edges, features.device)
        scores = scores.masked_fill(~mask, float("-inf"))
        return torch.softmax(scores, dim=1)

    def forward(self, features: torch.Tensor, edges) -> torch.Tensor:
        if features.dim() != 2 or features.shape[1] != self.dim:
            raise ValueError(
                f"expected M x {self.dim} node features, got {tuple(features.shape)}"
            )
        if features.shape[0] < 1:
            raise ValueError("attention needs at least one node")
        alpha = self.attention(features, edges)
        return F.elu(alpha @ self.weight(features))


@dataclass
class GraphBundle:
    """Per-frame graph state shared by the loss, metrics, and injection paths."""

    fused: torch.Tensor     # M x fused_dim
    visual: torch.Tensor    # M x visual_dim (post-attention)
    semantic: torch.Tensor  # M x semantic_dim (post-attention)
    boxes: torch.Tensor     # M x 4 normalized
    edges: list = field(default_factory=list)
    tissue_index: int = 0

    @property
    def num_nodes(self) -> int:
        return self.fused.shape[0]


class SceneGraphHead(nn.Module):
    def __init__(
        self,
        visual_dim: int = BOX_FEATURE_DIM,
        semantic_dim: int = SEMANTIC_EMBED_DIM,
        fused_dim: int = 256,
        hidden_dim: int = 256,
        num_interactions: int = NUM_INTERACTION_CLASSES,
        edge_mode: str = "NONE",
        extra_dim: int = GISF_DIM,
        penultimate_dim: int = 64,
        semantic_seed: int = SEMANTIC_EMBED_SEED,
        trainable_semantics: bool = False,
    ):
        super().__init__()
        edge_mode = str(edge_mode).upper()
        if edge_mode not in EDGE_MODES:
            raise ValueError(f"edge_mode must be one of {EDGE_MODES}, got {edge_mode!r}")
        self.edge_mode = edge_mode
        self.visual_dim = visual_dim
        self.semantic_dim = semantic_dim
        self.fused_dim = fused_dim
        self.num_interactions = num_interactions
        self.extra_dim = extra_dim if edge_mode != "NONE" else 0

        gen = torch.Generator().manual_seed(semantic_seed)
        table = torch.randn(NUM_NODE_CATEGORIES, semantic_dim, generator=gen)
        if trainable_semantics:
            self.semantic_table = nn.Parameter(table)
        else:
            self.register_buffer("semantic_table", table)

        self.visual_attention = GraphAttention(visual_dim)
        self.semantic_attention = GraphAttention(semantic_dim)
        self.fuse = nn.Linear(visual_dim + semantic_dim, fused_dim)
        self.readout_hidden = nn.Linear(self.edge_input_dim, hidden_dim)
        self.readout_out = nn.Linear(hidden_dim, num_interactions)
        if edge_mode == "PF":
            self.penultimate_compress = nn.Linear(penultimate_dim, extra_dim)
        else:
            self.penultimate_compress = None

    @property
    def base_edge_dim(self) -> int:
        """Width of the [tissue || instrument || spatial] edge feature."""
        return 2 * self.fused_dim + SPATIAL_FEATURE_DIM

    @property
    def edge_input_dim(self) -> int:
        return self.base_edge_dim + self.extra_dim

    def embed_nodes(self, box_features: torch.Tensor, semantics, edges):
        """One attention round per graph, then concatenation and fusion."""
        sem_ids = torch.as_tensor(
            [int(s) for s in semantics], dtype=torch.long, device=box_features.device
        )
        h_visual = self.visual_attention(box_features, edges)
        h_semantic = self.semantic_attention(self.semantic_table[sem_ids], edges)
        fused = self.fuse(torch.cat([h_visual, h_semantic], dim=1))
        return h_visual, h_semantic, fused

    def build_graphs(self, sample, encoder) -> GraphBundle:
        """Assemble the fused per-frame graph from a scene sample."""
        tissue_index = validate_scene_topology(sample.semantics, sample.edges)
        box_features = extract_box_features(encoder, sample.image, sample.boxes)
        h_visual, h_semantic, fused = self.embed_nodes(
            box_features, sample.semantics, sample.edges
        )
        return GraphBundle(
            fused=fused,
            visual=h_visual,
            semantic=h_semantic,
            boxes=torch.as_tensor(sample.boxes, dtype=torch.float32),
            edges=list(sample.edges),
            tissue_index=tissue_index,
        )

    def edge_features(self, bundle: GraphBundle, spatial: torch.Tensor) -> torch.Tensor:
        """Per-edge [fused tissue || fused instrument || spatial] rows (no extra slice)."""
        if spatial.shape != (len(bundle.edges), SPATIAL_FEATURE_DIM):
            raise ValueError(
                f"expected {len(bundle.edges)} x {SPATIAL_FEATURE_DIM} spatial features, "
                f"got {tuple(spatial.shape)}"
            )
        if not bundle.edges:
            return bundle.fused.new_zeros((0, self.base_edge_dim))
        rows = [
            torch.cat([bundle.fused[t], bundle.fused[i], spatial[e]])
            for e, (t, i) in enumerate(bundle.edges)
        ]
        return torch.stack(rows)

    def edge_readout(
        self,
        bundle: GraphBundle,
        spatial: torch.Tensor,
        extra: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Per-edge interaction logits (E x num_interactions)."""
        base = self.edge_features(bundle, spatial)
        if self.edge_mode == "NONE":
            if extra is not None:
                raise ValueError("edge_mode NONE accepts no extra vector")
            inputs = base
        else:
            if extra is None:
                raise ValueError(f"edge_mode {self.edge_mode} requires an extra vector")
            extra = extra.reshape(-1)
            if self.edge_mode == "PF":
                if extra.shape[0] != self.penultimate_compress.in_features:
                    raise ValueError(
                        f"PF extra must have width "
                        f"{self.penultimate_compress.in_features}, got {extra.shape[0]}"
                    )
                extra = self.penultimate_compress(extra)
            elif extra.shape[0] != self.extra_dim:
                raise ValueError(
                    f"GISF extra must have width {self.extra_dim}, got {extra.shape[0]}"
                )
            inputs = torch.cat(
                [base, extra.unsqueeze(0).expand(base.shape[0], -1)], dim=1
            )
        if inputs.shape[0] == 0:
            return inputs.new_zeros((0, self.num_interactions))
        return self.readout_out(F.relu(self.readout_hidden(inputs)))


def sg_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with logits over all edge/class entries."""
    if logits.shape != targets.shape:
        raise ValueError(
            f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree"
        )
    if logits.numel() == 0:
        warnings.warn("interaction loss over zero edges; returning 0", stacklevel=2)
        return logits.sum() * 0.0
    targets = torch.as_tensor(targets, dtype=logits.dtype, device=logits.device)
    if not ((targets == 0) | (targets == 1)).all():
        raise ValueError("interaction targets must be binary")
    return F.binary_cross_entropy_with_logits(logits, targets)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Precision averaged at each positive-ranked hit; None without positives."""
    total = int(labels.sum())
    if total == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order].astype(np.float64)
    cum_hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1, dtype=np.float64)
    return float((cum_hits[ranked == 1] / ranks[ranked == 1]).mean())


def sg_metrics(scores, targets, threshold: float = 0.5) -> dict:
    """Accuracy, mean average precision, and macro recall for edge predictions.

    acc counts an edge as correct when its argmax class is among the target
    positives; map and recall average over classes that have at least one
    positive; exact_match additionally reports whole-row agreement at the
    threshold.
    """
    scores = np.asarray(
        scores.detach().cpu() if isinstance(scores, torch.Tensor) else scores,
        dtype=np.float64,
    )
    targets = np.asarray(
        targets.detach().cpu() if isinstance(targets, torch.Tensor) else targets,
        dtype=np.float64,
    )
    if scores.shape != targets.shape:
        raise ValueError(f"scores {scores.shape} and targets {targets.shape} disagree")
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise ValueError("scores must be probabilities in [0, 1]")
    if scores.size == 0:
        return {"acc": 0.0, "map": 0.0, "recall": 0.0, "exact_match": 0.0}

    argmax = scores.argmax(axis=1)
    acc = float(targets[np.arange(len(argmax)), argmax].mean())

    aps = []
    recalls = []
    for k in range(scores.shape[1]):
        ap = average_precision(scores[:, k], targets[:, k])
        if ap is None:
            continue
        aps.append(ap)
        positives = targets[:, k] == 1
        recalls.append(float((scores[positives, k] >= threshold).mean()))
    mean_ap = float(np.mean(aps)) if aps else 0.0
    recall = float(np.mean(recalls)) if recalls else 0.0
    exact = float(((scores >= threshold) == (targets == 1)).all(axis=1).mean())
    return {"acc": acc, "map": mean_ap, "recall": recall, "exact_match": exact}
