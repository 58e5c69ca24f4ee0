"""Self-contained verification suites behind the ``selftest`` CLI command.

Each suite re-derives its expected values from first principles (finite
differences, brute-force counting, closed-form arithmetic) so a regression in
any kernel is caught without external data.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .glore import GlobalReasoningUnit
from .labels import NUM_INTERACTION_CLASSES
from .mtlopt import ModelPartition, TrainConfig, Trainer, compose_kdmtl, compose_vmtl, encoder_kld
from .scenegraph import (
    GraphAttention,
    GraphBundle,
    SceneGraphHead,
    average_precision,
    sg_metrics,
    spatial_features,
)
from .seghead import seg_metrics


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}" + (f": {self.detail}" if self.detail else "")


def finite_difference_check(
    loss_fn,
    tensors: dict,
    n_coords: int = 20,
    step: float = 1e-3,
    rtol: float = 1e-4,
    seed: int = 0,
) -> tuple[bool, str]:
    """Compare autograd gradients against central differences on sampled coords.

    ``loss_fn`` must be re-evaluable after in-place perturbation of any tensor
    in ``tensors``; all tensors must be float64 leaves.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    per_tensor = max(2, math.ceil(n_coords / max(1, len(tensors))))
    worst = 0.0
    checked = 0
    for (name, tensor), grad in zip(tensors.items(), grads):
        flat = tensor.reshape(-1)
        n = min(per_tensor, flat.numel())
        coords = rng.choice(flat.numel(), size=n, replace=False)
        for coord in coords:
            original = flat[coord].item()
            with torch.no_grad():
                flat[coord] = original + step
            plus = float(loss_fn())
            with torch.no_grad():
                flat[coord] = original - step
            minus = float(loss_fn())
            with torch.no_grad():
                flat[coord] = original
            fd = (plus - minus) / (2 * step)
            an = 0.0 if grad is None else float(grad.reshape(-1)[coord])
            denom = max(abs(an), abs(fd))
            if denom < 1e-7:
                if abs(an - fd) > 1e-7:
                    return False, f"{name}[{coord}]: analytic {an} vs fd {fd}"
                checked += 1
                continue
            rel = abs(an - fd) / denom
            worst = max(worst, rel)
            checked += 1
            if rel > rtol:
                return (
                    False,
                    f"{name}[{coord}]: analytic {an:.6g} vs fd {fd:.6g} (rel {rel:.2e})",
                )
    return True, f"{checked} coords, max rel err {worst:.2e}"


def gradient_suite(seed: int = 0) -> list:
    """Finite-difference checks for the three custom kernels."""
    torch.manual_seed(seed)
    results = []
    start = time.monotonic()

    unit = GlobalReasoningUnit(channels=8, num_nodes=3, latent_channels=5).double()
    x = torch.randn(2, 8, 4, 4, dtype=torch.float64, requires_grad=True)

    def glore_loss():
        y, summary = unit(x)
        return y.sum() + summary.sum()

    tensors = {"input": x}
    tensors.update({f"param:{n}": p for n, p in unit.named_parameters()})
    ok, detail = finite_difference_check(glore_loss, tensors, seed=seed)
    results.append(SuiteResult("gradient/glore", ok, detail))

    layer = GraphAttention(6).double()
    feats = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    edges = [(0, 1), (0, 2)]

    def attention_loss():
        return layer(feats, edges).sum()

    tensors = {"features": feats}
    tensors.update({f"param:{n}": p for n, p in layer.named_parameters()})
    ok, detail = finite_difference_check(attention_loss, tensors, seed=seed + 1)
    results.append(SuiteResult("gradient/graph_attention", ok, detail))

    head = SceneGraphHead(
        visual_dim=8, semantic_dim=4, fused_dim=6, hidden_dim=5,
        edge_mode="GISF", extra_dim=4,
    ).double()
    fused = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    extra = torch.randn(4, dtype=torch.float64, requires_grad=True)
    boxes = torch.tensor(
        [[0.1, 0.1, 0.6, 0.7], [0.3, 0.2, 0.5, 0.4], [0.6, 0.5, 0.9, 0.95]],
        dtype=torch.float64,
    )
    spatial = spatial_features(boxes, edges).double()
    bundle = GraphBundle(
        fused=fused, visual=fused, semantic=fused, boxes=boxes, edges=edges
    )

    def readout_loss():
        return head.edge_readout(bundle, spatial, extra).sum()

    tensors = {"fused": fused, "extra": extra}
    tensors.update(
        {f"param:{n}": p for n, p in head.named_parameters() if "readout" in n}
    )
    ok, detail = finite_difference_check(readout_loss, tensors, seed=seed + 2)
    results.append(SuiteResult("gradient/edge_readout", ok, detail))

    elapsed = time.monotonic() - start
    results.append(
        SuiteResult("gradient/runtime", elapsed < 60.0, f"{elapsed:.1f}s (budget 60s)")
    )
    return results


def brute_force_seg_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int = 8) -> dict:
    """O(K^2 * pixels) oracle built from direct counting."""
    pred = pred.reshape(-1)
    gt = gt.reshape(-1)
    per_class = []
    present = []
    for k in range(num_classes):
        inter = int(np.sum((pred == k) & (gt == k)))
        union = int(np.sum((pred == k) | (gt == k)))
        per_class.append(inter / union if union else 0.0)
        if union:
            present.append(k)
    return {
        "miou": float(np.mean([per_class[k] for k in present])) if present else 0.0,
        "per_class_iou": per_class,
        "pixel_acc": float(np.mean(pred == gt)),
    }


def brute_force_ap(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank the column, then average precision at each positive hit."""
    if labels.sum() == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(precisions))


def metric_oracle_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = []

    exact = True
    for _ in range(100):
        pred = rng.integers(0, 8, size=(8, 8))
        gt = rng.integers(0, 8, size=(8, 8))
        got = seg_metrics(pred, gt)
        want = brute_force_seg_metrics(pred, gt)
        if (
            got["miou"] != want["miou"]
            or got["pixel_acc"] != want["pixel_acc"]
            or got["per_class_iou"] != want["per_class_iou"]
        ):
            exact = False
            break
    results.append(SuiteResult("metrics/segmentation_oracle", exact, "100 random 8x8 maps"))

    worked = average_precision(
        np.array([0.9, 0.8, 0.7, 0.6]), np.array([1.0, 0.0, 1.0, 0.0])
    )
    ok = abs(worked - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12
    results.append(SuiteResult("metrics/worked_ap_example", ok, f"AP={worked:.4f}"))

    max_err = 0.0
    for _ in range(200):
        edges = int(rng.integers(1, 13))
        scores = rng.random((edges, NUM_INTERACTION_CLASSES))
        targets = (rng.random((edges, NUM_INTERACTION_CLASSES)) < 0.3).astype(float)
        got = sg_metrics(scores, targets)
        aps, recalls = [], []
        for k in range(NUM_INTERACTION_CLASSES):
            ap = brute_force_ap(scores[:, k], targets[:, k])
            if ap is None:
                continue
            aps.append(ap)
            pos = targets[:, k] == 1
            recalls.append(float(np.mean(scores[pos, k] >= 0.5)))
        want_map = float(np.mean(aps)) if aps else 0.0
        want_recall = float(np.mean(recalls)) if recalls else 0.0
        max_err = max(max_err, abs(got["map"] - want_map), abs(got["recall"] - want_recall))
    results.append(
        SuiteResult(
            "metrics/interaction_oracle", max_err <= 1e-9, f"max err {max_err:.2e}"
        )
    )
    return results


def loss_suite(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = []

    worst_v = worst_kd = 0.0
    for _ in range(1000):
        l_sg, l_seg, l_kld = rng.random(3) * 10
        worst_v = max(worst_v, abs(compose_vmtl(l_sg, l_seg, 0.4) - (0.4 * l_sg + 0.6 * l_seg)))
        worst_kd = max(
            worst_kd, abs(compose_kdmtl(l_sg, l_seg, l_kld) - (0.4 * l_sg + l_seg + l_kld))
        )
    results.append(SuiteResult("loss/vmtl_exact", worst_v <= 1e-12, f"max err {worst_v:.2e}"))
    results.append(SuiteResult("loss/kdmtl_exact", worst_kd <= 1e-12, f"max err {worst_kd:.2e}"))

    x = torch.randn(2, 6, 3, 3, dtype=torch.float64)
    self_kld = float(encoder_kld(x, x))
    min_kld = min(
        float(
            encoder_kld(
                torch.randn(1, 5, 2, 2, dtype=torch.float64),
                torch.randn(1, 5, 2, 2, dtype=torch.float64),
            )
        )
        for _ in range(1000)
    )
    teacher = torch.tensor([[[[0.0]], [[math.log(3.0)]]]], dtype=torch.float64)
    student = torch.zeros(1, 2, 1, 1, dtype=torch.float64)
    expected = 0.25 * math.log(0.25 / 0.5) + 0.75 * math.log(0.75 / 0.5)
    toy_err = abs(float(encoder_kld(student, teacher)) - expected)
    ok = abs(self_kld) <= 1e-9 and min_kld >= -1e-12 and toy_err <= 1e-9
    results.append(
        SuiteResult(
            "loss/kld_properties",
            ok,
            f"self {self_kld:.1e}, min {min_kld:.1e}, toy err {toy_err:.1e}",
        )
    )
    return results


def _tiny_samples(n: int = 4, size: int = 64, seed: int = 0) -> list:
    """In-memory samples for plumbing checks; content need not be learnable."""
    from .datakit import SceneSample

    gen = torch.Generator().manual_seed(seed)
    samples = []
    for i in range(n):
        mask = torch.zeros(size, size, dtype=torch.int64)
        mask[8 : size // 2, 8 : size // 2] = (i % 7) + 1
        targets = torch.zeros(1, NUM_INTERACTION_CLASSES)
        targets[0, i % NUM_INTERACTION_CLASSES] = 1.0
        samples.append(
            SceneSample(
                image=torch.randn(3, size, size, generator=gen),
                mask=mask,
                boxes=torch.tensor([[0.1, 0.1, 0.9, 0.9], [0.2, 0.2, 0.5, 0.5]]),
                semantics=[0, (i % 7) + 1],
                edges=[(0, 1)],
                targets=targets,
                frame_id=f"tiny/{i:05d}",
            )
        )
    return samples


def freeze_suite(seed: int = 0) -> list:
    from .model import MultiTaskSceneModel

    torch.manual_seed(seed)
    model = MultiTaskSceneModel(variant="GR", edge_mode="GISF")
    samples = _tiny_samples()
    config = TrainConfig(
        regime="S", epochs=1, batch_size=2, base_lr=1e-4, eval_every=0, seed=seed
    )
    hashes = {}

    def callback(event, trainer):
        if event in ("pre_B", "post_B"):
            hashes[event] = (
                trainer.partition.group_hash("w_sh"),
                trainer.partition.group_hash("w_seg"),
            )

    Trainer(model, samples, config, stage_callback=callback).run()
    ok = hashes.get("pre_B") == hashes.get("post_B") and "pre_B" in hashes
    return [SuiteResult("freeze/stage_b_contract", ok, "sha256(w_sh), sha256(w_seg)")]


def permutation_suite(seed: int = 0) -> list:
    torch.manual_seed(seed)
    head = SceneGraphHead(edge_mode="NONE")
    head.eval()
    box_feats = torch.randn(4, 512)
    boxes = torch.rand(4, 2)
    boxes = torch.cat([boxes * 0.4 + 0.05, boxes * 0.4 + 0.55], dim=1)
    semantics = [0, 2, 4, 6]
    edges = [(0, 1), (0, 2), (0, 3)]

    def run(order, edge_order):
        inv = {node: pos for pos, node in enumerate(order)}
        feats = box_feats[order]
        sems = [semantics[i] for i in order]
        eds = [(inv[t], inv[i]) for t, i in (edges[k] for k in edge_order)]
        _, _, fused = head.embed_nodes(feats, sems, eds)
        bundle = GraphBundle(
            fused=fused, visual=fused, semantic=fused, boxes=boxes[order], edges=eds
        )
        spatial = spatial_features(boxes[order], eds)
        return head.edge_readout(bundle, spatial)

    with torch.no_grad():
        base = run(list(range(4)), [0, 1, 2])
        # Relabel instrument nodes and shuffle the edge list; tissue stays first.
        permuted = run([0, 3, 1, 2], [2, 0, 1])
    # permuted row r holds base edge [2, 0, 1][r], so base == permuted[[1, 2, 0]]
    reordered = permuted[[1, 2, 0]]
    ok = torch.allclose(base, reordered, atol=1e-5)
    return [SuiteResult("permutation/edge_equivariance", ok, "instrument relabeling")]


def run_all(seed: int = 0) -> list:
    results = []
    results.extend(gradient_suite(seed))
    results.extend(metric_oracle_suite(seed))
    results.extend(loss_suite(seed))
    results.extend(freeze_suite(seed))
    results.extend(permutation_suite(seed))
    return results
