"""Multi-task loss composition, schedules, partitioning, and training regimes.

Three regimes are provided:

* ``V``  - vanilla weighted sum: total = alpha * L_sg + (1 - alpha) * L_seg.
* ``KD`` - distillation-augmented: total = alpha * L_sg + L_seg + L_kld, where
  L_kld is the divergence between the shared encoder's coarsest map and that
  of a frozen single-task segmentation teacher.
* ``S``  - sequential: stage A trains the shared encoder and segmentation
  head on the segmentation loss alone; both groups are then frozen and stage
  B trains the scene-graph head on the interaction loss. Frozen parameters
  are bit-identical before and after stage B.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import extract_box_features
from .checkpoint import (
    CheckpointError,
    load_arrays,
    load_module_state,
    module_state_arrays,
    save_arrays,
)
from .scenegraph import (
    GraphBundle,
    sg_loss,
    sg_metrics,
    spatial_features,
    validate_scene_topology,
)
from .seghead import seg_loss, seg_metrics

logger = logging.getLogger(__name__)

REGIMES = ("V", "KD", "S")
PARTITION_GROUPS = ("w_sh", "w_seg", "w_sg")


# ---------------------------------------------------------------------------
# Loss composition
# ---------------------------------------------------------------------------


def _require_nonnegative(name: str, value) -> None:
    if float(value) < 0:
        raise ValueError(f"{name} must be nonnegative, got {float(value)}")


def _require_alpha(alpha: float) -> None:
    if not 0.0 < float(alpha) < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def compose_vmtl(l_sg, l_seg, alpha: float = 0.4):
    """total = alpha * l_sg + (1 - alpha) * l_seg."""
    _require_alpha(alpha)
    _require_nonnegative("l_sg", l_sg)
    _require_nonnegative("l_seg", l_seg)
    return alpha * l_sg + (1.0 - alpha) * l_seg


def compose_kdmtl(l_sg, l_seg, l_kld, alpha: float = 0.4):
    """total = alpha * l_sg + l_seg + l_kld."""
    _require_alpha(alpha)
    _require_nonnegative("l_sg", l_sg)
    _require_nonnegative("l_seg", l_seg)
    _require_nonnegative("l_kld", l_kld)
    return alpha * l_sg + l_seg + l_kld


@dataclass(frozen=True)
class LossBundle:
    """Task losses plus the regime-composed total for one step or epoch."""

    l_seg: float
    l_sg: float
    l_kld: float
    alpha: float
    total: float
    regime: str = "V"

    @classmethod
    def build(cls, regime: str, l_seg=0.0, l_sg=0.0, l_kld=0.0, alpha: float = 0.4):
        if regime == "V":
            total = compose_vmtl(l_sg, l_seg, alpha)
        elif regime == "KD":
            total = compose_kdmtl(l_sg, l_seg, l_kld, alpha)
        elif regime == "SEG":
            _require_nonnegative("l_seg", l_seg)
            total = l_seg
        elif regime == "SG":
            _require_nonnegative("l_sg", l_sg)
            total = l_sg
        else:
            raise ValueError(f"unknown loss regime {regime!r}")
        return cls(
            l_seg=float(l_seg),
            l_sg=float(l_sg),
            l_kld=float(l_kld),
            alpha=float(alpha),
            total=float(total),
            regime=regime,
        ), total

    def as_dict(self) -> dict:
        return {
            "l_seg": self.l_seg,
            "l_sg": self.l_sg,
            "l_kld": self.l_kld,
            "total": self.total,
        }


def encoder_kld(student_c5: torch.Tensor, teacher_c5: torch.Tensor) -> torch.Tensor:
    """Mean over locations of KL(teacher || student) on channel softmaxes."""
    if student_c5.shape != teacher_c5.shape:
        raise ValueError(
            f"student {tuple(student_c5.shape)} and teacher "
            f"{tuple(teacher_c5.shape)} feature shapes disagree"
        )
    log_p_s = torch.log_softmax(student_c5, dim=1)
    log_p_t = torch.log_softmax(teacher_c5, dim=1)
    per_location = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)
    return per_location.mean()


def lr_at(epoch: int, base_lr: float = 1e-5, decay: float = 0.98, period: int = 10) -> float:
    """Stepwise-decayed learning rate: base * decay^floor(epoch / period)."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return base_lr * decay ** (epoch // period)


# ---------------------------------------------------------------------------
# Parameter partitioning
# ---------------------------------------------------------------------------


class ModelPartition:
    """Disjoint, exhaustive parameter groups with freeze flags and hashes."""

    def __init__(self, groups: dict):
        unknown = set(groups) - set(PARTITION_GROUPS)
        if unknown or set(groups) != set(PARTITION_GROUPS):
            raise ValueError(f"partition must define exactly {PARTITION_GROUPS}")
        self._modules = groups
        self.frozen = {g: False for g in PARTITION_GROUPS}
        owner = {}
        for group in PARTITION_GROUPS:
            for name, param in self.named_parameters(group):
                prior = owner.get(id(param))
                if prior is not None and prior[0] != group:
                    raise ValueError(
                        f"parameter {name} appears in both {prior[0]} and {group}"
                    )
                owner[id(param)] = (group, name)
        self._owner = owner

    @classmethod
    def from_model(cls, model: nn.Module) -> "ModelPartition":
        part = cls(model.partition_modules())
        covered = set(part._owner)
        all_ids = {id(p) for p in model.parameters()}
        if covered != all_ids:
            raise ValueError("partition groups do not cover all model parameters")
        return part

    def named_parameters(self, *groups):
        out = []
        for group in groups or PARTITION_GROUPS:
            for prefix, module in sorted(self._modules[group].items()):
                for name, param in module.named_parameters():
                    out.append((f"{prefix}.{name}", param))
        return out

    def parameters(self, *groups):
        seen = set()
        out = []
        for name, param in self.named_parameters(*groups):
            if id(param) not in seen:
                seen.add(id(param))
                out.append((name, param))
        return out

    def set_frozen(self, group: str, frozen: bool = True) -> None:
        for _, param in self.named_parameters(group):
            param.requires_grad_(not frozen)
        self.frozen[group] = frozen

    def group_hash(self, group: str) -> str:
        """sha256 over the group's parameters and buffers, name-ordered."""
        digest = hashlib.sha256()
        for prefix, module in sorted(self._modules[group].items()):
            state = module.state_dict()
            for name in sorted(state):
                digest.update(f"{prefix}.{name}".encode())
                digest.update(
                    state[name].detach().cpu().contiguous().numpy().tobytes()
                )
        return digest.hexdigest()


# ---------------------------------------------------------------------------
# Training configuration and loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    base_lr: float = 1e-5
    lr_decay: float = 0.98
    lr_decay_every: int = 10
    epochs: int = 130
    batch_size: int = 4
    regime: str = "S"
    alpha: float = 0.4
    seed: int = 0
    stage_a_epochs: int | None = None  # defaults to ``epochs``
    stage_b_epochs: int | None = None
    eval_every: int = 10
    stop_pacc: float | None = None     # stage-A early target on train pixel accuracy
    stop_sg_acc: float | None = None   # stage-B early target on train interaction accuracy
    early_stop_patience: int | None = None  # on validation loss, when a val set exists
    checkpoint_every: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        _require_alpha(self.alpha)
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def a_epochs(self) -> int:
        return self.epochs if self.stage_a_epochs is None else self.stage_a_epochs

    @property
    def b_epochs(self) -> int:
        return self.epochs if self.stage_b_epochs is None else self.stage_b_epochs

    def as_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "lr_decay": self.lr_decay,
            "lr_decay_every": self.lr_decay_every,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "regime": self.regime,
            "alpha": self.alpha,
            "seed": self.seed,
            "stage_a_epochs": self.stage_a_epochs,
            "stage_b_epochs": self.stage_b_epochs,
        }


_STAGE_IDS = {"A": 0, "B": 1, "joint": 2, "teacher": 3}


def evaluate_samples(model, samples, batch_size: int = 4) -> dict:
    """Dataset-level segmentation and interaction metrics over samples."""
    was_training = model.training
    model.eval()
    preds, gts, scores, targets = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            out = model.forward_batch(batch)
            preds.append(out["seg"].logits.argmax(dim=1))
            gts.append(torch.stack([s.mask for s in batch]))
            for logits, sample in zip(out["edge_logits"], batch):
                if logits.shape[0]:
                    scores.append(torch.sigmoid(logits))
                    targets.append(sample.targets)
    if was_training:
        model.train()
    seg = seg_metrics(torch.cat(preds), torch.cat(gts))
    if scores:
        sg = sg_metrics(torch.cat(scores), torch.cat(targets))
    else:
        sg = {"acc": 0.0, "map": 0.0, "recall": 0.0, "exact_match": 0.0}
    return {**seg, **sg}


class Trainer:
    """Runs one of the three regimes over preloaded SceneSamples."""

    def __init__(
        self,
        model,
        samples: list,
        config: TrainConfig,
        out_dir=None,
        val_samples: list | None = None,
        teacher_encoder: nn.Module | None = None,
        checkpoint_meta: dict | None = None,
        stage_callback=None,
    ):
        if not samples:
            raise ValueError("training requires at least one sample")
        self.model = model
        self.samples = samples
        self.config = config
        self.out_dir = out_dir
        self.val_samples = val_samples
        self.teacher_encoder = teacher_encoder
        self.stage_callback = stage_callback
        self.partition = ModelPartition.from_model(model)
        self.history: list[dict] = []
        self.checkpoint_meta = checkpoint_meta or {}
        self._opt = None
        self._opt_named = []
        self._pending_opt_arrays = None
        if config.regime == "S" and getattr(model, "sgfseg", False):
            raise ValueError(
                "sgfseg feeds scene-graph features into segmentation and is "
                "incompatible with the sequential regime (stage A has no graph)"
            )
        if config.regime == "KD" and teacher_encoder is None:
            raise ValueError("KD regime requires a teacher encoder")

    # -- plumbing ----------------------------------------------------------

    def _batches(self, stage: str, epoch: int):
        seed = (
            self.config.seed * 4_000_037 + _STAGE_IDS[stage] * 1_000_003 + epoch
        ) % 2**63
        order = np.random.default_rng(seed).permutation(len(self.samples))
        bs = self.config.batch_size
        return [order[i : i + bs].tolist() for i in range(0, len(order), bs)]

    def _build_optimizer(self, named_params):
        self._opt_named = named_params
        self._opt = torch.optim.Adam(
            [p for _, p in named_params],
            lr=self.config.base_lr,
            betas=self.config.betas,
            eps=self.config.eps,
        )
        if self._pending_opt_arrays is not None:
            self._load_optimizer_state(self._pending_opt_arrays)
            self._pending_opt_arrays = None
        return self._opt

    def _set_lr(self, epoch: int) -> float:
        lr = lr_at(epoch, self.config.base_lr, self.config.lr_decay, self.config.lr_decay_every)
        for group in self._opt.param_groups:
            group["lr"] = lr
        return lr

    def _log(self, entry: dict) -> None:
        self.history.append(entry)
        if self.out_dir is not None:
            path = Path(self.out_dir) / "log.jsonl"
            with path.open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    # -- checkpoint round trip ----------------------------------------------

    def _optimizer_arrays(self) -> dict:
        arrays = {}
        for name, param in self._opt_named:
            state = self._opt.state.get(param)
            if not state:
                continue
            arrays[f"optim/{name}/step"] = np.asarray(
                float(state["step"]), dtype=np.float64
            )
            arrays[f"optim/{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            arrays[f"optim/{name}/exp_avg_sq"] = (
                state["exp_avg_sq"].detach().cpu().numpy()
            )
        return arrays

    def _load_optimizer_state(self, arrays: dict) -> None:
        for name, param in self._opt_named:
            key = f"optim/{name}/step"
            if key not in arrays:
                continue
            self._opt.state[param] = {
                "step": torch.tensor(float(arrays[key])),
                "exp_avg": torch.from_numpy(arrays[f"optim/{name}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(
                    arrays[f"optim/{name}/exp_avg_sq"].copy()
                ),
            }

    def save_checkpoint(self, path, stage: str, next_epoch: int) -> None:
        arrays = module_state_arrays(self.model)
        arrays.update(self._optimizer_arrays())
        meta = {
            **self.checkpoint_meta,
            "model": self.model.config(),
            "regime": self.config.regime,
            "stage": stage,
            "next_epoch": next_epoch,
            "train_config": self.config.as_dict(),
            "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
        }
        save_arrays(path, arrays, meta)

    def load_checkpoint(self, path) -> dict:
        arrays, meta = load_arrays(path)
        if meta.get("regime") != self.config.regime:
            raise CheckpointError(
                f"checkpoint regime {meta.get('regime')!r} is inconsistent with "
                f"configured regime {self.config.regime!r}"
            )
        model_arrays = {k: v for k, v in arrays.items() if not k.startswith("optim/")}
        load_module_state(self.model, model_arrays)
        self._pending_opt_arrays = {
            k: v for k, v in arrays.items() if k.startswith("optim/")
        }
        rng_hex = meta.get("torch_rng")
        if rng_hex:
            torch.set_rng_state(
                torch.frombuffer(bytearray.fromhex(rng_hex), dtype=torch.uint8).clone()
            )
        return meta

    def _maybe_save(self, stage: str, epoch: int, total_epochs: int) -> None:
        if self.out_dir is None:
            return
        every = self.config.checkpoint_every
        if every and (epoch + 1) % every == 0 and epoch + 1 < total_epochs:
            self.save_checkpoint(
                Path(self.out_dir) / f"{stage}_epoch{epoch + 1:04d}.ckpt", stage, epoch + 1
            )

    # -- steps ---------------------------------------------------------------

    def _masks(self, batch_samples):
        return torch.stack([s.mask for s in batch_samples])

    def _seg_step(self, batch_samples):
        images = torch.stack([s.image for s in batch_samples])
        out = self.model.segment_images(images)
        l_seg = seg_loss(out.logits, self._masks(batch_samples))
        bundle, total = LossBundle.build("SEG", l_seg=l_seg, alpha=self.config.alpha)
        self._opt.zero_grad()
        total.backward()
        self._opt.step()
        return bundle

    def _joint_step(self, batch_samples):
        out = self.model.forward_batch(batch_samples)
        l_seg = seg_loss(out["seg"].logits, self._masks(batch_samples))
        logits = torch.cat(out["edge_logits"])
        targets = torch.cat([s.targets for s in batch_samples])
        l_sg = sg_loss(logits, targets)
        if self.config.regime == "KD":
            with torch.no_grad():
                teacher_c5 = self.teacher_encoder(out["images"]).c5
            l_kld = encoder_kld(out["pyramid"].c5, teacher_c5)
            bundle, total = LossBundle.build(
                "KD", l_seg=l_seg, l_sg=l_sg, l_kld=l_kld, alpha=self.config.alpha
            )
        else:
            bundle, total = LossBundle.build(
                "V", l_seg=l_seg, l_sg=l_sg, alpha=self.config.alpha
            )
        self._opt.zero_grad()
        total.backward()
        self._opt.step()
        return bundle

    def _cache_graph_inputs(self) -> list:
        """Frozen-encoder features for stage B: one cache entry per sample."""
        self.model.eval()
        cache = []
        with torch.no_grad():
            for sample in self.samples:
                tissue_index = validate_scene_topology(sample.semantics, sample.edges)
                box_feats = extract_box_features(
                    self.model.encoder, sample.image, sample.boxes
                )
                seg_out = self.model.segment_images(sample.image.unsqueeze(0))
                extra = None
                if self.model.edge_mode == "GISF":
                    extra = seg_out.gisf[0]
                elif self.model.edge_mode == "PF":
                    extra = seg_out.penultimate[0]
                cache.append(
                    {
                        "box_feats": box_feats,
                        "semantics": sample.semantics,
                        "edges": sample.edges,
                        "boxes": sample.boxes,
                        "spatial": spatial_features(sample.boxes, sample.edges),
                        "targets": sample.targets,
                        "tissue_index": tissue_index,
                        "extra": extra,
                    }
                )
        return cache

    def _graph_step(self, batch_indices, cache):
        logits_all, targets_all = [], []
        for idx in batch_indices:
            entry = cache[idx]
            h_v, h_s, fused = self.model.graph.embed_nodes(
                entry["box_feats"], entry["semantics"], entry["edges"]
            )
            bundle = GraphBundle(
                fused=fused,
                visual=h_v,
                semantic=h_s,
                boxes=entry["boxes"],
                edges=list(entry["edges"]),
                tissue_index=entry["tissue_index"],
            )
            logits = self.model.graph.edge_readout(bundle, entry["spatial"], entry["extra"])
            if logits.shape[0]:
                logits_all.append(logits)
                targets_all.append(entry["targets"])
        if not logits_all:
            raise ValueError("stage B batch contained no edges")
        l_sg = sg_loss(torch.cat(logits_all), torch.cat(targets_all))
        loss_bundle, total = LossBundle.build("SG", l_sg=l_sg, alpha=self.config.alpha)
        self._opt.zero_grad()
        total.backward()
        self._opt.step()
        return loss_bundle

    # -- stages ---------------------------------------------------------------

    def _run_epochs(self, stage, n_epochs, run_batch, start_epoch=0, stop_metric=None):
        best_val = float("inf")
        stale = 0
        for epoch in range(start_epoch, n_epochs):
            lr = self._set_lr(epoch)
            sums = {"l_seg": 0.0, "l_sg": 0.0, "l_kld": 0.0, "total": 0.0}
            count = 0
            for batch in self._batches(stage, epoch):
                bundle = run_batch(batch)
                for key, value in bundle.as_dict().items():
                    sums[key] += value * len(batch)
                count += len(batch)
            entry = {
                "stage": stage,
                "epoch": epoch,
                "lr": lr,
                **{k: v / count for k, v in sums.items()},
            }

            should_eval = self.config.eval_every and (
                (epoch + 1) % self.config.eval_every == 0 or epoch + 1 == n_epochs
            )
            stop = False
            if should_eval and (stop_metric or self.val_samples):
                metrics = evaluate_samples(
                    self.model, self.samples, self.config.batch_size
                )
                entry["train_pixel_acc"] = metrics["pixel_acc"]
                entry["train_sg_acc"] = metrics["acc"]
                if stop_metric:
                    name, target = stop_metric
                    if metrics[name] >= target:
                        entry["stopped"] = f"{name}>={target}"
                        stop = True
                if self.val_samples and self.config.early_stop_patience:
                    val = evaluate_samples(
                        self.model, self.val_samples, self.config.batch_size
                    )
                    entry["val_pixel_acc"] = val["pixel_acc"]
                    entry["val_sg_acc"] = val["acc"]
                    val_score = -(val["pixel_acc"] + val["acc"])
                    if val_score < best_val - 1e-9:
                        best_val = val_score
                        stale = 0
                    else:
                        stale += 1
                        if stale >= self.config.early_stop_patience:
                            entry["stopped"] = "patience"
                            stop = True
            self._log(entry)
            self._maybe_save(stage, epoch, n_epochs)
            if stop:
                break

    def run(self, resume=None) -> dict:
        start_stage, start_epoch = None, 0
        if resume is not None:
            meta = self.load_checkpoint(resume)
            start_stage = meta.get("stage")
            start_epoch = int(meta.get("next_epoch", 0))
            if start_stage == "final":
                raise CheckpointError("checkpoint marks training as complete")
        if self.config.regime == "S":
            self._run_sequential(start_stage, start_epoch)
        else:
            self._run_joint(start_stage, start_epoch)
        if self.out_dir is not None:
            self.save_checkpoint(Path(self.out_dir) / "final.ckpt", "final", 0)
        return {"history": self.history}

    def _run_joint(self, start_stage=None, start_epoch: int = 0) -> None:
        if start_stage not in (None, "joint"):
            raise CheckpointError(f"inconsistent stage marker {start_stage!r}")
        self._build_optimizer(self.partition.parameters())
        self._run_epochs("joint", self.config.epochs, self._joint_step, start_epoch)

    def _run_sequential(self, start_stage=None, start_epoch: int = 0) -> None:
        if start_stage not in (None, "A", "A_done", "B"):
            raise CheckpointError(f"inconsistent stage marker {start_stage!r}")
        if start_stage in (None, "A"):
            self._build_optimizer(self.partition.parameters("w_sh", "w_seg"))
            stop_a = None
            if self.config.stop_pacc is not None:
                stop_a = ("pixel_acc", self.config.stop_pacc)
            self._run_epochs(
                "A",
                self.config.a_epochs,
                self._seg_step,
                start_epoch if start_stage == "A" else 0,
                stop_metric=stop_a,
            )
            if self.out_dir is not None:
                self.save_checkpoint(Path(self.out_dir) / "stage_a.ckpt", "A_done", 0)
            if self.stage_callback:
                self.stage_callback("post_A", self)
        self.partition.set_frozen("w_sh", True)
        self.partition.set_frozen("w_seg", True)
        self.model.encoder.eval()
        self.model.seg.eval()
        cache = self._cache_graph_inputs()
        self.model.graph.train()
        if self.stage_callback:
            self.stage_callback("pre_B", self)
        self._build_optimizer(self.partition.parameters("w_sg"))
        stop_b = None
        if self.config.stop_sg_acc is not None:
            stop_b = ("acc", self.config.stop_sg_acc)
        self._run_epochs(
            "B",
            self.config.b_epochs,
            lambda batch: self._graph_step(batch, cache),
            start_epoch if start_stage == "B" else 0,
            stop_metric=stop_b,
        )
        if self.stage_callback:
            self.stage_callback("post_B", self)


def smtl_train(model, samples, config: TrainConfig, out_dir=None, **kwargs):
    """Sequential regime convenience wrapper; returns the trained model."""
    if config.regime != "S":
        config = replace(config, regime="S")
    Trainer(model, samples, config, out_dir=out_dir, **kwargs).run()
    return model
