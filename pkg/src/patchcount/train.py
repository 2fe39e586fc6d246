"""Training: teacher-forced patch routing, joint loss, step-decayed SGD.

Ground-truth density labels route every patch through the rescaler while the
classifier learns alongside (its predictions are never used for routing in
the default mode). One input patch therefore contributes one rescaled sample
(NCP keeps the identity path with its true count, 0, as target; LCP/MCP one
sample) or four (HCP quadrants with quadrant-local counts). Saliency targets
for branches whose attention taps sit after the merge hook are rasterised in
rescaled-patch geometry.

All randomness derives from (seed, epoch), so a run can resume from a
checkpoint bit-exactly without replaying RNG history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CrowdClass,
    ImageRecord,
    Patch,
    hflip_patch,
    label_patch,
    make_gt_segmap,
    sample_training_patches,
)
from .errors import CheckpointError, DivergenceError, SamplingError, ValidationError
from .losses import joint_loss
from .network import ArchConfig, CrowdNet
from .pipeline import compute_cc_max, count_image, tile_image
from .rescale import quadrant_origins, rescale_patch


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    epochs: int = 120
    batch_size: int = 16
    base_lr: float = 1e-3
    lr_halving_period: int = 30  # epochs between lr halvings
    momentum: float = 0.9  # Nesterov
    weight_decay: float = 1e-4  # applied to conv/linear weights only
    val_fraction: float = 0.10
    seed: int = 0
    routing: str = "gt_labels"  # or "predicted_labels"
    sampling: str = "random_crops"  # or "tiles"
    n_patches: int = 75000  # crops drawn before flip doubling (random_crops mode)
    patch_sizes: tuple[int, ...] = (128, 256, 512)
    flip_augment: bool = True
    gt_disk_radius: float = 8.0  # head-disk radius for saliency targets
    val_every: int = 1
    checkpoint_every: int = 0  # periodic checkpoints; 0 = final only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in [0, 1)")
        if self.base_lr <= 0 or self.lr_halving_period < 1:
            raise ValidationError("base_lr must be > 0 and lr_halving_period >= 1")
        if self.routing not in ("gt_labels", "predicted_labels"):
            raise ValidationError(f"unknown routing mode {self.routing!r}")
        if self.sampling not in ("random_crops", "tiles"):
            raise ValidationError(f"unknown sampling mode {self.sampling!r}")
        if self.n_patches < 1:
            raise ValidationError("n_patches must be >= 1")


def lr_at(epoch: int, base_lr: float, halving_period: int) -> float:
    """Step decay: the learning rate halves every ``halving_period`` epochs."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    return base_lr * 0.5 ** (epoch // halving_period)


def split_dataset(
    records: list[ImageRecord], val_fraction: float, seed: int
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Deterministic image-level split; the first floor(n * val_fraction) of a
    seeded permutation become the validation set."""
    rng = np.random.default_rng([seed, 0x5B117])
    perm = rng.permutation(len(records))
    n_val = int(len(records) * val_fraction)
    val = [records[i] for i in perm[:n_val]]
    tr = [records[i] for i in perm[n_val:]]
    return tr, val


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_total: float
    loss_regression: float
    loss_classification: float
    loss_attention: float
    val_mae: Optional[float] = None
    val_rmse: Optional[float] = None


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    train_mae: float
    train_rmse: float
    cc_max: int
    n_train_images: int
    n_val_images: int
    n_patches: int
    checkpoint: Optional[Path] = None


@dataclass
class _Unit:
    """One training patch with its precomputed teacher-forced pieces."""

    pixels: np.ndarray  # (3, S, S) float32
    points: np.ndarray  # (k, 2) float64 patch-local
    label: int  # ground-truth CrowdClass value
    rescaled: np.ndarray  # (m, 3, S, S) float32
    count_targets: np.ndarray  # (m,) float32
    seg_prefix: dict[int, np.ndarray]  # branch -> (h, w) uint8, original geometry
    seg_late: dict[int, np.ndarray]  # branch -> (m, h, w) uint8, rescaled geometry


def _routed_parts(pixels, points, label, arch: ArchConfig, radius: float):
    """Rescaled network inputs plus matching count/saliency targets for one patch."""
    size = arch.input_size
    label = CrowdClass(label)
    if label == CrowdClass.HCP:
        out = rescale_patch(pixels, label)
        half = size // 2
        groups = []
        for _, r0, c0 in quadrant_origins(size):
            if len(points):
                m = (
                    (points[:, 0] >= c0)
                    & (points[:, 0] < c0 + half)
                    & (points[:, 1] >= r0)
                    & (points[:, 1] < r0 + half)
                )
                groups.append((points[m] - np.array([c0, r0], dtype=np.float64)) * 2.0)
            else:
                groups.append(np.zeros((0, 2), dtype=np.float64))
        rescaled = np.stack([a.astype(np.float32) for a in out.patches])
    elif label == CrowdClass.LCP:
        out = rescale_patch(pixels, label)
        groups = [points * 0.5 + size // 4]
        rescaled = np.stack([a.astype(np.float32) for a in out.patches])
    else:
        # MCP keeps the patch as-is; NCP does too during training (target 0)
        groups = [points]
        rescaled = np.asarray(pixels, dtype=np.float32)[None]
    targets = np.array([len(g) for g in groups], dtype=np.float32)
    late = {}
    if arch.attention:
        late_branches = [
            b for b in range(1, arch.num_branches + 1) if b not in arch.prefix_branches
        ]
        for b in late_branches:
            res = arch.branch_sizes[b - 1]
            late[b] = np.stack(
                [make_gt_segmap(g, radius, (res, res), patch_size=size) for g in groups]
            )
    return rescaled, targets, late


def _make_unit(patch: Patch, cc_max: int, cfg: TrainConfig) -> _Unit:
    arch = cfg.arch
    label = label_patch(patch.gt_count, cc_max)
    rescaled, targets, late = _routed_parts(
        patch.pixels, patch.points, label, arch, cfg.gt_disk_radius
    )
    seg_prefix = {}
    if arch.attention:
        for b in sorted(arch.prefix_branches):
            res = arch.branch_sizes[b - 1]
            seg_prefix[b] = make_gt_segmap(
                patch.points, cfg.gt_disk_radius, (res, res), patch_size=arch.input_size
            )
    return _Unit(
        pixels=patch.pixels,
        points=patch.points,
        label=int(label),
        rescaled=rescaled,
        count_targets=targets,
        seg_prefix=seg_prefix,
        seg_late=late,
    )


def _build_patches(records: list[ImageRecord], cfg: TrainConfig) -> list[Patch]:
    if cfg.sampling == "random_crops":
        return sample_training_patches(
            records,
            cfg.n_patches,
            sizes=cfg.patch_sizes,
            out_size=cfg.arch.input_size,
            seed=cfg.seed,
            flip=cfg.flip_augment,
        )
    patches: list[Patch] = []
    for rec in records:
        patches.extend(tile_image(rec, cfg.arch.input_size))
    if cfg.flip_augment:
        patches = patches + [hflip_patch(p) for p in patches]
    return patches


def _pixel_stats(patches: list[Patch]) -> tuple[np.ndarray, np.ndarray]:
    acc = np.zeros(3, dtype=np.float64)
    acc2 = np.zeros(3, dtype=np.float64)
    n = 0
    for p in patches:
        v = p.pixels.astype(np.float64) / 255.0
        acc += v.sum(axis=(1, 2))
        acc2 += (v * v).sum(axis=(1, 2))
        n += v.shape[1] * v.shape[2]
    mean = acc / n
    var = np.maximum(acc2 / n - mean * mean, 1e-6)
    return mean, np.sqrt(var)


def _param_groups(model: nn.Module, weight_decay: float):
    decay, plain = [], []
    for _, p in model.named_parameters():
        (plain if p.ndim == 1 else decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ]


def _collate(units: list[_Unit], arch: ArchConfig, *, predicted_labels=None, radius=8.0):
    """Stack a batch. With predicted_labels given, the rescale route follows
    them (targets rebuilt on the fly); otherwise the precomputed ground-truth
    route is used."""
    patches = torch.from_numpy(np.stack([u.pixels for u in units]))
    labels = torch.tensor([u.label for u in units], dtype=torch.long)
    parts = []
    if predicted_labels is None:
        for u in units:
            parts.append((u.rescaled, u.count_targets, u.seg_late))
    else:
        for u, lab in zip(units, predicted_labels):
            parts.append(_routed_parts(u.pixels, u.points, lab, arch, radius))
    rescaled = torch.from_numpy(np.concatenate([p[0] for p in parts]))
    targets = torch.from_numpy(np.concatenate([p[1] for p in parts]))
    owner = torch.from_numpy(
        np.concatenate(
            [np.full(len(p[0]), i, dtype=np.int64) for i, p in enumerate(parts)]
        )
    )
    sm_targets = {}
    if arch.attention:
        for b in sorted(arch.prefix_branches):
            sm_targets[b] = torch.from_numpy(
                np.stack([u.seg_prefix[b] for u in units])
            ).unsqueeze(1)
        late_branches = [
            b for b in range(1, arch.num_branches + 1) if b not in arch.prefix_branches
        ]
        for b in late_branches:
            sm_targets[b] = torch.from_numpy(
                np.concatenate([p[2][b] for p in parts])
            ).unsqueeze(1)
    return patches, labels, rescaled, targets, owner, sm_targets


def _sm_pairs(prefix, cont, sm_targets, arch: ArchConfig):
    pairs = []
    for b in range(1, arch.num_branches + 1):
        if not arch.attention:
            break
        sm = prefix.sms.get(b) if b in prefix.sms else cont.sms.get(b)
        pairs.append((sm, sm_targets[b].to(sm.dtype)))
    return pairs


def train(
    records: list[ImageRecord],
    cfg: TrainConfig,
    *,
    out_dir=None,
    resume=None,
    log=None,
) -> tuple[CrowdNet, TrainReport]:
    """Train a counting network on annotated images.

    Returns the trained model and a per-epoch report. When ``out_dir`` is
    given, a final checkpoint (plus periodic ones if configured) is written
    there. ``resume`` restarts from a checkpoint written by the same config.
    """
    from .evaluation import evaluate  # local import; evaluation depends on this module's types

    torch.manual_seed(cfg.seed)
    train_recs, val_recs = split_dataset(records, cfg.val_fraction, cfg.seed)
    if not train_recs:
        raise SamplingError("training split is empty")
    stats = compute_cc_max(train_recs, cfg.arch.input_size)
    patches = _build_patches(train_recs, cfg)
    if not patches:
        raise SamplingError("no training patches produced")

    model = CrowdNet(cfg.arch)
    model.cc_max = stats.cc_max
    mean, std = _pixel_stats(patches)
    model.set_normalization(mean, std)
    units = [_make_unit(p, stats.cc_max, cfg) for p in patches]

    optimizer = torch.optim.SGD(
        _param_groups(model, cfg.weight_decay),
        lr=cfg.base_lr,
        momentum=cfg.momentum,
        nesterov=True,
    )

    start_epoch = 0
    if resume is not None:
        ck_model, meta, momenta = load_checkpoint(resume)
        if ck_model.cfg != cfg.arch:
            raise CheckpointError("checkpoint architecture differs from the configured one")
        if meta.get("seed") != cfg.seed:
            raise CheckpointError(
                f"checkpoint was trained with seed {meta.get('seed')}, config says {cfg.seed}; "
                "bit-exact resume needs the same seed"
            )
        model.load_state_dict(ck_model.state_dict())
        model.cc_max = ck_model.cc_max
        by_name = dict(model.named_parameters())
        for name, buf in momenta.items():
            optimizer.state[by_name[name]] = {
                "momentum_buffer": torch.from_numpy(buf.copy())
            }
        start_epoch = int(meta["epoch"]) + 1

    rows: list[EpochStats] = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg.base_lr, cfg.lr_halving_period)
        for g in optimizer.param_groups:
            g["lr"] = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(units))
        model.train()
        sums = np.zeros(4, dtype=np.float64)
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch_units = [units[i] for i in order[lo : lo + cfg.batch_size]]
            if cfg.routing == "predicted_labels":
                with torch.no_grad():
                    pb = torch.from_numpy(np.stack([u.pixels for u in batch_units]))
                    pred = model.predict_labels(model.forward_prefix(pb).logits).tolist()
                collated = _collate(
                    batch_units, cfg.arch, predicted_labels=pred, radius=cfg.gt_disk_radius
                )
            else:
                collated = _collate(batch_units, cfg.arch)
            pt, labels, rescaled, targets, owner, sm_targets = collated
            prefix, cont = model.forward_training(pt, rescaled, owner)
            if not (
                torch.isfinite(prefix.logits).all() and torch.isfinite(cont.counts).all()
            ):
                raise DivergenceError(
                    f"non-finite network output at epoch {epoch}; lower the learning rate"
                )
            probs = F.softmax(prefix.logits, dim=1)
            breakdown = joint_loss(
                cont.counts,
                targets,
                probs,
                labels,
                _sm_pairs(prefix, cont, sm_targets, cfg.arch),
            )
            total = breakdown.total
            if not torch.isfinite(total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            sums += [
                float(total.detach()),
                float(breakdown.regression.detach()),
                float(breakdown.classification.detach()),
                float(breakdown.attention.detach()),
            ]
            n_batches += 1

        val_mae = val_rmse = None
        if val_recs and (epoch % cfg.val_every == 0 or epoch == cfg.epochs - 1):
            val_report = evaluate(model, val_recs, routing="predicted")
            val_mae, val_rmse = val_report.mae, val_report.rmse
        rows.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                loss_total=sums[0] / n_batches,
                loss_regression=sums[1] / n_batches,
                loss_classification=sums[2] / n_batches,
                loss_attention=sums[3] / n_batches,
                val_mae=val_mae,
                val_rmse=val_rmse,
            )
        )
        if log:
            msg = (
                f"epoch {epoch:3d}  lr {lr:.6f}  loss {rows[-1].loss_total:8.4f}  "
                f"reg {rows[-1].loss_regression:8.4f}  cls {rows[-1].loss_classification:6.4f}  "
                f"att {rows[-1].loss_attention:6.4f}"
            )
            if val_mae is not None:
                msg += f"  val_mae {val_mae:7.3f}  val_rmse {val_rmse:7.3f}"
            log(msg)
        if (
            out_dir is not None
            and cfg.checkpoint_every
            and (epoch + 1) % cfg.checkpoint_every == 0
        ):
            save_checkpoint(
                Path(out_dir) / f"epoch_{epoch:04d}.npz",
                model,
                optimizer=optimizer,
                epoch=epoch,
                seed=cfg.seed,
            )

    final = evaluate(model, train_recs, routing="gt")
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(
            Path(out_dir) / "checkpoint.npz",
            model,
            optimizer=optimizer,
            epoch=cfg.epochs - 1,
            seed=cfg.seed,
        )
    return model, TrainReport(
        epochs=rows,
        train_mae=final.mae,
        train_rmse=final.rmse,
        cc_max=stats.cc_max,
        n_train_images=len(train_recs),
        n_val_images=len(val_recs),
        n_patches=len(units),
        checkpoint=ckpt,
    )


@dataclass
class GradGroup:
    name: str
    n_checked: int
    max_rel: float


@dataclass
class GradCheckReport:
    max_rel: float
    step: float
    seed: int
    groups: list[GradGroup]


def grad_check(
    arch: Optional[ArchConfig] = None,
    *,
    seed: int = 0,
    step: float = 1e-6,
    max_per_tensor: Optional[int] = None,
    rel_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of the joint loss against central finite
    differences in float64.

    One MCP-routed patch exercises every parameter group (trunk, both heads,
    context module, attention). The error for entry (a = analytic,
    n = numeric) is |a - n| / max(|a|, |n|, rel_floor); the floor keeps
    near-zero gradient pairs, where finite differencing is noise-limited,
    from reporting meaningless ratios. ``max_per_tensor`` limits how many
    entries of each parameter tensor are probed (None = all of them).

    The default step is small enough that a perturbation rarely carries a
    ReLU pre-activation across zero (a crossing puts the secant on two
    different linear pieces, inflating the apparent error) while float64
    keeps the difference quotient well above roundoff.
    """
    arch = arch if arch is not None else ArchConfig.tiny()
    torch.manual_seed(seed)
    model = CrowdNet(arch).double()
    model.train()
    rng = np.random.default_rng(seed)
    size = arch.input_size

    patch = torch.from_numpy(rng.uniform(0.0, 255.0, size=(1, 3, size, size)))
    rescaled = patch.clone()
    owner = torch.zeros(1, dtype=torch.long)
    labels = torch.tensor([int(CrowdClass.MCP)])
    count_target = torch.tensor([7.0], dtype=torch.float64)
    sm_targets = {}
    if arch.attention:
        for b in range(1, arch.num_branches + 1):
            res = arch.branch_sizes[b - 1]
            sm_targets[b] = torch.from_numpy(
                rng.integers(0, 2, size=(1, 1, res, res)).astype(np.float64)
            )

    def compute_loss():
        prefix, cont = model.forward_training(patch, rescaled, owner)
        probs = F.softmax(prefix.logits, dim=1)
        pairs = []
        for b in range(1, arch.num_branches + 1):
            if not arch.attention:
                break
            sm = prefix.sms.get(b) if b in prefix.sms else cont.sms.get(b)
            pairs.append((sm, sm_targets[b]))
        return joint_loss(cont.counts, count_target, probs, labels, pairs).total

    loss = compute_loss()
    model.zero_grad()
    loss.backward()
    analytic = {n: p.grad.detach().clone() for n, p in model.named_parameters()}

    groups: dict[str, GradGroup] = {}
    overall = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            grad = analytic[name].view(-1)
            n = flat.numel()
            if max_per_tensor is not None and n > max_per_tensor:
                idxs = rng.choice(n, size=max_per_tensor, replace=False)
            else:
                idxs = range(n)
            worst = 0.0
            checked = 0
            for j in idxs:
                j = int(j)
                orig = flat[j].item()
                flat[j] = orig + step
                lpos = compute_loss().item()
                flat[j] = orig - step
                lneg = compute_loss().item()
                flat[j] = orig
                numeric = (lpos - lneg) / (2.0 * step)
                a = grad[j].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
                worst = max(worst, rel)
                checked += 1
            top = name.split(".")[0]
            g = groups.setdefault(top, GradGroup(name=top, n_checked=0, max_rel=0.0))
            g.n_checked += checked
            g.max_rel = max(g.max_rel, worst)
            overall = max(overall, worst)
    return GradCheckReport(
        max_rel=overall, step=step, seed=seed, groups=sorted(groups.values(), key=lambda g: g.name)
    )
