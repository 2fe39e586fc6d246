"""Multi-resolution fusion network for patch-wise crowd counting.

The trunk keeps N parallel branches at decreasing resolution and increasing
width (branch x: base*2^(x-1) channels at input/(4*2^(x-1)) spatial). Phase 1
runs one residual block on branch 1; each later phase runs two residual-block
ranks per live branch with an all-to-all fusion event after every rank; a new
branch is spawned from the deepest one between phases via a stride-2
transition conv.

The forward pass is split in two around a classifier tap:

* prefix      -- stem and trunk up to (and including) the residual blocks at
                 the hook rank; emits the branch-out feature that feeds the
                 density classifier plus every early fusion map (EFM)
                 produced so far.
* continuation -- run once per rescaled patch: a small context module encodes
                 the rescaled pixels, its output is concatenated with the
                 branch-1 hook feature and reduced 1x1 back to branch width,
                 then the remaining trunk runs to the last fusion maps (LFMs).

Attention (optional): each branch's EFM is turned into a single-channel
sigmoid saliency map (SM); SM * EFM concatenated with the LFM and reduced 1x1
gives the final fusion map that feeds the count regressor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import CrowdClass
from .errors import ValidationError


def _cbr(cin: int, cout: int, k: int, stride: int = 1) -> nn.Sequential:
    """conv(bias-free) -> BN -> ReLU"""
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


@dataclass(frozen=True)
class ArchConfig:
    """Structural hyperparameters of the counting network."""

    base_channels: int = 32
    num_branches: int = 3
    residual_units: int = 4  # residual units per residual block
    unit_depth: int = 3  # convs per residual unit: 3 = bottleneck, 2 = plain
    input_size: int = 256
    branch_out: tuple[int, int] = (2, 1)  # (phase, rank) of the classifier tap on branch 1
    attention: bool = True  # attention maps on the EFMs
    fc_hidden: int = 1024
    detach_aux_heads: bool = False  # stop classifier/attention losses at their taps

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValidationError("base_channels must be >= 1")
        if not 1 <= self.num_branches <= 4:
            raise ValidationError("num_branches must be in 1..4")
        if self.residual_units < 1:
            raise ValidationError("residual_units must be >= 1")
        if self.unit_depth not in (2, 3):
            raise ValidationError("unit_depth must be 2 or 3")
        if self.fc_hidden < 1:
            raise ValidationError("fc_hidden must be >= 1")
        if self.input_size < 32 or self.input_size % 32:
            raise ValidationError("input_size must be a positive multiple of 32")
        deepest = self.input_size // (4 * 2 ** (self.num_branches - 1))
        if deepest < 2 or self.input_size % (4 * 2 ** (self.num_branches - 1)):
            raise ValidationError(
                f"input_size {self.input_size} leaves branch {self.num_branches} "
                f"below 2x2 spatial"
            )
        seq = self.rank_sequence
        if tuple(self.branch_out) not in seq[:-1]:
            raise ValidationError(
                f"branch_out {self.branch_out} must be one of {seq[:-1]} "
                f"(a later residual-block rank must exist for the merge hook)"
            )

    @property
    def num_phases(self) -> int:
        return max(2, self.num_branches)

    @property
    def rank_sequence(self) -> tuple[tuple[int, int], ...]:
        """Branch-1 residual-block ranks in execution order: (phase, rank)."""
        seq = [(1, 1)]
        for p in range(2, self.num_phases + 1):
            seq.extend([(p, 1), (p, 2)])
        return tuple(seq)

    @property
    def hook(self) -> tuple[int, int]:
        """Rank whose branch-1 output is merged with the rescaled-patch context."""
        seq = self.rank_sequence
        return seq[seq.index(tuple(self.branch_out)) + 1]

    @property
    def branch_widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.num_branches))

    @property
    def branch_sizes(self) -> tuple[int, ...]:
        s1 = self.input_size // 4
        return tuple(s1 // 2**i for i in range(self.num_branches))

    @property
    def prefix_branches(self) -> frozenset[int]:
        """Branches whose EFM exists before the hook (branch b spawns after phase b-1)."""
        hp = self.hook[0]
        return frozenset(b for b in range(1, self.num_branches + 1) if b <= max(2, hp))

    @classmethod
    def tiny(cls) -> "ArchConfig":
        """Small preset for fast CPU tests; same topology, reduced widths."""
        return cls(base_channels=4, residual_units=2, input_size=64, fc_hidden=128)


class ResidualUnit(nn.Module):
    """x + body(x); body is a 3-conv bottleneck or a 2-conv stack, no ReLU after the add."""

    def __init__(self, channels: int, depth: int):
        super().__init__()
        if depth == 3:
            mid = max(channels // 4, 1)
            self.body = nn.Sequential(
                _cbr(channels, mid, 1), _cbr(mid, mid, 3), _cbr(mid, channels, 1)
            )
        else:
            self.body = nn.Sequential(_cbr(channels, channels, 3), _cbr(channels, channels, 3))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


def _residual_block(channels: int, cfg: ArchConfig) -> nn.Sequential:
    return nn.Sequential(
        *[ResidualUnit(channels, cfg.unit_depth) for _ in range(cfg.residual_units)]
    )


class _UpPath(nn.Module):
    """Fusion path from a deeper branch: bilinear upsample, then 1x1 conv + BN."""

    def __init__(self, cin: int, cout: int, factor: int):
        super().__init__()
        self.factor = factor
        self.conv = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = F.interpolate(x, scale_factor=self.factor, mode="bilinear", align_corners=False)
        return self.bn(self.conv(x))


def _down_path(width: int, steps: int) -> nn.Sequential:
    """Fusion path to a deeper branch: one stride-2 conv per resolution step,
    doubling channels at each step so the arrival width matches the target."""
    convs = []
    for i in range(steps):
        convs.append(_cbr(width * 2**i, width * 2 ** (i + 1), 3, stride=2))
    return nn.Sequential(*convs)


class FusionEvent(nn.Module):
    """All-to-all exchange between live branches: sum aligned features, one ReLU."""

    def __init__(self, widths: list[int]):
        super().__init__()
        self.n = len(widths)
        self.paths = nn.ModuleDict()
        for t in range(self.n):
            for s in range(self.n):
                if s == t:
                    continue
                if s < t:
                    path = _down_path(widths[s], t - s)
                else:
                    path = _UpPath(widths[s], widths[t], 2 ** (s - t))
                self.paths[f"{s}to{t}"] = path

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        if self.n == 1:
            return feats
        outs = []
        for t in range(self.n):
            acc = feats[t]
            for s in range(self.n):
                if s != t:
                    acc = acc + self.paths[f"{s}to{t}"](feats[s])
            outs.append(F.relu(acc))
        return outs


class Stage(nn.Module):
    """One trunk phase: two residual-block ranks, fusion after each."""

    def __init__(self, widths: list[int], cfg: ArchConfig):
        super().__init__()
        self.rb1 = nn.ModuleList([_residual_block(w, cfg) for w in widths])
        self.fuse1 = FusionEvent(widths)
        self.rb2 = nn.ModuleList([_residual_block(w, cfg) for w in widths])
        self.fuse2 = FusionEvent(widths)

    def blocks(self, rank: int) -> nn.ModuleList:
        return self.rb1 if rank == 1 else self.rb2

    def fusion(self, rank: int) -> FusionEvent:
        return self.fuse1 if rank == 1 else self.fuse2


class ClassifierHead(nn.Module):
    """Density-class head: two stride-2 convs, average pool, two FCs to 4 logits."""

    def __init__(self, cin: int, spatial: int, fc_hidden: int):
        super().__init__()
        self.conv1 = _cbr(cin, 2 * cin, 3, 2)
        self.conv2 = _cbr(2 * cin, cin, 3, 2)
        self.pool = nn.AvgPool2d(2, 2)
        self.fc1 = nn.Linear(cin * (spatial // 8) ** 2, fc_hidden)
        self.fc2 = nn.Linear(fc_hidden, len(CrowdClass))

    def forward(self, x: Tensor) -> Tensor:
        x = self.pool(self.conv2(self.conv1(x)))
        x = x.flatten(1)
        return self.fc2(F.relu(self.fc1(x)))


class ContextModule(nn.Module):
    """Encodes a rescaled patch to branch-1 geometry for the merge hook."""

    def __init__(self, base: int, cfg: ArchConfig):
        super().__init__()
        self.conv1 = _cbr(3, 2 * base, 3, 2)
        self.conv2 = _cbr(2 * base, base, 3, 2)
        self.block = _residual_block(base, cfg)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(self.conv2(self.conv1(x)))


class AttentionGate(nn.Module):
    """EFM -> single-channel sigmoid saliency map."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _cbr(channels, channels, 3, 1)
        self.conv2 = _cbr(channels, channels, 3, 1)
        self.out = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.out(self.conv2(self.conv1(x))))


class RegressionHead(nn.Module):
    """Upsample final maps to branch-1 size, concat, reduce, regress one count."""

    def __init__(self, widths: tuple[int, ...], base: int, spatial: int, fc_hidden: int):
        super().__init__()
        self.merge = _cbr(sum(widths), 2 * base, 3, 2)
        self.conv = _cbr(2 * base, 2 * base, 3, 2)
        self.pool = nn.AvgPool2d(2, 2)
        self.fc1 = nn.Linear(2 * base * (spatial // 8) ** 2, fc_hidden)
        self.fc2 = nn.Linear(fc_hidden, 1)

    def forward(self, ffms: list[Tensor]) -> Tensor:
        up = [ffms[0]]
        for i, f in enumerate(ffms[1:], start=1):
            up.append(F.interpolate(f, scale_factor=2**i, mode="bilinear", align_corners=False))
        x = self.pool(self.conv(self.merge(torch.cat(up, dim=1))))
        x = x.flatten(1)
        return self.fc2(F.relu(self.fc1(x)))


@dataclass
class PrefixOut:
    """Per-patch state at the hook rank, shared by all of a patch's rescales."""

    feats: list[Tensor]  # per live branch, residual-block outputs at the hook (pre-fusion)
    logits: Tensor  # (B, 4) density-class logits
    efms: dict[int, Tensor]  # branch -> early fusion map produced before the hook
    sms: dict[int, Tensor] = field(default_factory=dict)  # branch -> saliency map


@dataclass
class Continuation:
    counts: Tensor  # (T,) raw regressed counts, one per rescaled patch
    sms: dict[int, Tensor] = field(default_factory=dict)  # saliency maps born after the hook


class CrowdNet(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        self.cc_max: Optional[int] = None  # set at training time, persisted in checkpoints
        base = cfg.base_channels
        widths = list(cfg.branch_widths)
        s1 = cfg.input_size // 4

        self.register_buffer("pixel_mean", torch.full((3, 1, 1), 0.5))
        self.register_buffer("pixel_std", torch.full((3, 1, 1), 0.25))

        self.stem = nn.Sequential(
            _cbr(3, 2 * base, 3, 2), _cbr(2 * base, 2 * base, 3, 2), _cbr(2 * base, base, 1, 1)
        )
        self.phase1 = _residual_block(base, cfg)
        self.transitions = nn.ModuleList(
            [_cbr(widths[i], widths[i + 1], 3, 2) for i in range(cfg.num_branches - 1)]
        )
        self.stages = nn.ModuleList(
            [
                Stage(widths[: min(p, cfg.num_branches)], cfg)
                for p in range(2, cfg.num_phases + 1)
            ]
        )
        self.cmod = ContextModule(base, cfg)
        self.bottleneck = _cbr(2 * base, base, 1, 1)
        self.classifier = ClassifierHead(base, s1, cfg.fc_hidden)
        if cfg.attention:
            self.gates = nn.ModuleList([AttentionGate(w) for w in widths])
            self.reducers = nn.ModuleList([_cbr(2 * w, w, 1, 1) for w in widths])
        self.regressor = RegressionHead(cfg.branch_widths, base, s1, cfg.fc_hidden)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)

    def set_normalization(self, mean, std) -> None:
        device = self.pixel_mean.device
        dtype = self.pixel_mean.dtype
        self.pixel_mean.copy_(torch.as_tensor(mean, dtype=dtype, device=device).reshape(3, 1, 1))
        self.pixel_std.copy_(torch.as_tensor(std, dtype=dtype, device=device).reshape(3, 1, 1))

    def normalize(self, x: Tensor) -> Tensor:
        return (x / 255.0 - self.pixel_mean) / self.pixel_std

    def forward_prefix(self, patches: Tensor) -> PrefixOut:
        """Stem plus trunk up to the hook rank; classifier runs off the branch-out tap."""
        cfg = self.cfg
        hook = cfg.hook
        x = self.stem(self.normalize(patches))
        feats = [self.phase1(x)]
        efms = {1: feats[0]}
        branchout = feats[0] if tuple(cfg.branch_out) == (1, 1) else None
        if cfg.num_branches > 1:
            nb = self.transitions[0](feats[0])
            feats.append(nb)
            efms[2] = nb
        for p in range(2, cfg.num_phases + 1):
            stage = self.stages[p - 2]
            for rank in (1, 2):
                feats = [rb(f) for rb, f in zip(stage.blocks(rank), feats)]
                if (p, rank) == tuple(cfg.branch_out):
                    branchout = feats[0]
                if (p, rank) == hook:
                    tap = branchout.detach() if cfg.detach_aux_heads else branchout
                    return PrefixOut(
                        feats=feats,
                        logits=self.classifier(tap),
                        efms=efms,
                        sms=self._attend(efms),
                    )
                feats = stage.fusion(rank)(feats)
            if p < cfg.num_phases and len(feats) < cfg.num_branches:
                nb = self.transitions[len(feats) - 1](feats[-1])
                feats.append(nb)
                efms[len(feats)] = nb
        raise AssertionError("hook rank not reached; ArchConfig validation should prevent this")

    def _attend(self, efms: dict[int, Tensor]) -> dict[int, Tensor]:
        if not self.cfg.attention:
            return {}
        out = {}
        for b, efm in efms.items():
            gate_in = efm.detach() if self.cfg.detach_aux_heads else efm
            out[b] = self.gates[b - 1](gate_in)
        return out

    def continue_from(self, prefix: PrefixOut, rescaled: Tensor, owner: Tensor) -> Continuation:
        """Run the trunk tail once per rescaled patch.

        ``rescaled`` is (T, 3, S, S); ``owner[t]`` indexes the prefix entry the
        t-th rescaled patch came from. The context encoding of the rescaled
        pixels is concatenated with the owner's branch-1 hook feature and
        reduced back to branch width; fusion then resumes where the prefix
        stopped.
        """
        cfg = self.cfg
        owner = owner.to(dtype=torch.long, device=rescaled.device)
        cm = self.cmod(self.normalize(rescaled))
        feats = [f.index_select(0, owner) for f in prefix.feats]
        feats[0] = self.bottleneck(torch.cat([feats[0], cm], dim=1))

        late_efms: dict[int, Tensor] = {}
        feats = self._tail(feats, cfg.hook, late_efms)
        late_sms = self._attend(late_efms)

        ffms = []
        for b in range(1, cfg.num_branches + 1):
            lfm = feats[b - 1]
            if not cfg.attention:
                ffms.append(lfm)
                continue
            if b in prefix.efms:
                vafm = (prefix.sms[b] * prefix.efms[b]).index_select(0, owner)
            else:
                vafm = late_sms[b] * late_efms[b]
            ffms.append(self.reducers[b - 1](torch.cat([vafm, lfm], dim=1)))
        counts = self.regressor(ffms).squeeze(1)
        return Continuation(counts=counts, sms=late_sms)

    def _tail(self, feats: list[Tensor], start: tuple[int, int], efms_out: dict[int, Tensor]):
        """Resume the trunk at the fusion of ``start`` and run to the end."""
        cfg = self.cfg
        p0, r0 = start
        for p in range(p0, cfg.num_phases + 1):
            stage = self.stages[p - 2]
            for rank in (1, 2):
                if p == p0 and rank < r0:
                    continue
                if not (p == p0 and rank == r0):
                    feats = [rb(f) for rb, f in zip(stage.blocks(rank), feats)]
                feats = stage.fusion(rank)(feats)
            if p < cfg.num_phases and len(feats) < cfg.num_branches:
                nb = self.transitions[len(feats) - 1](feats[-1])
                feats.append(nb)
                efms_out[len(feats)] = nb
        return feats

    def forward_training(self, patches: Tensor, rescaled: Tensor, owner: Tensor):
        prefix = self.forward_prefix(patches)
        cont = self.continue_from(prefix, rescaled, owner)
        return prefix, cont

    def classify(self, patches: Tensor) -> Tensor:
        """Density-class probabilities (B, 4); rows sum to 1."""
        return F.softmax(self.forward_prefix(patches).logits, dim=1)

    @staticmethod
    def predict_labels(logits: Tensor) -> Tensor:
        return logits.argmax(dim=1)
