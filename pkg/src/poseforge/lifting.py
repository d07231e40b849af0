"""2D->3D lifting baselines, the direct render regressor, and cross-validation.

Two residual MLP variants: the 6-layer batch-normalized ReLU lifter and the
8-layer batch-norm-free leaky-ReLU lifter. Masked input keypoints enter as
zeros after normalization plus a per-keypoint mask indicator channel.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .metrics import MetricReport, ScaleStats, bbox_size, rescale
from .skeleton import KeypointLayout, Pose2D, Pose3D

VARIANTS = {
    # layers counts the linear layers: in + 2 per block + out
    "simple": {"blocks": 2, "batchnorm": True, "leaky": False},   # 6 layers
    "large": {"blocks": 3, "batchnorm": False, "leaky": True},    # 8 layers
}


@dataclass(frozen=True)
class MLPLifterConfig:
    variant: str = "large"
    width: int = 1024
    dropout: float = 0.1
    normalizer: str = "mean_std"  # or pelvis_frobenius
    num_keypoints: int = 133

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.normalizer not in ("mean_std", "pelvis_frobenius"):
            raise ValueError(f"unknown normalizer {self.normalizer!r}")

    @property
    def num_layers(self) -> int:
        return 2 + 2 * VARIANTS[self.variant]["blocks"]


class _ResBlock(nn.Module):
    def __init__(self, width: int, batchnorm: bool, leaky: bool, dropout: float):
        super().__init__()
        act = nn.LeakyReLU if leaky else nn.ReLU
        layers: list[nn.Module] = []
        for _ in range(2):
            layers.append(nn.Linear(width, width))
            if batchnorm:
                layers.append(nn.BatchNorm1d(width))
            layers.append(act())
            layers.append(nn.Dropout(dropout))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


class MLPLifter(nn.Module):
    """Residual MLP from flattened (2D + mask indicator) to flattened 3D."""

    def __init__(self, config: MLPLifterConfig):
        super().__init__()
        self.config = config
        spec = VARIANTS[config.variant]
        k = config.num_keypoints
        act = nn.LeakyReLU if spec["leaky"] else nn.ReLU
        head: list[nn.Module] = [nn.Linear(3 * k, config.width)]
        if spec["batchnorm"]:
            head.append(nn.BatchNorm1d(config.width))
        head.append(act())
        self.fc_in = nn.Sequential(*head)
        self.blocks = nn.Sequential(*[
            _ResBlock(config.width, spec["batchnorm"], spec["leaky"],
                      config.dropout)
            for _ in range(spec["blocks"])])
        self.fc_out = nn.Linear(config.width, 3 * k)

    def forward(self, x2d: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """x2d (b, k, 2) normalized with zeros at masked slots, mask (b, k)."""
        b, k = x2d.shape[:2]
        x = torch.cat([x2d.reshape(b, -1), mask.to(x2d.dtype)], dim=1)
        return self.fc_out(self.blocks(self.fc_in(x))).reshape(b, k, 3)


@dataclass
class LifterSchedule:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


def _frobenius_encode(coords: np.ndarray, visible: np.ndarray,
                      hip_idx: tuple[int, int]) -> np.ndarray:
    """Per-sample pelvis-center + Frobenius-norm scaling over visible entries.

    Falls back to the visible centroid when a hip is masked. coords (n, k, d),
    visible (n, k); masked slots come out as zeros.
    """
    h1, h2 = hip_idx
    vis3 = visible[..., None]
    counts = visible.sum(axis=1, keepdims=True)[..., None]
    centroid = np.where(vis3, coords, 0.0).sum(axis=1, keepdims=True) / counts
    hips_ok = (visible[:, h1] & visible[:, h2])[:, None, None]
    pelvis = 0.5 * (coords[:, h1:h1 + 1] + coords[:, h2:h2 + 1])
    center = np.where(hips_ok, pelvis, centroid)
    centered = np.where(vis3, coords - center, 0.0)
    norms = np.sqrt((centered ** 2).sum(axis=(1, 2), keepdims=True))
    if np.any(norms <= 0):
        raise ValueError("degenerate input: zero Frobenius norm after centering")
    return centered / norms


@dataclass
class TrainedLifter:
    """Lifter plus everything needed to map raw 2D pixels to metric 3D."""

    net: MLPLifter
    norm: dict
    scale_stats: ScaleStats
    hip_idx: tuple[int, int] = (11, 12)  # 0-based

    def _encode(self, pose2d: Pose2D) -> tuple[torch.Tensor, torch.Tensor]:
        mask = ~pose2d.visibility
        if self.net.config.normalizer == "mean_std":
            x = (pose2d.coords - self.norm["mean2d"]) / self.norm["std2d"]
            x = np.where(mask[:, None], 0.0, x)
        else:
            x = _frobenius_encode(pose2d.coords[None], pose2d.visibility[None],
                                  self.hip_idx)[0]
        return (torch.as_tensor(x, dtype=torch.float32)[None],
                torch.as_tensor(mask)[None])

    def lift(self, pose2d: Pose2D, sigma_2d: float | None = None) -> Pose3D:
        """Predict a metric-scale camera-space pose from (possibly masked) 2D."""
        self.net.eval()
        with torch.no_grad():
            x, m = self._encode(pose2d)
            y = self.net(x, m)[0].numpy()
        if self.net.config.normalizer == "mean_std":
            denorm = y * self.norm["std3d"] + self.norm["mean3d"]
            unit = denorm / self.scale_stats.mean_3d
        else:
            unit = y  # already unit scale by construction
        final = rescale(unit, self.scale_stats, input2d=pose2d, sigma_2d=sigma_2d)
        return Pose3D(final, frame="camera")


def _stack_pairs(pairs: list[tuple[Pose2D, Pose3D]]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.coords for p, _ in pairs])
    y = np.stack([q.coords for _, q in pairs])
    return x, y


def train_lifter(pairs: list[tuple[Pose2D, Pose3D]],
                 config: MLPLifterConfig | None = None,
                 schedule: LifterSchedule | None = None,
                 hip_idx: tuple[int, int] = (11, 12),
                 mask_sampler=None, log=None) -> TrainedLifter:
    """Train a lifter; ``mask_sampler(n, seed) -> (n, k) bool`` enables the
    online I2D masking augmentation. Normalization statistics and scale
    statistics come from the training pairs only."""
    config = config or MLPLifterConfig()
    schedule = schedule or LifterSchedule()
    x2d, y3d = _stack_pairs(pairs)
    n, k = x2d.shape[:2]
    stats = ScaleStats.fit([q for _, q in pairs], [p for p, _ in pairs])
    norm: dict = {}
    if config.normalizer == "mean_std":
        norm = {"mean2d": x2d.mean(axis=0), "std2d": x2d.std(axis=0) + 1e-8,
                "mean3d": y3d.mean(axis=0), "std3d": y3d.std(axis=0) + 1e-8}
        xn_clean = (x2d - norm["mean2d"]) / norm["std2d"]
        yn = (y3d - norm["mean3d"]) / norm["std3d"]
    else:
        xn_clean = None  # recomputed per epoch, the norm depends on the mask
        yn = _frobenius_encode(y3d, np.ones((n, k), dtype=bool), hip_idx)
    yt = torch.as_tensor(yn, dtype=torch.float32)

    torch.manual_seed(schedule.seed)
    net = MLPLifter(config)
    opt = torch.optim.Adam(net.parameters(), lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    for epoch in range(schedule.epochs):
        net.train()
        perm = rng.permutation(n)
        if mask_sampler is not None:
            masks = np.asarray(mask_sampler(n, schedule.seed + 577 + epoch))
        else:
            masks = np.zeros((n, k), dtype=bool)
        if config.normalizer == "mean_std":
            xn = np.where(masks[:, :, None], 0.0, xn_clean)
        else:
            xn = _frobenius_encode(x2d, ~masks, hip_idx)
        xt = torch.as_tensor(xn, dtype=torch.float32)
        mt = torch.as_tensor(masks)
        ep = 0.0
        nb = 0
        for lo in range(0, n, schedule.batch_size):
            sel = perm[lo:lo + schedule.batch_size]
            if len(sel) < 2:
                continue  # batchnorm needs more than one row
            pred = net(xt[sel], mt[sel])
            loss = (pred - yt[sel]).abs().mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"lifter training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep += float(loss.detach())
            nb += 1
        if log:
            log({"epoch": epoch, "train_l1": ep / max(nb, 1)})
    return TrainedLifter(net, norm, stats, hip_idx)


def evaluate_lifter(model: TrainedLifter, pairs: list[tuple[Pose2D, Pose3D]],
                    layout: KeypointLayout) -> MetricReport:
    reports = [MetricReport.from_pair(model.lift(p2d), gt, layout)
               for p2d, gt in pairs]
    return MetricReport.average(reports)


def mean_pose_report(train_pairs, eval_pairs, layout: KeypointLayout) -> MetricReport:
    """Constant per-keypoint-mean predictor: the oracle every model must beat."""
    mean_pose = np.stack([q.coords for _, q in train_pairs]).mean(axis=0)
    pred = Pose3D(mean_pose, frame="camera")
    return MetricReport.average(
        [MetricReport.from_pair(pred, gt, layout) for _, gt in eval_pairs])


class DirectRegressor(nn.Module):
    """Small conv net from a composite heatmap render to normalized 3D."""

    def __init__(self, num_keypoints: int = 133, render_size: int = 64):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.render_size = render_size
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.ReLU(),
        )
        flat = 64 * (render_size // 16) ** 2
        self.head = nn.Sequential(
            nn.Linear(flat, 1024), nn.ReLU(),
            nn.Linear(1024, 1024), nn.ReLU(),
            nn.Linear(1024, 3 * num_keypoints),
        )

    def forward(self, render: torch.Tensor) -> torch.Tensor:
        b = render.shape[0]
        return self.head(self.conv(render).reshape(b, -1)).reshape(
            b, self.num_keypoints, 3)


@dataclass
class TrainedRegressor:
    net: DirectRegressor
    mean3d: np.ndarray
    std3d: np.ndarray
    scale_stats: ScaleStats

    def predict(self, render: np.ndarray, sigma_2d: float) -> Pose3D:
        self.net.eval()
        with torch.no_grad():
            y = self.net(torch.as_tensor(render, dtype=torch.float32)
                         [None, None])[0].numpy()
        denorm = y * self.std3d + self.mean3d
        unit = denorm / self.scale_stats.mean_3d
        return Pose3D(rescale(unit, self.scale_stats, sigma_2d=sigma_2d),
                      frame="camera")


def train_direct_regressor(renders: np.ndarray, targets3d: np.ndarray,
                           poses2d: list[Pose2D],
                           schedule: LifterSchedule | None = None,
                           log=None) -> TrainedRegressor:
    """L1 regression from composite renders (n, s, s) to 3D targets (n, k, 3)."""
    schedule = schedule or LifterSchedule(epochs=20)
    mean3d, std3d = targets3d.mean(axis=0), targets3d.std(axis=0) + 1e-8
    stats = ScaleStats.fit(list(targets3d), poses2d)
    xt = torch.as_tensor(renders, dtype=torch.float32).unsqueeze(1)
    yt = torch.as_tensor((targets3d - mean3d) / std3d, dtype=torch.float32)

    torch.manual_seed(schedule.seed)
    net = DirectRegressor(targets3d.shape[1], renders.shape[-1])
    opt = torch.optim.Adam(net.parameters(), lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    n = len(renders)
    for epoch in range(schedule.epochs):
        net.train()
        perm = rng.permutation(n)
        ep, nb = 0.0, 0
        for lo in range(0, n, schedule.batch_size):
            sel = perm[lo:lo + schedule.batch_size]
            loss = (net(xt[sel]) - yt[sel]).abs().mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"regressor training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep += float(loss.detach())
            nb += 1
        if log:
            log({"epoch": epoch, "train_l1": ep / max(nb, 1)})
    return TrainedRegressor(net, mean3d, std3d, stats)


def crossval_folds(ids: list[str], k: int, seed: int) -> list[list[str]]:
    """Disjoint covering folds over sample ids, seeded and reproducible."""
    if k > len(ids):
        raise ValueError(f"k={k} exceeds {len(ids)} samples")
    order = list(ids)
    np.random.default_rng(seed).shuffle(order)
    return [sorted(order[i::k]) for i in range(k)]


def crossval(items: dict[str, object], train_fn, eval_fn, k: int = 5,
             seed: int = 0) -> dict:
    """k rounds of hold-one-fold-out model selection.

    ``train_fn(train_items) -> model``; ``eval_fn(model, heldout_items) ->
    MetricReport``. Reports the per-fold table plus mean and standard
    deviation per metric, mirroring the cross-validation table layout.
    """
    folds = crossval_folds(sorted(items), k, seed)
    reports = []
    for fold in folds:
        heldout = {i: items[i] for i in fold}
        train = {i: v for i, v in items.items() if i not in heldout}
        model = train_fn(list(train.values()))
        reports.append(eval_fn(model, list(heldout.values())))
    keys = ("all", "body", "face", "face_aligned", "hand", "hand_aligned")
    table = {
        "folds": [r.to_dict() for r in reports],
        "cv_mean": {m: float(np.mean([getattr(r, m) for r in reports]))
                    for m in keys},
        "cv_std": {m: float(np.std([getattr(r, m) for r in reports]))
                   for m in keys},
    }
    return table


def save_lifter(model: TrainedLifter, path: str | Path, *, seed: int) -> None:
    torch.save({
        "kind": "lifter",
        "config": asdict(model.net.config),
        "state_dict": model.net.state_dict(),
        "norm": model.norm,
        "hip_idx": model.hip_idx,
        "scale_stats": model.scale_stats.to_dict(),
        "seed": seed,
    }, path)


def load_lifter(path: str | Path) -> TrainedLifter:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "lifter":
        raise ValueError(f"{path} is not a lifter checkpoint")
    net = MLPLifter(MLPLifterConfig(**payload["config"]))
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return TrainedLifter(net, payload["norm"], ScaleStats(**payload["scale_stats"]),
                         tuple(payload["hip_idx"]))
