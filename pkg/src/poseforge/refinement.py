"""Iterative 2D denoisers for face and hand keypoints.

A refiner is trained on a 5-step noise ladder (sigma ramping 5 to 25 px as
standard deviation) to predict the less-noisy step from heatmap evidence,
and applied for a fixed number of iterations at inference. Conditioning uses
per-keypoint evidence windows sampled at two strides around the current
estimate, a windowed form of a strided conv encoder over the render.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cameras import Rig, project, select_views, triangulate
from .skeleton import KeypointLayout, Pose2D, Pose3D
from .synthetic import HeatmapRender, render_heatmaps

SOURCE_SIZE = 384
CROP_SIZE = 224

PART_MODEL = {"face": "face", "left_hand": "hand", "right_hand": "hand"}


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma(t) in pixels for steps t = 1..steps, linear lo..hi; sigma(0) = 0."""

    steps: int = 5
    sigma_lo: float = 5.0
    sigma_hi: float = 25.0

    def sigma(self, t: int) -> float:
        if t == 0:
            return 0.0
        if not 1 <= t <= self.steps:
            raise ValueError(f"step {t} outside 1..{self.steps}")
        if self.steps == 1:
            return self.sigma_lo
        return self.sigma_lo + (self.sigma_hi - self.sigma_lo) * (t - 1) / (self.steps - 1)


def corrupt(gt2d: np.ndarray, t: int, seed: int,
            schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Add isotropic Gaussian pixel noise at the step-t sigma."""
    schedule = schedule or NoiseSchedule()
    sigma = schedule.sigma(t)
    rng = np.random.default_rng(seed)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    return gt2d + rng.normal(0.0, sigma, size=gt2d.shape)


@dataclass(frozen=True)
class SourceFrame:
    """Maps an image region onto the 384x384 source raster.

    The scale is an exact power of two and the origin is integer, so
    image <-> source round trips are exact up to float rounding.
    """

    origin: tuple[int, int]
    scale_exp: int  # source px = (image px - origin) * 2**-scale_exp

    @property
    def scale(self) -> float:
        return 2.0 ** (-self.scale_exp)

    def to_source(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.origin) * self.scale

    def to_image(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + self.origin


def fit_source_frame(points: np.ndarray, margin: float = 24.0) -> SourceFrame:
    """Smallest power-of-two source frame with the points inside the crop area."""
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float((hi - lo).max())
    exp = 0
    while span * 2.0 ** (-exp) > CROP_SIZE - 2 * margin:
        exp += 1
    side = SOURCE_SIZE * 2 ** exp
    center = 0.5 * (lo + hi)
    origin = np.floor(center - side / 2).astype(int)
    return SourceFrame((int(origin[0]), int(origin[1])), exp)


@dataclass(frozen=True)
class CropSpec:
    """A 224x224 window at an integer offset inside the 384x384 source."""

    offset: tuple[int, int]

    def __post_init__(self):
        ox, oy = self.offset
        if not (0 <= ox <= SOURCE_SIZE - CROP_SIZE and 0 <= oy <= SOURCE_SIZE - CROP_SIZE):
            raise ValueError(f"crop offset {self.offset} leaves the source")

    def to_crop(self, src_pts: np.ndarray) -> np.ndarray:
        return np.asarray(src_pts, dtype=np.float64) - self.offset

    def to_source(self, crop_pts: np.ndarray) -> np.ndarray:
        return np.asarray(crop_pts, dtype=np.float64) + self.offset


def random_crop(src_pts: np.ndarray, rng: np.random.Generator,
                margin: float = 8.0) -> CropSpec:
    """Random window placement keeping all points at least margin px inside."""
    lo, hi = src_pts.min(axis=0), src_pts.max(axis=0)
    mins = np.maximum(np.ceil(hi + margin - CROP_SIZE), 0)
    maxs = np.minimum(np.floor(lo - margin), SOURCE_SIZE - CROP_SIZE)
    if np.any(mins > maxs):  # part too large for the margin; center it
        c = np.clip(0.5 * (lo + hi) - CROP_SIZE / 2, 0, SOURCE_SIZE - CROP_SIZE)
        return CropSpec((int(round(c[0])), int(round(c[1]))))
    ox = int(rng.integers(mins[0], maxs[0] + 1))
    oy = int(rng.integers(mins[1], maxs[1] + 1))
    return CropSpec((ox, oy))


def corner_crops(src_pts: np.ndarray, margin: float = 8.0) -> list[CropSpec]:
    """The four windows placing the point bbox in each corner, margin px in."""
    lo, hi = src_pts.min(axis=0), src_pts.max(axis=0)
    lim = SOURCE_SIZE - CROP_SIZE
    specs = []
    for cx, cy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        ox = lo[0] - margin if cx == 0 else hi[0] + margin - CROP_SIZE
        oy = lo[1] - margin if cy == 0 else hi[1] + margin - CROP_SIZE
        specs.append(CropSpec((int(np.clip(round(ox), 0, lim)),
                               int(np.clip(round(oy), 0, lim)))))
    return specs


@dataclass(frozen=True)
class CropEvidence:
    """Keypoint image evidence in crop coordinates: the continuous Gaussian
    field a heatmap render discretizes. Invisible keypoints have no blob."""

    coords: np.ndarray      # (k, 2) true/detected 2D in crop frame
    visibility: np.ndarray  # (k,)
    sigma_px: float = 3.0

    def window_stack(self, centers: torch.Tensor, half: int = 16,
                     strides: tuple[int, ...] = (1, 4)) -> torch.Tensor:
        """Sample each keypoint's channel around its center: (k, s, w, w)."""
        k = self.coords.shape[0]
        w = 2 * half + 1
        offs = torch.arange(-half, half + 1, dtype=centers.dtype)
        out = torch.zeros((k, len(strides), w, w), dtype=centers.dtype)
        target = torch.as_tensor(self.coords, dtype=centers.dtype)
        vis = torch.as_tensor(self.visibility, dtype=torch.bool)
        inv2s2 = 1.0 / (2.0 * self.sigma_px ** 2)
        for si, stride in enumerate(strides):
            gx = centers[:, 0:1] + offs * stride  # (k, w)
            gy = centers[:, 1:2] + offs * stride
            dx2 = (gx - target[:, 0:1]) ** 2
            dy2 = (gy - target[:, 1:2]) ** 2
            win = torch.exp(-(dy2[:, :, None] + dx2[:, None, :]) * inv2s2)
            out[:, si] = win * vis[:, None, None]
        return out

    def render(self, size: int = CROP_SIZE) -> HeatmapRender:
        return render_heatmaps(self.coords, self.visibility, (size, size),
                               self.sigma_px)


@dataclass(frozen=True)
class RefinerConfig:
    part: str                 # "face" or "hand"
    num_keypoints: int
    window_half: int = 16
    strides: tuple[int, ...] = (1, 4)
    conv_dim: int = 32
    embed_dim: int = 16
    hidden: int = 64
    max_step_px: float = 40.0


class RefinerNet(nn.Module):
    """Per-keypoint offset regressor conditioned on evidence windows."""

    def __init__(self, config: RefinerConfig):
        super().__init__()
        self.config = config
        s = len(config.strides)
        self.conv = nn.Sequential(
            nn.Conv2d(s, 16, 3, stride=2), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2), nn.ReLU(),
            nn.Conv2d(32, config.conv_dim, 3, stride=2), nn.ReLU(),
        )
        probe = torch.zeros(1, s, 2 * config.window_half + 1,
                            2 * config.window_half + 1)
        flat = self.conv(probe).numel()
        self.kp_embed = nn.Embedding(config.num_keypoints, config.embed_dim)
        self.coord_proj = nn.Linear(2, config.embed_dim)
        self.head = nn.Sequential(
            nn.Linear(flat + 2 * config.embed_dim, config.hidden), nn.ReLU(),
            nn.Linear(config.hidden, config.hidden), nn.ReLU(),
            nn.Linear(config.hidden, 2),
        )

    def forward(self, windows: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        """windows (n, k, s, w, w), coords (n, k, 2) -> offsets (n, k, 2) px."""
        n, k = windows.shape[:2]
        feat = self.conv(windows.reshape(n * k, *windows.shape[2:]))
        feat = feat.reshape(n * k, -1)
        emb = self.kp_embed(torch.arange(k).repeat(n))
        pos = self.coord_proj(coords.reshape(n * k, 2) / CROP_SIZE)
        off = self.head(torch.cat([feat, emb, pos], dim=1))
        off = self.config.max_step_px * torch.tanh(off / self.config.max_step_px)
        return off.reshape(n, k, 2)


def _predict(model: RefinerNet, evidence: CropEvidence,
             current: np.ndarray) -> np.ndarray:
    cur = torch.as_tensor(current, dtype=torch.float32)
    win = evidence.window_stack(cur, model.config.window_half,
                                model.config.strides)
    with torch.no_grad():
        off = model(win[None], cur[None])[0].numpy()
    return current + off


def refine(model: RefinerNet, evidence: CropEvidence, initial: np.ndarray,
           iterations: int = 10) -> tuple[np.ndarray, list[float]]:
    """Apply the refiner repeatedly; returns the result and the per-iteration
    mean keypoint displacement trace (one entry per iteration, always)."""
    model.eval()
    current = np.asarray(initial, dtype=np.float64).copy()
    trace = []
    for _ in range(iterations):
        after = _predict(model, evidence, current)
        trace.append(float(np.linalg.norm(after - current, axis=-1).mean()))
        current = after
    return current, trace


@dataclass(frozen=True)
class RefinementCrop:
    """One training instance: non-occluded part keypoints in crop frame."""

    gt: np.ndarray  # (k, 2)
    sigma_px: float = 3.0

    def evidence(self) -> CropEvidence:
        return CropEvidence(self.gt, np.ones(len(self.gt), dtype=bool),
                            self.sigma_px)


@dataclass
class RefinerSchedule:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 1 / 11  # the 20k/2k split of the source protocol


def _training_batch(crops: list[RefinementCrop], idx: np.ndarray,
                    schedule: NoiseSchedule, rng: np.random.Generator,
                    model: RefinerNet):
    wins, curs, targets = [], [], []
    for i in idx:
        gt = crops[i].gt
        t = int(rng.integers(0, schedule.steps))  # predict step t from t+1
        noisy = gt + rng.normal(0.0, schedule.sigma(t + 1), gt.shape)
        target = gt if t == 0 else gt + rng.normal(0.0, schedule.sigma(t), gt.shape)
        cur = torch.as_tensor(noisy, dtype=torch.float32)
        wins.append(crops[i].evidence().window_stack(
            cur, model.config.window_half, model.config.strides))
        curs.append(cur)
        targets.append(torch.as_tensor(target - noisy, dtype=torch.float32))
    return torch.stack(wins), torch.stack(curs), torch.stack(targets)


def validation_error(model: RefinerNet, crops: list[RefinementCrop],
                     seed: int, iterations: int = 10,
                     start_sigma: float = 25.0) -> np.ndarray:
    """Per-crop mean keypoint error after refining from start_sigma noise."""
    rng = np.random.default_rng(seed)
    errs = []
    for crop in crops:
        start = crop.gt + rng.normal(0.0, start_sigma, crop.gt.shape)
        refined, _ = refine(model, crop.evidence(), start, iterations)
        errs.append(float(np.linalg.norm(refined - crop.gt, axis=-1).mean()))
    return np.array(errs)


def train_refiner(crops: list[RefinementCrop], part: str,
                  schedule: NoiseSchedule | None = None,
                  train_schedule: RefinerSchedule | None = None,
                  config: RefinerConfig | None = None,
                  log=None) -> tuple[RefinerNet, list[dict]]:
    """Train one part refiner on non-occluded crops; deterministic per seed."""
    schedule = schedule or NoiseSchedule()
    ts = train_schedule or RefinerSchedule()
    n_kp = len(crops[0].gt)
    config = config or RefinerConfig(part=PART_MODEL[part] if part in PART_MODEL
                                     else part, num_keypoints=n_kp)
    if config.num_keypoints != n_kp:
        raise ValueError("crop keypoint count does not match the model part")

    torch.manual_seed(ts.seed)
    model = RefinerNet(config)
    opt = torch.optim.Adam(model.parameters(), lr=ts.lr)
    rng = np.random.default_rng(ts.seed)
    order = rng.permutation(len(crops))
    n_val = max(1, int(len(crops) * ts.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]

    history = []
    for epoch in range(ts.epochs):
        model.train()
        perm = rng.permutation(train_idx)
        ep = 0.0
        nb = 0
        for lo in range(0, len(perm), ts.batch_size):
            sel = perm[lo:lo + ts.batch_size]
            wins, curs, targets = _training_batch(crops, sel, schedule, rng, model)
            off = model(wins, curs)
            loss = (off - targets).abs().mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"refiner training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep += float(loss.detach())
            nb += 1
        val = validation_error(model, [crops[i] for i in val_idx],
                               seed=ts.seed + 31 + epoch)
        history.append({"epoch": epoch, "train_l1": ep / max(nb, 1),
                        "val_error_px": float(val.mean())})
        if log:
            log(history[-1])
    return model, history


def part_crop_frame(part_image_pts: np.ndarray,
                    crop: CropSpec | None = None,
                    margin: float = 24.0) -> tuple[SourceFrame, CropSpec]:
    frame = fit_source_frame(part_image_pts, margin)
    src = frame.to_source(part_image_pts)
    if crop is None:
        c = np.clip(0.5 * (src.min(axis=0) + src.max(axis=0)) - CROP_SIZE / 2,
                    0, SOURCE_SIZE - CROP_SIZE)
        crop = CropSpec((int(round(c[0])), int(round(c[1]))))
    return frame, crop


def refine_part_in_view(model: RefinerNet, part_proj: np.ndarray,
                        evidence_img: np.ndarray, evidence_vis: np.ndarray,
                        iterations: int = 10, sigma_px: float = 3.0,
                        crop: CropSpec | None = None,
                        frame: SourceFrame | None = None) -> np.ndarray:
    """Refine one part in one view; coordinates in and out are image pixels."""
    if frame is None:
        frame, crop = part_crop_frame(part_proj, crop)
    elif crop is None:
        _, crop = part_crop_frame(part_proj)
    ev = CropEvidence(crop.to_crop(frame.to_source(evidence_img)),
                      evidence_vis, sigma_px)
    start = crop.to_crop(frame.to_source(part_proj))
    refined, _ = refine(model, ev, start, iterations)
    return frame.to_image(crop.to_source(refined))


def refine_pose_views(pose3d: Pose3D, detections: dict[str, Pose2D], rig: Rig,
                      layout: KeypointLayout, models: dict[str, RefinerNet],
                      iterations: int = 10, sigma_px: float = 3.0,
                      aggregate: str = "min"):
    """Refine face/hand projections in all views, re-triangulate each part from
    the two highest-variance non-opposing views, keep body keypoints.

    Returns (refined Pose3D, refined-keypoint mask, corrected 2D per view).
    """
    coords = pose3d.coords.copy()
    refined_mask = np.zeros(layout.total, dtype=bool)
    corrected: dict[str, np.ndarray] = {
        cid: project(pose3d.coords, rig.camera(cid)) for cid in rig.camera_ids}
    for part in ("face", "left_hand", "right_hand"):
        model = models[PART_MODEL[part]]
        idx = layout.part_indices(part)
        per_view: dict[str, np.ndarray] = {}
        for cid in rig.camera_ids:
            det = detections[cid]
            per_view[cid] = refine_part_in_view(
                model, corrected[cid][idx], det.coords[idx],
                det.visibility[idx], iterations, sigma_px)
            corrected[cid][idx] = per_view[cid]
        va, vb = select_views(per_view, rig, aggregate)
        cam_a, cam_b = rig.camera(va), rig.camera(vb)
        for j, k in enumerate(idx):
            point, _ = triangulate([(cam_a, per_view[va][j]),
                                    (cam_b, per_view[vb][j])])
            coords[k] = point
        refined_mask[idx] = True
    return Pose3D(coords, frame=pose3d.frame), refined_mask, corrected


def save_refiner(model: RefinerNet, path: str | Path, *, seed: int,
                 schedule: NoiseSchedule | None = None) -> None:
    torch.save({
        "kind": "refiner",
        "config": asdict(model.config),
        "schedule": asdict(schedule or NoiseSchedule()),
        "state_dict": model.state_dict(),
        "seed": seed,
    }, path)


def load_refiner(path: str | Path) -> RefinerNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "refiner":
        raise ValueError(f"{path} is not a refiner checkpoint")
    cfg = payload["config"]
    cfg["strides"] = tuple(cfg["strides"])
    model = RefinerNet(RefinerConfig(**cfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
