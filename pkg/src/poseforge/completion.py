"""Transformer masked auto-encoder that fills in missing 3D keypoints.

Keypoints are tokens: 3 coordinates expand to 48 sin/cos features, masked
tokens are replaced by a learned vector, and a shared output layer decodes
every encoder block in a curriculum (early blocks are supervised on the
rigid body keypoints only, the last block on all 133).
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cameras import Rig
from .skeleton import KeypointLayout, Pose3D


def default_curriculum(layout: KeypointLayout) -> tuple[tuple[int, ...], ...]:
    """Nested 1-based supervision sets: classic body, +feet, +face, +hands."""
    body_lo, body_hi = layout.body_range
    face_hi = layout.face_range[1]
    return (
        tuple(range(1, 18)),
        tuple(range(body_lo, body_hi + 1)),
        tuple(range(1, face_hi + 1)),
        tuple(range(1, layout.total + 1)),
    )


# yaw canonicalization priority: mirror pairs that are rarely both masked
# (eyes, ears, shoulders, hips, hand roots), 1-based
DEFAULT_CANON_PAIRS = ((2, 3), (4, 5), (6, 7), (12, 13), (92, 113))


@dataclass(frozen=True)
class CompletionNetConfig:
    num_keypoints: int = 133
    token_feature_dim: int = 48
    model_dim: int = 64
    n_head: int = 1
    blocks: int = 4
    layers_per_block: int = 2
    dim_feedforward: int = 128
    norm_first: bool = True
    curriculum_sets: tuple[tuple[int, ...], ...] = ()
    scale_mm: float = 1500.0
    canonicalize_pairs: tuple[tuple[int, int], ...] = DEFAULT_CANON_PAIRS

    def __post_init__(self):
        if self.token_feature_dim % 6 != 0:
            raise ValueError("token_feature_dim must be 6 * num_frequencies")
        sets = self.curriculum_sets
        if len(sets) != self.blocks:
            raise ValueError("one curriculum set per block")
        prev: set[int] = set()
        for s in sets:
            cur = set(s)
            if not prev < cur and prev != set():
                raise ValueError("curriculum sets must be strictly nested")
            if prev == cur:
                raise ValueError("curriculum sets must be strictly nested")
            prev = cur
        if prev != set(range(1, self.num_keypoints + 1)):
            raise ValueError("last curriculum set must cover all keypoints")
        for l, r in self.canonicalize_pairs:
            if not (1 <= l <= self.num_keypoints and 1 <= r <= self.num_keypoints):
                raise ValueError("canonicalize pair out of range")

    @property
    def num_frequencies(self) -> int:
        return self.token_feature_dim // 6


@dataclass(frozen=True)
class CompletionLossConfig:
    alpha: float = 0.1   # weight of the 2D reprojection term
    beta: float = 0.01   # weight of the bone-length symmetry term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def sincos_frequencies(num: int = 8, scale: float = 1.0) -> np.ndarray:
    """Geometric frequencies pi * 2^k / scale for k = 0..num-1."""
    return np.pi * (2.0 ** np.arange(num)) / scale


def encode_coordinates(coords: np.ndarray, frequencies: np.ndarray) -> np.ndarray:
    """Expand (k, 3) coordinates to (k, 6 * len(frequencies)) sin/cos features.

    Feature order per token: x then y then z, each contributing
    (sin(f0 c), cos(f0 c), sin(f1 c), ...) over the frequency ladder.
    """
    coords = np.asarray(coords, dtype=np.float64)
    freqs = np.asarray(frequencies, dtype=np.float64)
    phases = coords[..., :, None] * freqs  # (k, 3, f)
    feats = np.stack([np.sin(phases), np.cos(phases)], axis=-1)  # (k, 3, f, 2)
    return feats.reshape(*coords.shape[:-1], 3 * len(freqs) * 2)


def _encode_torch(coords: torch.Tensor, freqs: torch.Tensor) -> torch.Tensor:
    phases = coords.unsqueeze(-1) * freqs
    feats = torch.stack([torch.sin(phases), torch.cos(phases)], dim=-1)
    return feats.reshape(*coords.shape[:-1], -1)


def face_half_blocks(layout: KeypointLayout) -> list[np.ndarray]:
    left, right = layout.face_halves()
    return [left, right]


def mask_blocks(layout: KeypointLayout) -> list[np.ndarray]:
    """The 5 block-mask candidates: body, left hand, right hand, face halves."""
    left_face, right_face = layout.face_halves()
    return [layout.part_indices("body"), layout.part_indices("left_hand"),
            layout.part_indices("right_hand"), left_face, right_face]


def sample_training_masks(layout: KeypointLayout, n: int, seed: int,
                          block_prob: float = 0.5,
                          keypoint_rate: float = 0.15) -> np.ndarray:
    """Draw n training masks (True = masked).

    With probability ``1 - block_prob`` each keypoint is masked independently
    at ``keypoint_rate``; otherwise one of the 5 blocks (body, left hand,
    right hand, left/right half-face) is masked, chosen uniformly.
    """
    rng = np.random.default_rng(seed)
    blocks = mask_blocks(layout)
    masks = np.zeros((n, layout.total), dtype=bool)
    use_block = rng.random(n) < block_prob
    per_kp = rng.random((n, layout.total)) < keypoint_rate
    choice = rng.integers(0, len(blocks), size=n)
    masks[~use_block] = per_kp[~use_block]
    for b, idx in enumerate(blocks):
        rows = np.where(use_block & (choice == b))[0]
        masks[np.ix_(rows, idx)] = True
    full = masks.all(axis=1)
    if full.any():  # vanishingly rare keypoint-wise draw; keep patterns trainable
        masks[full] = False
        masks[full, : layout.total // 2] = True
    return masks


def sample_training_mask(layout: KeypointLayout, seed: int, **kw) -> np.ndarray:
    return sample_training_masks(layout, 1, seed, **kw)[0]


class CompletionNet(nn.Module):
    """Masked auto-encoder over keypoint tokens with curriculum decoding.

    Inputs are centered on the visible-keypoint centroid and yaw-aligned via
    the first canonicalization pair with both sides visible, so the encoder
    never has to absorb global translation or orientation; predictions are
    mapped back before the pass-through substitution.
    """

    def __init__(self, config: CompletionNetConfig):
        super().__init__()
        self.config = config
        k = config.num_keypoints
        freqs = sincos_frequencies(config.num_frequencies)  # applied to coords/scale
        self.register_buffer("frequencies", torch.tensor(freqs, dtype=torch.float32))
        self.mask_token = nn.Parameter(torch.zeros(config.token_feature_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.input_proj = nn.Linear(config.token_feature_dim, config.model_dim)
        self.pos_embed = nn.Parameter(torch.zeros(k, config.model_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        layer = lambda: nn.TransformerEncoderLayer(  # noqa: E731
            d_model=config.model_dim, nhead=config.n_head,
            dim_feedforward=config.dim_feedforward, batch_first=True,
            dropout=0.0, norm_first=config.norm_first)
        self.encoder_blocks = nn.ModuleList(
            nn.ModuleList(layer() for _ in range(config.layers_per_block))
            for _ in range(config.blocks))
        self.head = nn.Linear(config.model_dim, 3)
        # zero head: the untrained net predicts the visible centroid, so
        # training starts from the sane constant baseline
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.curriculum = [np.asarray(s, dtype=int) - 1 for s in config.curriculum_sets]

    def _canonical_rotation(self, coords: torch.Tensor,
                            known: torch.Tensor) -> torch.Tensor:
        """Per-sample z rotation aligning the first visible mirror pair with
        the x axis; identity when no pair is fully visible."""
        b = coords.shape[0]
        theta = coords.new_zeros(b)
        chosen = torch.zeros(b, dtype=torch.bool)
        for l1, r1 in self.config.canonicalize_pairs:
            ok = known[:, l1 - 1] & known[:, r1 - 1] & ~chosen
            if ok.any():
                d = coords[:, l1 - 1] - coords[:, r1 - 1]
                theta = torch.where(ok, torch.atan2(d[:, 1], d[:, 0]), theta)
                chosen |= ok
        c, s = torch.cos(-theta), torch.sin(-theta)
        R = coords.new_zeros(b, 3, 3)
        R[:, 0, 0] = c
        R[:, 0, 1] = -s
        R[:, 1, 0] = s
        R[:, 1, 1] = c
        R[:, 2, 2] = 1.0
        return R

    def forward(self, coords_mm: torch.Tensor,
                mask: torch.Tensor) -> list[torch.Tensor]:
        """coords_mm (b, k, 3), mask (b, k) True = unknown.

        Returns one full pose per block; unmasked inputs pass through
        verbatim, predictions fill only masked positions.
        """
        if mask.all(dim=1).any():
            raise ValueError("a pose with every keypoint masked is not completable")
        coords_mm = coords_mm.to(self.pos_embed.dtype)
        known2 = ~mask
        known = known2.unsqueeze(-1)
        clean = torch.where(known, coords_mm, torch.zeros_like(coords_mm))
        offset = clean.sum(dim=1, keepdim=True) / known.sum(dim=1, keepdim=True)
        centered = clean - offset
        R = self._canonical_rotation(centered, known2)
        x = torch.bmm(centered, R.transpose(1, 2)) / self.config.scale_mm
        x = torch.where(known, x, torch.zeros_like(x))
        feats = _encode_torch(x, self.frequencies)
        feats = torch.where(known, feats, self.mask_token.expand_as(feats))
        h = self.input_proj(feats) + self.pos_embed
        outputs = []
        for block in self.encoder_blocks:
            for enc_layer in block:
                h = enc_layer(h)
            pred = torch.bmm(self.head(h), R) * self.config.scale_mm + offset
            outputs.append(torch.where(known, coords_mm, pred))
        return outputs


@dataclass(frozen=True)
class ViewObservations:
    """Per-view 2D evidence for the reprojection loss, shared rig across batch."""

    cameras: list  # CameraModel
    uv: torch.Tensor         # (b, v, k, 2) pixels
    available: torch.Tensor  # (b, v, k) bool


def _project_torch(pred: torch.Tensor, camera) -> torch.Tensor:
    R = torch.as_tensor(camera.rotation, dtype=pred.dtype)
    t = torch.as_tensor(camera.translation, dtype=pred.dtype)
    K = torch.as_tensor(camera.intrinsics, dtype=pred.dtype)
    cam = pred @ R.T + t
    uvw = cam @ K.T
    return uvw[..., :2] / uvw[..., 2:3]


def completion_loss(outputs: list[torch.Tensor], target_mm: torch.Tensor,
                    mask: torch.Tensor, curriculum: list[np.ndarray],
                    config: CompletionLossConfig,
                    sym_bone_pairs: list | None = None,
                    observations: ViewObservations | None = None) -> dict:
    """Curriculum L1 losses: sum over blocks of (3D + alpha * 2D) plus
    beta * bone-length symmetry on the final block.

    Each block supervises only its curriculum keypoints that are masked;
    a block with no supervised keypoint contributes zero. The 2D term
    compares projections against observed detections where available.
    """
    total = outputs[0].new_zeros(())
    parts: dict[str, float | list] = {"l3d": [], "l2d": []}
    for out, idx in zip(outputs, curriculum):
        sup = mask[:, idx]
        diff = (out[:, idx] - target_mm[:, idx]).abs()
        n = sup.sum()
        # mean over supervised keypoints of the per-keypoint L1 norm
        l3d = (diff * sup.unsqueeze(-1)).sum() / n if n > 0 \
            else out.new_zeros(())
        parts["l3d"].append(float(l3d.detach()))
        total = total + l3d
        if observations is not None and config.alpha > 0:
            l2d = out.new_zeros(())
            count = 0
            for v, camera in enumerate(observations.cameras):
                avail = observations.available[:, v][:, idx] & sup
                if not avail.any():
                    continue
                proj = _project_torch(out[:, idx], camera)
                d = (proj - observations.uv[:, v][:, idx]).abs()
                l2d = l2d + (d * avail.unsqueeze(-1)).sum()
                count += int(avail.sum())
            l2d = l2d / count if count else l2d
            parts["l2d"].append(float(l2d.detach()))
            total = total + config.alpha * l2d
    lsym = outputs[-1].new_zeros(())
    if sym_bone_pairs and config.beta > 0:
        final = outputs[-1]
        left = np.array([p[0] for p in sym_bone_pairs])
        right = np.array([p[1] for p in sym_bone_pairs])
        ll = (final[:, left[:, 0]] - final[:, left[:, 1]]).norm(dim=-1)
        lr = (final[:, right[:, 0]] - final[:, right[:, 1]]).norm(dim=-1)
        lsym = (ll - lr).abs().sum(dim=-1).mean()
        total = total + config.beta * lsym
    parts["lsym"] = float(lsym.detach())
    parts["total"] = float(total.detach())
    return {"loss": total, "components": parts}


@dataclass
class TrainSchedule:
    epochs: int = 24
    batch_size: int = 48
    lr: float = 2.5e-3
    warmup_epochs: int = 2
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 0  # 0 disables early stopping
    max_seconds: float | None = None  # wall-clock stop, checked per epoch


@dataclass(frozen=True)
class CompletionCorpus:
    """Complete 3D poses with their per-view partial detections."""

    poses: np.ndarray  # (n, k, 3) mm
    rig: Rig | None = None
    uv: np.ndarray | None = None         # (n, v, k, 2)
    available: np.ndarray | None = None  # (n, v, k)

    @classmethod
    def from_samples(cls, poses: list[Pose3D], detections: list[dict] | None,
                     rig: Rig | None) -> "CompletionCorpus":
        arr = np.stack([p.coords for p in poses])
        if detections is None or rig is None:
            return cls(arr)
        cam_ids = [c.cam_id for c in rig.cameras]
        uv = np.stack([[d[cid].coords for cid in cam_ids] for d in detections])
        avail = np.stack([[d[cid].visibility for cid in cam_ids] for d in detections])
        return cls(arr, rig, uv, avail)


def masked_mpjpe(model: CompletionNet, poses: np.ndarray, masks: np.ndarray) -> float:
    """Mean distance (mm) between completed and true keypoints at masked slots."""
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(poses, dtype=torch.float32),
                    torch.as_tensor(masks))[-1].numpy()
    err = np.linalg.norm(out - poses, axis=-1)
    return float(err[masks].mean())


def train_completion(corpus: CompletionCorpus, layout: KeypointLayout,
                     net_config: CompletionNetConfig | None = None,
                     loss_config: CompletionLossConfig | None = None,
                     schedule: TrainSchedule | None = None,
                     log=None) -> tuple[CompletionNet, list[dict]]:
    """Masked auto-encoder training on complete poses; deterministic per seed."""
    net_config = net_config or CompletionNetConfig(
        curriculum_sets=default_curriculum(layout))
    loss_config = loss_config or CompletionLossConfig()
    schedule = schedule or TrainSchedule()

    torch.manual_seed(schedule.seed)
    model = CompletionNet(net_config)
    sym_pairs = layout.mirrored_bone_pairs()
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    warm = max(schedule.warmup_epochs, 0)

    def lr_factor(epoch: int) -> float:
        if epoch < warm:
            return (epoch + 1) / (warm + 1)
        span = max(schedule.epochs - warm, 1)
        return 0.5 * (1.0 + np.cos(np.pi * (epoch - warm) / span))

    cos = torch.optim.lr_scheduler.LambdaLR(opt, lr_factor)

    n = len(corpus.poses)
    n_val = max(1, int(n * schedule.val_fraction))
    order = np.random.default_rng(schedule.seed).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    poses_t = torch.as_tensor(corpus.poses, dtype=torch.float32)
    obs_uv = obs_avail = None
    if corpus.uv is not None:
        obs_uv = torch.as_tensor(corpus.uv, dtype=torch.float32)
        obs_avail = torch.as_tensor(corpus.available)

    val_masks = sample_training_masks(layout, n_val, seed=schedule.seed + 7919)
    history: list[dict] = []
    best = np.inf
    stall = 0
    started = time.perf_counter()
    rng = np.random.default_rng(schedule.seed + 1)
    for epoch in range(schedule.epochs):
        model.train()
        perm = rng.permutation(train_idx)
        masks = sample_training_masks(layout, len(perm),
                                      seed=schedule.seed + 100 + epoch)
        ep_loss = 0.0
        batches = 0
        for lo in range(0, len(perm), schedule.batch_size):
            sel = perm[lo:lo + schedule.batch_size]
            batch = poses_t[sel]
            bmask = torch.as_tensor(masks[lo:lo + len(sel)])
            obs = None
            if obs_uv is not None:
                obs = ViewObservations(list(corpus.rig.cameras),
                                       obs_uv[sel], obs_avail[sel])
            out = model(batch, bmask)
            res = completion_loss(out, batch, bmask, model.curriculum,
                                  loss_config, sym_pairs, obs)
            loss = res["loss"]
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"completion training diverged at epoch {epoch}, batch "
                    f"{batches}: loss={loss.item()} components={res['components']}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep_loss += float(loss.detach())
            batches += 1
        cos.step()
        val = masked_mpjpe(model, corpus.poses[val_idx], val_masks)
        history.append({"epoch": epoch, "train_loss": ep_loss / max(batches, 1),
                        "val_masked_mpjpe": val})
        if log:
            log(history[-1])
        if schedule.patience:
            if val < best - 1e-6:
                best, stall = val, 0
            else:
                stall += 1
                if stall >= schedule.patience:
                    break
        if schedule.max_seconds is not None \
                and time.perf_counter() - started > schedule.max_seconds:
            break
    return model, history


def complete_pose(model: CompletionNet, coords: np.ndarray,
                  known: np.ndarray, frame: str = "world") -> tuple[Pose3D, np.ndarray]:
    """Fill unknown keypoints; known coordinates pass through bit-exactly.

    ``coords`` may hold NaN (or anything) at unknown slots. Returns the
    completed pose and the mask of predicted keypoints.
    """
    known = np.asarray(known, dtype=bool)
    clean = np.where(known[:, None], coords, 0.0)
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(clean, dtype=torch.float32)[None],
                    torch.as_tensor(~known)[None])[-1][0].numpy()
    result = np.where(known[:, None], coords, out.astype(np.float64))
    return Pose3D(result, frame=frame), ~known


def mean_pose_predictor(train_poses: np.ndarray) -> np.ndarray:
    """Per-keypoint training mean: the completion baseline oracle."""
    return np.asarray(train_poses).mean(axis=0)


def save_checkpoint(model: CompletionNet, path: str | Path, *, seed: int,
                    layout_version: int = 1, extra: dict | None = None) -> None:
    payload = {
        "kind": "completion",
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "layout_version": layout_version,
        "seed": seed,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> CompletionNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "completion":
        raise ValueError(f"{path} is not a completion checkpoint")
    cfg = payload["config"]
    cfg["curriculum_sets"] = tuple(tuple(s) for s in cfg["curriculum_sets"])
    model = CompletionNet(CompletionNetConfig(**cfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
