"""The ``forge`` command line: dataset synthesis, pipeline runs, training,
evaluation, and the annotation service."""
from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from .skeleton import KeypointLayout, Pose3D


def _load_layout(path: str | None) -> KeypointLayout:
    return KeypointLayout.from_file(path) if path else KeypointLayout.default()


def _load_rig(path: str | None):
    from .cameras import Rig
    from .synthetic import default_rig

    return Rig.load(path) if path else default_rig()


@click.group()
def main():
    """poseforge: synthetic whole-body dataset construction and benchmark."""


@main.command()
@click.option("--poses", "n_poses", type=int, default=50,
              help="pose-sets per subject")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--rig", "rig_path", type=click.Path(exists=True), default=None)
@click.option("--noise", type=float, default=1.0, help="detector noise sigma, px")
@click.option("--clean", is_flag=True, help="disable noise and occlusions")
def synth(n_poses, seed, out_dir, rig_path, noise, clean):
    """Generate poses, simulate detections, and write the annotation files."""
    from .dataio import ALL_SUBJECTS, BenchmarkSample, visible_bbox, write_dataset
    from .synthetic import (OcclusionConfig, SyntheticPoseGenerator,
                            simulate_detections)

    layout = _load_layout(None)
    rig = _load_rig(rig_path)
    gen = SyntheticPoseGenerator(layout)
    occ = OcclusionConfig(noise_sigma_px=noise)
    if clean:
        occ = occ.disabled()
    samples = []
    pose_seed = seed
    for subject in ALL_SUBJECTS:
        for p in range(n_poses):
            pose = gen.generate(pose_seed)
            views = simulate_detections(pose, rig, layout, occ,
                                        seed=pose_seed + 7_000_000)
            pose_seed += 1
            for cam in rig.cameras:
                det = views[cam.cam_id]
                cam_coords = pose.coords @ cam.rotation.T + cam.translation
                samples.append(BenchmarkSample(
                    sample_id=f"{subject}_p{p:05d}_{cam.cam_id}",
                    subject=subject, camera_id=cam.cam_id,
                    image=f"render://{subject}_p{p:05d}_{cam.cam_id}",
                    bbox=visible_bbox(det), pose2d=det,
                    pose3d=Pose3D(cam_coords, frame="camera")))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rig.save(out / "rig.json")
    manifest = write_dataset(samples, out, seed=seed)
    click.echo(f"wrote {len(samples)} samples to {out} "
               f"(splits: { {k: len(v) for k, v in manifest.splits.items()} })")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="defaults to DATA")
@click.option("--seed", type=int, default=0)
def split(data_dir, out_dir, seed):
    """Re-split existing annotation files into train/test task manifests."""
    from .dataio import read_dataset, write_dataset

    splits = read_dataset(data_dir)
    samples = [s for subset in splits.values() for s in subset]
    manifest = write_dataset(samples, out_dir or data_dir, seed=seed)
    click.echo(json.dumps({k: len(v) for k, v in manifest.splits.items()}))


@main.group()
def train():
    """Train pipeline and benchmark models."""


@train.command("completion")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "ckpt", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=30)
@click.option("--seed", type=int, default=0)
@click.option("--alpha", type=float, default=0.0)
@click.option("--beta", type=float, default=0.01)
def train_completion_cmd(data_dir, ckpt, epochs, seed, alpha, beta):
    """Train the masked auto-encoder on complete training poses."""
    from .completion import (CompletionCorpus, CompletionLossConfig,
                             TrainSchedule, save_checkpoint, train_completion)
    from .dataio import read_dataset

    layout = _load_layout(None)
    rig = _load_rig(_existing(data_dir, "rig.json"))
    train_split = read_dataset(data_dir, "train")["train"]
    by_pose: dict[str, dict] = {}
    for s in train_split:
        by_pose.setdefault(s.pose_key, {})[s.camera_id] = s
    poses, detections = [], []
    for key, views in sorted(by_pose.items()):
        first = views[sorted(views)[0]]
        cam = rig.camera(first.camera_id)
        world = (first.pose3d.coords - cam.translation) @ cam.rotation
        poses.append(Pose3D(world, frame="world"))
        detections.append({cid: v.pose2d for cid, v in views.items()})
    corpus = CompletionCorpus.from_samples(poses, detections, rig)
    model, history = train_completion(
        corpus, layout, loss_config=CompletionLossConfig(alpha=alpha, beta=beta),
        schedule=TrainSchedule(epochs=epochs, seed=seed),
        log=lambda h: click.echo(json.dumps(h)))
    save_checkpoint(model, ckpt, seed=seed)
    click.echo(f"saved {ckpt} (final val {history[-1]['val_masked_mpjpe']:.1f} mm)")


@train.command("refiner")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--part", type=click.Choice(["face", "hand"]), required=True)
@click.option("--out", "ckpt", type=click.Path(), required=True)
@click.option("--crops", type=int, default=400)
@click.option("--epochs", type=int, default=10)
@click.option("--seed", type=int, default=0)
def train_refiner_cmd(data_dir, part, ckpt, crops, epochs, seed):
    """Train a face or hand refiner on synthetic non-occluded crops."""
    from .refinement import (RefinerSchedule, save_refiner, train_refiner)
    from .training_data import refinement_crops_from_dataset

    layout = _load_layout(None)
    rig = _load_rig(_existing(data_dir, "rig.json"))
    crops_list = refinement_crops_from_dataset(data_dir, rig, layout, part,
                                               max_crops=crops, seed=seed)
    model, history = train_refiner(
        crops_list, part, train_schedule=RefinerSchedule(epochs=epochs, seed=seed),
        log=lambda h: click.echo(json.dumps(h)))
    save_refiner(model, ckpt, seed=seed)
    click.echo(f"saved {ckpt} (val {history[-1]['val_error_px']:.2f} px)")


@train.command("lifter")
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--variant", type=click.Choice(["simple", "large"]), default="large")
@click.option("--out", "ckpt", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=40)
@click.option("--i2d/--no-i2d", default=False,
              help="train with the online masking augmentation")
@click.option("--seed", type=int, default=0)
def train_lifter_cmd(data_dir, variant, ckpt, epochs, i2d, seed):
    """Train a 2D->3D lifting baseline on the training split."""
    from .dataio import read_dataset
    from .lifting import (LifterSchedule, MLPLifterConfig, save_lifter,
                          train_lifter)
    from .metrics import I2DMaskProtocol, sample_i2d_masks

    layout = _load_layout(None)
    train_split = read_dataset(data_dir, "train")["train"]
    pairs = [(s.pose2d, s.pose3d) for s in train_split]
    sampler = None
    if i2d:
        protocol = I2DMaskProtocol()
        sampler = lambda n, s: sample_i2d_masks(layout, n, protocol, seed=s)[0]  # noqa: E731
    model = train_lifter(pairs, MLPLifterConfig(variant=variant),
                         LifterSchedule(epochs=epochs, seed=seed),
                         mask_sampler=sampler,
                         log=lambda h: click.echo(json.dumps(h)))
    save_lifter(model, ckpt, seed=seed)
    click.echo(f"saved {ckpt}")


def _existing(data_dir, name) -> str | None:
    p = Path(data_dir) / name
    return str(p) if p.exists() else None


@main.command()
@click.option("--model", "ckpt", type=click.Path(exists=True), required=True)
@click.option("--in", "in_file", type=click.Path(exists=True), required=True,
              help="JSON lines: {\"id\", \"kp3d\": 133x3 with null at missing}")
@click.option("--out", "out_file", type=click.Path(), required=True)
def complete(ckpt, in_file, out_file):
    """Fill missing keypoints of partial 3D poses."""
    from .completion import complete_pose, load_checkpoint

    model = load_checkpoint(ckpt)
    n = 0
    with open(in_file) as src, open(out_file, "w") as dst:
        for line in src:
            if not line.strip():
                continue
            rec = json.loads(line)
            coords = np.array([[np.nan if x is None else float(x) for x in row]
                               for row in rec["kp3d"]])
            known = ~np.isnan(coords).any(axis=1)
            pose, completed = complete_pose(model, coords, known,
                                            frame=rec.get("frame", "world"))
            dst.write(json.dumps({
                "id": rec["id"],
                "kp3d": [[float(v) for v in row] for row in pose.coords],
                "completed": [int(i) + 1 for i in np.where(completed)[0]],
            }, separators=(",", ":")) + "\n")
            n += 1
    click.echo(f"completed {n} poses -> {out_file}")


@main.command()
@click.option("--face", "face_ckpt", type=click.Path(exists=True), required=True)
@click.option("--hand", "hand_ckpt", type=click.Path(exists=True), required=True)
@click.option("--in", "data_dir", type=click.Path(exists=True), required=True,
              help="dataset directory (detections + poses)")
@click.option("--rig", "rig_path", type=click.Path(exists=True), default=None)
@click.option("--split", "split_name", default="train")
@click.option("--limit", type=int, default=10)
@click.option("--out", "out_file", type=click.Path(), required=True)
def refine(face_ckpt, hand_ckpt, data_dir, rig_path, split_name, limit, out_file):
    """Refine face/hand keypoints of dataset poses and re-triangulate."""
    from .dataio import read_dataset
    from .refinement import load_refiner, refine_pose_views

    layout = _load_layout(None)
    rig = _load_rig(rig_path or _existing(data_dir, "rig.json"))
    models = {"face": load_refiner(face_ckpt), "hand": load_refiner(hand_ckpt)}
    split_samples = read_dataset(data_dir, split_name)[split_name]
    by_pose: dict[str, dict] = {}
    for s in split_samples:
        by_pose.setdefault(s.pose_key, {})[s.camera_id] = s
    n = 0
    with open(out_file, "w") as dst:
        for key, views in sorted(by_pose.items()):
            if n >= limit:
                break
            if set(views) != set(rig.camera_ids):
                continue
            first = views[sorted(views)[0]]
            cam = rig.camera(first.camera_id)
            world = Pose3D((first.pose3d.coords - cam.translation) @ cam.rotation)
            detections = {cid: v.pose2d for cid, v in views.items()}
            refined, mask, _ = refine_pose_views(world, detections, rig,
                                                 layout, models)
            dst.write(json.dumps({
                "id": key,
                "kp3d": [[float(v) for v in row] for row in refined.coords],
                "refined": [int(i) + 1 for i in np.where(mask)[0]],
            }, separators=(",", ":")) + "\n")
            n += 1
    click.echo(f"refined {n} poses -> {out_file}")


@main.command()
@click.option("--detections", "data_dir", type=click.Path(exists=True),
              required=True)
@click.option("--rig", "rig_path", type=click.Path(exists=True), default=None)
@click.option("--ckpts", "ckpt_dir", type=click.Path(exists=True), default=None,
              help="directory holding completion.pt / face.pt / hand.pt")
@click.option("--quota", type=int, default=50)
@click.option("--split", "split_name", default="train")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def pipeline(data_dir, rig_path, ckpt_dir, quota, split_name, out_dir):
    """Run triangulate -> complete -> refine -> score -> select."""
    from .completion import load_checkpoint
    from .dataio import read_dataset
    from .pipeline import DetectionSet, PipelineConfig, run_pipeline
    from .refinement import load_refiner

    layout = _load_layout(None)
    rig = _load_rig(rig_path or _existing(data_dir, "rig.json"))
    completion_model = None
    refiners = None
    if ckpt_dir:
        ckpt_dir = Path(ckpt_dir)
        if (ckpt_dir / "completion.pt").exists():
            completion_model = load_checkpoint(ckpt_dir / "completion.pt")
        if (ckpt_dir / "face.pt").exists() and (ckpt_dir / "hand.pt").exists():
            refiners = {"face": load_refiner(ckpt_dir / "face.pt"),
                        "hand": load_refiner(ckpt_dir / "hand.pt")}
    split_samples = read_dataset(data_dir, split_name)[split_name]
    by_pose: dict[str, dict] = {}
    for s in split_samples:
        by_pose.setdefault(s.pose_key, {})[s.camera_id] = s
    sets = [DetectionSet(key, key.split("_")[0],
                         {cid: v.pose2d for cid, v in views.items()})
            for key, views in sorted(by_pose.items())
            if set(views) == set(rig.camera_ids)]
    results, report = run_pipeline(sets, rig, layout, completion_model,
                                   refiners, PipelineConfig(quota_per_subject=quota))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    with open(out / "poses.jsonl", "w") as dst:
        for r in results:
            dst.write(json.dumps({
                "id": r.pose_id, "subject": r.subject,
                "classification": r.classification.value,
                "kp3d": [[float(v) for v in row] for row in r.pose3d.coords],
                "provenance": list(r.provenance),
                "score": None if r.quality is None else r.quality.aggregate,
            }, separators=(",", ":")) + "\n")
    click.echo("counts: " + json.dumps(report.counts))
    click.echo(f"retained {len(report.retained_ids)} pose ids; "
               f"report -> {out / 'report.json'}")


@main.command("eval")
@click.option("--task", type=click.Choice(["lift", "ilift", "rgb"]),
              required=True)
@click.option("--pred", "pred_file", type=click.Path(exists=True), required=True,
              help="JSON lines {\"id\", \"kp3d\": [133x3]}")
@click.option("--labels", "label_dir", type=click.Path(exists=True),
              required=True, help="sealed dataset directory")
@click.option("--report", "report_file", type=click.Path(), required=True)
def eval_cmd(task, pred_file, label_dir, report_file):
    """Score a prediction file against sealed labels."""
    from .benchmark_io import evaluate_prediction_file

    doc = evaluate_prediction_file(task, pred_file, label_dir)
    Path(report_file).write_text(json.dumps(doc, indent=1))
    click.echo(json.dumps(doc["metrics"]))


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--rig", "rig_path", type=click.Path(exists=True), default=None)
@click.option("--port", type=int, default=8400)
@click.option("--host", default="127.0.0.1")
@click.option("--review-size", type=int, default=60)
@click.option("--seed", type=int, default=0)
@click.option("--corrections", "corrections_path", type=click.Path(),
              default=None, help="defaults to DATA/corrections.jsonl")
@click.option("--ui", "ui_dir", type=click.Path(), default=None)
def annotate(data_dir, rig_path, port, host, review_size, seed,
             corrections_path, ui_dir):
    """Serve the cross-check annotation API (and the UI bundle if present)."""
    import uvicorn

    from .service import create_app

    layout = _load_layout(None)
    rig = _load_rig(rig_path or _existing(data_dir, "rig.json"))
    corrections = corrections_path or str(Path(data_dir) / "corrections.jsonl")
    if ui_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = str(bundled) if bundled.is_dir() else None
    app = create_app(data_dir, rig, layout, corrections,
                     review_size=review_size, seed=seed, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
