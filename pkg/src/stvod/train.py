"""End-to-end orchestration: model builders, loss assembly, the two-stage
training loop (single-frame pretraining, then joint temporal training with
the spatial weights warm-started), deterministic evaluation, and the
composite gradient-check suite.

Training is single-process, one clip (or frame) per step, and fully seeded:
a fixed (config, seed, dataset) triple reproduces the loss curve, the logs,
and the final metrics bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import attention as att
from .autodiff import Parameter, backward, grad_check
from .boxes import box_cs_to_corners
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig, config_from_flat
from .matching import LossWeights, detection_loss, focal_loss, hungarian, pairwise_cost
from .metrics import EvalResult, evaluate_map
from .optim import AdamW
from .spatial import SpatialDetector, detections_from_arrays
from .synthetic import ClipSample, GenConfig, generate_dataset, load_dataset, write_ppm
from .temporal import VideoDetector


def build_spatial(cfg: RunConfig, rng: np.random.Generator) -> SpatialDetector:
    m = cfg.model
    return SpatialDetector(
        m.dim, m.heads, m.points, m.queries, m.enc_layers, m.dec_layers, m.classes, rng
    )


def build_video(cfg: RunConfig, rng: np.random.Generator) -> VideoDetector:
    m = cfg.model
    return VideoDetector(
        m.dim,
        m.heads,
        m.points,
        m.queries,
        m.enc_layers,
        m.dec_layers,
        m.classes,
        m.ref_frames,
        m.tdte_layers,
        m.tqe_schedule,
        m.tdtd_layers,
        rng,
        use_frame_embeddings=m.frame_embeddings,
    )


def _gt_arrays(boxes) -> tuple[np.ndarray, np.ndarray]:
    classes = np.array([b.class_id for b in boxes], dtype=np.intp)
    coords = np.array([list(b.box) for b in boxes], dtype=np.float64).reshape(-1, 4)
    return classes, coords


def _weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(cls=cfg.loss.cls, l1=cfg.loss.l1, giou=cfg.loss.giou)


def spatial_frame_loss(model: SpatialDetector, pixels, gts, cfg: RunConfig):
    """Detection loss for one frame, summed over decoder layers."""
    out = model.forward_frame(pixels)
    classes, coords = _gt_arrays(gts)
    total = None
    diag = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
    for logits, boxes in out.detections:
        node, info = detection_loss(
            logits, boxes, classes, coords, _weights(cfg),
            cfg.loss.focal_alpha, cfg.loss.focal_gamma,
        )
        total = node if total is None else ad.add(total, node)
        for key in diag:
            diag[key] += info[key]
    diag["total"] = float(total.value)
    return total, diag


def clip_loss(model: VideoDetector, clip: ClipSample, cfg: RunConfig, freeze_spatial=False):
    """Full training objective for one clip.

    Spatial detection losses run on every frame and decoder layer, temporal
    detection losses on every temporal-decoder layer against the current
    frame, and the scoring head gets a focal loss whose targets reuse the
    final spatial layer's matching on each reference frame.
    """
    frames = clip.frames[-model.num_frames :]
    annotations = clip.annotations[-model.num_frames :]
    out = model.forward_clip(frames)
    weights = _weights(cfg)
    alpha, gamma = cfg.loss.focal_alpha, cfg.loss.focal_gamma
    total = None
    diag = {"spatial_cls": 0.0, "spatial_l1": 0.0, "spatial_giou": 0.0,
            "temporal_cls": 0.0, "temporal_l1": 0.0, "temporal_giou": 0.0,
            "scoring": 0.0}
    final_assignments = []

    for t, spatial_out in enumerate(out.spatial):
        classes, coords = _gt_arrays(annotations[t])
        assignment = None
        for li, (logits, boxes) in enumerate(spatial_out.detections):
            if freeze_spatial:
                if classes.size and li == len(spatial_out.detections) - 1:
                    cost = pairwise_cost(
                        logits.value, boxes.value, classes, coords, weights, alpha, gamma
                    )
                    assignment = hungarian(cost)
                continue
            node, info = detection_loss(
                logits, boxes, classes, coords, weights, alpha, gamma
            )
            total = node if total is None else ad.add(total, node)
            diag["spatial_cls"] += info["cls"]
            diag["spatial_l1"] += info["l1"]
            diag["spatial_giou"] += info["giou"]
            assignment = info["assignment"]
        final_assignments.append((assignment or [], annotations[t]))

    classes, coords = _gt_arrays(annotations[-1])
    for logits, boxes in out.detections:
        node, info = detection_loss(logits, boxes, classes, coords, weights, alpha, gamma)
        node = ad.scale(node, cfg.loss.temporal_weight)
        total = node if total is None else ad.add(total, node)
        diag["temporal_cls"] += info["cls"]
        diag["temporal_l1"] += info["l1"]
        diag["temporal_giou"] += info["giou"]

    if out.score_logits is not None and cfg.loss.scoring_weight > 0:
        n = model.spatial.num_queries
        targets = np.full(out.score_logits.value.shape[0], -1, dtype=np.intp)
        matched = 0
        for t, (assignment, gts) in enumerate(final_assignments[:-1]):
            for pred_i, gt_j in assignment:
                targets[t * n + pred_i] = gts[gt_j].class_id
                matched += 1
        score_node = focal_loss(
            out.score_logits, targets, alpha, gamma, normalizer=max(1.0, float(matched))
        )
        score_node = ad.scale(score_node, cfg.loss.scoring_weight)
        total = score_node if total is None else ad.add(total, score_node)
        diag["scoring"] = float(score_node.value)

    diag["total"] = float(total.value)
    return total, diag, out


# ---------------------------------------------------------------------------
# dataset plumbing


def dataset_paths(data_dir: Path, split: str) -> Path:
    """Accept either a dataset directory itself or a parent with
    train/ and val/ splits."""
    data_dir = Path(data_dir)
    if (data_dir / "clips").is_dir():
        return data_dir
    if (data_dir / split / "clips").is_dir():
        return data_dir / split
    raise FileNotFoundError(f"{data_dir}: no clips/ (or {split}/clips/) directory")


def generate_datasets(cfg: RunConfig, out_dir: Path) -> dict[str, Path]:
    """Write train/ and val/ datasets from disjoint seed ranges."""
    out_dir = Path(out_dir)
    base = cfg.seed * 1_000_000
    gen_train = GenConfig(
        frame_size=cfg.data.frame_size,
        frames_per_clip=cfg.data.frames_per_clip,
        min_objects=cfg.data.min_objects,
        max_objects=cfg.data.max_objects,
        degradation_prob=cfg.data.degradation_prob,
    )
    gen_val = GenConfig(
        frame_size=cfg.data.frame_size,
        frames_per_clip=cfg.data.frames_per_clip,
        min_objects=cfg.data.min_objects,
        max_objects=cfg.data.max_objects,
        degradation_prob=cfg.data.val_degradation_prob,
    )
    generate_dataset(gen_train, out_dir / "train", cfg.data.train_clips, base)
    generate_dataset(gen_val, out_dir / "val", cfg.data.val_clips, base + 500_000)
    return {"train": out_dir / "train", "val": out_dir / "val"}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    log_path: Path
    spatial_checkpoint: Path | None
    temporal_checkpoint: Path | None
    steps: dict[str, int]


def _lr_scale(step: int, total: int, cfg: RunConfig) -> float:
    return cfg.optim.decay_factor if step >= cfg.optim.decay_fraction * total else 1.0


def _log_line(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def train_spatial_stage(
    model: SpatialDetector,
    clips: list[ClipSample],
    cfg: RunConfig,
    log_fh,
    steps: int | None = None,
    eval_hook=None,
) -> None:
    """Stage 1: train the per-frame detector on individual frames."""
    samples = [
        (ci, fi) for ci, clip in enumerate(clips) for fi in range(len(clip.frames))
    ]
    rng = np.random.default_rng(cfg.seed + 1)
    optimizer = AdamW(
        model.parameters(), cfg.optim.lr, cfg.optim.backbone_lr, cfg.optim.weight_decay
    )
    total_steps = steps if steps is not None else cfg.optim.spatial_steps
    for step in range(total_steps):
        optimizer.lr_scale = _lr_scale(step, total_steps, cfg)
        ci, fi = samples[rng.integers(len(samples))]
        loss, diag = spatial_frame_loss(
            model, clips[ci].frames[fi], clips[ci].annotations[fi], cfg
        )
        backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        if step % cfg.optim.log_every == 0 or step == total_steps - 1:
            _log_line(log_fh, {"stage": "spatial", "step": step,
                               "lr_scale": optimizer.lr_scale, **diag})
        if eval_hook is not None and eval_hook(step, model):
            break


def train_temporal_stage(
    model: VideoDetector,
    clips: list[ClipSample],
    cfg: RunConfig,
    log_fh,
    steps: int | None = None,
    freeze_spatial: bool = False,
    eval_hook=None,
) -> None:
    """Stage 2: train the full temporal model on clips."""
    rng = np.random.default_rng(cfg.seed + 2)
    params = model.temporal_parameters() if freeze_spatial else model.parameters()
    optimizer = AdamW(params, cfg.optim.lr, cfg.optim.backbone_lr, cfg.optim.weight_decay)
    total_steps = steps if steps is not None else cfg.optim.temporal_steps
    for step in range(total_steps):
        optimizer.lr_scale = _lr_scale(step, total_steps, cfg)
        clip = clips[rng.integers(len(clips))]
        loss, diag, _ = clip_loss(model, clip, cfg, freeze_spatial=freeze_spatial)
        backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        if step % cfg.optim.log_every == 0 or step == total_steps - 1:
            _log_line(log_fh, {"stage": "temporal", "step": step,
                               "lr_scale": optimizer.lr_scale, **diag})
        if eval_hook is not None and eval_hook(step, model):
            break


def train(
    cfg: RunConfig,
    data_dir: Path,
    out_dir: Path,
    stage: str = "both",
    freeze_spatial: bool = False,
    init_checkpoint: Path | None = None,
) -> TrainResult:
    if stage not in ("spatial", "temporal", "both"):
        raise ValueError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = load_dataset(dataset_paths(data_dir, "train"))
    if not clips:
        raise FileNotFoundError(f"{data_dir}: dataset is empty")
    for clip in clips:
        if len(clip.frames) < cfg.model.ref_frames + 1:
            raise ValueError(
                f"clip with {len(clip.frames)} frames cannot serve "
                f"{cfg.model.ref_frames} reference frames"
            )

    log_path = out_dir / "train_log.jsonl"
    spatial_ckpt = out_dir / "checkpoint_spatial"
    temporal_ckpt = out_dir / "checkpoint_temporal"
    steps_run = {"spatial": 0, "temporal": 0}
    model_hash = cfg.model_hash()

    with open(log_path, "w") as log_fh:
        video = build_video(cfg, np.random.default_rng(cfg.seed))
        if stage in ("spatial", "both"):
            train_spatial_stage(video.spatial, clips, cfg, log_fh)
            steps_run["spatial"] = cfg.optim.spatial_steps
            save_checkpoint(
                spatial_ckpt, video.spatial.parameters(), "spatial",
                cfg.optim.spatial_steps, model_hash, cfg.to_flat(),
            )
        if stage == "temporal":
            if init_checkpoint is None:
                raise ValueError("stage=temporal needs --init with a spatial checkpoint")
            load_checkpoint(Path(init_checkpoint), video.spatial.parameters(), model_hash)
        if stage in ("temporal", "both"):
            train_temporal_stage(video, clips, cfg, log_fh, freeze_spatial=freeze_spatial)
            steps_run["temporal"] = cfg.optim.temporal_steps
            save_checkpoint(
                temporal_ckpt, video.parameters(), "temporal",
                cfg.optim.temporal_steps, model_hash, cfg.to_flat(),
            )
    return TrainResult(
        log_path=log_path,
        spatial_checkpoint=spatial_ckpt if stage in ("spatial", "both") else None,
        temporal_checkpoint=temporal_ckpt if stage in ("temporal", "both") else None,
        steps=steps_run,
    )


# ---------------------------------------------------------------------------
# evaluation


def detect_current_frame(model, clip: ClipSample):
    """Run either detector kind on a clip's current frame."""
    if isinstance(model, VideoDetector):
        out = model.forward_clip(clip.frames[-model.num_frames :])
        logits, boxes = out.detections[-1]
    else:
        out = model.forward_frame(clip.frames[-1])
        logits, boxes = out.detections[-1]
    return detections_from_arrays(logits.value, boxes.value)


CLASS_COLORS = np.array(
    [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.3, 0.5, 1.0], [1.0, 1.0, 0.2]]
)


def draw_detections(frame: np.ndarray, detections) -> np.ndarray:
    """Copy of the frame with 1-pixel box outlines, colored by class."""
    out = frame.copy()
    h, w = frame.shape[1:]
    for det in detections:
        color = CLASS_COLORS[det.class_id % len(CLASS_COLORS)]
        x1, y1, x2, y2 = box_cs_to_corners(np.array(list(det.box)))
        xa, xb = int(np.clip(x1 * w, 0, w - 1)), int(np.clip(x2 * w, 0, w - 1))
        ya, yb = int(np.clip(y1 * h, 0, h - 1)), int(np.clip(y2 * h, 0, h - 1))
        out[:, ya, xa : xb + 1] = color[:, None]
        out[:, yb, xa : xb + 1] = color[:, None]
        out[:, ya : yb + 1, xa] = color[:, None]
        out[:, ya : yb + 1, xb] = color[:, None]
    return out


def evaluate_model(model, clips: list[ClipSample], overlay_dir: Path | None = None):
    """mAP over the current frames of a clip list; returns the result plus
    one JSONL-ready record per emitted detection."""
    detections_per_frame = []
    gts_per_frame = []
    records = []
    for clip_i, clip in enumerate(clips):
        dets = detect_current_frame(model, clip)
        detections_per_frame.append(dets)
        gts_per_frame.append(clip.annotations[-1])
        for det in dets:
            records.append(
                {
                    "clip": clip_i,
                    "frame": len(clip.frames) - 1,
                    "query": det.query_id,
                    "class_id": det.class_id,
                    "score": det.score,
                    "cx": det.box.cx,
                    "cy": det.box.cy,
                    "w": det.box.w,
                    "h": det.box.h,
                }
            )
        if overlay_dir is not None:
            overlay_dir = Path(overlay_dir)
            overlay_dir.mkdir(parents=True, exist_ok=True)
            write_ppm(
                overlay_dir / f"clip_{clip_i:04d}.ppm",
                draw_detections(clip.frames[-1], dets),
            )
    result = evaluate_map(detections_per_frame, gts_per_frame)
    return result, records


def evaluate_checkpoint(
    checkpoint_dir: Path,
    data_dir: Path,
    out_dir: Path | None = None,
    overlays: bool = False,
) -> EvalResult:
    """Rebuild the checkpointed model from its stored config and score it."""
    manifest = read_manifest(checkpoint_dir)
    if "config" not in manifest:
        raise ValueError(f"{checkpoint_dir}: manifest carries no config snapshot")
    cfg = config_from_flat(manifest["config"])
    rng = np.random.default_rng(cfg.seed)
    if manifest["kind"] == "temporal":
        model = build_video(cfg, rng)
        params = model.parameters()
    else:
        model = build_spatial(cfg, rng)
        params = model.parameters()
    load_checkpoint(checkpoint_dir, params, cfg.model_hash())
    clips = load_dataset(dataset_paths(data_dir, "val"))
    overlay_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if overlays:
            overlay_dir = out_dir / "overlays"
    result, records = evaluate_model(model, clips, overlay_dir)
    if out_dir is not None:
        with open(out_dir / "detections.jsonl", "w") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        with open(out_dir / "eval.json", "w") as fh:
            json.dump(result.to_dict(), fh, indent=1)
    return result


# ---------------------------------------------------------------------------
# composite gradient checks


def gradcheck_suite(seed: int = 0, max_entries: int = 8):
    """Finite-difference checks for each attention form and composite at toy
    shapes. Returns [(name, GradCheckReport)]."""
    results = []
    rng = np.random.default_rng(seed)

    def check(name, f, params, entries=max_entries):
        report = grad_check(f, params, max_entries=entries, rng=np.random.default_rng(seed))
        results.append((name, report))

    dim, heads, points = 8, 2, 2

    mha = att.AttentionParams("mha", dim, heads, rng)
    q_in = Parameter("input.queries", rng.uniform(-1, 1, (3, dim)))
    k_in = Parameter("input.keys", rng.uniform(-1, 1, (4, dim)))
    probe = ad.constant(rng.normal(size=(3, dim)))
    check(
        "multi_head_attention",
        lambda: ad.sum_all(ad.mul(att.multi_head_attention(q_in.node, k_in.node, mha), probe)),
        [q_in, k_in, *mha.parameters()],
    )

    fmap_p = Parameter("input.fmap", rng.uniform(-1, 1, (dim, 5, 6)))
    refs_p = Parameter("input.refs", rng.uniform(0.23, 0.77, (3, 2)))
    dfp = att.DeformableParams("deform", dim, heads, points, rng)
    dfp.samp_w.value = 0.05 * rng.normal(size=dfp.samp_w.value.shape)
    dfp.samp_b.value = dfp.samp_b.value + 0.13  # keep samples off lattice lines
    dq = Parameter("input.dq", rng.uniform(-1, 1, (3, dim)))
    check(
        "deformable_attention",
        lambda: ad.sum_all(
            ad.mul(att.deformable_attention(dq.node, refs_p.node, fmap_p.node, dfp), probe)
        ),
        [dq, refs_p, fmap_p, *dfp.parameters()],
    )

    maps = [Parameter(f"input.map{l}", rng.uniform(-1, 1, (dim, 4, 4))) for l in range(3)]
    tdp = att.DeformableParams("tdeform", dim, heads, points, rng, frames=3)
    tdp.samp_w.value = 0.05 * rng.normal(size=tdp.samp_w.value.shape)
    tdp.samp_b.value = tdp.samp_b.value + 0.17
    check(
        "temporal_deformable_attention",
        lambda: ad.sum_all(
            ad.mul(
                att.temporal_deformable_attention(
                    dq.node, refs_p.node, [m.node for m in maps], tdp
                ),
                probe,
            )
        ),
        [dq, refs_p, *maps, *tdp.parameters()],
    )

    ffn = att.FFNParams("ffn", dim, 2 * dim, rng)
    x_in = Parameter("input.x", rng.uniform(-1, 1, (3, dim)))
    check(
        "transformer_ffn",
        lambda: ad.sum_all(ad.mul(att.transformer_ffn(x_in.node, ffn), probe)),
        [x_in, *ffn.parameters()],
    )

    def jitter_sampling(parameters, jitter_rng):
        # fresh models sample exactly on the bilinear lattice (integer ring
        # offsets from integer grid references); nudge them off the kinks
        for p in parameters:
            if p.name.endswith(".samp_b"):
                p.value = p.value + jitter_rng.uniform(0.04, 0.23, size=p.value.shape)
            if p.name.endswith(".samp_w"):
                p.value = 0.03 * jitter_rng.normal(size=p.value.shape)

    spatial = SpatialDetector(16, 2, 2, 3, 1, 1, 2, np.random.default_rng(seed + 1))
    jitter_sampling(spatial.parameters(), np.random.default_rng(seed + 11))
    pixels = np.random.default_rng(seed + 2).uniform(0.1, 0.9, (3, 32, 32))
    probe_cls = ad.constant(np.random.default_rng(seed + 3).normal(size=(3, 2)))
    probe_box = ad.constant(np.random.default_rng(seed + 4).normal(size=(3, 4)))

    def spatial_probe():
        out = spatial.forward_frame(pixels)
        logits, boxes = out.detections[-1]
        return ad.add(
            ad.sum_all(ad.mul(logits, probe_cls)), ad.sum_all(ad.mul(boxes, probe_box))
        )

    check("spatial_detector", spatial_probe, spatial.parameters(), entries=4)

    video = VideoDetector(
        8, 2, 2, 3, 1, 1, 2, ref_frames=2, tdte_layers=1, tqe_schedule=(2,),
        tdtd_layers=1, rng=np.random.default_rng(seed + 5),
    )
    jitter_sampling(video.parameters(), np.random.default_rng(seed + 12))
    clip_frames = [
        np.random.default_rng(seed + 6 + t).uniform(0.1, 0.9, (3, 16, 16)) for t in range(3)
    ]

    def temporal_probe():
        out = video.forward_clip(clip_frames)
        logits, boxes = out.detections[-1]
        return ad.add(
            ad.sum_all(ad.mul(logits, probe_cls)), ad.sum_all(ad.mul(boxes, probe_box))
        )

    check("temporal_tqe_tdtd", temporal_probe, video.temporal_parameters(), entries=4)

    logits_p = Parameter("input.logits", rng.uniform(-2, 2, (4, 3)))
    boxes_p = Parameter("input.boxes", rng.uniform(0.25, 0.7, (4, 4)))
    gt_classes = np.array([0, 2])
    gt_boxes = rng.uniform(0.3, 0.6, (2, 4))
    weights = LossWeights()
    frozen = hungarian(
        pairwise_cost(logits_p.value, boxes_p.value, gt_classes, gt_boxes, weights)
    )
    check(
        "detection_loss",
        lambda: detection_loss(
            logits_p.node, boxes_p.node, gt_classes, gt_boxes, weights, assignment=frozen
        )[0],
        [logits_p, boxes_p],
        entries=None,
    )
    return results
