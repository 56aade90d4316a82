"""Training and evaluation loops.

Both loops share the same recipe: AdamW with decoupled weight decay,
cosine learning-rate annealing to zero over the whole run, global
gradient-norm clipping, and surrogate-gradient BPTT through the unrolled
timesteps (PLIF states are reset before every sample batch). The
classification head is trained with cross-entropy on the time-summed
class scores; the detection heads with focal + smooth-L1 loss on the
time-summed logits.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import AdamW, Tensor, clip_grad_norm, cosine_lr, load_checkpoint, save_checkpoint
from .detection import DetectionModel, build_anchor_targets, decode_detections, detection_loss
from .encoding import EncoderConfig, batch_cubes, encode_voxel_cube
from .metrics import accuracy, coco_map
from .spiking import Network, classifier_scores, fuse_network
from .tasks import encode_samples


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the step."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 5e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    # detection-specific
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)  # one entry per step
    epoch_losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    wall_time: float = 0.0


def _check_finite(loss, step, extra=""):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss!r} at step {step}{extra}")


def train_classifier(net: Network, samples, encoder: EncoderConfig, config: TrainConfig, log=None):
    """Surrogate-gradient BPTT training of a spiking classifier on
    ClassificationSamples. Returns a TrainHistory; the net is trained in
    place."""
    cubes, labels = encode_samples(samples, encoder)
    data = batch_cubes(cubes)
    rng = np.random.default_rng(config.seed)
    params = net.param_list()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    n = len(samples)
    steps_per_epoch = max(1, -(-n // config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    hist = TrainHistory()
    t0 = time.monotonic()
    step = 0
    net.set_training(True)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            batch = data[idx]
            opt.zero_grad()
            outputs = net.forward(batch)
            scores = classifier_scores(outputs)
            loss = ag.softmax_cross_entropy(scores, labels[idx])
            _check_finite(float(loss.data), step)
            loss.backward()
            norm = clip_grad_norm(params, config.grad_clip)
            _check_finite(norm, step, " (gradient norm)")
            opt.lr = cosine_lr(step, total_steps, config.lr)
            opt.step()
            hist.losses.append(float(loss.data))
            hist.grad_norms.append(norm)
            hist.lrs.append(opt.lr)
            epoch_loss += float(loss.data) * len(idx)
            step += 1
        hist.epoch_losses.append(epoch_loss / n)
        if log:
            log(f"epoch {epoch + 1}/{config.epochs}  loss {hist.epoch_losses[-1]:.4f}")
    hist.wall_time = time.monotonic() - t0
    return hist


def evaluate_classifier(net: Network, samples, encoder: EncoderConfig, batch_size=64, fuse=False):
    """Returns (accuracy, predictions). With ``fuse`` the BNs are folded
    into the convolutions before evaluation."""
    cubes, labels = encode_samples(samples, encoder)
    data = batch_cubes(cubes)
    net.set_training(False)
    if fuse:
        net = fuse_network(net)
        net.set_training(False)
    preds = []
    with ag.no_grad():
        for i in range(0, len(cubes), batch_size):
            outputs = net.forward(data[i : i + batch_size])
            scores = classifier_scores(outputs)
            preds.append(scores.data.argmax(axis=1))
    preds = np.concatenate(preds)
    return accuracy(preds, labels), preds


# --------------------------------------------------------------------------
# Detection
# --------------------------------------------------------------------------


def _encode_scenes(scenes, encoder: EncoderConfig):
    cubes, targets = [], []
    for stream, boxes in scenes:
        cubes.append(encode_voxel_cube(stream, encoder))
        targets.append(boxes)
    return batch_cubes(cubes), targets


def train_detector(model: DetectionModel, scenes, encoder: EncoderConfig, config: TrainConfig,
                   freeze_backbone=False, log=None):
    """Train the SSD heads (and optionally the backbone) on (stream,
    boxes) scenes. Returns a TrainHistory."""
    data, box_targets = _encode_scenes(scenes, encoder)
    anchors = model.anchors(encoder.height, encoder.width)
    labels = np.empty((len(scenes), len(anchors)), dtype=np.int64)
    locs = np.empty((len(scenes), len(anchors), 4), dtype=np.float32)
    image_size = (encoder.width, encoder.height)
    for i, boxes in enumerate(box_targets):
        gt = np.array([(b.x, b.y, b.w, b.h) for b in boxes], dtype=np.float64).reshape(-1, 4)
        cls = [b.class_id for b in boxes]
        labels[i], locs[i] = build_anchor_targets(anchors, gt, cls, image_size, model.anchor_config)

    params = model.net.param_list()
    if freeze_backbone:
        head_names = {n for pair in model.head_taps for n in pair}
        trainable = {
            pname: p for pname, p in model.net.params().items()
            if pname.split(".")[0] in head_names or pname.split(".")[0].startswith("extra")
        }
        params = list(trainable.values())
        for pname, p in model.net.params().items():
            if pname not in trainable:
                p.requires_grad = False
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(scenes)
    steps_per_epoch = max(1, -(-n // config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    hist = TrainHistory()
    t0 = time.monotonic()
    step = 0
    model.net.set_training(True)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            opt.zero_grad()
            cls_logits, loc_pred = model.forward(data[idx])
            loss, cls_l, loc_l = detection_loss(
                cls_logits, loc_pred, labels[idx], locs[idx],
                gamma=config.focal_gamma, alpha=config.focal_alpha,
            )
            _check_finite(float(loss.data), step)
            loss.backward()
            norm = clip_grad_norm(params, config.grad_clip)
            _check_finite(norm, step, " (gradient norm)")
            opt.lr = cosine_lr(step, total_steps, config.lr)
            opt.step()
            hist.losses.append(float(loss.data))
            hist.grad_norms.append(norm)
            hist.lrs.append(opt.lr)
            epoch_loss += float(loss.data) * len(idx)
            step += 1
        hist.epoch_losses.append(epoch_loss / n)
        if log:
            log(f"epoch {epoch + 1}/{config.epochs}  loss {hist.epoch_losses[-1]:.4f}")
    hist.wall_time = time.monotonic() - t0
    return hist


def evaluate_detector(model: DetectionModel, scenes, encoder: EncoderConfig, batch_size=16,
                      score_threshold=0.3, nms_iou=0.45):
    """Run the detector over scenes and score against their boxes.

    Returns (MAPReport, detections).
    """
    data, box_targets = _encode_scenes(scenes, encoder)
    anchors = model.anchors(encoder.height, encoder.width)
    model.net.set_training(False)
    detections = []
    with ag.no_grad():
        for i in range(0, len(scenes), batch_size):
            cls_logits, loc_pred = model.forward(data[i : i + batch_size])
            detections += decode_detections(
                cls_logits.data, loc_pred.data, anchors, (encoder.width, encoder.height),
                image_ids=list(range(i, i + cls_logits.data.shape[0])),
                score_threshold=score_threshold, nms_iou=nms_iou,
                variances=model.anchor_config.variances,
            )
    gt = []
    for img_id, boxes in enumerate(box_targets):
        for b in boxes:
            gt.append({"image_id": img_id, "class_id": b.class_id, "box": (b.x, b.y, b.w, b.h)})
    return coco_map(detections, gt), detections


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_network(path, net: Network, optimizer: AdamW | None = None):
    save_checkpoint(path, net.params(), optimizer.state_arrays() if optimizer else None)


def load_network(path, net: Network, optimizer: AdamW | None = None):
    params, state = load_checkpoint(path)
    net.load_params(params)
    if optimizer is not None and state:
        optimizer.load_state_arrays(state)


def load_backbone(detector: DetectionModel, classifier_ckpt_path):
    """Initialize the shared backbone layers of a detector from a trained
    classifier checkpoint; layers absent from the checkpoint keep their
    fresh initialization. Returns the number of arrays loaded."""
    params, _ = load_checkpoint(classifier_ckpt_path)
    own = detector.net.params()
    loaded = 0
    for name, arr in params.items():
        if name in own and own[name].data.shape == tuple(arr.shape):
            own[name].data = arr.astype(np.float32)
            loaded += 1
    return loaded


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------


@dataclass
class ExperimentManifest:
    name: str
    config: dict
    encoder: dict
    results: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"name": self.name, "config": self.config, "encoder": self.encoder, "results": self.results}, indent=2)

    @classmethod
    def from_run(cls, name, config: TrainConfig, encoder: EncoderConfig, **results):
        return cls(name=name, config=asdict(config), encoder=asdict(encoder), results=results)


def run_encoding_ablation(build_net, samples, val_samples, grid, config: TrainConfig, sample_duration=100_000, size=64, log=None):
    """Train/evaluate one fresh network per (timesteps, micro_bins) cell.

    ``build_net`` maps an input channel count to a fresh Network. Returns
    {(T, n): accuracy}.
    """
    results = {}
    for timesteps, micro_bins in grid:
        encoder = EncoderConfig(
            sample_duration=sample_duration, timesteps=timesteps, micro_bins=micro_bins,
            height=size, width=size,
        )
        net = build_net(encoder.channels)
        train_classifier(net, samples, encoder, config, log=log)
        acc, _ = evaluate_classifier(net, val_samples, encoder)
        results[(timesteps, micro_bins)] = acc
        if log:
            log(f"T={timesteps} n={micro_bins}: accuracy {acc:.3f}")
    return results
