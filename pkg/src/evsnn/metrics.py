"""Accuracy, COCO mAP and hardware-relevant accounting.

ACCs per timestep count dense synaptic accumulations (an upper bound that
is a model constant): every convolution contributes output_elements x
fan_in additions, every PLIF neuron one potential update per timestep.
Batch norm contributes nothing (it fuses into the convolutions), pooling
and concatenation involve no arithmetic accumulation. The spike-driven
effective cost is the dense count scaled by the measured spike rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .spiking.layers import BatchNormLayer, ConvLayer, Network, PLIFLayer, SpikeRecord

COCO_IOU_THRESHOLDS = np.arange(0.50, 0.96, 0.05).round(2)


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if predictions.size == 0:
        raise ValueError("empty prediction set")
    return float((predictions == labels).mean())


# --------------------------------------------------------------------------
# Parameter and operation counting
# --------------------------------------------------------------------------


@dataclass
class OpCountReport:
    params: int = 0
    params_fusable_bn: int = 0  # BN gamma/beta, reported separately
    accs_per_timestep: int = 0
    per_layer: dict = field(default_factory=dict)
    input_size: tuple | None = None

    @property
    def params_total(self):
        return self.params + self.params_fusable_bn

    def to_dict(self):
        return {
            "params": self.params,
            "params_fusable_bn": self.params_fusable_bn,
            "accs_per_timestep": self.accs_per_timestep,
            "input_size": self.input_size,
            "per_layer": self.per_layer,
        }


def count_params(net: Network) -> OpCountReport:
    """Conv weights/biases and PLIF time constants; BN affine parameters
    are tallied separately since they fuse away at inference."""
    rep = OpCountReport()
    for name, layer in net.layers.items():
        n = 0
        if isinstance(layer, ConvLayer):
            n = layer.weight.data.size + (layer.bias.data.size if layer.bias is not None else 0)
            rep.params += n
        elif isinstance(layer, BatchNormLayer):
            n = layer.gamma.data.size + layer.beta.data.size
            rep.params_fusable_bn += n
        elif isinstance(layer, PLIFLayer):
            n = layer.w.data.size if layer.w is not None else 0
            rep.params += n
        if n:
            rep.per_layer[name] = {"params": int(n)}
    return rep


def count_accs_per_timestep(net: Network, input_size) -> OpCountReport:
    """Dense accumulate count for one timestep at the given (H, W) input."""
    h, w = input_size
    shapes = net.trace_shapes(h, w)
    rep = count_params(net)
    rep.input_size = (h, w)
    for node in net.spec.nodes:
        name = node["name"]
        layer = net.layers[name]
        accs = 0
        if isinstance(layer, ConvLayer):
            co, ho, wo = shapes[name]
            fan_in = (layer.in_channels // layer.groups) * layer.kernel * layer.kernel
            accs = co * ho * wo * fan_in
            if layer.bias is not None:
                accs += co * ho * wo
        elif isinstance(layer, PLIFLayer):
            c, ho, wo = shapes[name]
            accs = c * ho * wo  # one potential update per neuron per timestep
        if accs:
            rep.per_layer.setdefault(name, {})["accs_per_timestep"] = int(accs)
            rep.accs_per_timestep += accs
    return rep


# --------------------------------------------------------------------------
# Sparsity
# --------------------------------------------------------------------------


@dataclass
class SparsityReport:
    global_rate: float
    per_layer: dict
    timesteps: int

    def dense_multiplier(self):
        """rate x T: effective dense-pass multiplier of the T-step SNN."""
        return self.global_rate * self.timesteps

    def to_dict(self):
        return {"global_rate": self.global_rate, "timesteps": self.timesteps, "per_layer": self.per_layer}


def sparsity_from_record(record: SpikeRecord, timesteps) -> SparsityReport:
    return SparsityReport(global_rate=record.global_rate(), per_layer=record.layer_rates(), timesteps=timesteps)


def measure_sparsity(net: Network, cubes, batch_size=16) -> SparsityReport:
    """Mean spike rate per layer and globally over an evaluation set of
    voxel cubes (fraction of neurons spiking per timestep)."""
    from . import autograd as ag
    from .encoding import batch_cubes

    record = SpikeRecord()
    cubes = list(cubes)
    timesteps = cubes[0].data.shape[1]
    net.set_training(False)
    with ag.no_grad():
        for i in range(0, len(cubes), batch_size):
            batch = batch_cubes(cubes[i : i + batch_size])
            net.forward(batch, record=record)
    return sparsity_from_record(record, timesteps)


# --------------------------------------------------------------------------
# COCO mAP
# --------------------------------------------------------------------------


@dataclass
class MAPReport:
    map: float
    per_class: dict  # class_id -> mean AP over thresholds
    per_threshold: dict  # iou threshold -> mean AP over classes
    map50: float

    def to_dict(self):
        return {
            "map": self.map,
            "map50": self.map50,
            "per_class": self.per_class,
            "per_threshold": {f"{k:.2f}": v for k, v in self.per_threshold.items()},
        }


def box_iou_xywh(a, b):
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax0 + aw, bx0 + bw), min(ay0 + ah, by0 + bh)
    iw, ih = max(ix1 - ix0, 0.0), max(iy1 - iy0, 0.0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _get(obj, key):
    if isinstance(obj, dict):
        return obj[key]
    return getattr(obj, key)


def _interp_ap_101(recalls, precisions):
    """COCO 101-point interpolated AP from a monotone recall sequence."""
    if len(recalls) == 0:
        return 0.0
    recalls = np.asarray(recalls)
    precisions = np.asarray(precisions)
    # precision envelope: max precision at recall >= r
    prec_env = np.maximum.accumulate(precisions[::-1])[::-1]
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        idx = np.searchsorted(recalls, r, side="left")
        ap += prec_env[idx] if idx < len(prec_env) else 0.0
    return ap / 101.0


def _ap_single(dets, gts, iou_t):
    """AP for one class at one IoU threshold. dets: (image_id, score, box)
    sorted by descending score; gts: image_id -> [box]."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    matched = {img: [False] * len(v) for img, v in gts.items()}
    tps, fps = [], []
    for img, _, box in dets:
        best, best_i = 0.0, -1
        for i, g in enumerate(gts.get(img, ())):
            if matched.get(img, [])[i]:
                continue
            iou = box_iou_xywh(box, g)
            if iou > best:
                best, best_i = iou, i
        if best_i >= 0 and best >= iou_t:
            matched[img][best_i] = True
            tps.append(1)
            fps.append(0)
        else:
            tps.append(0)
            fps.append(1)
    if not tps:
        return 0.0
    tp = np.cumsum(tps)
    fp = np.cumsum(fps)
    recalls = tp / n_gt
    precisions = tp / (tp + fp)
    return _interp_ap_101(recalls, precisions)


def coco_map(detections, ground_truth) -> MAPReport:
    """COCO-style mAP: per class and per IoU threshold in [.50:.05:.95],
    greedy matching by descending score, 101-point interpolated AP,
    averaged over thresholds then classes. Classes without ground truth
    are excluded from the mean.

    detections: iterable with fields image_id, class_id, score, box (x,y,w,h)
    ground_truth: iterable with fields image_id, class_id, box
    """
    gt_by_class = {}
    for g in ground_truth:
        gt_by_class.setdefault(_get(g, "class_id"), {}).setdefault(_get(g, "image_id"), []).append(_get(g, "box"))
    det_by_class = {}
    for d in detections:
        det_by_class.setdefault(_get(d, "class_id"), []).append((_get(d, "image_id"), _get(d, "score"), _get(d, "box")))
    per_class = {}
    per_threshold = {t: [] for t in COCO_IOU_THRESHOLDS}
    ap50 = []
    for cls, gts in sorted(gt_by_class.items()):
        dets = sorted(det_by_class.get(cls, []), key=lambda d: -d[1])
        aps = []
        for t in COCO_IOU_THRESHOLDS:
            ap = _ap_single(dets, gts, t - 1e-9)
            aps.append(ap)
            per_threshold[t].append(ap)
            if abs(t - 0.50) < 1e-9:
                ap50.append(ap)
        per_class[cls] = float(np.mean(aps))
    if not per_class:
        return MAPReport(map=0.0, per_class={}, per_threshold={float(t): 0.0 for t in COCO_IOU_THRESHOLDS}, map50=0.0)
    return MAPReport(
        map=float(np.mean(list(per_class.values()))),
        per_class=per_class,
        per_threshold={float(t): float(np.mean(v)) for t, v in per_threshold.items()},
        map50=float(np.mean(ap50)),
    )


# --------------------------------------------------------------------------
# Report emission
# --------------------------------------------------------------------------


def format_table(headers, rows):
    """Aligned plain-text table."""
    cols = [headers] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cols) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in cols[1:]:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def human_count(n):
    if n >= 1e9:
        return f"{n / 1e9:.2f}G"
    if n >= 1e6:
        return f"{n / 1e6:.2f}M"
    if n >= 1e3:
        return f"{n / 1e3:.2f}K"
    return str(int(n))


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report.to_dict() if hasattr(report, "to_dict") else report, fh, indent=2)
