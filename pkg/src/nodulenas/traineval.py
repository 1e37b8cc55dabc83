"""Training loop, classification metrics, ensembling, feature analysis, exports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .archspace import ArchSpec
from .datasynth import VolumeSample, augment
from .losses import asoftmax_loss, softmax_ce
from .network import NetConfig, Network, build_network, flatten_params
from .tensor import Tensor


class TrainError(ValueError):
    pass


class DivergenceError(TrainError):
    """Non-finite training loss; carries the epoch where it happened."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainParams:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    augment: bool = True


@dataclass
class TrainResult:
    network: Network
    history: list = field(default_factory=list)
    best_val_accuracy: float = 0.0


def _batch_tensor(volumes: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack(volumes)[:, None])


def predict_probs(network: Network, samples: Sequence[VolumeSample],
                  batch_size: int = 32) -> np.ndarray:
    """Positive-class probability per sample, batched eval-mode forward."""
    probs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        with T.no_grad():
            logits = network.forward(_batch_tensor([s.voxels for s in chunk]),
                                     train=False).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs.append(e[:, 1] / e.sum(axis=1))
    return np.concatenate(probs)


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FN: int
    FP: int
    TN: int

    def __post_init__(self):
        if min(self.TP, self.FN, self.FP, self.TN) < 0:
            raise TrainError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.TP + self.FN + self.FP + self.TN

    @staticmethod
    def from_predictions(labels: Sequence[int], predicted: Sequence[int]) -> "ConfusionCounts":
        labels = np.asarray(labels)
        predicted = np.asarray(predicted)
        return ConfusionCounts(
            TP=int(np.sum((labels == 1) & (predicted == 1))),
            FN=int(np.sum((labels == 1) & (predicted == 0))),
            FP=int(np.sum((labels == 0) & (predicted == 1))),
            TN=int(np.sum((labels == 0) & (predicted == 0))))


def confusion_metrics(counts: ConfusionCounts) -> dict:
    """Accuracy, sensitivity, specificity, F1; ratios with empty denominators
    surface as None rather than a silent zero."""
    def ratio(num, den):
        return num / den if den > 0 else None

    return {
        "accuracy": ratio(counts.TP + counts.TN, counts.total),
        "sensitivity": ratio(counts.TP, counts.TP + counts.FN),
        "specificity": ratio(counts.TN, counts.FP + counts.TN),
        "f1": ratio(2 * counts.TP, 2 * counts.TP + counts.FP + counts.FN),
    }


def evaluate_network(network: Network, samples: Sequence[VolumeSample],
                     threshold: float = 0.5) -> ConfusionCounts:
    probs = predict_probs(network, samples)
    preds = (probs >= threshold).astype(int)
    return ConfusionCounts.from_predictions([s.label for s in samples], preds)


def train_model(spec: ArchSpec, cfg: NetConfig,
                train_set: Sequence[VolumeSample], val_set: Sequence[VolumeSample],
                epochs: int, seed: int = 0,
                params: TrainParams = TrainParams()) -> TrainResult:
    """Adam training with augmentation; keeps the best-validation weights."""
    if not train_set:
        raise TrainError("empty training set")
    network = build_network(spec, cfg, seed=seed)
    rng = np.random.default_rng([seed, 0x7EA1])
    result = TrainResult(network=network)
    best = None
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for i in range(0, len(order), params.batch_size):
            batch = [train_set[j] for j in order[i:i + params.batch_size]]
            vols = [augment(s.voxels, rng) if params.augment else s.voxels for s in batch]
            labels = np.array([s.label for s in batch])
            x = _batch_tensor(vols)
            if cfg.loss_kind == "softmax":
                loss = softmax_ce(network.forward(x, train=True), labels)
            else:
                feats = network.forward_features(x, train=True)
                loss = asoftmax_loss(feats, labels, network.head, step=step)
            if not math.isfinite(loss.item()):
                raise DivergenceError(epoch)
            loss.backward()
            T.adam_step(network.parameters(), lr=params.lr,
                        beta1=params.beta1, beta2=params.beta2)
            losses.append(loss.item())
            step += 1
        val_metrics = confusion_metrics(evaluate_network(network, val_set)) \
            if val_set else {"accuracy": None}
        val_acc = val_metrics["accuracy"]
        result.history.append({"epoch": epoch,
                               "loss": float(np.mean(losses)),
                               "val_accuracy": val_acc})
        if val_acc is not None and (best is None or val_acc > best[0]):
            best = (val_acc, flatten_params(network).copy(),
                    [(st.running_mean.copy(), st.running_var.copy())
                     for st in network.bn_states()])
    if best is not None:
        result.best_val_accuracy = best[0]
        pos = 0
        flat = best[1]
        for p in network.parameters():
            p.data = flat[pos:pos + p.data.size].reshape(p.data.shape).copy()
            pos += p.data.size
        for st, (rm, rv) in zip(network.bn_states(), best[2]):
            st.running_mean, st.running_var = rm, rv
    return result


class EnsembleModel:
    """Majority vote over an odd number of member networks (threshold 0.5)."""

    def __init__(self, members: Sequence[Network], threshold: float = 0.5):
        if len(members) % 2 == 0 or not members:
            raise TrainError(f"ensemble size must be odd and >= 1, got {len(members)}")
        self.members = list(members)
        self.threshold = threshold


def ensemble_predict(ensemble: EnsembleModel, voxels: np.ndarray) -> dict:
    probs = [m.predict_proba(voxels) for m in ensemble.members]
    labels = [int(p >= ensemble.threshold) for p in probs]
    final = int(sum(labels) > len(labels) // 2)
    return {"label": final, "member_labels": labels, "member_probs": probs}


def evaluate_ensemble(ensemble: EnsembleModel,
                      samples: Sequence[VolumeSample]) -> ConfusionCounts:
    member_preds = []
    for m in ensemble.members:
        probs = predict_probs(m, samples)
        member_preds.append((probs >= ensemble.threshold).astype(int))
    votes = np.sum(member_preds, axis=0)
    final = (votes > len(ensemble.members) // 2).astype(int)
    return ConfusionCounts.from_predictions([s.label for s in samples], final)


def ensemble_sweep(pool: Sequence[Network], samples: Sequence[VolumeSample],
                   sizes: Sequence[int] = (1, 3, 5, 7, 9),
                   repeats: int = 10, seed: int = 0) -> list[dict]:
    """Mean metrics over random member subsets for each ensemble size."""
    if max(sizes) > len(pool):
        raise TrainError(f"pool of {len(pool)} too small for size {max(sizes)}")
    rng = np.random.default_rng(seed)
    member_preds = np.stack([
        (predict_probs(m, samples) >= 0.5).astype(int) for m in pool])
    labels = [s.label for s in samples]
    rows = []
    for n in sizes:
        if n % 2 == 0:
            raise TrainError(f"ensemble size must be odd, got {n}")
        acc = []
        for _ in range(repeats):
            idx = rng.choice(len(pool), size=n, replace=False)
            votes = member_preds[idx].sum(axis=0)
            final = (votes > n // 2).astype(int)
            acc.append(confusion_metrics(ConfusionCounts.from_predictions(labels, final)))
        row = {"n": n, "repeats": repeats}
        for key in ("accuracy", "sensitivity", "specificity", "f1"):
            vals = [m[key] for m in acc if m[key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows


def extract_feature_set(network: Network,
                        samples: Sequence[VolumeSample],
                        batch_size: int = 32) -> dict[int, np.ndarray]:
    """Penultimate-layer features grouped by class label."""
    feats = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        out = network.forward_features(_batch_tensor([s.voxels for s in chunk]),
                                       train=False)
        feats.append(out.data)
    feats = np.concatenate(feats)
    labels = np.array([s.label for s in samples])
    return {0: feats[labels == 0], 1: feats[labels == 1]}


def dbi(features: dict[int, np.ndarray]) -> dict:
    """Intra-class spread over centroid separation for the two classes."""
    for label in (0, 1):
        if label not in features or len(features[label]) == 0:
            raise TrainError(f"class {label} has no feature vectors")
    cents = {i: features[i].mean(axis=0) for i in (0, 1)}
    spread = {i: float(np.linalg.norm(features[i] - cents[i], axis=1).mean())
              for i in (0, 1)}
    m01 = float(np.linalg.norm(cents[0] - cents[1]))
    if m01 == 0:
        raise TrainError("coincident class centroids: index undefined")
    return {"S0": spread[0], "S1": spread[1], "M01": m01,
            "dbi": (spread[0] + spread[1]) / m01}


def write_pgm(path, image: np.ndarray):
    """8-bit binary (P5) grayscale image."""
    img = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def export_attention_slice(network: Network, voxels: np.ndarray, stage: int,
                           slice_index="middle", out_dir=".", prefix="attention"):
    """Capture the spatial-attention map at a stage and export one axial slice.

    Writes `<prefix>_map.pgm` (min-max scaled; constant maps export as all
    zeros), `<prefix>_map.txt` (raw values), and `<prefix>_input.pgm` (the
    matching axial slice of the input volume).
    """
    if stage not in network.cbams:
        raise TrainError(f"stage {stage} has no attention block in this network")
    network.forward(_batch_tensor([voxels]), train=False)
    amap = network.cbams[stage].last_spatial_map[0, 0]  # (D, H, W)
    depth = amap.shape[0]
    idx = depth // 2 if slice_index == "middle" else int(slice_index)
    if not 0 <= idx < depth:
        raise TrainError(f"slice index {idx} out of range [0, {depth})")
    sl = amap[idx]
    lo, hi = sl.min(), sl.max()
    scaled = np.zeros_like(sl) if hi == lo else (sl - lo) / (hi - lo) * 255.0
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pgm(out_dir / f"{prefix}_map.pgm", np.round(scaled))
    with open(out_dir / f"{prefix}_map.txt", "w") as fh:
        for row in sl:
            fh.write(" ".join(f"{v:.9f}" for v in row) + "\n")
    in_idx = min(voxels.shape[0] - 1, round(idx * voxels.shape[0] / depth))
    write_pgm(out_dir / f"{prefix}_input.pgm", np.round(voxels[in_idx] * 255.0))
    return out_dir / f"{prefix}_map.pgm"


def write_report(path, sections: dict[str, dict]):
    """Structured text report: one key/value block per section."""
    with open(path, "w") as fh:
        for name, values in sections.items():
            fh.write(f"[{name}]\n")
            for key, val in values.items():
                fh.write(f"{key} = {'undefined' if val is None else val}\n")
            fh.write("\n")
