"""Two-stage training: pretext pretraining, then fine-tuning on the target
pair, with checkpoint-on-best-validation-loss, evaluation reports, the
transfer-strategy advisor, and a linear probe over frozen activations.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from itertools import islice

import numpy as np

from . import optim
from .checkpoint import Checkpoint, apply_checkpoint, snapshot, write_checkpoint
from .data import AugmentPolicy, batch_iterator, bilinear_resize, normalize, one_hot
from .errors import (
    EmptyDatasetError,
    InvalidHyperparameterError,
    MissingTensorError,
    ShapeMismatchError,
)
from .network import (
    build_backbone,
    forward,
    forward_activations,
    graft_head,
    infer_shapes,
    set_trainable,
)
from .tensor import Tape, Tensor, backward, cross_entropy, pointwise_dense, softmax

DEFAULT_FREEZE = "block*"


@dataclass
class TrainConfig:
    n_ti: int = 500
    n_vi: int = 300
    b_size: int = 10
    epochs: int = 25
    optimizer: str | None = None  # None -> stage default (adagrad / sgd_momentum)
    optimizer_overrides: dict = field(default_factory=dict)
    seed: int = 0
    freeze_pattern: str | None = DEFAULT_FREEZE
    steps_per_epoch_mode: str = "train_count"  # or "paper_literal"
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def validate(self):
        if self.n_ti < self.b_size:
            raise InvalidHyperparameterError("n_ti must be >= b_size")
        if self.epochs < 1:
            raise InvalidHyperparameterError("epochs must be >= 1")
        if self.b_size < 1:
            raise InvalidHyperparameterError("b_size must be >= 1")
        if self.steps_per_epoch_mode not in ("train_count", "paper_literal"):
            raise InvalidHyperparameterError(
                f"unknown steps_per_epoch_mode {self.steps_per_epoch_mode!r}"
            )
        return self

    def steps_per_epoch(self):
        # train_count follows the stated steps arithmetic (n_ti / b_size);
        # paper_literal replays the published call, which passes the
        # validation step count as steps_per_epoch.
        if self.steps_per_epoch_mode == "paper_literal":
            return self.n_vi // self.b_size
        return self.n_ti // self.b_size

    def val_steps(self):
        return self.n_vi // self.b_size


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    checkpoint_written: bool
    wall_time: float

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "checkpoint_written": self.checkpoint_written,
            "wall_time": self.wall_time,
        }


@dataclass
class PredictionRecord:
    item_id: str
    predicted_class: str
    confidence: float
    correct: bool | None = None

    def to_dict(self):
        return {
            "id": self.item_id,
            "predicted_class": self.predicted_class,
            "confidence": self.confidence,
            "correct": self.correct,
        }


def _eval_over_batches(net, ds, b_size, steps):
    """Mean loss and accuracy over the first `steps` deterministic batches,
    augmentation off."""
    losses = []
    correct = 0
    seen = 0
    it = batch_iterator(ds, b_size, shuffle=False, rng=np.random.default_rng(0), policy=None)
    for images, labels in islice(it, steps):
        out, _ = forward(net, images, mode="eval")
        losses.append(cross_entropy(out, labels).data.item())
        pred = out.data.argmax(axis=1)
        correct += int((pred == labels.data.argmax(axis=1)).sum())
        seen += images.data.shape[0]
    if not losses:
        raise EmptyDatasetError("validation produced zero batches")
    return float(np.mean(losses)), correct / seen


def _train_stage(net, cfg, train_ds, val_ds, opt_state, stage, profile, report_fn, checkpoint_path):
    """Epoch loop shared by both stages. Writes a checkpoint whenever the
    validation loss strictly improves on the best seen; returns the best."""
    ss = np.random.SeedSequence(cfg.seed)
    _, _, s_data, s_drop = ss.spawn(4)
    data_rng = np.random.default_rng(s_data)
    drop_rng = np.random.default_rng(s_drop)

    steps = cfg.steps_per_epoch()
    vsteps = cfg.val_steps()
    best = None
    best_val = np.inf

    def meta_for(epoch, val_loss):
        return {
            "stage": stage,
            "epoch": str(epoch),
            "val_loss": repr(float(val_loss)),
            "seed": str(cfg.seed),
            "profile": json.dumps(profile.to_dict()),
            "class_names": json.dumps(train_ds.class_names),
            "optimizer": opt_state.kind,
        }

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        batches = batch_iterator(
            train_ds, cfg.b_size, shuffle=True, rng=data_rng, policy=cfg.augment
        )
        losses = []
        correct = 0
        seen = 0
        for images, labels in islice(batches, steps):
            out, tape = forward(net, images, mode="train", rng=drop_rng)
            loss = cross_entropy(out, labels, tape=tape)
            grads = backward(tape, loss)
            optim.step(net.params, grads, opt_state)
            losses.append(loss.data.item())
            correct += int((out.data.argmax(axis=1) == labels.data.argmax(axis=1)).sum())
            seen += images.data.shape[0]

        val_loss, val_acc = _eval_over_batches(net, val_ds, cfg.b_size, vsteps)
        improved = val_loss < best_val
        if improved:
            best_val = val_loss
            best = snapshot(net, meta_for(epoch, val_loss))
            if checkpoint_path is not None:
                write_checkpoint(best, checkpoint_path)
        if report_fn is not None:
            report_fn(
                EpochReport(
                    epoch=epoch,
                    train_loss=float(np.mean(losses)) if losses else float("nan"),
                    train_accuracy=correct / seen if seen else 0.0,
                    val_loss=val_loss,
                    val_accuracy=val_acc,
                    checkpoint_written=improved,
                    wall_time=time.perf_counter() - t0,
                )
            )

    if best is None:  # validation loss never became comparable (e.g. NaNs)
        best = snapshot(net, meta_for(cfg.epochs - 1, float("nan")))
        if checkpoint_path is not None:
            write_checkpoint(best, checkpoint_path)
    return best


def _fresh_network(cfg, profile, num_classes):
    base = build_backbone(replace(profile, head="none"), seed=cfg.seed)
    return graft_head(base, num_classes, seed=cfg.seed)


def pretrain(cfg, train_ds, val_ds, profile, report_fn=None, checkpoint_path=None, resume_from=None):
    """Stage one: random init (no loaded weights), every parameter trainable,
    Adagrad by default, for cfg.epochs over the pretext classes.

    resume_from optionally warm-starts from an earlier checkpoint; it is off
    by default and not part of the standard procedure.
    """
    cfg.validate()
    profile.validate()
    if not train_ds.items or not val_ds.items:
        raise EmptyDatasetError("pretrain needs non-empty train and val datasets")
    net = _fresh_network(cfg, profile, len(train_ds.class_names))
    if resume_from is not None:
        apply_checkpoint(net, resume_from, strict=False)
    opt_state = optim.make_optimizer(cfg.optimizer or "adagrad", cfg.optimizer_overrides)
    return _train_stage(
        net, cfg, train_ds, val_ds, opt_state, "pretrain", profile, report_fn, checkpoint_path
    )


def fine_tune(cfg, train_ds, val_ds, pretrained, profile, report_fn=None, checkpoint_path=None):
    """Stage two: load the pretrained backbone under a fresh head, freeze
    per cfg.freeze_pattern (default: every conv block), train with
    SGD(lr=0.0001, momentum=0.9) unless overridden.

    pretrained=None skips the load and keeps the random backbone; that is
    the baseline arm of the transfer-benefit comparison, not the normal path.
    """
    cfg.validate()
    profile.validate()
    if not train_ds.items or not val_ds.items:
        raise EmptyDatasetError("fine_tune needs non-empty train and val datasets")
    net = _fresh_network(cfg, profile, len(train_ds.class_names))
    if pretrained is not None:
        backbone_names = [n for n in net.params if not n.startswith("head_")]
        missing = [n for n in backbone_names if n not in pretrained.tensors]
        if missing:
            shown = missing[:4]
            raise MissingTensorError(
                f"pretrained checkpoint lacks backbone tensors: {shown}"
                + ("..." if len(missing) > len(shown) else "")
            )
        # backbone only: the checkpoint's own head belongs to the pretext task
        backbone_ckpt = Checkpoint(
            tensors={k: v for k, v in pretrained.tensors.items() if k in backbone_names},
            meta=pretrained.meta,
        )
        apply_checkpoint(net, backbone_ckpt, strict=False)
    if cfg.freeze_pattern:
        set_trainable(net, cfg.freeze_pattern, False)
    opt_state = optim.make_optimizer(cfg.optimizer or "sgd_momentum", cfg.optimizer_overrides)
    return _train_stage(
        net, cfg, train_ds, val_ds, opt_state, "finetune", profile, report_fn, checkpoint_path
    )


def rebuild_from_checkpoint(ckpt):
    """Reconstruct the network a training checkpoint describes (profile and
    class count ride in the meta) and load its weights strictly."""
    profile_dict = json.loads(ckpt.meta["profile"])
    class_names = json.loads(ckpt.meta["class_names"])
    from .network import ArchProfile  # local import avoids a cycle at module load

    profile = ArchProfile.from_dict(profile_dict)
    net = graft_head(
        build_backbone(replace(profile, head="none"), seed=0), len(class_names), seed=0
    )
    apply_checkpoint(net, ckpt, strict=True)
    return net, class_names


def evaluate(net, ds, b_size=32):
    """Eval-mode pass over every item: accuracy, mean loss, confusion matrix
    (rows = truth), and one prediction record per item."""
    num_classes = infer_shapes(net.layers, net.input_shape)[-1][-1]
    if len(ds.class_names) != num_classes:
        raise ShapeMismatchError(
            f"dataset has {len(ds.class_names)} classes, network outputs {num_classes}"
        )
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    records = []
    loss_sum = 0.0
    correct = 0
    n = len(ds.items)
    for start in range(0, n, b_size):
        chunk = ds.items[start : start + b_size]
        images = Tensor(np.stack([normalize(img).data for img, _ in chunk]))
        labels = np.array([label for _, label in chunk])
        out, _ = forward(net, images, mode="eval")
        probs = out.data
        loss_sum += cross_entropy(out, Tensor(one_hot(labels, num_classes))).data.item() * len(chunk)
        preds = probs.argmax(axis=1)
        for j, (pred, label) in enumerate(zip(preds, labels)):
            confusion[label, pred] += 1
            ok = bool(pred == label)
            correct += ok
            item_id = ds.ids[start + j] if ds.ids else str(start + j)
            records.append(
                PredictionRecord(
                    item_id=item_id,
                    predicted_class=ds.class_names[pred],
                    confidence=float(probs[j, pred]),
                    correct=ok,
                )
            )
    return {
        "accuracy": correct / n,
        "mean_loss": loss_sum / n,
        "confusion": confusion,
        "records": records,
    }


def predict(net, image, class_names, item_id="image"):
    """Resize a raw 0-255 image to the network input, normalize, eval-forward,
    and report argmax class with its confidence (ties break to the lowest
    class index)."""
    h, w, _ = net.input_shape
    arr = image.data
    if arr.shape[:2] != (h, w):
        arr = bilinear_resize(arr, h, w)
    batch = Tensor(normalize(Tensor(arr)).data[None])
    out, _ = forward(net, batch, mode="eval")
    probs = out.data[0]
    pred = int(probs.argmax())  # argmax returns the first (lowest) index on ties
    return PredictionRecord(
        item_id=item_id,
        predicted_class=class_names[pred],
        confidence=float(probs[pred]),
        correct=None,
    )


STRATEGIES = {
    ("small", "similar"): (
        "linear-probe-top",
        "A small dataset would overfit under full fine-tuning, and a nearby "
        "domain means the top-of-backbone features already apply; train a "
        "linear classifier on them.",
    ),
    ("large", "similar"): (
        "full-fine-tune",
        "Plenty of in-domain data removes the overfitting risk, so fine-tune "
        "through the whole network.",
    ),
    ("small", "different"): (
        "linear-probe-earlier",
        "With little data only a linear classifier is safe, and a distant "
        "domain makes the top features too source-specific; probe activations "
        "from an earlier layer instead.",
    ),
    ("large", "different"): (
        "init-pretrained-full-fine-tune",
        "Enough data to train from scratch, but starting from pretrained "
        "weights still helps in practice; initialize from them and fine-tune "
        "the entire network.",
    ),
}


def advise(dataset_size, similarity):
    """Map (dataset size, domain similarity) to a transfer strategy."""
    key = (dataset_size, similarity)
    if key not in STRATEGIES:
        raise ValueError(
            f"dataset_size must be small|large and similarity similar|different, got {key}"
        )
    strategy, rationale = STRATEGIES[key]
    return {"strategy": strategy, "rationale": rationale}


def _features_at(net, ds, layer_name, b_size=32):
    """Frozen eval-mode activations at a layer; spatial maps are pooled to
    one value per channel."""
    feats = []
    labels = []
    n = len(ds.items)
    for start in range(0, n, b_size):
        chunk = ds.items[start : start + b_size]
        images = Tensor(np.stack([normalize(img).data for img, _ in chunk]))
        act = forward_activations(net, images, layer_name).data
        if act.ndim == 4:
            act = act.mean(axis=(1, 2))
        elif act.ndim != 2:
            act = act.reshape(act.shape[0], -1)
        feats.append(act)
        labels.extend(label for _, label in chunk)
    return np.concatenate(feats, axis=0), np.array(labels)


def linear_probe(net, layer_name, train_ds, val_ds, cfg):
    """Train a dense+softmax classifier on frozen activations at layer_name
    with SGD; the backbone is never touched. Returns the classifier weights,
    its validation accuracy, and the feature dimension."""
    cfg.validate()
    x_train, y_train = _features_at(net, train_ds, layer_name)
    x_val, y_val = _features_at(net, val_ds, layer_name)
    num_classes = len(train_ds.class_names)
    feature_dim = x_train.shape[1]

    rng = np.random.default_rng(cfg.seed)
    limit = np.sqrt(6.0 / (feature_dim + num_classes))
    w = Tensor(
        ((rng.random((feature_dim, num_classes), dtype=np.float32) * 2 - 1) * limit),
        name="probe/w",
        trainable=True,
    )
    b = Tensor(np.zeros(num_classes, dtype=np.float32), name="probe/b", trainable=True)
    params = {"probe/w": w, "probe/b": b}
    opt_state = optim.make_optimizer(cfg.optimizer or "sgd_momentum", cfg.optimizer_overrides)

    n = x_train.shape[0]
    bs = min(cfg.b_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            tape = Tape()
            logits = pointwise_dense(Tensor(x_train[idx]), w, b, tape=tape)
            probs = softmax(logits, tape=tape)
            loss = cross_entropy(probs, Tensor(one_hot(y_train[idx], num_classes)), tape=tape)
            grads = backward(tape, loss)
            optim.step(params, grads, opt_state)

    val_logits = x_val @ w.data + b.data
    val_acc = float((val_logits.argmax(axis=1) == y_val).mean())
    return {"weights": {"w": w, "b": b}, "val_accuracy": val_acc, "feature_dim": feature_dim}
