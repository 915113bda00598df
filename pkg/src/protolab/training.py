"""Composite ProtoPNet loss, Adam, the three-stage schedule and the two
robustness remedies (FGSM adversarial training, JPEG augmentation)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor
from .data import AugmentConfig, Dataset, augment
from .model import ADDON_PARAMS, BASE_PARAMS, ProtoPNet, push_prototypes

log = logging.getLogger(__name__)

METRIC_FIELDS = ("stage", "epoch", "cross_entropy", "cluster", "separation", "l1", "total",
                 "train_accuracy", "test_accuracy")


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in stage {stage!r} at epoch {epoch}{': ' + detail if detail else ''}")
        self.stage = stage
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    warmup_epochs: int = 5
    joint_epochs: int = 6
    last_layer_iters: int = 20
    lr_warmup: float = 0.003
    lr_joint_backbone: float = 0.0001
    lr_joint_prototypes: float = 0.003
    lr_last_layer: float = 0.0001
    lambda_cluster: float = 0.8
    lambda_separation: float = -0.08
    lambda_l1: float = 0.0001
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        lrs = (self.lr_warmup, self.lr_joint_backbone, self.lr_joint_prototypes, self.lr_last_layer)
        if min(lrs) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_separation >= 0:
            raise ValueError("lambda_separation must be negative")
        if min(self.warmup_epochs, self.joint_epochs, self.last_layer_iters) < 0 or self.batch_size < 1:
            raise ValueError("epoch/iteration counts must be non-negative and batch_size positive")


@dataclass(frozen=True)
class AdvTrainConfig:
    step: float = 10 / 255
    budget: float = 8 / 255
    epochs: int = 10

    def __post_init__(self):
        if self.step <= 0 or self.budget <= 0:
            raise ValueError("FGSM step and budget must be positive")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: dict[str, int] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, state: AdamState, lr) -> None:
    """Bias-corrected Adam update of every parameter that has a gradient.

    ``lr`` is a float or a mapping from parameter name to learning rate;
    parameters missing from the mapping are left alone.
    """
    for name, t in store.items():
        rate = lr.get(name) if isinstance(lr, dict) else lr
        if rate is None or t.grad is None:
            continue
        g = t.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
            state.step[name] = 0
        state.step[name] += 1
        k = state.step[name]
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1**k)
        v_hat = state.v[name] / (1 - state.beta2**k)
        t.data -= rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# loss terms


def _class_mask(labels, class_of) -> np.ndarray:
    return (np.asarray(labels)[:, None] == np.asarray(class_of)[None, :]).astype(np.float64)


def _masked_min(min_dist: Tensor, allowed: np.ndarray) -> Tensor:
    # large constant on disallowed entries; amin routes gradient only to an allowed one
    big = float(np.max(min_dist.data, initial=0.0)) + 1e6
    return ad.amin(min_dist + (1.0 - allowed) * big, axis=1)


def cluster_cost(min_dist: Tensor, labels, class_of) -> Tensor:
    """Mean over the batch of the smallest patch distance to an own-class prototype.

    ``min_dist`` is the [N, m] per-image minimum over latent patches.
    """
    if min_dist.shape[0] == 0:
        raise ValueError("cluster_cost: empty batch")
    return ad.mean(_masked_min(min_dist, _class_mask(labels, class_of)))


def separation_cost(min_dist: Tensor, labels, class_of) -> Tensor:
    """Mean over the batch of the smallest patch distance to another class's prototype."""
    if len(set(np.asarray(class_of).tolist())) < 2:
        raise ValueError("separation_cost: prototype bank covers a single class")
    return ad.mean(_masked_min(min_dist, 1.0 - _class_mask(labels, class_of)))


def l1_off_class(last_layer: Tensor, class_of, num_classes: int) -> Tensor:
    off = 1.0 - _class_mask(np.arange(num_classes), class_of)  # [C, m]
    return ad.sum(ad.abs(last_layer * off))


def total_loss(model: ProtoPNet, images, labels, config: TrainConfig) -> tuple[Tensor, dict]:
    out = model.forward(images)
    labels = np.asarray(labels)
    class_of = model.bank.class_of
    ce = ad.softmax_cross_entropy(out["logits"], labels)
    clst = cluster_cost(out["min_distances"], labels, class_of)
    sep = separation_cost(out["min_distances"], labels, class_of)
    l1 = l1_off_class(model.last_layer, class_of, model.config.num_classes)
    loss = ce + config.lambda_cluster * clst + config.lambda_separation * sep + config.lambda_l1 * l1
    terms = {"cross_entropy": ce.item(), "cluster": clst.item(), "separation": sep.item(), "l1": l1.item(),
             "total": loss.item(), "correct": int(np.sum(np.argmax(out["logits"].data, axis=-1) == labels))}
    return loss, terms


# ---------------------------------------------------------------------------
# adversarial examples


def input_gradient(model: ProtoPNet, images: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy (batch mean) gradient w.r.t. the images, and the logits."""
    x = Tensor(np.array(images, dtype=np.float64), requires_grad=True)
    saved = {n: t.requires_grad for n, t in model.params.items()}
    model.params.set_trainable(())
    try:
        with Tape() as tape:
            logits = model.forward(x)["logits"]
            loss = ad.softmax_cross_entropy(logits, labels)
        ad.backward(tape, loss)
    finally:
        for n, flag in saved.items():
            model.params[n].requires_grad = flag
    return x.grad, logits.data


def fgsm_adversarial_batch(model: ProtoPNet, images: np.ndarray, labels, config: AdvTrainConfig,
                           rng: np.random.Generator) -> np.ndarray:
    """FGSM with a uniform random start inside the L-inf ball."""
    eps = config.budget
    delta = rng.uniform(-eps, eps, size=images.shape)
    start = np.clip(images + delta, 0.0, 1.0)
    grad, _ = input_gradient(model, start, labels)
    delta = np.clip(start - images + config.step * np.sign(grad), -eps, eps)
    return np.clip(images + delta, 0.0, 1.0)


@dataclass(frozen=True)
class PGDEvalConfig:
    step: float = 2 / 255
    budget: float = 8 / 255
    iterations: int = 10


def pgd_untargeted(model: ProtoPNet, images: np.ndarray, labels, config: PGDEvalConfig):
    """Cross-entropy-maximising PGD from a zero start.

    Returns the final perturbed images and a mask of images that stayed
    correctly classified at every iterate (the unperturbed one included).
    """
    labels = np.asarray(labels)
    images = np.asarray(images, dtype=np.float64)
    delta = np.zeros_like(images)
    robust = np.ones(len(labels), dtype=bool)
    for _ in range(config.iterations):
        grad, logits = input_gradient(model, images + delta, labels)
        robust &= np.argmax(logits, axis=-1) == labels
        delta = np.clip(delta + config.step * np.sign(grad), -config.budget, config.budget)
        delta = np.clip(images + delta, 0.0, 1.0) - images
    final = images + delta
    robust &= model.predict(final) == labels
    return final, robust


def evaluate(model: ProtoPNet, images: np.ndarray, labels, attack: PGDEvalConfig | None = None,
             batch_size: int = 64) -> dict:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return {"accuracy": float("nan"), "adversarial_accuracy": float("nan")}
    result = {"accuracy": float(np.mean(model.predict(images, batch_size) == labels))}
    if attack is not None:
        robust = np.concatenate([
            pgd_untargeted(model, images[i : i + batch_size], labels[i : i + batch_size], attack)[1]
            for i in range(0, len(labels), batch_size)
        ])
        result["adversarial_accuracy"] = float(np.mean(robust))
    return result


# ---------------------------------------------------------------------------
# schedule


@dataclass
class TrainResult:
    model: ProtoPNet
    metrics: list[dict]
    pushed: ProtoPNet
    best_test_accuracy: float


def _stage_lrs(stage: str, config: TrainConfig, model: ProtoPNet) -> dict[str, float]:
    if stage == "warmup":
        return {n: config.lr_warmup for n in (*ADDON_PARAMS, "prototypes")}
    if stage == "joint":
        lrs = {n: config.lr_joint_backbone for n in BASE_PARAMS}
        lrs.update({n: config.lr_joint_prototypes for n in (*ADDON_PARAMS, "prototypes")})
        return lrs
    return {"last_layer": config.lr_last_layer}


def _check_finite(value: float, stage: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(stage, epoch, f"loss = {value}")


def train_schedule(
    model: ProtoPNet,
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    augment_config: AugmentConfig | None = AugmentConfig(),
    adversarial: AdvTrainConfig | None = None,
    on_metrics=None,
) -> TrainResult:
    """Warmup, joint training, push, then last-layer fine-tuning.

    The model is modified in place up to the push; the returned model is the
    post-push last-layer iterate with the best test accuracy.
    """
    shuffle_rng, augment_rng, adv_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
    train, test = dataset.train, dataset.test
    metrics: list[dict] = []

    def emit(row):
        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)
        log.info("%s", row)

    for stage, epochs in (("warmup", config.warmup_epochs), ("joint", config.joint_epochs)):
        lrs = _stage_lrs(stage, config, model)
        model.params.set_trainable(lrs)
        state = AdamState()
        for epoch in range(epochs):
            totals: dict[str, float] = {}
            correct = 0
            order = shuffle_rng.permutation(len(train))
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                images = train.images[idx]
                if augment_config is not None:
                    images = np.stack([augment(img, augment_config, augment_rng) for img in images])
                if adversarial is not None:
                    images = fgsm_adversarial_batch(model, images, train.labels[idx], adversarial, adv_rng)
                model.params.zero_grad()
                with Tape() as tape:
                    loss, terms = total_loss(model, images, train.labels[idx], config)
                _check_finite(terms["total"], stage, epoch)
                ad.backward(tape, loss)
                adam_step(model.params, state, lrs)
                correct += terms.pop("correct")
                for k, v in terms.items():
                    totals[k] = totals.get(k, 0.0) + v * len(idx)
            row = {"stage": stage, "epoch": epoch, **{k: v / len(train) for k, v in totals.items()},
                   "train_accuracy": correct / len(train),
                   "test_accuracy": evaluate(model, test.images, test.labels)["accuracy"] if len(test) else float("nan")}
            emit(row)

    model.params.set_trainable(())
    push_prototypes(model, train.images, train.labels, train.ids)
    pushed = model.copy()

    # last layer only: the pooled scores are fixed, so compute them once
    train_scores = model.pooled_scores(train.images)
    test_scores = model.pooled_scores(test.images) if len(test) else np.zeros((0, model.bank.num_prototypes))
    lrs = _stage_lrs("last_layer", config, model)
    model.params.set_trainable(lrs)
    state = AdamState()

    def test_acc():
        if not len(test):
            return float("nan")
        return float(np.mean(np.argmax(test_scores @ model.last_layer.data.T, axis=1) == test.labels))

    best_acc, best_weights = test_acc(), model.last_layer.data.copy()
    emit({"stage": "push", "epoch": 0, "test_accuracy": best_acc,
          "train_accuracy": float(np.mean(np.argmax(train_scores @ model.last_layer.data.T, axis=1) == train.labels))})
    for it in range(config.last_layer_iters):
        totals = {}
        correct = 0
        order = shuffle_rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            model.params.zero_grad()
            with Tape() as tape:
                logits = ad.dense(Tensor(train_scores[idx]), model.last_layer)
                ce = ad.softmax_cross_entropy(logits, train.labels[idx])
                l1 = l1_off_class(model.last_layer, model.bank.class_of, model.config.num_classes)
                loss = ce + config.lambda_l1 * l1
            _check_finite(loss.item(), "last_layer", it)
            ad.backward(tape, loss)
            adam_step(model.params, state, lrs)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == train.labels[idx]))
            totals["cross_entropy"] = totals.get("cross_entropy", 0.0) + ce.item() * len(idx)
            totals["l1"] = totals.get("l1", 0.0) + l1.item() * len(idx)
        acc = test_acc()
        emit({"stage": "last_layer", "epoch": it, **{k: v / len(train) for k, v in totals.items()},
              "train_accuracy": correct / len(train), "test_accuracy": acc})
        if acc > best_acc:
            best_acc, best_weights = acc, model.last_layer.data.copy()

    model.params.set_trainable(())
    model.last_layer.data[...] = best_weights
    model.params.zero_grad()
    return TrainResult(model, metrics, pushed, best_acc)
