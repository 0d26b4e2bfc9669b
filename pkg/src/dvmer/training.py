"""Composite training objective, optimiser, and the epoch/batch loop.

The total loss is a weighted sum of four parts: supervised cross-entropy on
all three heads, reliability-weighted pseudo-label cross-entropy on the
fused head, cross-view consistency (mean Jensen-Shannon divergence between
the temperature-scaled branch distributions), and the supervised contrastive
loss against the memory queue. Default weights are 1.0 / 0.8 / 0.2 / 0.1.

Optimisation is adaptive moment estimation with bias correction and
decoupled weight decay, cosine-annealed learning rate over the run, and
global gradient-norm clipping. Runs are seed-deterministic in
single-threaded mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import curriculum
from . import memory
from . import nncore as nc
from .data import Sample
from .errors import CheckpointMismatch, ConfigError, EmptyQueue, EmptySplit, NonFiniteLoss, NonFiniteValue
from .model import BranchOutputs, DualViewModel, ModelConfig
from .nncore import Tensor

CHECKPOINT_MAGIC = b"DMRC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    classification: float = 1.0
    pseudo: float = 0.8
    consistency: float = 0.2
    contrast: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    cosine_annealing: bool = True
    seed: int = 0
    mode: str = "full"              # "full": pseudo-label loss on every sample;
                                    # "semi": on the unlabeled partition only
    labeled_fraction: float = 1.0
    use_dsaf: bool = True
    use_pcl: bool = True
    use_saml: bool = True
    lambda_cls: float = 1.0
    lambda_pl: float = 0.8
    lambda_cons: float = 0.2
    lambda_cont: float = 0.1
    tau_max: float = 1.5
    tau_min: float = 0.7
    theta_start: float = 0.65
    theta_min: float = 0.35
    contrast_temperature: float = 0.07
    queue_size: int = 512
    queue_momentum: float | None = None
    contrastive_normalized: bool = False
    ensemble_eval: bool = False
    dimension: str = "arousal"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and grad_clip must be positive")
        if self.mode not in ("full", "semi"):
            raise ConfigError(f"mode must be 'full' or 'semi', got {self.mode!r}")

    def weights(self) -> LossWeights:
        return LossWeights(
            classification=self.lambda_cls,
            pseudo=self.lambda_pl,
            consistency=self.lambda_cons,
            contrast=self.lambda_cont,
        )


@dataclass
class Metrics:
    acc: float
    f1: float
    auc: float


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    tau: float
    theta: float
    loss_total: float
    loss_cls: float
    loss_pl: float
    loss_cons: float
    loss_cont: float
    mask_ratio: float
    mean_reliability: float
    mean_confidence: float
    queue_entropy: float
    queue_coverage: list
    train_acc: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch, "lr": self.lr, "tau": self.tau, "theta": self.theta,
            "loss_total": self.loss_total, "loss_cls": self.loss_cls, "loss_pl": self.loss_pl,
            "loss_cons": self.loss_cons, "loss_cont": self.loss_cont,
            "mask_ratio": self.mask_ratio, "mean_reliability": self.mean_reliability,
            "mean_confidence": self.mean_confidence, "queue_entropy": self.queue_entropy,
            "queue_coverage": self.queue_coverage, "train_acc": self.train_acc,
        }


# -- loss pieces -----------------------------------------------------------


def classification_loss(outputs: BranchOutputs, labels, mask=None) -> Tensor:
    """Sum of the three heads' temperature-1 cross-entropies, batch-averaged.

    mask restricts the average to labeled samples; with an empty mask the
    loss is zero.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if mask is not None:
        keep = np.flatnonzero(np.asarray(mask, dtype=bool))
        if keep.size == 0:
            return Tensor(np.zeros((), dtype=outputs.logits_fuse.dtype))
    total = None
    for logits in (outputs.logits_mel, outputs.logits_coch, outputs.logits_fuse):
        per_sample = nc.cross_entropy(logits, labels)
        if mask is not None:
            sel = np.zeros((keep.size, per_sample.shape[0]), dtype=logits.dtype)
            sel[np.arange(keep.size), keep] = 1.0
            per_sample = nc.matmul(Tensor(sel), nc.reshape(per_sample, (-1, 1)))
        term = nc.tmean(per_sample)
        total = term if total is None else nc.add(total, term)
    return total


def consistency_loss(p_mel: Tensor, p_coch: Tensor) -> Tensor:
    """Batch mean of the cross-view JS divergence; differentiable through
    both branch distributions."""
    return nc.tmean(curriculum.js_divergence_tensor(p_mel, p_coch))


def total_loss(components: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of the four loss components; disabled modules pass
    zero-valued components."""
    out = nc.add(
        nc.add(
            nc.mul(components["cls"], weights.classification),
            nc.mul(components["pl"], weights.pseudo),
        ),
        nc.add(
            nc.mul(components["cons"], weights.consistency),
            nc.mul(components["cont"], weights.contrast),
        ),
    )
    if not np.isfinite(out.data):
        raise NonFiniteLoss("total loss is not finite")
    return out


# -- optimiser -------------------------------------------------------------


class AdamW:
    """Adaptive moment estimation with bias correction and decoupled weight
    decay applied as p -= lr * (update + wd * p)."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / (1.0 - self.beta1 ** t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict:
        state = {"step": np.array([self.step_count], dtype=np.int64)}
        for name, arr in self.m.items():
            state[f"m.{name}"] = arr
        for name, arr in self.v.items():
            state[f"v.{name}"] = arr
        return state

    def load_state_arrays(self, state: dict):
        self.step_count = int(np.asarray(state["step"]).reshape(-1)[0])
        for name in self.params:
            self.m[name] = np.array(state[f"m.{name}"], dtype=self.m[name].dtype).reshape(self.m[name].shape)
            self.v[name] = np.array(state[f"v.{name}"], dtype=self.v[name].dtype).reshape(self.v[name].shape)


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Half-cosine decay over the full run, floored at zero, no restarts."""
    return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * epoch / total_epochs)))


def clip_grad_norm(params: dict, max_norm: float) -> tuple[float, float]:
    """Scale all gradients so the global L2 norm is at most max_norm.
    Returns (pre-clip norm, post-clip norm)."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    pre = float(np.sqrt(total))
    if pre > max_norm and pre > 0.0:
        scale = max_norm / pre
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
        return pre, max_norm
    return pre, pre


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    model: DualViewModel
    queue: memory.MemoryQueue
    records: list
    optimizer: AdamW
    config: TrainConfig
    model_config: ModelConfig


def _stack_batch(samples: list[Sample], idx) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    mel = np.stack([samples[i].pair.mel for i in idx])
    coch = np.stack([samples[i].pair.coch for i in idx])
    labels = np.array([samples[i].label for i in idx], dtype=np.int64)
    labeled = np.array([samples[i].labeled for i in idx], dtype=bool)
    return mel, coch, labels, labeled


def run_training(
    train_samples: list[Sample],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    on_epoch=None,
    on_step=None,
) -> TrainResult:
    """Train on the given samples per the curriculum loop.

    Per epoch: fix the temperature and threshold from the linear schedules;
    per batch: encode both views, score cross-view agreement, select
    pseudo-labels, build the weighted objective, backprop with gradient
    clipping, update parameters, then enqueue the detached fused features.
    Emits one EpochRecord per epoch; deterministic given the seed.
    """
    if not train_samples:
        raise EmptySplit("training requires a nonempty sample list")
    model_config = model_config or ModelConfig()
    if model_config.cross_attention != config.use_dsaf:
        model_config = replace(model_config, cross_attention=config.use_dsaf)

    init_rng, loop_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)]
    model = DualViewModel(model_config, init_rng)
    params = model.parameters()
    optimizer = AdamW(
        params,
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    queue = memory.MemoryQueue(
        capacity=config.queue_size,
        dim=model_config.fusion_dim,
        n_classes=model_config.n_classes,
        momentum=config.queue_momentum,
    )
    weights = config.weights()
    zero = lambda: Tensor(np.zeros((), dtype=np.float32))

    n = len(train_samples)
    records: list[EpochRecord] = []
    for epoch in range(config.epochs):
        if config.use_pcl:
            state = curriculum.curriculum_state(
                epoch, config.epochs,
                tau_max=config.tau_max, tau_min=config.tau_min,
                theta_start=config.theta_start, theta_min=config.theta_min,
            )
            tau, theta = state.tau, state.theta
        else:
            tau, theta = 1.0, None

        lr = cosine_lr(epoch, config.epochs, config.learning_rate) if config.cosine_annealing else config.learning_rate

        order = loop_rng.permutation(n)
        batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]

        sums = {"total": 0.0, "cls": 0.0, "pl": 0.0, "cons": 0.0, "cont": 0.0}
        cur_stats = curriculum.EpochCurriculumStats()
        correct = 0
        counted = 0

        for batch_index, idx in enumerate(batches):
            try:
                mel, coch, labels, labeled = _stack_batch(train_samples, idx)
                outputs = model.forward(mel, coch, rng=loop_rng, training=True)

                p_mel = nc.softmax(outputs.logits_mel, temperature=tau)
                p_coch = nc.softmax(outputs.logits_coch, temperature=tau)

                cls_mask = None if config.mode == "full" else labeled
                loss_cls = classification_loss(outputs, labels, mask=cls_mask)

                if config.use_pcl:
                    confidences = curriculum.batch_confidences(p_mel.data, p_coch.data, theta)
                    cur_stats.record(confidences)
                    eligible = None if config.mode == "full" else ~labeled
                    loss_pl = curriculum.pseudo_label_loss(confidences, outputs.logits_fuse, eligible=eligible)
                else:
                    confidences = None
                    loss_pl = zero()

                loss_cons = consistency_loss(p_mel, p_coch)

                if config.use_saml:
                    queries, query_labels = _contrastive_batch(
                        outputs, labels, labeled, confidences, config.mode
                    )
                    loss_cont = (
                        memory.contrastive_loss(
                            queries, query_labels, queue,
                            tau_cont=config.contrast_temperature,
                            normalized=config.contrastive_normalized,
                        )
                        if queries is not None else zero()
                    )
                else:
                    loss_cont = zero()

                loss = total_loss(
                    {"cls": loss_cls, "pl": loss_pl, "cons": loss_cons, "cont": loss_cont},
                    weights,
                )

                optimizer.zero_grad()
                loss.backward()
                pre_norm, post_norm = clip_grad_norm(params, config.grad_clip)
                optimizer.step(lr=lr)
            except (NonFiniteValue, NonFiniteLoss) as exc:
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}: {exc}",
                    epoch=epoch, batch_index=batch_index,
                ) from exc

            if config.use_saml:
                enq_feats, enq_labels = _enqueue_batch(outputs, labels, labeled, confidences, config.mode)
                if enq_feats is not None and enq_feats.shape[0] > 0:
                    queue.enqueue(enq_feats, enq_labels)

            preds = np.argmax(outputs.logits_fuse.data, axis=1)
            score_mask = labeled if config.mode == "semi" else np.ones_like(labeled, dtype=bool)
            correct += int(np.sum((preds == labels) & score_mask))
            counted += int(score_mask.sum())

            sums["total"] += float(loss.data)
            sums["cls"] += float(loss_cls.data)
            sums["pl"] += float(loss_pl.data)
            sums["cons"] += float(loss_cons.data)
            sums["cont"] += float(loss_cont.data)
            if on_step is not None:
                on_step({"epoch": epoch, "batch": batch_index, "pre_clip_norm": pre_norm, "post_clip_norm": post_norm})

        n_batches = len(batches)
        if config.use_pcl and cur_stats.confidence:
            diag = curriculum.curriculum_diagnostics(cur_stats, tau, theta)
        else:
            diag = {"mask_ratio": 0.0, "mean_reliability": 0.0, "mean_confidence": 0.0}

        try:
            qdiag = memory.queue_diagnostics(queue) if config.use_saml else None
        except EmptyQueue:
            qdiag = None
        queue_entropy = qdiag["label_entropy"] if qdiag else 0.0
        queue_coverage = list(qdiag["class_coverage"]) if qdiag else [0.0] * (model_config.n_classes)

        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            tau=tau,
            theta=theta if theta is not None else 0.0,
            loss_total=sums["total"] / n_batches,
            loss_cls=sums["cls"] / n_batches,
            loss_pl=sums["pl"] / n_batches,
            loss_cons=sums["cons"] / n_batches,
            loss_cont=sums["cont"] / n_batches,
            mask_ratio=diag["mask_ratio"],
            mean_reliability=diag["mean_reliability"],
            mean_confidence=diag["mean_confidence"],
            queue_entropy=queue_entropy,
            queue_coverage=queue_coverage,
            train_acc=correct / counted if counted else 0.0,
        )
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)

    return TrainResult(
        model=model, queue=queue, records=records,
        optimizer=optimizer, config=config, model_config=model_config,
    )


def _contrastive_batch(outputs, labels, labeled, confidences, mode):
    """Queries are the batch's normalised fused features with ground-truth
    labels where available; in semi mode unlabeled samples join only when
    selected, with their pseudo-labels."""
    if mode == "full":
        return nc.l2_normalize(outputs.z_fuse), labels
    keep, pseudo = [], []
    for i in range(labels.shape[0]):
        if labeled[i]:
            keep.append(i)
            pseudo.append(labels[i])
        elif confidences is not None and confidences[i].selected:
            keep.append(i)
            pseudo.append(confidences[i].pseudo_label)
    if not keep:
        return None, None
    sel = np.zeros((len(keep), labels.shape[0]), dtype=outputs.z_fuse.dtype)
    sel[np.arange(len(keep)), keep] = 1.0
    picked = nc.matmul(Tensor(sel), outputs.z_fuse)
    return nc.l2_normalize(picked), np.array(pseudo, dtype=np.int64)


def _enqueue_batch(outputs, labels, labeled, confidences, mode):
    """Detached fused features and the labels they are stored under."""
    feats = outputs.z_fuse.data
    if mode == "full":
        return feats, labels
    keep, stored = [], []
    for i in range(labels.shape[0]):
        if labeled[i]:
            keep.append(i)
            stored.append(labels[i])
        elif confidences is not None and confidences[i].selected:
            keep.append(i)
            stored.append(confidences[i].pseudo_label)
    if not keep:
        return None, None
    return feats[keep], np.array(stored, dtype=np.int64)


# -- evaluation ---------------------------------------------------------------


def accuracy_score(labels, preds) -> float:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    return float(np.mean(labels == preds))


def f1_score(labels, preds) -> float:
    """F1 of the positive class; zero when precision + recall is zero."""
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2 * tp + fp + fn)


def auc_score(labels, scores) -> float:
    """Mann-Whitney rank AUC on positive-class scores; ties count one half.
    Returns 0.5 when a class is absent."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.shape[0], dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.shape[0]:
        j = i
        while j + 1 < sorted_scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # mid-rank, 1-based
        i = j + 1
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def predict_scores(model: DualViewModel, samples: list[Sample], ensemble: bool = False,
                   batch_size: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positive-class probabilities and argmax predictions for a sample list.

    Uses the fused head; ensemble mode averages the three heads'
    temperature-1 probabilities.
    """
    labels = np.array([s.label for s in samples], dtype=np.int64)
    scores = np.empty(len(samples), dtype=np.float64)
    preds = np.empty(len(samples), dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        idx = list(range(start, min(start + batch_size, len(samples))))
        mel, coch, _, _ = _stack_batch(samples, idx)
        outputs = model.forward(mel, coch, training=False)
        probs = nc.softmax(outputs.logits_fuse).data
        if ensemble:
            probs = (
                nc.softmax(outputs.logits_mel).data
                + nc.softmax(outputs.logits_coch).data
                + probs
            ) / 3.0
        scores[idx] = probs[:, 1]
        preds[idx] = np.argmax(probs, axis=1)
    return labels, scores, preds


def evaluate(model: DualViewModel, samples: list[Sample], ensemble: bool = False) -> Metrics:
    if not samples:
        raise EmptySplit("evaluation split is empty")
    labels, scores, preds = predict_scores(model, samples, ensemble=ensemble)
    return Metrics(
        acc=accuracy_score(labels, preds),
        f1=f1_score(labels, preds),
        auc=auc_score(labels, scores),
    )


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(path, result: TrainResult, config_hash: str):
    """Container with named parameters, optimiser state, and the queue
    snapshot, stamped with the run config hash."""
    from .ioutil import atomic_write_bytes

    sections = []
    params_blob = nc.pack_array_table({n: p.data for n, p in result.model.parameters().items()})
    sections.append((b"PARM", params_blob))
    opt_blob = nc.pack_array_table(result.optimizer.state_arrays())
    sections.append((b"ADAM", opt_blob))
    queue_blob = nc.pack_array_table(result.queue.snapshot())
    sections.append((b"QUEU", queue_blob))

    hash_raw = config_hash.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<H", len(hash_raw)), hash_raw,
             struct.pack("<I", len(sections))]
    for tag, blob in sections:
        parts.append(tag)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    atomic_write_bytes(path, b"".join(parts))


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMismatch(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported version {version}")
    offset = 8
    (hash_len,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    config_hash = buf[offset:offset + hash_len].decode("utf-8")
    offset += hash_len
    (n_sections,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    sections = {}
    for _ in range(n_sections):
        tag = buf[offset:offset + 4]
        offset += 4
        (length,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        table, _ = nc.unpack_array_table(buf[offset:offset + length])
        sections[tag.decode("ascii")] = table
        offset += length
    return {"config_hash": config_hash, "sections": sections}


def load_model_from_checkpoint(path, model_config: ModelConfig, expected_hash: str | None = None) -> tuple[DualViewModel, dict]:
    """Rebuild a model from a checkpoint; raises CheckpointMismatch when the
    stored config hash differs from expected_hash."""
    payload = read_checkpoint(path)
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        raise CheckpointMismatch(
            f"checkpoint hash {payload['config_hash']} != config hash {expected_hash}"
        )
    model = DualViewModel(model_config, np.random.default_rng(0))
    params = model.parameters()
    stored = payload["sections"]["PARM"]
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise CheckpointMismatch(f"parameter table mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, p in params.items():
        arr = np.asarray(stored[name], dtype=p.data.dtype)
        if arr.shape != p.data.shape:
            raise CheckpointMismatch(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr.copy()
    return model, payload
