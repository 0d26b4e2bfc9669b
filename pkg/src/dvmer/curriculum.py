"""Curriculum pseudo-labelling: linear temperature and threshold schedules,
cross-view agreement via Jensen-Shannon divergence, reliability-weighted
confidence scoring, pseudo-label selection, and the weighted pseudo-label
loss.

Temperature descends linearly from tau_max to tau_min and the selection
threshold from theta_start to theta_min as training progresses.
Cross-view disagreement JS(p, q) is bounded by ln 2 (nats); reliability
r = exp(-JS) therefore lives in [0.5, 1]. Confidence is c = r * max(p_fuse)
with p_fuse the mean of the two branch distributions; samples whose
confidence clears the current threshold receive pseudo-labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nc
from .errors import BadEpoch, NotADistribution
from .nncore import Tensor

TAU_MAX_DEFAULT = 1.5
TAU_MIN_DEFAULT = 0.7
THETA_START_DEFAULT = 0.65
THETA_MIN_DEFAULT = 0.35


@dataclass
class CurriculumState:
    epoch: int
    total: int
    tau: float
    theta: float


@dataclass
class SampleConfidence:
    p_mel: np.ndarray
    p_coch: np.ndarray
    p_fuse: np.ndarray
    js: float
    r: float
    c: float
    pseudo_label: int
    selected: bool = False


def _check_epoch(t: int, total: int):
    if total <= 0:
        raise BadEpoch(f"total epochs must be positive, got {total}")
    if t < 0 or t > total:
        raise BadEpoch(f"epoch {t} outside [0, {total}]")


def temperature_at(t: int, total: int, tau_max: float = TAU_MAX_DEFAULT, tau_min: float = TAU_MIN_DEFAULT) -> float:
    """Linear descent from tau_max at t=0 to tau_min at t=total."""
    _check_epoch(t, total)
    return tau_max - (tau_max - tau_min) * (t / total)


def threshold_at(t: int, total: int, theta_start: float = THETA_START_DEFAULT, theta_min: float = THETA_MIN_DEFAULT) -> float:
    """Linear descent from theta_start at t=0 to theta_min at t=total."""
    _check_epoch(t, total)
    return theta_start - (theta_start - theta_min) * (t / total)


def curriculum_state(epoch: int, total_epochs: int, tau_max=TAU_MAX_DEFAULT, tau_min=TAU_MIN_DEFAULT,
                     theta_start=THETA_START_DEFAULT, theta_min=THETA_MIN_DEFAULT) -> CurriculumState:
    """Schedule values for one epoch of a run with total_epochs epochs.

    Epochs are indexed 0..total_epochs-1 and mapped onto the full schedule
    range so the logged trajectory hits both endpoints exactly: the first
    epoch uses the maximum values and the last epoch the minimums.
    """
    if total_epochs <= 0:
        raise BadEpoch(f"total_epochs must be positive, got {total_epochs}")
    if epoch < 0 or epoch >= total_epochs:
        raise BadEpoch(f"epoch {epoch} outside [0, {total_epochs})")
    span = max(total_epochs - 1, 1)
    step = min(epoch, span)
    return CurriculumState(
        epoch=epoch,
        total=total_epochs,
        tau=temperature_at(step, span, tau_max, tau_min),
        theta=threshold_at(step, span, theta_start, theta_min),
    )


def _validate_distribution(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise NotADistribution(f"{name} must be a vector, got shape {p.shape}")
    if np.any(p < 0):
        raise NotADistribution(f"{name} has negative entries")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise NotADistribution(f"{name} sums to {p.sum()!r}, not 1")
    return p


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats, with 0*log(0/x) := 0.

    Symmetric and bounded by ln 2.
    """
    p = _validate_distribution(p, "p")
    q = _validate_distribution(q, "q")
    if p.shape != q.shape:
        raise NotADistribution(f"shape mismatch {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def kl(a):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / m[mask])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def reliability(p_mel, p_coch) -> float:
    """exp(-JS); 1 for perfect agreement, 0.5 at maximal disagreement."""
    return float(np.exp(-js_divergence(p_mel, p_coch)))


def confidence_and_pseudo_label(p_mel, p_coch, theta: float | None = None) -> SampleConfidence:
    """Fuse branch distributions, score the sample, and pick its label.

    Argmax ties break toward the lowest class index. When theta is given
    the selected flag is set from c >= theta.
    """
    p_mel = _validate_distribution(p_mel, "p_mel")
    p_coch = _validate_distribution(p_coch, "p_coch")
    js = js_divergence(p_mel, p_coch)
    r = float(np.exp(-js))
    p_fuse = 0.5 * (p_mel + p_coch)
    pseudo_label = int(np.argmax(p_fuse))  # np.argmax takes the first maximum
    c = r * float(np.max(p_fuse))
    sc = SampleConfidence(
        p_mel=p_mel, p_coch=p_coch, p_fuse=p_fuse,
        js=js, r=r, c=c, pseudo_label=pseudo_label,
    )
    if theta is not None:
        sc.selected = sc.c >= theta
    return sc


def batch_confidences(p_mel_batch, p_coch_batch, theta: float) -> list[SampleConfidence]:
    p_mel_batch = np.asarray(p_mel_batch, dtype=np.float64)
    p_coch_batch = np.asarray(p_coch_batch, dtype=np.float64)
    return [
        confidence_and_pseudo_label(p_mel_batch[i], p_coch_batch[i], theta)
        for i in range(p_mel_batch.shape[0])
    ]


def pseudo_label_loss(confidences: list[SampleConfidence], fused_logits: Tensor, eligible=None) -> Tensor:
    """Reliability-weighted cross-entropy over the selected samples.

    Labels, reliabilities and the selection mask are all detached from the
    graph; gradients reach only the fused logits. Returns zero when nothing
    is selected. The optional eligible mask restricts which samples may
    contribute (the unlabeled partition in semi mode).
    """
    idx = [
        i for i, sc in enumerate(confidences)
        if sc.selected and (eligible is None or eligible[i])
    ]
    if not idx:
        return Tensor(np.zeros((), dtype=fused_logits.dtype))
    labels = np.array([confidences[i].pseudo_label for i in idx], dtype=np.int64)
    weights = np.array([confidences[i].r for i in idx], dtype=fused_logits.dtype)

    rows = np.zeros((len(idx), fused_logits.shape[0]), dtype=fused_logits.dtype)
    for row, i in enumerate(idx):
        rows[row, i] = 1.0
    picked = nc.matmul(Tensor(rows), fused_logits)
    per_sample = nc.cross_entropy(picked, labels)
    return nc.tmean(nc.mul(per_sample, Tensor(weights)))


def js_divergence_tensor(p: Tensor, q: Tensor) -> Tensor:
    """Differentiable JS over the last axis of probability tensors.

    Hard zeros in the inputs contribute 0 (log floor keeps them finite);
    softmax outputs never hit the floor, so the training path is exact.
    """
    m = nc.mul(nc.add(p, q), 0.5)
    log_m = nc.log_clipped(m)
    term_p = nc.tsum(nc.mul(p, nc.sub(nc.log_clipped(p), log_m)), axis=-1)
    term_q = nc.tsum(nc.mul(q, nc.sub(nc.log_clipped(q), log_m)), axis=-1)
    return nc.mul(nc.add(term_p, term_q), 0.5)


@dataclass
class EpochCurriculumStats:
    """Per-batch accumulator feeding the epoch diagnostics."""

    confidence: list = field(default_factory=list)
    reliab: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    strength: list = field(default_factory=list)  # max(p_fuse) of selected samples

    def record(self, confidences: list[SampleConfidence]):
        for sc in confidences:
            self.confidence.append(sc.c)
            self.reliab.append(sc.r)
            self.selected.append(sc.selected)
            if sc.selected:
                self.strength.append(float(np.max(sc.p_fuse)))


def curriculum_diagnostics(stats: EpochCurriculumStats, tau: float, theta: float) -> dict:
    """Epoch summary of pseudo-label behaviour."""
    if not stats.confidence:
        raise BadEpoch("diagnostics require at least one recorded batch")
    selected = np.asarray(stats.selected, dtype=bool)
    return {
        "mean_confidence": float(np.mean(stats.confidence)),
        "std_confidence": float(np.std(stats.confidence)),
        "mean_reliability": float(np.mean(stats.reliab)),
        "std_reliability": float(np.std(stats.reliab)),
        "mask_ratio": float(selected.mean()),
        "pseudo_label_strength": float(np.mean(stats.strength)) if stats.strength else 0.0,
        "tau": tau,
        "theta": theta,
    }
