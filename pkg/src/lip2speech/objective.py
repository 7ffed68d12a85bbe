"""CTC, ASR-feature and reconstruction losses and their scheduled weighted sum."""
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels


class CTCInfeasibleError(ValueError):
    """Target cannot be aligned to the available frames."""


def ctc_min_frames(target):
    """Frames needed to emit ``target``: its length plus one blank per repeated pair."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, targets, input_lengths, target_lengths, blank):
        lp = log_probs.detach().cpu().double().numpy()
        B = lp.shape[0]
        losses = np.zeros(B)
        grads = np.zeros_like(lp)
        for b in range(B):
            T = int(input_lengths[b])
            tgt = targets[b, : int(target_lengths[b])].cpu().numpy()
            losses[b], grads[b, :T] = kernels.ctc_forward_backward(lp[b, :T], tgt, blank)
        ctx.save_for_backward(torch.from_numpy(grads).to(log_probs.dtype))
        return torch.from_numpy(losses).to(log_probs.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grads,) = ctx.saved_tensors
        return grads * grad_out[:, None, None], None, None, None, None


def ctc_loss(log_probs, targets, input_lengths, target_lengths, blank=0, reduction="mean"):
    """Negative log-probability of each target over all blank-augmented alignments.

    ``log_probs`` is (B, T, N) log-softmax output. ``reduction`` is ``"mean"``
    (average over the batch), ``"sum"`` or ``"none"``. Raises
    :class:`CTCInfeasibleError` when a target needs more frames than available.
    """
    targets = torch.as_tensor(targets)
    input_lengths = torch.as_tensor(input_lengths)
    target_lengths = torch.as_tensor(target_lengths)
    for b in range(log_probs.shape[0]):
        need = ctc_min_frames(targets[b, : int(target_lengths[b])].tolist())
        if need > int(input_lengths[b]):
            raise CTCInfeasibleError(
                f"sample {b}: target needs {need} frames, only {int(input_lengths[b])} available"
            )
    losses = _CTCFunction.apply(log_probs, targets, input_lengths, target_lengths, blank)
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    return losses


def ctc_loss_from_probs(probs, target, blank=0):
    """Scalar CTC loss for one (T, N) posterior matrix; convenience for numpy callers."""
    probs = np.asarray(probs, dtype=np.float64)
    if ctc_min_frames(target) > probs.shape[0]:
        raise CTCInfeasibleError("target longer than CTC-feasible for the given frames")
    with np.errstate(divide="ignore"):
        loss, _ = kernels.ctc_forward_backward(np.log(probs), target, blank)
    return loss


def _masked_mean(x, mask):
    if mask is None:
        return x.mean()
    m = mask.to(x.dtype)
    while m.dim() < x.dim():
        m = m[..., None]
    m = m.expand_as(x)
    return (x * m).sum() / m.sum()


def asr_content_loss(z, z_hat, mask=None):
    """Mean squared distance between ground-truth and synthesized ASR features.

    ``z`` is detached; only ``z_hat`` receives gradient. ``mask`` (B, S')
    restricts the mean to valid frames.
    """
    if z.shape != z_hat.shape:
        raise ValueError(f"feature shapes differ: {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    return _masked_mean((z.detach() - z_hat) ** 2, mask)


def reconstruction_loss(y_hat, y, mask=None):
    """Mean absolute error between predicted and target mels."""
    if y.shape != y_hat.shape:
        raise ValueError(f"mel shapes differ: {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    return _masked_mean((y_hat - y).abs(), mask)


@dataclass
class LossWeights:
    lambda_ctc: float = 1.0
    lambda_asr: float = 1.0
    lambda_rec: float = 100.0

    def __post_init__(self):
        if min(self.lambda_ctc, self.lambda_asr, self.lambda_rec) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class ScheduleState:
    """Warm-up gate for the ASR feature loss.

    The gate opens, permanently, once the EMA of the reconstruction loss
    drops below ``gate_threshold`` or the epoch reaches ``fallback_epoch``.
    """

    asr_loss_enabled: bool = False
    rec_loss_ema: float = None
    gate_threshold: float = 0.3
    fallback_epoch: int = 10
    ema_decay: float = 0.98
    flip_step: int = None

    def effective_lambda_asr(self, weights):
        return weights.lambda_asr if self.asr_loss_enabled else 0.0

    def start_epoch(self, epoch, step):
        if not self.asr_loss_enabled and epoch >= self.fallback_epoch:
            self._enable(step)

    def update(self, l_rec, step):
        """Fold one step's reconstruction loss into the EMA; ``step`` is the next step index."""
        l_rec = float(l_rec)
        if self.rec_loss_ema is None:
            self.rec_loss_ema = l_rec
        else:
            self.rec_loss_ema = self.ema_decay * self.rec_loss_ema + (1 - self.ema_decay) * l_rec
        if not self.asr_loss_enabled and self.rec_loss_ema < self.gate_threshold:
            self._enable(step)

    def _enable(self, step):
        self.asr_loss_enabled = True
        self.flip_step = step

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossBundle:
    l_ctc: object
    l_asr: object
    l_rec: object
    l_tot: object
    weights: LossWeights = field(default_factory=LossWeights)
    lambda_asr_eff: float = 0.0

    def as_floats(self):
        out = {}
        for k in ("l_ctc", "l_asr", "l_rec", "l_tot"):
            v = getattr(self, k)
            out[k] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def total_loss(l_ctc, l_asr, l_rec, weights=LossWeights(), schedule=None):
    """Weighted sum of the three losses with the ASR term gated by ``schedule``.

    Works on Python floats or torch scalars. Without a schedule the ASR
    term is always on.
    """
    lam_asr = weights.lambda_asr if schedule is None else schedule.effective_lambda_asr(weights)
    tot = weights.lambda_ctc * l_ctc + lam_asr * l_asr + weights.lambda_rec * l_rec
    return LossBundle(l_ctc, l_asr, l_rec, tot, weights, lam_asr)


@dataclass
class ObjectiveConfig:
    lambda_ctc: float = 1.0
    lambda_asr: float = 1.0
    lambda_rec: float = 100.0
    gate_threshold: float = 0.3
    fallback_epoch: int = 10
    ema_decay: float = 0.98

    def weights(self):
        return LossWeights(self.lambda_ctc, self.lambda_asr, self.lambda_rec)

    def schedule(self):
        return ScheduleState(gate_threshold=self.gate_threshold, fallback_epoch=self.fallback_epoch,
                             ema_decay=self.ema_decay)
