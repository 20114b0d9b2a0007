"""Auxiliary networks and losses for adversarial mask refinement.

The detection network is a Siamese verifier that scores whether two masked
images are a correlated pair; the discriminative network is a spectrally
normalized critic distinguishing ground-truth-masked images from generated
ones.  Both consume 1/8-resolution average-pooled images multiplied by the
tampered-probability channel of a mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import DimensionError, ParameterError, ValidationError

LOSS_VARIANTS = ("bce", "hinge")


@dataclass
class LossWeights:
    """Weights of the two adversarial terms in the matcher objective."""

    lambda_det: float = 0.01
    lambda_dis: float = 0.01
    variant: str = "bce"

    def __post_init__(self):
        if self.lambda_det < 0 or self.lambda_dis < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.variant not in LOSS_VARIANTS:
            raise ParameterError(f"variant must be one of {LOSS_VARIANTS}")


def pair_labels(correlated) -> np.ndarray:
    """One-hot 2-vectors: index 0 marks a correlated pair, index 1 an
    uncorrelated one."""
    flags = np.asarray(correlated, dtype=bool).reshape(-1)
    out = np.zeros((flags.size, 2))
    out[np.arange(flags.size), (~flags).astype(int)] = 1.0
    return out


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != 2:
        raise ValidationError("labels must be one-hot B×2 vectors")
    if not np.all(np.isin(labels, (0.0, 1.0))) or not np.all(labels.sum(axis=1) == 1.0):
        raise ValidationError("labels must have exactly one component set to 1")
    return labels


def pool_image(images: Tensor) -> Tensor:
    """Average-pool an image batch by 8 (256×256 -> 32×32)."""
    images = ad.as_tensor(images)
    if images.data.ndim != 4 or images.data.shape[1] != 3:
        raise DimensionError("pool_image expects a B×3×S×S tensor")
    if images.data.shape[2] % 8 or images.data.shape[3] % 8:
        raise DimensionError("image size must be divisible by 8")
    return ad.avgpool2d(images, 8)


def mask_image(mask: Tensor, pooled: Tensor) -> Tensor:
    """Broadcast-multiply the tampered-probability channel over a pooled
    RGB image.

    ``mask`` is B×2×r×r (soft, channel 1 used) or B×1×r×r binary; values
    must lie in [0, 1].
    """
    mask, pooled = ad.as_tensor(mask), ad.as_tensor(pooled)
    if mask.data.ndim != 4 or mask.data.shape[1] not in (1, 2):
        raise DimensionError("mask must be B×1×r×r or B×2×r×r")
    if mask.data.shape[-2:] != pooled.data.shape[-2:]:
        raise DimensionError("mask and pooled image sizes differ")
    if mask.data.min() < 0.0 or mask.data.max() > 1.0:
        raise ValidationError("mask values must lie in [0, 1]")
    channel = mask.data.shape[1] - 1          # tampered channel: index 1, or 0 for 1-ch
    tampered = _slice_channel(mask, channel)
    return ad.mul(tampered, pooled)


def _slice_channel(t: Tensor, channel: int) -> Tensor:
    data = t.data[:, channel:channel + 1]

    def bwd(g):
        full = np.zeros_like(t.data)
        full[:, channel:channel + 1] = g
        ad._accumulate(t, full)

    return ad._compose(data, (t,), bwd, "slice_channel")


class DetectionNet(nn.Module):
    """Siamese correlation verifier over two masked images.

    Shared convolutional features, absolute feature difference, two fully
    connected layers, 2-class softmax.  Sized for ``resolution``×``resolution``
    inputs (default 32).
    """

    def __init__(self, *, rng, resolution: int = 32, dtype=np.float32):
        super().__init__()
        if resolution % 4:
            raise ParameterError("detection net resolution must be divisible by 4")
        self.resolution = resolution
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, rng=rng, padding=1, dtype=dtype),
            nn.BatchNorm2d(16, dtype=dtype),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, rng=rng, padding=1, dtype=dtype),
            nn.BatchNorm2d(32, dtype=dtype),
            nn.ReLU(),
            nn.Conv2d(32, 32, 3, rng=rng, padding=1, dtype=dtype),
            nn.BatchNorm2d(32, dtype=dtype),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, rng=rng, padding=1, dtype=dtype),
            nn.BatchNorm2d(64, dtype=dtype),
            nn.ReLU(),
        )
        flat = 64 * (resolution // 4) ** 2
        self.fc1 = nn.Linear(flat, 256, rng=rng, dtype=dtype)
        self.fc2 = nn.Linear(256, 2, rng=rng, dtype=dtype)

    def forward(self, masked_a: Tensor, masked_b: Tensor) -> Tensor:
        for t in (masked_a, masked_b):
            if t.data.ndim != 4 or t.data.shape[1:] != (3, self.resolution, self.resolution):
                raise DimensionError(
                    f"detection net expects B×3×{self.resolution}×{self.resolution} inputs")
        fa = self.features(masked_a)
        fb = self.features(masked_b)
        b = fa.data.shape[0]
        diff = ad.absolute(ad.add(ad.reshape(fa, (b, -1)),
                                  ad.mul(ad.reshape(fb, (b, -1)), -1.0)))
        hidden = ad.relu(self.fc1(diff))
        return ad.softmax(self.fc2(hidden), axis=1)


class Discriminator(nn.Module):
    """Spectrally normalized mask-realism critic.

    Returns one score per sample: a sigmoid probability for the ``bce``
    variant, the raw score for ``hinge``.
    """

    def __init__(self, *, rng, resolution: int = 32, variant: str = "bce",
                 dtype=np.float32):
        super().__init__()
        if variant not in LOSS_VARIANTS:
            raise ParameterError(f"variant must be one of {LOSS_VARIANTS}")
        if resolution % 4:
            raise ParameterError("discriminator resolution must be divisible by 4")
        self.variant = variant
        self.resolution = resolution
        self.net = nn.Sequential(
            nn.SpectralConv2d(3, 16, 3, rng=rng, padding=1, dtype=dtype),
            nn.LeakyReLU(0.2),
            nn.MaxPool2d(2),
            nn.SpectralConv2d(16, 32, 3, rng=rng, padding=1, dtype=dtype),
            nn.LeakyReLU(0.2),
            nn.SpectralConv2d(32, 32, 3, rng=rng, padding=1, dtype=dtype),
            nn.LeakyReLU(0.2),
            nn.MaxPool2d(2),
            nn.SpectralConv2d(32, 64, 3, rng=rng, padding=1, dtype=dtype),
            nn.LeakyReLU(0.2),
        )
        self.fc = nn.SpectralLinear(64 * (resolution // 4) ** 2, 1, rng=rng, dtype=dtype)

    def spectral_layers(self):
        return [m for m in self.modules() if hasattr(m, "spectral")]

    def forward(self, masked: Tensor) -> Tensor:
        if masked.data.ndim != 4 or masked.data.shape[1:] != (3, self.resolution, self.resolution):
            raise DimensionError(
                f"discriminator expects B×3×{self.resolution}×{self.resolution} inputs")
        h = self.net(masked)
        b = h.data.shape[0]
        score = ad.reshape(self.fc(ad.reshape(h, (b, -1))), (b,))
        if self.variant == "bce":
            return ad.sigmoid(score)
        return score


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def spatial_ce(masks, gt_a: np.ndarray, gt_b: np.ndarray) -> Tensor:
    """Spatial cross entropy over both masks of the pair, summed over
    pixels and classes, averaged over the batch.

    ``gt_a``/``gt_b`` are one-hot B×2×h×w arrays.
    """
    y_a, y_b = masks.y_a, masks.y_b
    total = None
    for pred, gt in ((y_a, gt_a), (y_b, gt_b)):
        gt = np.asarray(gt)
        if gt.shape != pred.data.shape:
            raise DimensionError(
                f"ground truth shape {gt.shape} != prediction {pred.data.shape}")
        if not np.all(np.isin(gt, (0.0, 1.0))) or not np.allclose(gt.sum(axis=1), 1.0):
            raise ValidationError("ground-truth masks must be one-hot per pixel")
        term = ad.tsum(ad.mul(Tensor(gt.astype(pred.data.dtype)),
                              ad.log_clamped(pred)))
        total = term if total is None else ad.add(total, term)
    m = y_a.data.shape[0]
    return ad.mul(total, -1.0 / m)


def det_loss_g(det_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Detection term for the matcher: negative log-probability of the true
    pair class under the verifier, on generated masked images."""
    labels = _check_labels(labels)
    if det_probs.data.shape != labels.shape:
        raise DimensionError("probs and labels must both be B×2")
    m = labels.shape[0]
    picked = ad.tsum(ad.mul(Tensor(labels.astype(det_probs.data.dtype)),
                            ad.log_clamped(det_probs)))
    return ad.mul(picked, -1.0 / m)


def det_loss_d(probs_on_gt: Tensor, probs_on_generated: Tensor,
               labels: np.ndarray) -> Tensor:
    """Verifier training loss: true-class log terms on ground-truth-masked
    and generated-masked inputs, both supervised by the pair label."""
    return ad.add(det_loss_g(probs_on_gt, labels),
                  det_loss_g(probs_on_generated, labels))


def dis_loss_g(scores: Tensor, variant: str = "bce") -> Tensor:
    """Critic-derived term for the matcher over scores of generated masked
    images of both pair members (a batch of 2m scores)."""
    if variant not in LOSS_VARIANTS:
        raise ParameterError(f"variant must be one of {LOSS_VARIANTS}")
    m = scores.data.size // 2
    if m < 1:
        raise DimensionError("need scores of both pair members")
    if variant == "bce":
        _check_bce_range(scores.data)
        return ad.mul(ad.tsum(ad.log_clamped(scores)), -1.0 / m)
    return ad.mul(ad.tsum(scores), -1.0 / m)


def dis_loss_d(scores_real: Tensor, scores_fake: Tensor,
               variant: str = "bce") -> Tensor:
    """Critic training loss.

    bce: -(1/m) sum[log Dis(real) + log(1 - Dis(fake))]
    hinge: -(1/m) sum[min(0, -1 + Dis(real)) + min(0, -1 - Dis(fake))]
    """
    if variant not in LOSS_VARIANTS:
        raise ParameterError(f"variant must be one of {LOSS_VARIANTS}")
    if scores_real.data.shape != scores_fake.data.shape:
        raise DimensionError("real and fake score batches must match")
    m = scores_real.data.size // 2
    if m < 1:
        raise DimensionError("need scores of both pair members")
    if variant == "bce":
        _check_bce_range(scores_real.data)
        _check_bce_range(scores_fake.data)
        real_term = ad.tsum(ad.log_clamped(scores_real))
        fake_term = ad.tsum(ad.log_clamped(ad.add(1.0, ad.mul(scores_fake, -1.0))))
        return ad.mul(ad.add(real_term, fake_term), -1.0 / m)
    real_term = ad.tsum(ad.minimum_const(ad.add(scores_real, -1.0), 0.0))
    fake_term = ad.tsum(ad.minimum_const(
        ad.mul(ad.add(scores_fake, 1.0), -1.0), 0.0))
    return ad.mul(ad.add(real_term, fake_term), -1.0 / m)


def _check_bce_range(scores: np.ndarray) -> None:
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValidationError("bce variant expects probabilities in (0, 1)")


def matcher_loss(ce: Tensor, det_term: Tensor | None, dis_term: Tensor | None,
                 weights: LossWeights) -> Tensor:
    """Combined objective: ce + lambda_det * det + lambda_dis * dis.

    Zero weights drop the corresponding term entirely, so the (0, 0)
    configuration is exactly the plain cross-entropy baseline.
    """
    total = ce
    if weights.lambda_det and det_term is not None:
        total = ad.add(total, ad.mul(det_term, weights.lambda_det))
    if weights.lambda_dis and dis_term is not None:
        total = ad.add(total, ad.mul(dis_term, weights.lambda_dis))
    return total
