"""Dense-matching network: atrous backbone, spatially-restricted correlation
with a three-level skip architecture, and the multi-rate mask head.

The correlation layer compares descriptor pairs under every cyclic
translation of the second map.  For each translation ``(i_t, j_t)`` the raw
volume channel ``k = w*i_t + j_t`` holds the per-position scalar products

    vol[k, i, j] = <f_a(:, i, j), f_b(:, (i+i_t) mod h, (j+j_t) mod w)>

and the layer emits, per input pair, the average map, the max map and the
top-T channels ranked by descending spatial sum (T'=min(T, h*w) channels).
``correlate_naive`` is a direct loop transcription kept as an oracle; the
vectorized path accumulates in the same element order so the two agree
bitwise in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import DimensionError, ParameterError

TOY_BLOCKS = ([8, 8], [16, 16], [32, 32, 32], [64, 64, 64], [64, 64, 64])
PAPER_BLOCKS = ([64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512])


@dataclass
class BackboneConfig:
    """Channel plan for the five-block feature extractor.

    Three downsamplings are retained (after blocks 1-3), so the pyramid
    resolution is ``input_size / 8``; block 5 runs at ``atrous_rate_block5``.
    """

    block_channels: tuple = TOY_BLOCKS
    atrous_rate_block5: int = 2
    input_size: int = 64

    def __post_init__(self):
        if len(self.block_channels) != 5:
            raise ParameterError("block_channels must list five blocks")
        if self.input_size % 8:
            raise DimensionError("input_size must be a multiple of 8")
        if self.atrous_rate_block5 < 1:
            raise ParameterError("atrous rate must be >= 1")

    @property
    def feature_size(self) -> int:
        return self.input_size // 8

    @classmethod
    def preset(cls, name: str, input_size: int | None = None) -> "BackboneConfig":
        if name == "paper":
            return cls(PAPER_BLOCKS, 2, input_size or 256)
        if name == "toy":
            return cls(TOY_BLOCKS, 2, input_size or 64)
        raise ParameterError(f"unknown preset {name!r}")


@dataclass
class FeaturePyramid:
    """Three same-resolution feature maps from increasing depths."""

    f3: Tensor
    f4: Tensor
    f5: Tensor

    def levels(self):
        return (self.f3, self.f4, self.f5)


@dataclass
class CorrelationStack:
    """Per-image correlation summaries, all three levels concatenated."""

    c_a: Tensor
    c_b: Tensor


@dataclass
class MaskPair:
    """Per-pixel class probabilities for both images
    (channel 0 pristine, channel 1 tampered)."""

    y_a: Tensor
    y_b: Tensor


# ---------------------------------------------------------------------------
# correlation layer
# ---------------------------------------------------------------------------


def _all_shifts(fb: np.ndarray) -> np.ndarray:
    """View of shape (B, d, h, w, h, w) where entry [b,c,it,jt,i,j] equals
    fb[b, c, (i+it)%h, (j+jt)%w]."""
    b, d, h, w = fb.shape
    doubled = np.tile(fb, (1, 1, 2, 2))
    sb, sc, sh, sw = doubled.strides
    return as_strided(doubled, shape=(b, d, h, w, h, w),
                      strides=(sb, sc, sh, sw, sh, sw), writeable=False)


def _corr_volume(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Raw correlation volume (B, h*w, h, w), channel k = w*i_t + j_t.

    Accumulates over descriptor channels sequentially so results match the
    loop oracle bitwise.
    """
    b, d, h, w = fa.shape
    shifts = _all_shifts(fb)
    vol = np.zeros((b, h, w, h, w), dtype=fa.dtype)
    for ch in range(d):
        vol += fa[:, ch, None, None, :, :] * shifts[:, ch]
    return vol.reshape(b, h * w, h, w)


def _corr_volume_grads(gvol: np.ndarray, fa: np.ndarray,
                       fb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, d, h, w = fa.shape
    g4 = gvol.reshape(b, h, w, h, w)
    dfa = np.einsum("bxyij,bcxyij->bcij", g4, _all_shifts(fb))
    # dfb[b,c,p,q] needs g4 at translation (p-i, q-j) mod (h, w): expose that
    # as a strided window over a doubled copy, like _all_shifts but reversed.
    gd = np.tile(g4, (1, 2, 2, 1, 1))
    s0, s1, s2, s3, s4 = gd.strides
    base = gd[:, h:, w:]
    rev = as_strided(base, shape=(b, h, w, h, w),
                     strides=(s0, s3 - s1, s4 - s2, s1, s2), writeable=False)
    dfb = np.einsum("bcij,bijpq->bcpq", fa, np.ascontiguousarray(rev))
    return dfa, dfb


def _channel_mean_seq(vol: np.ndarray) -> np.ndarray:
    """Mean over the channel axis, accumulated in channel order."""
    b, k = vol.shape[:2]
    acc = np.zeros((b,) + vol.shape[2:], dtype=vol.dtype)
    for ch in range(k):
        acc += vol[:, ch]
    return acc / (vol.shape[2] * vol.shape[3])


def _channel_sums_seq(vol: np.ndarray) -> np.ndarray:
    """Spatial sum per channel, accumulated pixel by pixel in row-major
    order (keeps float ties identical to the loop oracle)."""
    b, k = vol.shape[:2]
    flat = vol.reshape(b, k, -1)
    sums = np.zeros((b, k), dtype=vol.dtype)
    for p in range(flat.shape[2]):
        sums += flat[:, :, p]
    return sums


def correlate(f_a: Tensor, f_b: Tensor, top_t: int = 6) -> Tensor:
    """Correlation summaries for one feature-map pair.

    Accepts ``(d, h, w)`` or batched ``(B, d, h, w)`` tensors and returns
    ``(T'+2, h, w)`` / ``(B, T'+2, h, w)``: average map, max map, then the
    T' = min(top_t, h*w) raw channels with the largest spatial sums in
    descending order (ties broken by ascending channel index).  The max and
    top-T selections are frozen in backward.
    """
    f_a, f_b = ad.as_tensor(f_a), ad.as_tensor(f_b)
    squeeze = f_a.data.ndim == 3
    fa = f_a.data[None] if squeeze else f_a.data
    fb = f_b.data[None] if squeeze else f_b.data
    if fa.ndim != 4 or fb.ndim != 4:
        raise DimensionError("correlate expects (d,h,w) or (B,d,h,w) tensors")
    if fa.shape != fb.shape:
        raise DimensionError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
    b, d, h, w = fa.shape
    if d < 1:
        raise DimensionError("descriptors need at least one channel")
    k = h * w
    t_eff = min(top_t, k)

    vol = _corr_volume(fa, fb)
    avg = _channel_mean_seq(vol)
    argmax = vol.argmax(axis=1)                                  # (B,h,w)
    mx = np.take_along_axis(vol, argmax[:, None], axis=1)[:, 0]
    sums = _channel_sums_seq(vol)
    order = np.argsort(-sums, axis=1, kind="stable")[:, :t_eff]   # (B,T')
    srt = np.take_along_axis(vol, order[:, :, None, None], axis=1)

    data = np.concatenate([avg[:, None], mx[:, None], srt], axis=1)

    def bwd(g):
        if squeeze:
            g = g[None]
        gvol = np.broadcast_to(g[:, 0:1] / k, vol.shape).copy()
        np.put_along_axis(
            gvol, argmax[:, None], np.take_along_axis(gvol, argmax[:, None], axis=1)
            + g[:, 1:2], axis=1)
        for t in range(t_eff):
            np.put_along_axis(
                gvol, order[:, t, None, None, None],
                np.take_along_axis(gvol, order[:, t, None, None, None], axis=1)
                + g[:, 2 + t:3 + t], axis=1)
        dfa, dfb = _corr_volume_grads(gvol, fa, fb)
        if squeeze:
            dfa, dfb = dfa[0], dfb[0]
        ad._accumulate(f_a, dfa)
        ad._accumulate(f_b, dfb)

    if squeeze:
        data = data[0]
    return ad._compose(data, (f_a, f_b), bwd, "correlate")


def correlate_naive(f_a, f_b, top_t: int = 6) -> np.ndarray:
    """Loop transcription of the correlation layer, used as an oracle.

    Works on plain (d, h, w) float arrays and must match :func:`correlate`
    exactly in float64.
    """
    fa = f_a.data if isinstance(f_a, Tensor) else np.asarray(f_a)
    fb = f_b.data if isinstance(f_b, Tensor) else np.asarray(f_b)
    if fa.ndim != 3 or fb.ndim != 3:
        raise DimensionError("correlate_naive expects (d,h,w) arrays")
    if fa.shape != fb.shape:
        raise DimensionError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
    d, h, w = fa.shape
    if d < 1:
        raise DimensionError("descriptors need at least one channel")
    k = h * w
    t_eff = min(top_t, k)

    vol = np.empty((k, h, w), dtype=fa.dtype)
    for i_t in range(h):
        for j_t in range(w):
            ch = w * i_t + j_t
            for i_a in range(h):
                for j_a in range(w):
                    i_b = (i_a + i_t) % h
                    j_b = (j_a + j_t) % w
                    s = fa.dtype.type(0)
                    for c in range(d):
                        s += fa[c, i_a, j_a] * fb[c, i_b, j_b]
                    vol[ch, i_a, j_a] = s

    avg = np.empty((h, w), dtype=fa.dtype)
    mx = np.empty((h, w), dtype=fa.dtype)
    for i in range(h):
        for j in range(w):
            s = fa.dtype.type(0)
            best = vol[0, i, j]
            for ch in range(k):
                s += vol[ch, i, j]
                if vol[ch, i, j] > best:
                    best = vol[ch, i, j]
            avg[i, j] = s / k
            mx[i, j] = best

    sums = []
    for ch in range(k):
        s = fa.dtype.type(0)
        for i in range(h):
            for j in range(w):
                s += vol[ch, i, j]
        sums.append(s)
    ranked = sorted(range(k), key=lambda ch: (-sums[ch], ch))[:t_eff]

    out = np.empty((t_eff + 2, h, w), dtype=fa.dtype)
    out[0] = avg
    out[1] = mx
    for slot, ch in enumerate(ranked):
        out[2 + slot] = vol[ch]
    return out


def correlate_skip(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid,
                   top_t: int = 6) -> CorrelationStack:
    """Cross- and self-correlation summaries at all three pyramid levels.

    Per level l: c_a^l = [corr(f_a, f_b), corr(f_a, f_a)] and
    c_b^l = [corr(f_b, f_a), corr(f_b, f_b)]; levels concatenated in order
    3, 4, 5 along the channel axis.
    """
    parts_a, parts_b = [], []
    for la, lb in zip(pyr_a.levels(), pyr_b.levels()):
        if la.data.shape[-2:] != lb.data.shape[-2:]:
            raise DimensionError("pyramid levels must share spatial extent")
        parts_a.append(correlate(la, lb, top_t))
        parts_a.append(correlate(la, la, top_t))
        parts_b.append(correlate(lb, la, top_t))
        parts_b.append(correlate(lb, lb, top_t))
    axis = 1 if parts_a[0].data.ndim == 4 else 0
    return CorrelationStack(ad.concat(parts_a, axis=axis),
                            ad.concat(parts_b, axis=axis))


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class AtrousBackbone(nn.Module):
    """Five conv blocks; pooling only after the first three, the last block
    dilated so all three tapped depths share one resolution."""

    def __init__(self, config: BackboneConfig, *, rng, dtype=np.float32):
        super().__init__()
        self.config = config
        cin = 3
        for bi, channels in enumerate(config.block_channels):
            rate = config.atrous_rate_block5 if bi == 4 else 1
            layers = []
            for cout in channels:
                layers.append(nn.Conv2d(cin, cout, 3, rng=rng, padding=rate,
                                        rate=rate, dtype=dtype))
                layers.append(nn.ReLU())
                cin = cout
            setattr(self, f"block{bi + 1}", nn.Sequential(*layers))
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: Tensor) -> FeaturePyramid:
        if x.data.shape[-1] % 8 or x.data.shape[-2] % 8:
            raise DimensionError("backbone input size must be divisible by 8")
        x = self.pool(self.block1(x))
        x = self.pool(self.block2(x))
        f3 = self.pool(self.block3(x))
        f4 = self.block4(f3)
        f5 = self.block5(f4)
        return FeaturePyramid(f3, f4, f5)


class AsppHead(nn.Module):
    """Parallel dilated 3×3 branches over the correlation stack, fused by
    elementwise sum into 2-channel logits."""

    def __init__(self, in_channels: int, rates=(1, 2, 4, 8), width: int = 64,
                 *, rng, dtype=np.float32):
        super().__init__()
        self.rates = tuple(rates)
        for i, rate in enumerate(self.rates):
            branch = nn.Sequential(
                nn.Conv2d(in_channels, width, 3, rng=rng, padding=rate,
                          rate=rate, dtype=dtype),
                nn.Conv2d(width, width, 1, rng=rng, dtype=dtype),
                nn.BatchNorm2d(width, dtype=dtype),
                nn.ReLU(),
                # small init keeps fresh models near the uniform prediction
                nn.Conv2d(width, 2, 1, rng=rng, dtype=dtype, init_scale=0.05),
            )
            setattr(self, f"branch{i}", branch)

    def forward(self, c: Tensor) -> Tensor:
        h = c.data.shape[-2]
        for rate in self.rates:
            if rate > h:
                raise ParameterError(
                    f"branch rate {rate} exceeds feature extent {h}")
        out = None
        for i in range(len(self.rates)):
            branch = getattr(self, f"branch{i}")
            y = branch(c)
            out = y if out is None else ad.add(out, y)
        return out


class SpliceMatcher(nn.Module):
    """Full matching network: backbone, skip correlation, shared mask head.

    ``forward`` returns per-pixel class probabilities for both inputs at
    1/8 input resolution.  Images are expected already normalized via
    :meth:`preprocess`.
    """

    def __init__(self, config: BackboneConfig, *, rng=None, dtype=np.float32,
                 aspp_rates=(1, 2, 4, 8), top_t: int = 6):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.top_t = top_t
        self.backbone = AtrousBackbone(config, rng=rng, dtype=dtype)
        stack_channels = 3 * 2 * (min(top_t, config.feature_size ** 2) + 2)
        self.head = AsppHead(stack_channels, rates=aspp_rates, rng=rng, dtype=dtype)
        self.register_buffer("input_mean",
                             np.full(3, 127.5, dtype=dtype))

    def preprocess(self, images: np.ndarray) -> Tensor:
        """uint8 B×3×S×S (or 3×S×S) to normalized float tensor:
        subtract the per-channel dataset mean, divide by 255."""
        arr = np.asarray(images, dtype=self.input_mean.dtype)
        if arr.ndim == 3:
            arr = arr[None]
        mean = self.input_mean.reshape(1, 3, 1, 1)
        return Tensor((arr - mean) / 255.0)

    def extract_features(self, image: Tensor) -> FeaturePyramid:
        return self.backbone(image)

    def forward(self, img_a: Tensor, img_b: Tensor) -> MaskPair:
        """Batched equivalent of backbone -> correlate_skip -> shared head:
        both images ride one backbone pass and the four per-level
        correlations of the skip architecture ride one correlation call;
        samples never mix, so the result matches the pairwise path."""
        if img_a.data.shape != img_b.data.shape:
            raise DimensionError("paired images must share one size")
        n = img_a.data.shape[0]
        pyr = self.backbone(ad.concat([img_a, img_b], axis=0))
        parts_a, parts_b = [], []
        for level in pyr.levels():
            fa = ad.batch_slice(level, 0, n)
            fb = ad.batch_slice(level, n, 2 * n)
            left = ad.concat([fa, fa, fb, fb], axis=0)
            right = ad.concat([fb, fa, fa, fb], axis=0)
            summary = correlate(left, right, self.top_t)
            c_ab = ad.batch_slice(summary, 0, n)
            c_aa = ad.batch_slice(summary, n, 2 * n)
            c_ba = ad.batch_slice(summary, 2 * n, 3 * n)
            c_bb = ad.batch_slice(summary, 3 * n, 4 * n)
            parts_a.extend([c_ab, c_aa])
            parts_b.extend([c_ba, c_bb])
        c_a = ad.concat(parts_a, axis=1)
        c_b = ad.concat(parts_b, axis=1)
        logits = self.head(ad.concat([c_a, c_b], axis=0))
        return MaskPair(ad.softmax_channels(ad.batch_slice(logits, 0, n)),
                        ad.softmax_channels(ad.batch_slice(logits, n, 2 * n)))


def upsample_mask(mask: Tensor, size: int) -> Tensor:
    """Bilinear upsampling of a probability mask to ``size``×``size``
    (inference only; channel sums stay 1 by linearity)."""
    return ad.bilinear_upsample(mask, size, size)
