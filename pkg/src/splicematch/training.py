"""Optimizers, the two training loops and checkpoint persistence.

Pretraining minimizes the spatial cross entropy alone with Adadelta.
Adversarial refinement then alternates, per outer iteration, k inner steps
updating the detection and discriminative networks on a fresh minibatch
with a single matcher update on another fresh minibatch.

Checkpoints are versioned files holding every named array (parameters,
buffers, optimizer state), the merged config, and the sampler RNG state,
so an interrupted run resumes bitwise-identically.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adversary, autodiff as ad
from .adversary import DetectionNet, Discriminator, LossWeights
from .errors import (CheckpointFormatError, CheckpointShapeError,
                     CheckpointVersionError, DimensionError, NumericError,
                     ParameterError)
from .matching import BackboneConfig, SpliceMatcher

CKPT_MAGIC = "SPLCKPT"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    """Knobs for both training phases.

    The reference schedule (batch 24, three pretraining epochs over the
    full corpus, k=1, adversarial rates 2e-4 / matcher 1e-5, weights 0.01)
    is available via :meth:`paper_schedule`; the defaults here are sized
    for desk-scale runs.
    """

    preset: str = "toy"
    input_size: int | None = None
    batch_size: int = 8
    iterations: int = 500
    adv_iterations: int = 200
    epochs: int | None = None
    k: int = 1
    lr_g: float = 1e-5
    lr_adv: float = 2e-4
    lambda_det: float = 0.01
    lambda_dis: float = 0.01
    loss_variant: str = "bce"
    seed: int = 0
    dtype: str = "float32"
    top_t: int = 6
    aspp_rates: tuple = (1, 2, 4, 8)
    checkpoint_every: int = 0
    log_every: int = 0
    dis_on_negatives: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        if self.lr_g <= 0 or self.lr_adv <= 0:
            raise ParameterError("learning rates must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError("dtype must be float32 or float64")

    @classmethod
    def paper_schedule(cls) -> "TrainConfig":
        return cls(preset="paper", batch_size=24, epochs=3, k=1,
                   lr_g=1e-5, lr_adv=2e-4, lambda_det=0.01, lambda_dis=0.01)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.preset(self.preset, self.input_size)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_det, self.lambda_dis, self.loss_variant)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


@dataclass
class AdadeltaState:
    sq_grad: list
    sq_update: list


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = betas
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** state.t)
        vhat = v / (1.0 - b2 ** state.t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


def adadelta_step(params: list[np.ndarray], grads: list[np.ndarray],
                  state: AdadeltaState, rho: float = 0.9,
                  eps: float = 1e-6) -> None:
    """One Adadelta update with the standard accumulator recurrence."""
    for p, g, acc_g, acc_u in zip(params, grads, state.sq_grad, state.sq_update):
        if g.shape != p.shape:
            raise DimensionError("gradient shape does not match parameter")
        acc_g *= rho
        acc_g += (1.0 - rho) * (g * g)
        update = -np.sqrt((acc_u + eps) / (acc_g + eps)) * g
        acc_u *= rho
        acc_u += (1.0 - rho) * (update * update)
        p += update


class _Optimizer:
    """Binds an update rule to a module's named parameters."""

    kind = ""

    def __init__(self, module):
        self.named = list(module.named_parameters())

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads.append(g)
        return grads

    def _guard(self) -> None:
        for name, p in self.named:
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {name!r} became non-finite")

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        raise NotImplementedError


class Adam(_Optimizer):
    kind = "adam"

    def __init__(self, module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(module)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState(m=[np.zeros_like(p.data) for _, p in self.named],
                               v=[np.zeros_like(p.data) for _, p in self.named])

    def step(self) -> None:
        adam_step([p.data for _, p in self.named], self._grads(), self.state,
                  self.lr, self.betas, self.eps)
        self._guard()

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.state.t], dtype=np.int64)}
        for (name, _), m, v in zip(self.named, self.state.m, self.state.v):
            out[f"{prefix}.m.{name}"] = m
            out[f"{prefix}.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays, prefix: str) -> None:
        self.state.t = int(arrays[f"{prefix}.t"][0])
        for (name, _), m, v in zip(self.named, self.state.m, self.state.v):
            m[...] = arrays[f"{prefix}.m.{name}"]
            v[...] = arrays[f"{prefix}.v.{name}"]


class Adadelta(_Optimizer):
    kind = "adadelta"

    def __init__(self, module, rho: float = 0.9, eps: float = 1e-6):
        super().__init__(module)
        self.rho, self.eps = rho, eps
        self.state = AdadeltaState(
            sq_grad=[np.zeros_like(p.data) for _, p in self.named],
            sq_update=[np.zeros_like(p.data) for _, p in self.named])

    def step(self) -> None:
        adadelta_step([p.data for _, p in self.named], self._grads(), self.state,
                      self.rho, self.eps)
        self._guard()

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for (name, _), a, u in zip(self.named, self.state.sq_grad, self.state.sq_update):
            out[f"{prefix}.sqg.{name}"] = a
            out[f"{prefix}.squ.{name}"] = u
        return out

    def load_state_arrays(self, arrays, prefix: str) -> None:
        for (name, _), a, u in zip(self.named, self.state.sq_grad, self.state.sq_update):
            a[...] = arrays[f"{prefix}.sqg.{name}"]
            u[...] = arrays[f"{prefix}.squ.{name}"]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to reproduce the next training step bitwise."""

    config: dict
    rng_state: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint: text header plus little-endian flat arrays."""
    entries = []
    offset = 0
    blobs = []
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        tag = _DTYPE_TAGS[str(arr.dtype)]
        raw = arr.astype(tag).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": tag, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ckpt.config, "rng_state": ckpt.rng_state,
                         "meta": ckpt.meta, "arrays": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode())
        fh.write(f"{len(header)}\n".encode())
        fh.write(header)
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint file.

    Raises :class:`CheckpointVersionError` on version mismatch,
    :class:`CheckpointFormatError` on truncation or unparseable headers and
    :class:`CheckpointShapeError` when an array does not match its header.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    magic_line = buf.readline().decode(errors="replace").strip()
    parts = magic_line.split()
    if len(parts) != 2 or parts[0] != CKPT_MAGIC:
        raise CheckpointFormatError(f"not a checkpoint file: {magic_line!r}")
    if parts[1] != str(CKPT_VERSION):
        raise CheckpointVersionError(f"unsupported checkpoint version {parts[1]}")
    try:
        header_len = int(buf.readline().decode().strip())
        header = json.loads(buf.read(header_len).decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    if buf.read(1) != b"\n":
        raise CheckpointFormatError("header terminator missing")
    blob = buf.read()
    arrays = {}
    try:
        entries = header["arrays"]
        config = header["config"]
        rng_state = header["rng_state"]
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"malformed header: missing {exc}") from exc
    for entry in entries:
        try:
            tag, name = entry["dtype"], entry["name"]
            offset, nbytes, shape = entry["offset"], entry["nbytes"], entry["shape"]
        except (KeyError, TypeError) as exc:
            raise CheckpointFormatError(f"malformed array entry: {exc}") from exc
        if tag not in _TAG_DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag!r}")
        end = offset + nbytes
        if end > len(blob):
            raise CheckpointFormatError("checkpoint file is truncated")
        arr = np.frombuffer(blob[offset:end], dtype=tag)
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise CheckpointShapeError(
                f"array {name!r}: {arr.size} values for shape {shape}")
        arrays[name] = arr.reshape(shape).astype(_TAG_DTYPES[tag]).copy()
    return Checkpoint(config=config, rng_state=rng_state,
                      arrays=arrays, meta=header.get("meta", {}))


def _collect_arrays(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": arr for name, arr in state.items()}


def _apply_arrays(module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    sub = {name[len(prefix) + 1:]: arr for name, arr in arrays.items()
           if name.startswith(prefix + ".")}
    module.load_state_dict(sub)


# ---------------------------------------------------------------------------
# model construction and batches
# ---------------------------------------------------------------------------


def build_matcher(config: TrainConfig) -> SpliceMatcher:
    rng = np.random.default_rng([config.seed, 1])
    return SpliceMatcher(config.backbone_config(), rng=rng, dtype=config.np_dtype,
                         aspp_rates=tuple(config.aspp_rates), top_t=config.top_t)


def build_adversaries(config: TrainConfig) -> tuple[DetectionNet, Discriminator]:
    res = config.backbone_config().feature_size
    det = DetectionNet(rng=np.random.default_rng([config.seed, 2]),
                       resolution=res, dtype=config.np_dtype)
    dis = Discriminator(rng=np.random.default_rng([config.seed, 3]),
                        resolution=res, variant=config.loss_variant,
                        dtype=config.np_dtype)
    return det, dis


def _loss_value(t) -> float:
    return float(t.item())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    final_train_iou: float | None = None


def _dataset_mean(dataset) -> np.ndarray:
    total = np.zeros(3)
    count = 0
    for pair in dataset.pairs:
        for img in (pair.probe, pair.donor):
            total += img.reshape(-1, 3).mean(axis=0)
            count += 1
    return total / max(count, 1)


def _train_iou(matcher: SpliceMatcher, dataset, mask_size: int) -> float:
    """Mean IoU of binarized predictions against the training-resolution
    masks, over both masks of every positive pair."""
    matcher.eval()
    scores = []
    with ad.no_grad():
        for index, pair in enumerate(dataset.pairs):
            if pair.label != "correlated":
                continue
            batch = dataset.batch([index], mask_size)
            masks = matcher(matcher.preprocess(batch["probe"]),
                            matcher.preprocess(batch["donor"]))
            for pred, gt in ((masks.y_a, batch["gt_a"]), (masks.y_b, batch["gt_b"])):
                p = pred.data[0, 1] > 0.5
                g = gt[0, 1] > 0.5
                union = np.logical_or(p, g).sum()
                inter = np.logical_and(p, g).sum()
                scores.append(1.0 if union == 0 else inter / union)
    matcher.train()
    return float(np.mean(scores)) if scores else float("nan")


def _forward_ce(matcher, batch):
    masks = matcher(matcher.preprocess(batch["probe"]),
                    matcher.preprocess(batch["donor"]))
    return masks, adversary.spatial_ce(masks, batch["gt_a"], batch["gt_b"])


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain(dataset, config: TrainConfig, out_dir=None,
             resume: Checkpoint | None = None) -> TrainResult:
    """Cross-entropy-only training of the matcher with Adadelta.

    Returns the final checkpoint plus per-iteration loss records and the
    final train-set IoU at mask resolution.
    """
    if not getattr(dataset, "pairs", None):
        raise ParameterError("pretrain needs a non-empty dataset")
    matcher = build_matcher(config)
    opt = Adadelta(matcher)
    rng = np.random.default_rng(config.seed)
    start = 0
    if resume is not None:
        _apply_arrays(matcher, resume.arrays, "matcher")
        opt.load_state_arrays(resume.arrays, "opt_g")
        rng.bit_generator.state = resume.rng_state
        start = int(resume.meta.get("iteration", 0))
    else:
        matcher.input_mean[...] = _dataset_mean(dataset)

    iterations = config.iterations
    if config.epochs is not None:
        iterations = config.epochs * max(1, -(-len(dataset.pairs) // config.batch_size))

    mask_size = config.backbone_config().feature_size
    history = []
    writer = _LogWriter(out_dir, "pretrain_log.jsonl") if out_dir else None
    for it in range(start, iterations):
        t0 = time.perf_counter()
        idx = dataset.sample_indices(rng, config.batch_size)
        batch = dataset.batch(idx, mask_size)
        _, loss = _forward_ce(matcher, batch)
        matcher.zero_grad()
        loss.backward()
        opt.step()
        row = {"iteration": it, "loss_ce": _loss_value(loss),
               "wall_time": time.perf_counter() - t0}
        history.append(row)
        if writer:
            writer.write(row)
        if config.checkpoint_every and out_dir and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(_snapshot(matcher, None, None, opt, None, None,
                                      config, rng, it + 1, "pretrain"),
                            f"{out_dir}/ckpt_{it + 1:06d}.splck")
    ckpt = _snapshot(matcher, None, None, opt, None, None, config, rng,
                     iterations, "pretrain")
    if out_dir:
        save_checkpoint(ckpt, f"{out_dir}/ckpt_final.splck")
    iou = _train_iou(matcher, dataset, mask_size)
    return TrainResult(ckpt, history, iou)


# ---------------------------------------------------------------------------
# adversarial refinement
# ---------------------------------------------------------------------------


def adversarial_train(checkpoint: Checkpoint | None, dataset, config: TrainConfig,
                      out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    """Alternating optimization of the verifier, the critic and the matcher.

    Per outer iteration: k inner steps update the detection network and the
    discriminative network on a freshly sampled minibatch each; then the
    matcher takes one combined-loss step on another fresh minibatch.
    """
    if checkpoint is None and resume is None:
        raise ParameterError("adversarial training starts from a pretrained checkpoint")
    if not getattr(dataset, "pairs", None):
        raise ParameterError("adversarial training needs a non-empty dataset")

    matcher = build_matcher(config)
    det, dis = build_adversaries(config)
    opt_g = Adam(matcher, config.lr_g)
    opt_det = Adam(det, config.lr_adv)
    opt_dis = Adam(dis, config.lr_adv)
    rng = np.random.default_rng(config.seed)
    weights = config.weights()
    start = 0

    source = resume if resume is not None else checkpoint
    _apply_arrays(matcher, source.arrays, "matcher")
    if any(k.startswith("det.") for k in source.arrays):
        _apply_arrays(det, source.arrays, "det")
        _apply_arrays(dis, source.arrays, "dis")
        opt_det.load_state_arrays(source.arrays, "opt_det")
        opt_dis.load_state_arrays(source.arrays, "opt_dis")
    if resume is not None:
        opt_g.load_state_arrays(resume.arrays, "opt_g")
        rng.bit_generator.state = resume.rng_state
        start = int(resume.meta.get("iteration", 0))

    mask_size = config.backbone_config().feature_size
    history = []
    writer = _LogWriter(out_dir, "advtrain_log.jsonl") if out_dir else None
    for it in range(start, config.adv_iterations):
        t0 = time.perf_counter()
        events = []
        row = {"iteration": it}
        for _ in range(config.k):
            batch = dataset.batch(dataset.sample_indices(rng, config.batch_size),
                                  mask_size)
            gen_masks, pooled_a, pooled_b = _generated_inputs(matcher, batch)
            row["loss_det_d"] = _det_step(det, opt_det, batch, gen_masks,
                                          pooled_a, pooled_b)
            events.append("det")
            loss_dis = _dis_step(dis, opt_dis, batch, gen_masks, pooled_a,
                                 pooled_b, config)
            if loss_dis is not None:
                row["loss_dis_d"] = loss_dis
            events.append("dis")
        batch = dataset.batch(dataset.sample_indices(rng, config.batch_size),
                              mask_size)
        gen_row = _generator_step(matcher, det, dis, opt_g, batch, weights, config)
        row.update(gen_row)
        events.append("gen")
        row["max_sn_sigma"] = _max_spectral_sigma(dis)
        row["events"] = events
        row["wall_time"] = time.perf_counter() - t0
        history.append(row)
        if writer:
            writer.write(row)
        if config.checkpoint_every and out_dir and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(_snapshot(matcher, det, dis, opt_g, opt_det, opt_dis,
                                      config, rng, it + 1, "adversarial"),
                            f"{out_dir}/adv_ckpt_{it + 1:06d}.splck")
    ckpt = _snapshot(matcher, det, dis, opt_g, opt_det, opt_dis, config, rng,
                     config.adv_iterations, "adversarial")
    if out_dir:
        save_checkpoint(ckpt, f"{out_dir}/adv_ckpt_final.splck")
    return TrainResult(ckpt, history, None)


def _generated_inputs(matcher, batch):
    """Detached matcher masks plus pooled [0,1]-scaled images."""
    with ad.no_grad():
        gen_masks = matcher(matcher.preprocess(batch["probe"]),
                            matcher.preprocess(batch["donor"]))
        pooled_a = adversary.pool_image(
            ad.Tensor(batch["probe"].astype(matcher.input_mean.dtype) / 255.0))
        pooled_b = adversary.pool_image(
            ad.Tensor(batch["donor"].astype(matcher.input_mean.dtype) / 255.0))
    return gen_masks, pooled_a, pooled_b


def _det_step(det, opt_det, batch, gen_masks, pooled_a, pooled_b) -> float:
    labels = batch["labels"]
    probs_gt = det(adversary.mask_image(ad.Tensor(batch["gt_a"]), pooled_a),
                   adversary.mask_image(ad.Tensor(batch["gt_b"]), pooled_b))
    probs_gen = det(adversary.mask_image(gen_masks.y_a, pooled_a),
                    adversary.mask_image(gen_masks.y_b, pooled_b))
    loss = adversary.det_loss_d(probs_gt, probs_gen, labels)
    det.zero_grad()
    loss.backward()
    opt_det.step()
    return _loss_value(loss)


def _positive_rows(batch) -> np.ndarray:
    return np.flatnonzero(batch["correlated"])


def _dis_step(dis, opt_dis, batch, gen_masks, pooled_a, pooled_b,
              config) -> float | None:
    rows = (np.arange(len(batch["correlated"])) if config.dis_on_negatives
            else _positive_rows(batch))
    if rows.size == 0:
        return None
    real_scores, fake_scores = [], []
    for gt_key, mask_t, pooled in (("gt_a", gen_masks.y_a, pooled_a),
                                   ("gt_b", gen_masks.y_b, pooled_b)):
        pooled_rows = ad.Tensor(pooled.data[rows])
        real = adversary.mask_image(ad.Tensor(batch[gt_key][rows]), pooled_rows)
        fake = adversary.mask_image(ad.Tensor(mask_t.data[rows]), pooled_rows)
        real_scores.append(dis(real))
        fake_scores.append(dis(fake))
    loss = adversary.dis_loss_d(ad.concat(real_scores, axis=0),
                                ad.concat(fake_scores, axis=0),
                                config.loss_variant)
    dis.zero_grad()
    loss.backward()
    opt_dis.step()
    return _loss_value(loss)


def _generator_step(matcher, det, dis, opt_g, batch, weights, config) -> dict:
    masks, ce = _forward_ce(matcher, batch)
    row = {"loss_ce": _loss_value(ce)}
    det_term = dis_term = None
    if weights.lambda_det or weights.lambda_dis:
        pooled_a = adversary.pool_image(
            ad.Tensor(batch["probe"].astype(matcher.input_mean.dtype) / 255.0))
        pooled_b = adversary.pool_image(
            ad.Tensor(batch["donor"].astype(matcher.input_mean.dtype) / 255.0))
    if weights.lambda_det:
        probs = det(adversary.mask_image(masks.y_a, pooled_a),
                    adversary.mask_image(masks.y_b, pooled_b))
        det_term = adversary.det_loss_g(probs, batch["labels"])
        row["loss_det_g"] = _loss_value(det_term)
    if weights.lambda_dis:
        rows = (np.arange(len(batch["correlated"])) if config.dis_on_negatives
                else _positive_rows(batch))
        if rows.size:
            scores = []
            for mask_t, pooled in ((masks.y_a, pooled_a), (masks.y_b, pooled_b)):
                sel = _select_rows(mask_t, rows)
                scores.append(dis(adversary.mask_image(
                    sel, ad.Tensor(pooled.data[rows]))))
            dis_term = adversary.dis_loss_g(ad.concat(scores, axis=0),
                                            config.loss_variant)
            row["loss_dis_g"] = _loss_value(dis_term)
    total = adversary.matcher_loss(ce, det_term, dis_term, weights)
    row["loss_total"] = _loss_value(total)
    matcher.zero_grad()
    det.zero_grad()
    dis.zero_grad()
    total.backward()
    opt_g.step()
    return row


def _select_rows(t: ad.Tensor, rows: np.ndarray) -> ad.Tensor:
    data = t.data[rows]

    def bwd(g):
        full = np.zeros_like(t.data)
        full[rows] = g
        ad._accumulate(t, full)

    return ad._compose(data, (t,), bwd, "select_rows")


def _max_spectral_sigma(dis) -> float:
    """Exact top singular value of every normalized weight as the next
    forward pass would use it (state copies; nothing is advanced)."""
    worst = 0.0
    for layer in dis.spectral_layers():
        mat = layer.weight.data.reshape(layer.weight.data.shape[0], -1)
        u = layer.spectral.u.copy()
        for _ in range(layer.spectral.power_iterations):
            v = mat.T @ u
            v /= max(np.linalg.norm(v), 1e-12)
            u = mat @ v
            u /= max(np.linalg.norm(u), 1e-12)
        sigma_hat = float(u @ mat @ v)
        normalized = mat / max(sigma_hat, 1e-12)
        true_sigma = float(np.linalg.svd(normalized, compute_uv=False)[0])
        worst = max(worst, true_sigma)
    return worst


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------


def _snapshot(matcher, det, dis, opt_g, opt_det, opt_dis, config: TrainConfig,
              rng, iteration: int, phase: str) -> Checkpoint:
    arrays = _collect_arrays("matcher", matcher.state_dict())
    arrays.update(opt_g.state_arrays("opt_g"))
    if det is not None:
        arrays.update(_collect_arrays("det", det.state_dict()))
        arrays.update(_collect_arrays("dis", dis.state_dict()))
        arrays.update(opt_det.state_arrays("opt_det"))
        arrays.update(opt_dis.state_arrays("opt_dis"))
    arrays = {k: np.array(v, copy=True) for k, v in arrays.items()}
    return Checkpoint(config=asdict(config),
                      rng_state=rng.bit_generator.state,
                      arrays=arrays,
                      meta={"iteration": iteration, "phase": phase})


def matcher_from_checkpoint(ckpt: Checkpoint) -> tuple[SpliceMatcher, TrainConfig]:
    cfg_dict = dict(ckpt.config)
    cfg_dict["aspp_rates"] = tuple(cfg_dict.get("aspp_rates", (1, 2, 4, 8)))
    config = TrainConfig(**cfg_dict)
    matcher = build_matcher(config)
    _apply_arrays(matcher, ckpt.arrays, "matcher")
    matcher.eval()
    return matcher, config


class _LogWriter:
    def __init__(self, out_dir, name: str):
        import os

        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, name)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, row: dict) -> None:
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._fh.flush()
