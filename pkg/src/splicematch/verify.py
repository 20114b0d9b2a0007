"""Self-verification suite: oracle comparisons and gradient checks.

Each check returns a :class:`CheckResult`; the CLI prints them as a table
and fails the process when anything is out of tolerance.  Oracle equality
checks draw integer-valued inputs where summation-order differences would
otherwise make bitwise comparison meaningless: on integer lattices every
partial sum is exact, so equality verifies tap placement, stride, dilation
and selection logic rather than rounding order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adversary, autodiff as ad, datagen, reference, training
from .autodiff import Tensor, gradcheck
from .matching import correlate, correlate_naive


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    @classmethod
    def from_value(cls, name: str, value: float, tolerance: float,
                   detail: str = "") -> "CheckResult":
        return cls(name, float(value), tolerance, bool(value <= tolerance), detail)


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _rand_int(rng, *shape) -> np.ndarray:
    return rng.integers(-4, 5, size=shape).astype(np.float64)


# ---------------------------------------------------------------------------
# oracle checks
# ---------------------------------------------------------------------------


def check_correlate_oracle(instances: int = 100, seed: int = 0) -> CheckResult:
    """correlate vs the loop transcription on random continuous inputs;
    the two share accumulation order, so the difference must be exactly 0."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        h = int(rng.integers(1, 7))
        w = int(rng.integers(1, 7))
        d = int(rng.integers(1, 9))
        fa = rng.standard_normal((d, h, w))
        fb = rng.standard_normal((d, h, w))
        fast = correlate(Tensor(fa), Tensor(fb)).data
        naive = correlate_naive(fa, fb)
        worst = max(worst, float(np.max(np.abs(fast - naive))))
    return CheckResult.from_value("correlate_vs_naive", worst, 0.0,
                                  f"{instances} random instances")


def check_conv_identity(instances: int = 20, seed: int = 1) -> CheckResult:
    """conv2d(rate=1) against the independent direct convolution, bitwise
    on integer-valued inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        b, c, o = 1, int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(5, 9))
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2))
        stride = int(rng.integers(1, 3))
        x = _rand_int(rng, b, c, h, h)
        wgt = _rand_int(rng, o, c, k, k)
        bias = _rand_int(rng, o)
        got = ad.conv2d(Tensor(x), Tensor(wgt), Tensor(bias),
                        stride=stride, padding=pad, rate=1).data
        ref = reference.direct_conv2d(x, wgt, bias, stride=stride, padding=pad)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return CheckResult.from_value("conv_rate1_vs_direct", worst, 0.0,
                                  f"{instances} integer-valued instances")


def check_atrous_ramp() -> CheckResult:
    """The rate-2 hand example: 5x5 ramp, all-ones 3x3 kernel -> 108."""
    x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w, rate=2).data
    diff = abs(float(out.reshape(())) - 108.0)
    return CheckResult.from_value("conv_rate2_ramp_108", diff, 0.0)


def check_linear_oracle(instances: int = 20, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        b, n, m = 4, 8, int(rng.integers(1, 6))
        x, wgt, bias = _rand_int(rng, b, n), _rand_int(rng, m, n), _rand_int(rng, m)
        got = ad.linear(Tensor(x), Tensor(wgt), Tensor(bias)).data
        ref = reference.naive_linear(x, wgt, bias)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return CheckResult.from_value("linear_vs_naive", worst, 0.0,
                                  f"{instances} integer-valued instances")


def check_pool_oracles(seed: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8))
    mx = ad.maxpool2d(Tensor(x), 2).data
    av = ad.avgpool2d(Tensor(x), 2).data
    d_max = float(np.max(np.abs(mx - reference.scan_maxpool2d(x, 2))))
    d_avg = float(np.max(np.abs(av - reference.block_mean(x, 2))))
    return [CheckResult.from_value("maxpool_vs_scan", d_max, 0.0),
            CheckResult.from_value("avgpool_vs_blockmean", d_avg, 1e-12)]


def run_oracle_checks(seed: int = 0) -> list[CheckResult]:
    results = [check_correlate_oracle(seed=seed),
               check_conv_identity(seed=seed + 1),
               check_atrous_ramp(),
               check_linear_oracle(seed=seed + 2)]
    results.extend(check_pool_oracles(seed=seed + 3))
    return results


# ---------------------------------------------------------------------------
# per-op gradient checks
# ---------------------------------------------------------------------------


def _grad_cases(rng):
    """(name, callable, inputs) triples covering every differentiable op."""
    x = _rand(rng, 1, 2, 5, 5)
    w = _rand(rng, 2, 2, 3, 3)
    bias = _rand(rng, 2)
    w1 = _rand(rng, 1, 2, 3, 3)
    gamma, beta = _rand(rng, 2), _rand(rng, 2)
    lin_x, lin_w, lin_b = _rand(rng, 3, 4), _rand(rng, 2, 4), _rand(rng, 2)
    fa, fb = _rand(rng, 2, 3, 3), _rand(rng, 2, 3, 3)
    vec = _rand(rng, 6)
    small = _rand(rng, 2, 2, 4, 4)

    def s(t):
        # fixed random cotangent keeps the readout linear, so truncation
        # error reflects the op under test rather than the harness
        probe = np.random.default_rng(977).standard_normal(t.data.shape)
        return ad.tsum(ad.mul(t, Tensor(probe)))

    return [
        ("add", lambda a, b: s(ad.add(a, b)), [_rand(rng, 3, 4), _rand(rng, 1, 4)]),
        ("mul", lambda a, b: s(ad.mul(a, b)), [_rand(rng, 3, 4), _rand(rng, 3, 1)]),
        ("powc", lambda a: s(ad.powc(ad.add(ad.mul(a, a), 1.0), -0.5)), [_rand(rng, 5)]),
        ("exp", lambda a: s(ad.exp(a)), [_rand(rng, 4)]),
        ("log", lambda a: s(ad.log(ad.add(ad.mul(a, a), 1.0))), [_rand(rng, 4)]),
        ("log_clamped", lambda a: s(ad.log_clamped(ad.add(ad.mul(a, a), 0.5))),
         [_rand(rng, 4)]),
        ("absolute", lambda a: s(ad.absolute(a)), [Tensor(rng.standard_normal(6) + 2.0)]),
        ("minimum_const", lambda a: s(ad.minimum_const(a, 0.3)), [vec]),
        ("sigmoid", lambda a: s(ad.sigmoid(a)), [_rand(rng, 5)]),
        ("relu", lambda a: s(ad.relu(a)), [Tensor(rng.standard_normal(8) + 0.5)]),
        ("leaky_relu", lambda a: s(ad.leaky_relu(a)), [Tensor(rng.standard_normal(8) + 0.5)]),
        ("matmul", lambda a, b: s(ad.matmul(a, b)), [_rand(rng, 3, 4), _rand(rng, 4, 2)]),
        ("linear", lambda a, b, c: s(ad.linear(a, b, c)), [lin_x, lin_w, lin_b]),
        ("softmax_channels", lambda a: s(ad.softmax_channels(a)), [small]),
        ("concat", lambda a, b: s(ad.concat([a, b], axis=1)),
         [_rand(rng, 2, 2, 3, 3), _rand(rng, 2, 1, 3, 3)]),
        ("reshape", lambda a: s(ad.reshape(a, (6,))), [_rand(rng, 2, 3)]),
        ("sum_axis", lambda a: s(ad.tsum(a, axis=(0, 2), keepdims=True)),
         [_rand(rng, 2, 3, 4)]),
        ("mean", lambda a: s(ad.tmean(a, axis=1)), [_rand(rng, 3, 5)]),
        ("conv2d_rate1", lambda a, b, c: s(ad.conv2d(a, b, c, padding=1)),
         [x, w, bias]),
        ("conv2d_rate2", lambda a, b: s(ad.conv2d(a, b, padding=2, rate=2)),
         [_rand(rng, 1, 2, 6, 6), w1]),
        ("conv2d_stride2", lambda a, b: s(ad.conv2d(a, b, stride=2, padding=1)),
         [_rand(rng, 1, 2, 6, 6), w1]),
        ("maxpool2d", lambda a: s(ad.maxpool2d(a, 2)), [_rand(rng, 1, 2, 4, 4)]),
        ("avgpool2d", lambda a: s(ad.avgpool2d(a, 2)), [_rand(rng, 1, 2, 4, 4)]),
        ("batchnorm2d", lambda a, g, b: s(ad.batchnorm2d(
            a, g, b, np.zeros(2), np.ones(2), training=True)),
         [_rand(rng, 2, 2, 3, 3), gamma, beta]),
        ("correlate", lambda a, b: s(correlate(a, b, top_t=3)), [fa, fb]),
    ]


def run_gradient_checks(seeds: int = 100, tol: float = 1e-6) -> list[CheckResult]:
    """Central-difference check of every differentiable op over randomized
    small shapes."""
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng([101, seed])
        for name, fn, inputs in _grad_cases(rng):
            err = gradcheck(fn, inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult.from_value(f"grad::{name}", err, tol,
                                   f"{seeds} seeds")
            for name, err in worst.items()]


def warmup_spectral(dis, iterations: int = 200) -> None:
    """Run each persistent power-iteration vector to its fixed point so that
    repeated forward passes with frozen weights are pure functions (needed
    for finite-difference probes; the probes only touch biases, which do not
    move the singular-value estimate)."""
    for layer in dis.spectral_layers():
        mat = layer.weight.data.reshape(layer.weight.data.shape[0], -1)
        u = layer.spectral.u
        for _ in range(iterations):
            v = mat.T @ u
            v /= max(np.linalg.norm(v), 1e-12)
            u = mat @ v
            u /= max(np.linalg.norm(u), 1e-12)
        layer.spectral.u = u


def run_full_loss_check(tol: float = 1e-4, eps: float = 3e-4) -> CheckResult:
    """Gradcheck of the combined training objective on a 2-pair toy batch,
    probing a small parameter subset (late biases and a normalization
    offset) against central differences."""
    config = training.TrainConfig(preset="toy", batch_size=2, seed=5,
                                  dtype="float64", lambda_det=0.01,
                                  lambda_dis=0.01)
    matcher = training.build_matcher(config)
    det, dis = training.build_adversaries(config)
    warmup_spectral(dis)
    dataset = datagen.make_toy_dataset(2, size=64, seed=13)
    batch = dataset.batch(dataset.sample_indices(np.random.default_rng(3), 2), 8)
    weights = config.weights()

    pooled_a = adversary.pool_image(Tensor(batch["probe"].astype(np.float64) / 255.0))
    pooled_b = adversary.pool_image(Tensor(batch["donor"].astype(np.float64) / 255.0))
    rows = np.flatnonzero(batch["correlated"])

    probe = matcher.preprocess(batch["probe"])
    donor = matcher.preprocess(batch["donor"])

    def full_loss(*_probes):
        masks = matcher(probe, donor)
        ce = adversary.spatial_ce(masks, batch["gt_a"], batch["gt_b"])
        probs = det(adversary.mask_image(masks.y_a, pooled_a),
                    adversary.mask_image(masks.y_b, pooled_b))
        det_term = adversary.det_loss_g(probs, batch["labels"])
        scores = []
        for mask_t, pooled in ((masks.y_a, pooled_a), (masks.y_b, pooled_b)):
            sel = Tensor(mask_t.data[rows]) if not mask_t.requires_grad else \
                training._select_rows(mask_t, rows)
            scores.append(dis(adversary.mask_image(
                sel, Tensor(pooled.data[rows]))))
        dis_term = adversary.dis_loss_g(ad.concat(scores, axis=0), weights.variant)
        return adversary.matcher_loss(ce, det_term, dis_term, weights)

    probes = [
        matcher.head.branch0.layers[4].bias,
        matcher.backbone.block1.layers[0].bias,
        det.fc2.bias,
        dis.fc.bias,
    ]
    err = gradcheck(lambda *ps: full_loss(*ps), probes, eps=eps)
    return CheckResult.from_value("grad::full_objective", err, tol,
                                  "2-pair toy batch, parameter subset")


def run_all(seeds: int = 100) -> list[CheckResult]:
    results = run_oracle_checks()
    results.extend(run_gradient_checks(seeds=seeds))
    results.append(run_full_loss_check())
    return results
