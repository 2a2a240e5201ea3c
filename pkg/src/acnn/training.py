"""Loss compositions and training loops.

The shape-regularised objectives add a squared latent distance between the
codes of the prediction and of the ground truth to the task loss:

    segmentation: cross-entropy + lambda1 * ||f(softmax(logits)) - f(onehot(y))||^2
    super-res:    huber        + lambda1 * ||p(output) - p(hr)||^2

plus an L2 weight-decay term (lambda2 / 2) * sum(w^2) over conv/FC weights.
The decay value is reported as a loss component; its gradient is applied
analytically inside `sgd_step`, never double-counted. Regulariser networks
(encoder / predictor) run frozen in inference mode: gradients flow through
them into the task network but their parameters and running statistics never
change.

With lambda1 = 0 the regulariser is skipped entirely, so a regularised run
at lambda1 = 0 is bitwise identical to the baseline under the same seed.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .models import one_hot_batch
from .phantom import CLASS_COUNT, LabelMap, swap_labels
from .seeding import rng_for


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the partial report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    lambda1: float = 0.01
    lambda2: float = 5e-6
    learning_rate: float = 0.001
    batch_size: int = 8
    iterations: int = 100
    seed: int = 0
    loss_scaling: float = 0.99  # EMA decay for the joint-stage normalisers
    swap_prob: float = 0.1  # denoising label swap on the one-hot input
    onehot_noise_std: float = 0.05  # Gaussian noise on the one-hot input
    intensity_noise_std: float = 0.0  # additive noise on intensity inputs

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1/lambda2 must be non-negative")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")


@dataclass
class TrainReport:
    columns: tuple
    rows: list = field(default_factory=list)
    wall_time: float = 0.0
    final_metrics: dict = field(default_factory=dict)

    def log(self, *values):
        self.rows.append(tuple(float(v) for v in values))

    def column(self, name):
        idx = self.columns.index(name)
        return [row[idx] for row in self.rows]

    def to_lines(self):
        lines = ["# " + " ".join(self.columns)]
        for row in self.rows:
            lines.append(" ".join(repr(v) for v in row))
        for key in sorted(self.final_metrics):
            lines.append(f"# final {key} = {self.final_metrics[key]!r}")
        lines.append(f"# wall_time_s = {self.wall_time:.3f}")
        return lines

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")


class BatchSampler:
    """Epoch-shuffled cycling over sample indices, seeded and deterministic."""

    def __init__(self, count, batch_size, seed):
        self.count = count
        self.batch_size = batch_size
        self.rng = rng_for(seed, "batches")
        self._queue = []

    def next(self):
        batch = []
        while len(batch) < self.batch_size:
            if not self._queue:
                self._queue = list(self.rng.permutation(self.count))
            batch.append(self._queue.pop(0))
        return batch


def _check_finite(value, report, stage):
    if not np.isfinite(value):
        raise DivergenceError(f"{stage}: loss diverged to {value}", report)


def decay_value(networks, lambda2):
    params = []
    for net in networks:
        params.extend(net.params.values())
    return 0.5 * lambda2 * E.weight_sq_sum(params)


# ---------------------------------------------------------------------------
# regularised losses (Eq. of the combined objectives)


def loss_acnn_seg(segnet, encoder, x, y, cfg):
    """Combined segmentation objective on one batch.

    x: (B, 1, *lr_sp) tensor; y: (B, *hr_sp) integer labels. Returns
    (total loss tensor, components dict). Gradients reach only segnet
    parameters; the encoder sees the softmax probability map from the
    prediction side and the one-hot map from the ground-truth side.
    """
    logits = segnet.forward(x, training=True)
    ce = E.softmax_cross_entropy(logits, y, CLASS_COUNT)
    decay = decay_value([segnet], cfg.lambda2)
    latent = 0.0
    if encoder is not None and cfg.lambda1 != 0.0:
        prob = E.softmax(logits, axis=1)
        code_pred = encoder.forward(prob, training=False)
        hot = one_hot_batch(list(y), CLASS_COUNT)
        code_true = encoder.forward(hot, training=False)
        # batch mean of per-sample squared code distances
        lhe = E.mul_const(
            E.l2_distance(code_pred, E.Tensor(code_true.data, dtype=np.float32)),
            1.0 / x.shape[0],
        )
        total = E.add_const(E.add(ce, E.mul_const(lhe, cfg.lambda1)), decay)
        latent = lhe.item()
    else:
        total = E.add_const(ce, decay)
    components = {
        "total": total.item(), "primary": ce.item(), "latent": latent,
        "decay": decay,
    }
    return total, components


def loss_acnn_sr(srnet, predictor, x, y_r, cfg):
    """Combined super-resolution objective on one batch.

    x: (B, 1, *lr_sp) tensor; y_r: (B, 1, *hr_sp) tensor. Gradients reach
    only srnet parameters.
    """
    pred = srnet.forward(x, training=True)
    hub = E.huber_loss(pred, y_r)
    decay = decay_value([srnet], cfg.lambda2)
    latent = 0.0
    if predictor is not None and cfg.lambda1 != 0.0:
        code_pred = predictor.forward(pred, training=False)
        code_true = predictor.forward(E.Tensor(y_r.data), training=False)
        lhp = E.mul_const(
            E.l2_distance(code_pred, E.Tensor(code_true.data, dtype=np.float32)),
            1.0 / x.shape[0],
        )
        total = E.add_const(E.add(hub, E.mul_const(lhp, cfg.lambda1)), decay)
        latent = lhp.item()
    else:
        total = E.add_const(hub, decay)
    components = {
        "total": total.item(), "primary": hub.item(), "latent": latent,
        "decay": decay,
    }
    return total, components


# ---------------------------------------------------------------------------
# T-L training, stage 1


def corrupt_onehot_batch(labels, cfg, swap_rng, noise_rng):
    """Denoising corruption for the autoencoder input: random label swaps
    then Gaussian noise on the one-hot channels."""
    corrupted = [swap_labels(lab, cfg.swap_prob, swap_rng) for lab in labels]
    hot = one_hot_batch(corrupted, CLASS_COUNT)
    if cfg.onehot_noise_std > 0:
        hot.data += noise_rng.normal(
            0.0, cfg.onehot_noise_std, hot.data.shape
        ).astype(np.float32)
    return hot


def train_ae_stage1(encoder, decoder, labelmaps, cfg):
    """Denoising reconstruction training of the autoencoder alone."""
    if not labelmaps:
        raise ValueError("dataset is empty")
    labels = [lm.data if isinstance(lm, LabelMap) else np.asarray(lm) for lm in labelmaps]
    report = TrainReport(columns=("iteration", "total", "primary", "latent", "decay"))
    params = encoder.parameters() + decoder.parameters()
    optim = E.OptimState(cfg.learning_rate, cfg.lambda2)
    sampler = BatchSampler(len(labels), cfg.batch_size, cfg.seed)
    swap_rng = rng_for(cfg.seed, "ae/swap")
    noise_rng = rng_for(cfg.seed, "ae/noise")
    start = time.perf_counter()
    for it in range(cfg.iterations):
        batch = sampler.next()
        ybatch = [labels[i] for i in batch]
        hot = corrupt_onehot_batch(ybatch, cfg, swap_rng, noise_rng)
        target = np.stack(ybatch).astype(np.int64)
        with E.Tape() as tape:
            code = encoder.forward(hot, training=True)
            logits = decoder.forward(code, training=True)
            ce = E.softmax_cross_entropy(logits, target, CLASS_COUNT)
            dec_val = decay_value([encoder, decoder], cfg.lambda2)
            total = E.add_const(ce, dec_val)
            report.log(it, total.item(), ce.item(), 0.0, dec_val)
            _check_finite(total.item(), report, "ae-stage1")
            tape.backward(total)
        E.sgd_step(params, optim)
    report.wall_time = time.perf_counter() - start
    return report


def latent_targets(encoder, labelmaps):
    """Frozen-encoder codes of ground-truth label maps, one row per sample."""
    hots = one_hot_batch([lm.data for lm in labelmaps], CLASS_COUNT)
    out = encoder.forward(hots, training=False)
    return out.data.copy()


def latent_mse(predictor, volumes, targets):
    x = E.Tensor(np.stack([v.data for v in volumes])[:, None])
    codes = predictor.forward(x, training=False).data
    return float(np.mean((codes.astype(np.float64) - targets.astype(np.float64)) ** 2))


def train_predictor_stage1(predictor, encoder, pairs, cfg):
    """Match predictor codes to the frozen encoder's latent space.

    pairs: list of (Volume, LabelMap); minimises the summed squared code
    distance over the predictor's parameters only.
    """
    if not pairs:
        raise ValueError("dataset is empty")
    volumes = [p[0] for p in pairs]
    targets = latent_targets(encoder, [p[1] for p in pairs])
    report = TrainReport(columns=("iteration", "total", "primary", "latent", "decay"))
    report.final_metrics["latent_mse_initial"] = latent_mse(predictor, volumes, targets)
    params = predictor.parameters()
    optim = E.OptimState(cfg.learning_rate, cfg.lambda2)
    sampler = BatchSampler(len(pairs), cfg.batch_size, cfg.seed)
    start = time.perf_counter()
    for it in range(cfg.iterations):
        batch = sampler.next()
        x = E.Tensor(np.stack([volumes[i].data for i in batch])[:, None])
        tgt = E.Tensor(np.stack([targets[i] for i in batch]))
        with E.Tape() as tape:
            codes = predictor.forward(x, training=True)
            lh = E.l2_distance(codes, tgt)
            dec_val = decay_value([predictor], cfg.lambda2)
            total = E.add_const(lh, dec_val)
            report.log(it, total.item(), lh.item(), 0.0, dec_val)
            _check_finite(total.item(), report, "predictor-stage1")
            tape.backward(total)
        E.sgd_step(params, optim)
    report.wall_time = time.perf_counter() - start
    report.final_metrics["latent_mse_final"] = latent_mse(predictor, volumes, targets)
    return report


# ---------------------------------------------------------------------------
# T-L training, stage 2 (joint update)


def _collect_grads(networks):
    grads = {}
    for net in networks:
        for key, p in net.params.items():
            grads[(net.name, key)] = None if p.grad is None else p.grad.copy()
            p.grad = None
    return grads


def train_tl_joint_stage2(encoder, decoder, predictor, pairs, cfg, latent_weight=1.0):
    """Joint update: the encoder combines gradients from the reconstruction
    and code-matching losses, each normalised by an EMA of its magnitude.

    Per batch: the decoder receives the reconstruction gradient, the
    predictor the code-matching gradient, and the encoder the sum
    alpha_x * dLx + alpha_h * dLh with alpha = 1 / max(EMA(loss), floor).
    With latent_weight = 0 the code loss is skipped and the step reduces to
    autoencoder fine-tuning.
    """
    if not pairs:
        raise ValueError("dataset is empty")
    volumes = [p[0] for p in pairs]
    labels = [p[1].data for p in pairs]
    report = TrainReport(columns=(
        "iteration", "total", "primary", "latent", "decay", "alpha_x", "alpha_h",
    ))
    optim = E.OptimState(cfg.learning_rate, cfg.lambda2)
    sampler = BatchSampler(len(pairs), cfg.batch_size, cfg.seed)
    swap_rng = rng_for(cfg.seed, "tl/swap")
    noise_rng = rng_for(cfg.seed, "tl/noise")
    ema_x = ema_h = None
    floor = 1e-8
    start = time.perf_counter()
    for it in range(cfg.iterations):
        batch = sampler.next()
        ybatch = [labels[i] for i in batch]
        hot = corrupt_onehot_batch(ybatch, cfg, swap_rng, noise_rng)
        target = np.stack(ybatch).astype(np.int64)
        xvol = E.Tensor(np.stack([volumes[i].data for i in batch])[:, None])
        with E.Tape() as tape:
            code_e = encoder.forward(hot, training=True)
            logits = decoder.forward(code_e, training=True)
            lx = E.softmax_cross_entropy(logits, target, CLASS_COUNT)
            if latent_weight != 0.0:
                code_p = predictor.forward(xvol, training=True)
                lh = E.l2_distance(code_p, code_e)
            else:
                lh = None

            lx_val = lx.item()
            lh_val = lh.item() if lh is not None else 0.0
            ema_x = lx_val if ema_x is None else (
                cfg.loss_scaling * ema_x + (1 - cfg.loss_scaling) * lx_val
            )
            alpha_x = 1.0 / max(ema_x, floor)
            if lh is not None:
                ema_h = lh_val if ema_h is None else (
                    cfg.loss_scaling * ema_h + (1 - cfg.loss_scaling) * lh_val
                )
                alpha_h = 1.0 / max(ema_h, floor)
            else:
                alpha_h = 0.0
            dec_val = decay_value([encoder, decoder, predictor], cfg.lambda2)
            total_val = alpha_x * lx_val + latent_weight * alpha_h * lh_val + dec_val
            report.log(it, total_val, alpha_x * lx_val,
                       latent_weight * alpha_h * lh_val, dec_val, alpha_x, alpha_h)
            _check_finite(total_val, report, "tl-joint")
            if not (np.isfinite(alpha_x) and alpha_x > 0):
                raise DivergenceError(f"tl-joint: EMA normaliser {ema_x}", report)

            tape.backward(lx)
            gx = _collect_grads([encoder, decoder])
            if lh is not None:
                tape.backward(lh)
            gh = _collect_grads([encoder, predictor]) if lh is not None else {}

        for key, p in encoder.params.items():
            p.grad = (alpha_x * gx[("encoder", key)]).astype(np.float32)
            if lh is not None:
                p.grad += (latent_weight * alpha_h * gh[("encoder", key)]).astype(np.float32)
        for key, p in decoder.params.items():
            p.grad = gx[("decoder", key)]
        updated = encoder.parameters() + decoder.parameters()
        if lh is not None:
            for key, p in predictor.params.items():
                p.grad = gh[("predictor", key)]
            updated += predictor.parameters()
        E.sgd_step(updated, optim)
    report.wall_time = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# task training (segmentation / super-resolution)


def _intensity_batch(samples, indices, attr, cfg, noise_rng):
    vols = [getattr(samples[i], attr).data for i in indices]
    stack = np.stack(vols)[:, None]
    if cfg.intensity_noise_std > 0:
        span = float(stack.max() - stack.min())
        stack = stack + noise_rng.normal(
            0.0, cfg.intensity_noise_std * span, stack.shape
        ).astype(np.float32)
    return E.Tensor(stack)


def train_segmentation(segnet, encoder, samples, cfg):
    """Minibatch SGD over the combined segmentation objective.

    `encoder` may be None (or lambda1 = 0) for the unregularised baseline;
    when present it is frozen: no parameter or running-stat updates.
    """
    if not samples:
        raise ValueError("dataset is empty")
    report = TrainReport(columns=("iteration", "total", "primary", "latent", "decay"))
    frozen_hash = encoder.param_hash() if encoder is not None else None
    params = segnet.parameters()
    optim = E.OptimState(cfg.learning_rate, cfg.lambda2)
    sampler = BatchSampler(len(samples), cfg.batch_size, cfg.seed)
    noise_rng = rng_for(cfg.seed, "seg/noise")
    start = time.perf_counter()
    for it in range(cfg.iterations):
        batch = sampler.next()
        x = _intensity_batch(samples, batch, "lr", cfg, noise_rng)
        y = np.stack([samples[i].labels.data for i in batch]).astype(np.int64)
        with E.Tape() as tape:
            total, comps = loss_acnn_seg(segnet, encoder, x, y, cfg)
            report.log(it, comps["total"], comps["primary"], comps["latent"],
                       comps["decay"])
            _check_finite(comps["total"], report, "segmentation")
            tape.backward(total)
        E.sgd_step(params, optim)
    report.wall_time = time.perf_counter() - start
    if encoder is not None:
        assert encoder.param_hash() == frozen_hash, "regulariser was modified"
    return report


def train_sr(srnet, predictor, samples, cfg):
    """Minibatch SGD over the combined super-resolution objective."""
    if not samples:
        raise ValueError("dataset is empty")
    report = TrainReport(columns=("iteration", "total", "primary", "latent", "decay"))
    frozen_hash = predictor.param_hash() if predictor is not None else None
    params = srnet.parameters()
    optim = E.OptimState(cfg.learning_rate, cfg.lambda2)
    sampler = BatchSampler(len(samples), cfg.batch_size, cfg.seed)
    noise_rng = rng_for(cfg.seed, "sr/noise")
    start = time.perf_counter()
    for it in range(cfg.iterations):
        batch = sampler.next()
        x = _intensity_batch(samples, batch, "lr", cfg, noise_rng)
        y = E.Tensor(np.stack([samples[i].hr.data for i in batch])[:, None])
        with E.Tape() as tape:
            total, comps = loss_acnn_sr(srnet, predictor, x, y, cfg)
            report.log(it, comps["total"], comps["primary"], comps["latent"],
                       comps["decay"])
            _check_finite(comps["total"], report, "super-resolution")
            tape.backward(total)
        E.sgd_step(params, optim)
    report.wall_time = time.perf_counter() - start
    if predictor is not None:
        assert predictor.param_hash() == frozen_hash, "regulariser was modified"
    return report
