"""Teacher pretraining and student training (end-to-end, KD, NTK distillation)."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericalError, SpecError
from .metrics import EpochRecord, MetricsReport, batched_forward, evaluate_network, jacobian_chunk
from .net import (Network, NetworkSpec, OptimizerHyper, _backward, _jac_blocks, _run, build_network,
                  forward, gram_from_blocks, jacobian_factors, loss_value, ntk_param_gradient, optimizer_step,
                  scalarization_weights)

log = logging.getLogger(__name__)

STRATEGIES = ("e2e", "kd", "ntkd")
NORMALIZATIONS = ("trace", "frobenius", "none")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "e2e"
    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 4.0
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    optimizer: OptimizerHyper = field(default_factory=OptimizerHyper)
    ntk_normalization: str = "trace"
    scalarization: str = "sum_outputs"

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise SpecError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.ntk_normalization not in NORMALIZATIONS:
            raise SpecError(f"ntk_normalization must be one of {NORMALIZATIONS}")
        if self.alpha < 0 or self.beta < 0:
            raise SpecError("alpha and beta must be non-negative")
        if self.temperature <= 0:
            raise SpecError("temperature must be positive")
        if self.strategy == "ntkd":
            if self.alpha + self.beta <= 0:
                raise SpecError("ntkd needs alpha + beta > 0")
            if self.batch_size < 2:
                raise SpecError("ntkd needs batch_size >= 2: the NTK of one sample is a scalar")


@dataclass
class TeacherHandle:
    network: Network
    task: str
    reported_metric: float

    def digest(self) -> str:
        return params_digest(self.network)


def params_digest(net: Network) -> str:
    h = hashlib.sha256()
    for name, v in net.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()


def loss_kind_for(task: str) -> str:
    return "bce" if task == "segmentation" else "cross_entropy"


# ---------------------------------------------------------------------------
# distillation losses


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float):
    """T^2 * KL(softmax(teacher/T) || softmax(student/T)), batch mean, and d/d student_logits."""
    if student_logits.shape != teacher_logits.shape:
        raise SpecError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    t = temperature
    n = student_logits.shape[0]
    p = _softmax(teacher_logits / t)
    log_q = student_logits / t
    log_q = log_q - log_q.max(axis=1, keepdims=True)
    log_q = log_q - np.log(np.exp(log_q).sum(axis=1, keepdims=True))
    log_p = np.log(np.clip(p, 1e-300, None))
    loss = float(np.sum(p * (log_p - log_q)) / n * t * t)
    grad = t * (np.exp(log_q) - p) / n
    return loss, grad


def kd_mse_loss(student_out: np.ndarray, teacher_out: np.ndarray):
    """Dense-output variant used for segmentation: MSE on raw outputs."""
    diff = student_out - teacher_out
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def normalize_ntk(theta: np.ndarray, normalization: str) -> np.ndarray:
    n = theta.shape[0]
    if normalization == "none":
        return theta
    if normalization == "trace":
        tr = np.trace(theta)
        if not tr > 0:
            raise NumericalError(f"NTK has non-positive trace {tr}; cannot trace-normalize")
        return theta * (n / tr)
    if normalization == "frobenius":
        fro = np.linalg.norm(theta)
        if not fro > 0:
            raise NumericalError("NTK is identically zero; cannot Frobenius-normalize")
        return theta * (n / fro)
    raise SpecError(f"unknown normalization {normalization!r}")


def ntk_matching_loss(theta_teacher: np.ndarray, theta_student: np.ndarray, normalization: str = "trace"):
    """Mean squared entrywise gap between normalized NTKs, and dL/dTheta_student."""
    n = theta_student.shape[0]
    if theta_teacher.shape != theta_student.shape:
        raise SpecError(f"NTK shapes differ: {theta_teacher.shape} vs {theta_student.shape}")
    t_hat = normalize_ntk(theta_teacher, normalization)
    s_hat = normalize_ntk(theta_student, normalization)
    diff = s_hat - t_hat
    loss = float(np.mean(diff ** 2))
    g_hat = 2.0 * diff / diff.size
    if normalization == "none":
        return loss, g_hat
    if normalization == "trace":
        c = n / np.trace(theta_student)
        return loss, c * (g_hat - np.sum(g_hat * s_hat) / n * np.eye(n))
    c = n / np.linalg.norm(theta_student)
    return loss, c * (g_hat - np.sum(g_hat * s_hat) * s_hat / n ** 2)


def ntkd_loss(j_teacher: np.ndarray, j_onn: np.ndarray, normalization: str = "trace"):
    """Loss between J_t J_t^T and J_s J_s^T, and its gradient w.r.t. J_s (teacher frozen)."""
    if j_teacher.shape[0] != j_onn.shape[0]:
        raise SpecError(f"Jacobians cover different batches: {j_teacher.shape[0]} vs {j_onn.shape[0]}")
    loss, g = ntk_matching_loss(j_teacher @ j_teacher.T, j_onn @ j_onn.T, normalization)
    return loss, (g + g.T) @ j_onn


def label_weights(targets: np.ndarray, n_outputs: int) -> np.ndarray:
    """Cotangents for g(x) = f_y(x) - mean_c f_c(x): the label logit's margin over the mean.

    Unlike the plain sum of logits this scalar ignores the common shift of
    all logits, to which the softmax is blind.
    """
    y = np.asarray(targets).astype(np.int64).reshape(-1)
    return np.eye(n_outputs)[y] - 1.0 / n_outputs


def mask_weights(masks: np.ndarray) -> np.ndarray:
    """Binary-mask analogue of label_weights: g(x) = mean_p (2 y_p - 1) f_p(x), the mean signed pixel margin."""
    m = np.asarray(masks, dtype=np.float64)
    return (2.0 * m - 1.0) / m[0].size


def teacher_ntk(teacher: Network, x: np.ndarray, scalarization="sum_outputs") -> np.ndarray:
    blocks, _ = jacobian_factors(teacher, x, scalarization)
    return gram_from_blocks(blocks)


class TeacherKernel:
    """Teacher NTK restricted to minibatches of a fixed sample set.

    The teacher is frozen, so when the full Gram fits in ``max_precompute``
    samples it is built once and sliced per batch; otherwise each batch is
    computed on demand.
    """

    def __init__(self, teacher: Network, x: np.ndarray, scalarization="sum_outputs",
                 max_precompute: int = 12000, chunk: int | None = None):
        self.teacher, self.x, self.scalarization = teacher, x, scalarization
        self.full = None
        if chunk is None:
            chunk = jacobian_chunk(teacher, x.shape[1:])
        if len(x) <= max_precompute:
            starts = range(0, len(x), chunk)
            blocks = [jacobian_factors(teacher, x[i:i + chunk], self._weights(slice(i, i + chunk)))[0]
                      for i in starts]
            full = np.empty((len(x), len(x)))
            for a, i in enumerate(starts):
                for b, j in enumerate(starts):
                    if b < a:
                        continue
                    g = gram_from_blocks(blocks[a], blocks[b])
                    full[i:i + chunk, j:j + chunk] = g
                    full[j:j + chunk, i:i + chunk] = g.T
            self.full = full

    def _weights(self, rows):
        # per-sample cotangents (one row per sample of x) follow the sample selection
        if isinstance(self.scalarization, np.ndarray) and self.scalarization.ndim >= 2:
            return self.scalarization[rows]
        return self.scalarization

    def batch(self, idx) -> np.ndarray:
        if self.full is not None:
            return self.full[np.ix_(idx, idx)]
        return teacher_ntk(self.teacher, self.x[idx], self._weights(idx))


def ntkd_loss_and_grad(student: Network, x_student: np.ndarray, theta_teacher: np.ndarray,
                       normalization: str = "trace", scalarization: str = "sum_outputs", trace=None):
    """NTKD loss and its gradient w.r.t. every student parameter (second-order path)."""
    if trace is None:
        trace = _run(student, x_student)
    blocks = _jac_blocks(student, trace, scalarization_weights(trace.output, scalarization))
    theta_s = gram_from_blocks(blocks)
    loss, g = ntk_matching_loss(theta_teacher, theta_s, normalization)
    g = 0.5 * (g + g.T)
    return loss, ntk_param_gradient(student, trace, blocks, g, scalarization)


# ---------------------------------------------------------------------------
# training loops


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _add(acc, grads, weight):
    if weight == 0:
        return acc
    for k, v in grads.items():
        acc[k] = acc[k] + weight * v
    return acc


def fit(student: Network, x: np.ndarray, targets: np.ndarray, task: str, config: TrainConfig,
        teacher: TeacherHandle | None = None, x_teacher: np.ndarray | None = None,
        eval_fn=None, on_step=None, teacher_kernel: TeacherKernel | None = None, frozen=()):
    """Minimize alpha * L_E2E + beta * L_aux over minibatches.

    ``x`` is what the student sees; ``x_teacher`` (defaults to ``x``) is what
    the teacher sees for the same samples, which differs during compensation.
    Parameters named in ``frozen`` get zero gradients, which leaves them
    bit-identical under both optimizers. Returns the trained network and
    one EpochRecord per epoch.
    """
    config.validate()
    if config.strategy != "e2e" and teacher is None:
        raise SpecError(f"strategy {config.strategy!r} needs a pretrained teacher")
    x_teacher = x if x_teacher is None else x_teacher
    loss_kind = loss_kind_for(task)
    rng = np.random.default_rng(config.seed)
    state = None
    teacher_out = None
    if config.strategy == "kd":
        teacher_out = batched_forward(teacher.network, x_teacher)
    projected = config.scalarization == "projected_outputs"
    proj_rng = np.random.default_rng([config.seed, 2])
    scalarization = config.scalarization
    if scalarization == "label_outputs":
        if task == "segmentation":
            scalarization = mask_weights(targets)
        else:
            scalarization = label_weights(targets, forward(student, x[:1]).shape[1])
    if config.strategy == "ntkd" and config.beta != 0 and teacher_kernel is None and not projected:
        teacher_kernel = TeacherKernel(teacher.network, x_teacher, scalarization)
    use_aux = config.strategy != "e2e" and config.beta != 0
    alpha = config.alpha
    beta = config.beta if config.strategy != "e2e" else 0.0
    epochs = []
    net = student
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(2)
        count = 0
        for idx in _batches(len(x), config.batch_size, rng):
            xb = x[idx]
            trace = _run(net, xb)
            loss_e2e, gout = loss_value(trace.output, targets[idx], loss_kind)
            gout = alpha * gout
            aux = 0.0
            if use_aux and config.strategy == "kd":
                if task == "segmentation":
                    aux, g_aux = kd_mse_loss(trace.output, teacher_out[idx])
                else:
                    aux, g_aux = kd_loss(trace.output, teacher_out[idx], config.temperature)
                gout = gout + beta * g_aux
            grads, _ = _backward(net, trace, gout)
            if use_aux and config.strategy == "ntkd" and len(idx) > 1:
                if projected:
                    r = proj_rng.standard_normal(trace.output.shape[1])
                    theta_t = teacher_ntk(teacher.network, x_teacher[idx], r)
                    scal = r
                else:
                    theta_t = teacher_kernel.batch(idx)
                    scal = scalarization[idx] if isinstance(scalarization, np.ndarray) else scalarization
                aux, g_ntk = ntkd_loss_and_grad(net, xb, theta_t, config.ntk_normalization, scal, trace)
                grads = _add(grads, g_ntk, beta)
            for name in frozen:
                grads[name] = np.zeros_like(grads[name])
            total = alpha * loss_e2e + beta * aux
            if not math.isfinite(total):
                raise NumericalError(f"training diverged (loss {total}) in epoch {epoch}", epoch=epoch)
            net, state = optimizer_step(net, grads, state, config.optimizer)
            if on_step is not None:
                on_step(loss_e2e, aux, total)
            sums += (loss_e2e * len(idx), aux * len(idx))
            count += len(idx)
        metric = eval_fn(net) if eval_fn is not None else float("nan")
        rec = EpochRecord(epoch, sums[0] / count, sums[1] / count, metric, time.perf_counter() - t0)
        log.info("epoch %d %s loss_e2e=%.4f loss_aux=%.4f metric=%.4f (%.1fs)", epoch,
                 config.strategy, rec.loss_e2e, rec.loss_aux, rec.test_metric, rec.wall_seconds)
        epochs.append(rec)
    return net, epochs


def pretrain_teacher(spec: NetworkSpec, train_x, train_y, test_x, test_y, task: str,
                     config: TrainConfig) -> tuple[TeacherHandle, MetricsReport]:
    """Plain supervised training of the teacher; returns a frozen handle and its report."""
    net = build_network(spec, config.seed)
    cfg = replace(config, strategy="e2e")
    eval_fn = lambda m: evaluate_network(m, test_x, test_y, task).metric
    net, epochs = fit(net, train_x, train_y, task, cfg, eval_fn=eval_fn)
    report = evaluate_network(net, test_x, test_y, task)
    report.epochs = epochs
    return TeacherHandle(net, task, report.metric), report


def train_student(student: Network, teacher: TeacherHandle | None, train_x, train_y, test_x, test_y,
                  task: str, config: TrainConfig, x_teacher=None) -> tuple[Network, MetricsReport]:
    """Joint training of frontend and backend under the configured strategy."""
    before = teacher.digest() if teacher is not None else None
    eval_fn = lambda m: evaluate_network(m, test_x, test_y, task).metric
    net, epochs = fit(student, train_x, train_y, task, config, teacher, x_teacher, eval_fn)
    if teacher is not None and teacher.digest() != before:
        raise RuntimeError("teacher parameters changed during student training")
    report = evaluate_network(net, test_x, test_y, task)
    report.epochs = epochs
    return net, report
