"""Training regimes: episodic meta-optimization, multi-task pooling,
target-only training, and low-resource fine-tuning with early stopping.

The episodic outer update differentiates the query loss through the inner
one-step adaptation (exactly, including the curvature term, unless
``second_order`` is off). The inner step is plain gradient descent with
step size alpha; Adam applies only to outer/pooled updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .corpus import TaskSampler
from .model import da_vector, sequence_nll_batch, sequence_nll_value

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """A training step could not be completed (non-finite loss/gradient)."""


@dataclass
class MetaConfig:
    """Episodic optimization settings (outer Adam rate is ``beta``)."""

    alpha: float = 0.1
    beta: float = 0.001
    meta_batch: int = 5
    inner_steps: int = 1
    second_order: bool = True
    clip_norm: float = 0.5
    max_outer_steps: int = 2000
    convergence_window: int = 20
    convergence_tol: float = 1e-3
    task_half_size: int = 200
    batch_size: int = 32
    patience: int = 5
    max_epochs: int = 50

    def __post_init__(self):
        # alpha == 0 is allowed: it degenerates the episodic update into
        # pooled multi-task training, which the test suite relies on
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("alpha must be >= 0 and beta > 0")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.inner_steps != 1:
            raise ValueError("exactly one inner step is supported")


class AdamState:
    """Adam moments laid out like the parameter vector they update."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(params.size)
        self.v = np.zeros(params.size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, params, grad, lr):
        if not params.same_layout(grad):
            raise ValueError("gradient layout does not match parameters")
        self.t += 1
        g = grad.data
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        step = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params.with_data(params.data - step)


def clip_gradient(grad, max_norm):
    """Global-norm clipping, applied right before an optimizer update."""
    if max_norm is None or max_norm <= 0:
        return grad
    norm = grad.norm()
    if norm > max_norm:
        return grad.with_data(grad.data * (max_norm / norm))
    return grad


class SequenceLoss:
    """Mean teacher-forced NLL over a set of examples, as a tape node.

    When a dropout rng is attached, fresh masks are sampled for every
    sequence on every call (training-time dropout); evaluation always runs
    without dropout through ``value``.
    """

    def __init__(self, vocab, schema, gen_cfg, dropout_rng=None):
        self.vocab = vocab
        self.schema = schema
        self.gen_cfg = gen_cfg
        self.dropout_rng = dropout_rng
        self._ids = {}
        self._da = {}

    def _encode(self, ex):
        cached = self._ids.get(id(ex))
        if cached is None:
            cached = self.vocab.encode(ex.delex_tokens)
            self._ids[id(ex)] = cached
            self._da[id(ex)] = da_vector(ex.da, self.schema)
        return cached, self._da[id(ex)]

    def __call__(self, tp, examples):
        if not examples:
            raise ValueError("loss requires at least one example")
        encoded = [self._encode(ex) for ex in examples]
        da_rows = np.stack([da for _, da in encoded])
        return sequence_nll_batch(tp, da_rows, [ids for ids, _ in encoded],
                                  self.gen_cfg, mask_rng=self.dropout_rng)

    def value(self, params, examples):
        """Mean NLL without tape or dropout (validation/monitoring)."""
        if not examples:
            raise ValueError("loss requires at least one example")
        acc = 0.0
        for ex in examples:
            ids, da = self._encode(ex)
            acc += sequence_nll_value(params, da, ids, self.gen_cfg)
        return acc / len(examples)


# ---------------------------------------------------------------------------
# update steps


def inner_adapt(params, support, alpha, loss_fn):
    """One plain gradient step on the mean support loss."""
    if not support:
        raise ValueError("support set is empty")
    tp = ad.TapedParams(params)
    loss = loss_fn(tp, support)
    grad = ad.grad(loss, tp)
    return params.add_scaled(grad, -alpha)


def meta_task_gradient(params, task, cfg, loss_fn):
    """Per-task outer gradient w.r.t. the original parameters."""
    return ad.grad_through_update(
        lambda tp: loss_fn(tp, task.query),
        lambda tp: loss_fn(tp, task.support),
        params, cfg.alpha,
        first_order=not cfg.second_order,
        with_outer_loss=True)


def meta_step(params, tasks, cfg, adam, loss_fn):
    """One outer update over a batch of episodes.

    Per-task gradients (each through its own inner adaptation) are summed in
    task order, clipped by global norm, then applied with Adam at rate beta
    (or plain gradient descent when ``adam`` is None).
    """
    total = np.zeros(params.size)
    losses = []
    for i, task in enumerate(tasks):
        try:
            grad, outer_loss = meta_task_gradient(params, task, cfg, loss_fn)
        except ad.NonFiniteError as e:
            raise TrainingError(
                f"task {i} (modality {task.modality!r}): {e}") from e
        total += grad.data
        losses.append(outer_loss)
    grad = clip_gradient(params.with_data(total), cfg.clip_norm)
    if adam is None:
        new_params = params.add_scaled(grad, -cfg.beta)
    else:
        new_params = adam.update(params, grad, cfg.beta)
    return new_params, float(np.mean(losses))


def mtl_step(params, batch, cfg, adam, loss_fn):
    """One pooled update: Adam on the mean NLL of a flat example batch."""
    if not batch:
        raise ValueError("batch is empty")
    tp = ad.TapedParams(params)
    try:
        loss = loss_fn(tp, batch)
        grad = ad.grad(loss, tp)
    except ad.NonFiniteError as e:
        raise TrainingError(str(e)) from e
    grad = clip_gradient(grad, cfg.clip_norm)
    if adam is None:
        new_params = params.add_scaled(grad, -cfg.beta)
    else:
        new_params = adam.update(params, grad, cfg.beta)
    return new_params, float(loss.value)


# ---------------------------------------------------------------------------
# training loops


def _converged(losses, window, tol):
    if tol <= 0:  # early stopping on the moving average disabled
        return False
    if len(losses) < 2 * window:
        return False
    cur = float(np.mean(losses[-window:]))
    prev = float(np.mean(losses[-2 * window:-window]))
    return (prev - cur) < tol * abs(prev)


def meta_train(params, sampler, cfg, loss_fn, report=None, phase="source"):
    """Episodic training until the outer loss stops improving."""
    adam = AdamState(params)
    losses = []
    for step_i in range(1, cfg.max_outer_steps + 1):
        tasks = [sampler.sample() for _ in range(cfg.meta_batch)]
        params, loss = meta_step(params, tasks, cfg, adam, loss_fn)
        losses.append(loss)
        if report is not None:
            report.add(phase, step_i, "train", loss)
        if _converged(losses, cfg.convergence_window, cfg.convergence_tol):
            log.info("meta training converged after %d outer steps", step_i)
            break
    return params


class _BatchQueue:
    """Seeded shuffled minibatches, reshuffling each pass over the pool."""

    def __init__(self, pool, batch_size, rng):
        self.pool = list(pool)
        self.batch_size = min(batch_size, len(self.pool))
        self.rng = rng
        self.queue = []

    def next(self):
        if len(self.queue) < self.batch_size:
            order = self.rng.permutation(len(self.pool))
            self.queue.extend(self.pool[i] for i in order)
        batch = self.queue[:self.batch_size]
        del self.queue[:self.batch_size]
        return batch

    def steps_per_pass(self):
        return max(1, len(self.pool) // self.batch_size)


def mtl_train(params, pool, cfg, loss_fn, rng, report=None, phase="source"):
    """Pooled multi-task training until the batch loss stops improving."""
    adam = AdamState(params)
    queue = _BatchQueue(pool, cfg.batch_size, rng)
    losses = []
    for step_i in range(1, cfg.max_outer_steps + 1):
        params, loss = mtl_step(params, queue.next(), cfg, adam, loss_fn)
        losses.append(loss)
        if report is not None:
            report.add(phase, step_i, "train", loss)
        if _converged(losses, cfg.convergence_window, cfg.convergence_tol):
            log.info("pooled training converged after %d steps", step_i)
            break
    return params


class EarlyStop:
    """Best-snapshot tracking; stops after ``patience`` stale epochs."""

    def __init__(self, params, initial_nll, patience):
        self.best_params = params.copy()
        self.best_nll = initial_nll
        self.patience = patience
        self.stale = 0

    def observe(self, params, nll):
        """Record one epoch; returns True when training should stop."""
        if nll < self.best_nll:
            self.best_nll = nll
            self.best_params = params.copy()
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def fine_tune(params, adaptation, validation, cfg, loss_fn, mode="episodic",
              seed=0, report=None, target_label=None, label_mode="domain",
              eval_hook=None):
    """Adapt on a low-resource target set with validation early stopping.

    ``episodic`` mode reruns the meta algorithm with tasks drawn from the
    adaptation set itself (half-size shrunk to fit); ``plain`` mode is
    ordinary pooled Adam, used by the baseline regimes. Returns the best
    snapshot by validation NLL, which is never worse than the initial one.
    """
    if not adaptation or not validation:
        raise ValueError("adaptation and validation sets must be non-empty")
    if mode not in ("episodic", "plain"):
        raise ValueError(f"unknown fine-tune mode {mode!r}")
    rng = np.random.default_rng(seed)
    adam = AdamState(params)
    stop = EarlyStop(params, loss_fn.value(params, validation), cfg.patience)

    if mode == "episodic":
        labels = (target_label,) if target_label else None
        sampler = TaskSampler(adaptation, mode=label_mode,
                              half_size=cfg.task_half_size, seed=seed,
                              labels=labels)
        half = sampler.effective_half(sampler.labels[0])
        steps_per_epoch = max(
            1, len(adaptation) // (2 * half * cfg.meta_batch))
    else:
        queue = _BatchQueue(adaptation, cfg.batch_size, rng)
        steps_per_epoch = queue.steps_per_pass()

    for epoch in range(1, cfg.max_epochs + 1):
        for _ in range(steps_per_epoch):
            if mode == "episodic":
                tasks = [sampler.sample() for _ in range(cfg.meta_batch)]
                params, _ = meta_step(params, tasks, cfg, adam, loss_fn)
            else:
                params, _ = mtl_step(params, queue.next(), cfg, adam,
                                     loss_fn)
        val_nll = loss_fn.value(params, validation)
        if report is not None:
            extra = eval_hook(params) if eval_hook is not None else {}
            report.add("adapt", epoch, "validation", val_nll, **extra)
        if stop.observe(params, val_nll):
            break
    return stop.best_params, stop.best_nll


# ---------------------------------------------------------------------------
# regimes


REGIMES = ("scratch", "mtl", "zero", "supervised", "meta")


def run_regime(regime, split, vocab, schema, gen_cfg, cfg, seed,
               report=None, eval_hook=None):
    """Run one full training regime over a split; returns final parameters.

    scratch     random init, plain fine-tune on the adaptation set
    mtl         pooled training on the source pool, then plain fine-tune
    zero        pooled training on the source pool only
    supervised  pooled training on source plus all target examples
    meta        episodic training on the source pool, episodic fine-tune
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    seeds = np.random.SeedSequence(seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    from .model import init_params

    params = init_params(len(vocab), schema.da_dim(), gen_cfg, init_rng)
    loss_fn = SequenceLoss(vocab, schema, gen_cfg,
                           dropout_rng=np.random.default_rng(seeds[1]))

    source_rng = np.random.default_rng(seeds[2])
    ft_seed = int(np.random.default_rng(seeds[3]).integers(2 ** 31))

    if regime == "scratch":
        params, _ = fine_tune(params, split.adaptation, split.validation,
                              cfg, loss_fn, mode="plain", seed=ft_seed,
                              report=report, eval_hook=eval_hook)
    elif regime in ("mtl", "zero"):
        params = mtl_train(params, split.source, cfg, loss_fn, source_rng,
                           report=report)
        if regime == "mtl":
            params, _ = fine_tune(params, split.adaptation, split.validation,
                                  cfg, loss_fn, mode="plain", seed=ft_seed,
                                  report=report, eval_hook=eval_hook)
    elif regime == "supervised":
        pool = tuple(split.source) + tuple(split.adaptation) + \
            tuple(split.validation) + tuple(split.test)
        params = mtl_train(params, pool, cfg, loss_fn, source_rng,
                           report=report)
    else:  # meta
        sampler = TaskSampler(split.source, mode=split.spec.mode,
                              half_size=cfg.task_half_size,
                              seed=int(source_rng.integers(2 ** 31)))
        params = meta_train(params, sampler, cfg, loss_fn, report=report)
        params, _ = fine_tune(params, split.adaptation, split.validation,
                              cfg, loss_fn, mode="episodic", seed=ft_seed,
                              report=report,
                              target_label=split.spec.target,
                              label_mode=split.spec.mode,
                              eval_hook=eval_hook)
    return params
