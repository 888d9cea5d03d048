"""Adam training loop with step-decay learning rates and metric logging."""

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import NUMERICAL_ERRORS, NonFiniteGradient
from .objective import assemble_objective
from .skr import RegConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    decay_epochs: Sequence[int] = ()
    decay_factor: float = 0.1
    beta1: float = 0.8
    beta2: float = 0.9
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    precision: str = "double"
    mc_samples_train: int = 8
    mc_samples_eval: int = 32
    eval_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.mc_samples_train < 1 or self.mc_samples_eval < 1:
            raise ValueError("Monte-Carlo sample counts must be >= 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params, grads, state, lr, beta1=0.8, beta2=0.9, eps=1e-8):
    """One bias-corrected Adam step that decreases the loss.

    Returns new ``(params, state)``; the inputs are left untouched.  A
    non-finite gradient raises :class:`NonFiniteGradient` naming the
    parameter before anything is updated.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


def lr_schedule(epoch, cfg):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    n = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.lr * cfg.decay_factor ** n


def seeded_streams(seed):
    """Independent generators for initialisation, shuffling and sampling."""
    init, shuffle, noise = np.random.SeedSequence(seed).spawn(3)
    return {"init": np.random.default_rng(init), "shuffle": np.random.default_rng(shuffle),
            "noise": np.random.default_rng(noise)}


def eval_rng(seed):
    return np.random.default_rng(np.random.SeedSequence([seed, 7]))


@dataclass
class EvalResult:
    ll: float
    acc: float
    probs: np.ndarray


def evaluate(model, dataset, reg, n_mc, seed, batch_size=256):
    """Mean log predictive probability and accuracy in evaluation mode.

    Uses a generator rebuilt from ``seed`` so repeated calls agree exactly.
    """
    rng = eval_rng(seed)
    out = []
    for lo in range(0, len(dataset), batch_size):
        res = model.forward(dataset.inputs[lo:lo + batch_size], mode="eval", rng=rng,
                            reg=reg, n_mc=n_mc)
        out.append(res.probs)
    probs = np.concatenate(out) if out else np.zeros((0, model.config.classes))
    picked = probs[np.arange(len(dataset)), dataset.labels] if len(dataset) else probs[:0, 0]
    ll = float(np.mean(np.log(np.maximum(picked, np.finfo(probs.dtype).tiny)))) if len(dataset) else float("nan")
    acc = float(np.mean(np.argmax(probs, axis=1) == dataset.labels)) if len(dataset) else float("nan")
    return EvalResult(ll, acc, probs)


@dataclass
class TrainResult:
    model: object
    rows: List[dict]
    status: str = "ok"
    error: Optional[BaseException] = None
    step_objectives: List[float] = field(default_factory=list)
    last_eval: Optional[EvalResult] = None


def train_loop(model, train, cfg, obj_cfg, reg=None, eval_data=None, writer=None,
               checkpoint_fn: Optional[Callable] = None, on_step: Optional[Callable] = None,
               max_steps=None):
    """Optimise ``model`` in place on ``train``.

    Writes one metric row per epoch; a numerical failure ends the log with a
    ``failed`` row and is reported through ``TrainResult.status`` rather than
    raised.  ``max_steps`` stops early after that many optimiser steps.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    reg = reg if reg is not None else RegConfig(enabled=False)
    streams = seeded_streams(cfg.seed)
    n_layers = len(model.config.layers)
    state = AdamState.zeros_like(model.params)
    result = TrainResult(model, [])
    step = 0
    start = time.perf_counter()
    jitter = model.config.kernel_jitter

    def emit(row):
        result.rows.append(row)
        if writer is not None:
            writer.write(row)

    epoch = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            order = streams["shuffle"].permutation(len(train))
            obj_sum = ll_sum = acc_sum = 0.0
            seen = 0
            for lo in range(0, len(train), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                tape = ad.Tape()
                res = model.forward(train.inputs[idx], mode="train", rng=streams["noise"], reg=reg,
                                    n_mc=obj_cfg.mc_samples_train, tape=tape)
                terms = assemble_objective(res, train.labels[idx], obj_cfg, len(train), jitter)
                grads = tape.backward(terms.loss)
                model.params, state = adam_step(model.params, grads, state, lr,
                                                cfg.beta1, cfg.beta2, cfg.eps)
                step += 1
                result.step_objectives.append(terms.objective)
                if on_step is not None:
                    on_step(step, terms)
                b = len(idx)
                obj_sum += terms.objective * b
                ll_sum += terms.ell * b
                acc_sum += float(np.sum(np.argmax(res.probs, axis=1) == train.labels[idx]))
                seen += b
                if max_steps is not None and step >= max_steps:
                    break
            row = {"epoch": epoch, "step": step, "objective": obj_sum / seen,
                   "train_ll": ll_sum / seen, "train_acc": acc_sum / seen,
                   "eval_ll": float("nan"), "eval_acc": float("nan")}
            if eval_data is not None and cfg.eval_every and (
                    (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
                ev = evaluate(model, eval_data, reg, cfg.mc_samples_eval, cfg.seed, cfg.batch_size)
                result.last_eval = ev
                row["eval_ll"], row["eval_acc"] = ev.ll, ev.acc
            conds = model.gram_conditions()
            for l in range(1, n_layers + 1):
                row[f"cond_g_ii_{l}"] = conds[l - 1]
            row.update(lr=lr, wall_seconds=time.perf_counter() - start, status="ok")
            emit(row)
            if checkpoint_fn is not None and cfg.checkpoint_every and \
                    (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint_fn(model, epoch)
            if max_steps is not None and step >= max_steps:
                break
    except NUMERICAL_ERRORS as exc:
        nan = float("nan")
        row = {"epoch": epoch, "step": step, "objective": nan, "train_ll": nan, "train_acc": nan,
               "eval_ll": nan, "eval_acc": nan, "lr": lr_schedule(epoch, cfg),
               "wall_seconds": time.perf_counter() - start, "status": "failed"}
        for l in range(1, n_layers + 1):
            row[f"cond_g_ii_{l}"] = nan
        emit(row)
        result.status = "failed"
        result.error = exc
    return result
