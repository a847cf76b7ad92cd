"""Episodic training and evaluation.

Training is MSE regression on relation scores (target 1 for matching
class, else 0) with Adam, a warm-up gate on deformable offsets, and a
reduce-on-plateau learning-rate schedule driven by held-out episodes drawn
from the training classes. No weight decay, no dropout.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, Episode, one_hot, sample_episode
from .model import ParnModel
from .tensor import (DimensionError, NumericError, Tensor, backward, no_grad,
                     tmean, mul, sub)

METRICS_HEADER = "episode,loss,eval_accuracy,ci95,lr,offsets_active"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay_factor: float = 10.0
    plateau_patience: int = 5
    max_episodes: int = 2000
    warmup_episodes: Optional[int] = None  # None: take the model config's
    seed: int = 0
    eval_every: int = 500
    eval_episodes: int = 100
    way: int = 5
    shot: int = 1
    queries: Optional[int] = None          # None: protocol default
    target_accuracy: Optional[float] = None


@dataclass
class EvalResult:
    mean_accuracy: float
    ci95: float
    episodes: int
    degenerate: bool = False  # single-episode evals have no spread estimate


@dataclass
class TrainResult:
    episodes_run: int
    metrics: list[dict]
    state: dict[str, np.ndarray]
    stopped_early: bool = False
    final_train_accuracy: float = 0.0


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good state."""

    def __init__(self, message: str, state: dict[str, np.ndarray],
                 metrics: list[dict]):
        super().__init__(message)
        self.state = state
        self.metrics = metrics


def default_queries(way: int, shot: int, input_size: int) -> int:
    """Query counts inherited from the followed episode arrangements."""
    if input_size == 28:
        if way >= 20:
            return 10 if shot == 1 else 5
        return 19 if shot == 1 else 15
    return 15 if shot == 1 else 10


def mse_episode_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over all (query, class) pairs of (score - label)^2."""
    target = labels.data if isinstance(labels, Tensor) else labels
    if scores.data.shape != target.shape:
        raise DimensionError(
            f"mse_episode_loss: scores {scores.data.shape} vs labels {target.shape}")
    d = sub(scores, Tensor(target.astype(scores.data.dtype, copy=False)))
    return tmean(mul(d, d))


class Adam:
    """Adam with bias correction; per-parameter step counts so parameters
    that join late (offset warm-up) start from a fresh state."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self):
        for name, p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            if name not in self.state:
                self.state[name] = (np.zeros_like(p.data), np.zeros_like(p.data), 0)
            m, v, t = self.state[name]
            t += 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.data.dtype, copy=False)
            self.state[name] = (m, v, t)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def episode_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def run_episode_eval(model: ParnModel, episode: Episode) -> float:
    with no_grad():
        scores = model.episode_scores_batch(
            episode.sample_images, episode.query_images,
            episode.way, episode.shot)
    return episode_accuracy(scores.data, episode.query_labels)


def evaluate(model: ParnModel, dataset: Dataset, way: int, shot: int,
             queries: Optional[int], episodes: int,
             rng: np.random.Generator, workers: int = 1) -> EvalResult:
    """Mean episode accuracy with a 95% confidence interval
    (1.96 * std / sqrt(n), sample standard deviation)."""
    if queries is None:
        queries = default_queries(way, shot, dataset.image_size)
    was_training = model.training
    model.set_training(False)
    try:
        eps = [sample_episode(dataset, way, shot, queries, rng)
               for _ in range(episodes)]
        if workers > 1:
            with concurrent.futures.ThreadPoolExecutor(workers) as pool:
                accs = list(pool.map(lambda e: run_episode_eval(model, e), eps))
        else:
            accs = [run_episode_eval(model, e) for e in eps]
    finally:
        model.set_training(was_training)
    accs = np.asarray(accs, dtype=np.float64)
    if episodes < 2:
        return EvalResult(float(accs.mean()), 0.0, episodes, degenerate=True)
    ci = 1.96 * float(accs.std(ddof=1)) / float(np.sqrt(episodes))
    return EvalResult(float(accs.mean()), ci, episodes, degenerate=False)


def _metrics_row(episode: int, loss: float, acc: float, ci: float, lr: float,
                 offsets_active: bool) -> dict:
    return {"episode": episode, "loss": loss, "eval_accuracy": acc,
            "ci95": ci, "lr": lr, "offsets_active": int(offsets_active)}


def format_metrics_row(row: dict) -> str:
    return ",".join([str(row["episode"]), repr(float(row["loss"])),
                     repr(float(row["eval_accuracy"])), repr(float(row["ci95"])),
                     repr(float(row["lr"])), str(row["offsets_active"])])


def snapshot_state(model: ParnModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_arrays().items()}


def train(model: ParnModel, cfg: TrainConfig, train_ds: Dataset,
          metrics_path=None, log=None) -> TrainResult:
    """Episodic training loop.

    Per episode: sample -> forward -> MSE loss -> backward -> Adam step.
    Deformable offset predictors stay frozen for the first
    ``warmup_episodes`` episodes. Every ``eval_every`` episodes the model is
    scored on held-out episodes (fresh classes combinations from the train
    split, fixed evaluation seed) and the learning rate divides by
    ``lr_decay_factor`` after ``plateau_patience`` evaluations without
    improvement. A non-finite loss aborts with the last good state.
    """
    queries = cfg.queries or default_queries(cfg.way, cfg.shot,
                                             model.cfg.input_size)
    warmup = (cfg.warmup_episodes if cfg.warmup_episodes is not None
              else model.cfg.warmup_episodes)
    rng = np.random.default_rng(cfg.seed)
    eval_seed = np.random.SeedSequence([cfg.seed, 0x5EED]).generate_state(1)[0]
    opt = Adam(model.parameters(), lr=cfg.lr)
    model.set_training(True)
    model.set_offsets_trainable(warmup <= 0)

    metrics: list[dict] = []
    last_good = snapshot_state(model)
    best_acc = -1.0
    evals_since_improve = 0
    loss_sum = 0.0
    acc_sum = 0.0
    since = 0
    stopped_early = False
    final_acc = 0.0
    fh = open(metrics_path, "w") if metrics_path else None
    if fh:
        fh.write(METRICS_HEADER + "\n")

    try:
        episode_idx = 0
        for episode_idx in range(1, cfg.max_episodes + 1):
            if episode_idx == warmup + 1:
                model.set_offsets_trainable(True)
            ep = sample_episode(train_ds, cfg.way, cfg.shot, queries, rng)
            scores = model.episode_scores_batch(ep.sample_images,
                                                ep.query_images,
                                                cfg.way, cfg.shot)
            target = one_hot(ep.query_labels, cfg.way, dtype=scores.data.dtype)
            loss = mse_episode_loss(scores, target)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingAborted(
                    f"non-finite loss at episode {episode_idx}", last_good, metrics)
            acc_sum += episode_accuracy(scores.data, ep.query_labels)
            loss_sum += loss_val
            since += 1
            opt.zero_grad()
            backward(loss)
            opt.step()

            if episode_idx % cfg.eval_every == 0 or episode_idx == cfg.max_episodes:
                # fixed eval seed: the same held-out episode set every time
                res = evaluate(model, train_ds, cfg.way, cfg.shot, queries,
                               cfg.eval_episodes,
                               np.random.default_rng(eval_seed))
                model.set_training(True)
                row = _metrics_row(episode_idx, loss_sum / max(since, 1),
                                   res.mean_accuracy, res.ci95, opt.lr,
                                   model.offsets_trainable())
                metrics.append(row)
                if fh:
                    fh.write(format_metrics_row(row) + "\n")
                    fh.flush()
                if log:
                    log(format_metrics_row(row))
                last_good = snapshot_state(model)
                if res.mean_accuracy > best_acc:
                    best_acc = res.mean_accuracy
                    evals_since_improve = 0
                else:
                    evals_since_improve += 1
                    if evals_since_improve >= cfg.plateau_patience:
                        opt.lr /= cfg.lr_decay_factor
                        evals_since_improve = 0
                loss_sum = 0.0
                final_acc = acc_sum / max(since, 1)
                acc_sum = 0.0
                since = 0
                if (cfg.target_accuracy is not None
                        and res.mean_accuracy >= cfg.target_accuracy):
                    stopped_early = True
                    break
    finally:
        if fh:
            fh.close()

    return TrainResult(
        episodes_run=episode_idx,
        metrics=metrics,
        state=snapshot_state(model),
        stopped_early=stopped_early,
        final_train_accuracy=final_acc,
    )
