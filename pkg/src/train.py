"""Loss, optimizer and the training loop for the synthetic tasks."""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.config import get_settings
from src.converters import (
    append_metrics,
    batch_to_jsonl,
    check_model_entries,
    load_checkpoint,
    save_checkpoint,
)
from src.errors import ContractError, NumericError, TrainingDivergedError
from src.models import ZeroSLM, init_params, param_shapes
from src.schemas import AdamConfig, EvalReport, MetricsRecord, TrainConfig
from src.tasks import TaskBatch, generate, masked_accuracy
from src.tensor import Tensor, backward, const, map_unary, no_grad, repeat

logger = logging.getLogger(__name__)

# Parameters whose names end with these suffixes get no weight decay
NO_DECAY_SUFFIXES = (".gain", ".bias", ".mu", ".tau")

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "final.zsck"
DIVERGED_FILE = "diverged_batch.jsonl"


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for a (seed, stream, index) key."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def resolve_seed(config_seed: int, cli_seed: int | None = None) -> int:
    """--seed beats ZEROS_SEED, which beats the config file."""
    if cli_seed is not None:
        return cli_seed
    env_seed = get_settings().seed
    return env_seed if env_seed is not None else config_seed


def cross_entropy(logits: Tensor, labels: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked positions (log-sum-exp with a constant shift)."""
    labels = np.asarray(labels)
    mask = np.asarray(loss_mask, dtype=bool)
    vocab = logits.shape[-1]
    if logits.shape[:-1] != labels.shape or labels.shape != mask.shape:
        raise ContractError(f"logits {logits.shape} do not match labels {labels.shape} / mask {mask.shape}")
    shift = Tensor(logits.data.max(axis=-1), dtype=logits.dtype)
    z = logits - repeat(shift, -1, vocab)
    log_norm = map_unary(z.exp().sum(axis=-1), "log")
    one_hot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(one_hot, np.where(mask, labels, 0)[..., None], 1.0, axis=-1)
    picked = (z * const(one_hot)).sum(axis=-1)
    weights = mask.astype(logits.dtype) / max(int(mask.sum()), 1)
    return ((log_norm - picked) * const(weights)).sum()


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    cfg: AdamConfig,
) -> tuple[AdamState, float]:
    """Clip by global norm, then one bias-corrected Adam update with decoupled weight decay.

    Parameters are updated in place; returns the new state and the pre-clip gradient norm.
    """
    for name, p in params.items():
        if state.m.get(name) is None or state.m[name].shape != p.shape:
            raise ContractError(f"optimizer state for {name} does not match parameter shape {p.shape}")
    g = {name: np.zeros_like(p.data) if grads.get(name) is None else grads[name] for name, p in params.items()}
    grad_norm = float(np.sqrt(sum(float((x * x).sum()) for x in g.values())))
    if cfg.grad_clip is not None and grad_norm > cfg.grad_clip:
        scale = cfg.grad_clip / grad_norm
        g = {name: x * scale for name, x in g.items()}

    b1, b2 = cfg.betas
    step = state.step + 1
    m, v = {}, {}
    for name, p in params.items():
        m[name] = b1 * state.m[name] + (1 - b1) * g[name]
        v[name] = b2 * state.v[name] + (1 - b2) * g[name] ** 2
        m_hat = m[name] / (1 - b1**step)
        v_hat = v[name] / (1 - b2**step)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay and not name.endswith(NO_DECAY_SUFFIXES):
            update = update + cfg.weight_decay * p.data
        p.data -= cfg.lr * update
        if not np.all(np.isfinite(p.data)):
            raise TrainingDivergedError(f"parameter {name} became non-finite at step {step}")
    return AdamState(step, m, v), grad_norm


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first warmup_frac of steps, then constant."""
    warmup = max(1, round(cfg.warmup_frac * cfg.steps))
    return cfg.lr * min(1.0, (step + 1) / warmup)


def train_batch(cfg: TrainConfig, seed: int, index: int) -> TaskBatch:
    task_cfg = cfg.task_params.model_copy(update={"seed": derive_seed(seed, 1, index), "batch_size": cfg.batch_size})
    return generate(cfg.task, task_cfg)


def eval_batches(cfg: TrainConfig, seed: int, n_batches: int) -> list[TaskBatch]:
    return [
        generate(cfg.task, cfg.task_params.model_copy(update={"seed": derive_seed(seed, 2, j)}))
        for j in range(n_batches)
    ]


def evaluate(model: ZeroSLM, task: str, batches: list[TaskBatch]) -> EvalReport:
    correct, total = 0.0, 0
    with no_grad():
        for batch in batches:
            acc = masked_accuracy(model(batch.tokens), batch.labels, batch.loss_mask)
            correct += acc.value * acc.n_masked
            total += acc.n_masked
    if total == 0:
        logger.warning("evaluation batches contain no masked positions")
        return EvalReport(task=task, accuracy=1.0, n_batches=len(batches), n_masked=0, empty_mask=True)
    return EvalReport(task=task, accuracy=correct / total, n_batches=len(batches), n_masked=total)


def checkpoint_entries(model: ZeroSLM, state: AdamState) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {name: p.data for name, p in model.params.items()}
    for name in model.params:
        entries[f"opt.m.{name}"] = state.m[name]
        entries[f"opt.v.{name}"] = state.v[name]
    entries["meta.step"] = np.array([state.step], dtype=np.float64)
    return entries


def restore(path: Path, model: ZeroSLM) -> AdamState:
    """Load parameters and optimizer moments saved by train_loop into `model`."""
    entries = load_checkpoint(path)
    check_model_entries(entries, param_shapes(model.cfg))
    for name, p in model.params.items():
        p.data = entries[name].astype(p.dtype)
    state = AdamState.zeros(model.params)
    if "meta.step" in entries:
        state.step = int(entries["meta.step"][0])
        for name in model.params:
            state.m[name] = entries.get(f"opt.m.{name}", state.m[name])
            state.v[name] = entries.get(f"opt.v.{name}", state.v[name])
    return state


@dataclass
class TrainResult:
    metrics: list[MetricsRecord]
    checkpoint: Path
    model: ZeroSLM
    state: AdamState


def train_loop(cfg: TrainConfig, run_dir: Path, resume: Path | None = None) -> TrainResult:
    """Train `cfg.model` on `cfg.task`; metrics every eval_every steps, checkpoint at the end.

    All randomness derives from cfg.seed: model init, batch k of training and
    the fixed evaluation set each get their own derived stream.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / METRICS_FILE
    seed = cfg.seed
    model = ZeroSLM(cfg.model, init_params(cfg.model, seed=derive_seed(seed, 0)))
    state = AdamState.zeros(model.params)
    if resume is not None:
        state = restore(resume, model)
        logger.warning(f"Resuming from {resume} at step {state.step}")
    else:
        metrics_path.write_text("")
    opt = cfg.optimizer()
    evals = eval_batches(cfg, seed, cfg.eval_batches)
    metrics: list[MetricsRecord] = []

    start = state.step
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="batches") as pool:
        pending = pool.submit(train_batch, cfg, seed, start) if start < cfg.steps else None
        for step in range(start, cfg.steps):
            t0 = time.perf_counter()
            batch = pending.result()
            pending = pool.submit(train_batch, cfg, seed, step + 1) if step + 1 < cfg.steps else None
            loss = _loss(model, batch, run_dir, step)
            backward(loss)
            grads = {name: p.grad for name, p in model.params.items()}
            try:
                state, grad_norm = adam_step(model.params, grads, state, opt.model_copy(update={"lr": lr_at(step, cfg)}))
            except TrainingDivergedError as exc:
                _dump_batch(batch, run_dir, step, exc)
                raise
            for p in model.params.values():
                p.zero_grad()

            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                report = evaluate(model, cfg.task, evals)
                record = MetricsRecord(
                    step=done,
                    train_loss=loss.item(),
                    eval_accuracy=report.accuracy,
                    wall_ms=(time.perf_counter() - t0) * 1000,
                    grad_norm=grad_norm,
                )
                metrics.append(record)
                append_metrics(metrics_path, record)
                logger.info(
                    f"step {done}/{cfg.steps} loss {record.train_loss:.4f} "
                    f"acc {record.eval_accuracy:.3f} grad_norm {grad_norm:.3f}"
                )

    checkpoint = run_dir / CHECKPOINT_FILE
    save_checkpoint(checkpoint, checkpoint_entries(model, state))
    return TrainResult(metrics, checkpoint, model, state)


def _loss(model: ZeroSLM, batch: TaskBatch, run_dir: Path, step: int) -> Tensor:
    try:
        loss = cross_entropy(model(batch.tokens), batch.labels, batch.loss_mask)
    except NumericError as exc:
        _dump_batch(batch, run_dir, step, exc)
        raise TrainingDivergedError(
            f"training diverged at step {step + 1}: {exc}", position=exc.position, layer=exc.layer
        ) from exc
    return loss


def _dump_batch(batch: TaskBatch, run_dir: Path, step: int, exc: NumericError) -> None:
    dump = run_dir / DIVERGED_FILE
    with dump.open("w") as f:
        batch_to_jsonl(batch, f)
    logger.error(f"Non-finite values at step {step + 1}: {exc}; batch written to {dump}")
