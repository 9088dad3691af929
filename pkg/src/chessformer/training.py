"""Supervised training: loss, schedule, history masking, SWA, checkpointed loop."""
from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import autograd as ag
from . import checkpoint as ckpt
from .data import Batch, ExampleSet, TrainingExample
from .model import Chessformer, ModelConfig, masked_logits

OPTIMIZERS = ("adamw", "nadam")
NADAM_BETAS = (0.9, 0.98)
NADAM_EPS = 1e-7

# config-file spellings that map onto TrainConfig fields
ALIASES = {"wd": "weight_decay", "grad_clip_norm": "grad_clip", "batch_size_train": "batch_size"}
THOUSANDS = re.compile(r"\d{1,3}(,\d{3})+(\.\d*)?")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-5
    min_lr: float = 1e-5
    weight_decay: float = 1e-6
    grad_clip: float | None = None        # None -> 3.5 for adamw, 10 for nadam
    warmup_steps: int = 1000
    cosine_cycles: int = 50000            # cycle length in steps
    refresh_lr_scheduler: bool = True     # restart the cosine at every cycle boundary
    batch_size: int = 128
    batch_size_val: int = 16
    value_coefficient: float = 0.1
    history_mask_prob: float = 0.05
    optimizer: str = "adamw"
    swa: bool = False
    swa_start: int = 0
    swa_every: int = 100
    steps: int = 1000
    seed: int = 0
    log_every: int = 50
    val_every: int = 0
    checkpoint_every: int = 0
    # recorded for completeness; the float32 CPU loop has no mixed precision
    use_amp: bool = False
    amp_init_scale: float = 256.0
    amp_max_scale: float = 8192.0
    amp_growth_factor: float = 1.5
    amp_growth_interval: int = 2000
    amp_backoff_factor: float = 0.5

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.grad_clip is None:
            self.grad_clip = 10.0 if self.optimizer == "nadam" else 3.5
        for name in ("lr", "grad_clip", "cosine_cycles", "batch_size", "swa_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("min_lr", "weight_decay", "warmup_steps", "value_coefficient", "steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.history_mask_prob <= 1.0:
            raise ValueError("history_mask_prob must lie in [0, 1]")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in values.items():
            key = ALIASES.get(key, key)
            if key not in kinds:
                continue
            out[key] = _coerce(kinds[key], value)
        return cls(**out)


def _coerce(kind, value):
    if isinstance(value, str):
        if "bool" in str(kind):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"not a boolean: {value!r}")
            return value.lower() in ("true", "1")
        if value == "None":
            return None
        if "int" in str(kind) and "float" not in str(kind):
            return int(float(value))
        if "float" in str(kind):
            return float(value)
    return value


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        # "50,000" style thousands separators; other commas (layer lists) stay
        values[key] = value.replace(",", "") if THOUSANDS.fullmatch(value) else value
    return values


def split_config(values: dict) -> tuple[ModelConfig, TrainConfig]:
    """Route keys to the model or training config; unknown keys are an error."""
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)} | set(ALIASES)
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return (ModelConfig.from_dict({k: v for k, v in values.items() if k in model_keys}),
            TrainConfig.from_dict({k: v for k, v in values.items() if k in train_keys}))


# -- loss ----------------------------------------------------------------------

def loss(policy: torch.Tensor, value: torch.Tensor, batch: Batch, value_coefficient: float = 0.1):
    """Returns ``(total, policy_ce, value_ce)``.

    Policy CE is taken over the legal-masked logits against the played move
    (or ``batch.soft_target`` when present); value CE over the 3 outcomes.
    """
    rows = torch.arange(len(batch))
    if not bool(batch.legal_mask[rows, batch.target].all()):
        bad = int((~batch.legal_mask[rows, batch.target]).nonzero()[0, 0])
        raise ValueError(f"target move of example {bad} is not in its legal set")
    logits = masked_logits(policy, batch.legal_mask)
    if batch.soft_target is not None:
        if bool((batch.soft_target[~batch.legal_mask] > 0).any()):
            raise ValueError("soft policy target puts mass on illegal moves")
        policy_ce = ag.cross_entropy(logits, batch.soft_target)
    else:
        policy_ce = ag.cross_entropy(logits, batch.target)
    value_ce = ag.cross_entropy(value, batch.outcome)
    return policy_ce + value_coefficient * value_ce, policy_ce, value_ce


# -- history masking -----------------------------------------------------------

def _masked_slots(n: int, p: float, rng: np.random.Generator) -> int:
    """Number of oldest slots to overwrite (0 = keep)."""
    hit = rng.random() < p
    m = int(rng.integers(1, n + 1)) if n > 0 else 0
    return m if hit else 0


def mask_history(ex: TrainingExample, p: float = 0.05, rng: np.random.Generator | None = None) -> TrainingExample:
    rng = rng if rng is not None else np.random.default_rng()
    n = ex.history
    m = _masked_slots(n, p, rng)
    if m == 0:
        return ex
    keep = n - m
    boards = ex.boards.copy()
    boards[keep + 1:] = boards[keep]
    reps = None
    if ex.repetitions is not None:
        reps = ex.repetitions.copy()
        reps[keep + 1:] = reps[keep]
    return dataclasses.replace(ex, boards=boards, repetitions=reps)


def mask_history_batch(batch: Batch, p: float, rng: np.random.Generator) -> Batch:
    n = batch.boards.shape[1] - 1
    if n == 0 or p <= 0:
        return batch
    boards, aux = batch.boards.clone(), batch.aux.clone()
    for row in range(len(batch)):
        m = _masked_slots(n, p, rng)
        if m:
            keep = n - m
            boards[row, keep + 1:] = boards[row, keep]
            aux[row, keep + 1:n + 1] = aux[row, keep]
    return dataclasses.replace(batch, boards=boards, aux=aux)


# -- schedule ------------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr``, then cosine annealing to ``min_lr`` over each cycle."""
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    t = step - cfg.warmup_steps
    cycle = cfg.cosine_cycles
    t = t % cycle if cfg.refresh_lr_scheduler else min(t, cycle)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * t / cycle))


# -- optimizer and step --------------------------------------------------------

def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = list(model.parameters())
    if cfg.optimizer == "nadam":
        return torch.optim.NAdam(params, lr=cfg.lr, betas=NADAM_BETAS, eps=NADAM_EPS,
                                 weight_decay=cfg.weight_decay, decoupled_weight_decay=True)
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_step(model: Chessformer, optimizer: torch.optim.Optimizer, batch: Batch, step: int,
               cfg: TrainConfig) -> dict:
    """One update. A non-finite loss leaves parameters untouched and sets ``aborted``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.train()
    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    out = model.run(batch)
    total, policy_ce, value_ce = loss(out.policy, out.value, batch, cfg.value_coefficient)
    metrics = {"step": step, "lr": lr, "loss": total.item(), "policy_loss": policy_ce.item(),
               "value_loss": value_ce.item()}
    with torch.no_grad():
        metrics["policy_acc"] = (masked_logits(out.policy, batch.legal_mask).argmax(1) == batch.target).float().mean().item()
        metrics["value_acc"] = (out.value.argmax(1) == batch.outcome).float().mean().item()
    if not math.isfinite(metrics["loss"]):
        metrics.update(grad_norm=float("nan"), aborted=True)
        return metrics
    total.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    metrics["grad_norm"] = norm.item()
    metrics["aborted"] = False
    return metrics


@torch.no_grad()
def evaluate(model: Chessformer, ds: ExampleSet, batch_size: int = 512, value_coefficient: float = 0.1) -> dict:
    model.eval()
    sums = {"loss": 0.0, "policy_loss": 0.0, "value_loss": 0.0, "policy_acc": 0.0, "value_acc": 0.0}
    for start in range(0, len(ds), batch_size):
        batch = ds.batch(np.arange(start, min(start + batch_size, len(ds))))
        out = model.run(batch)
        total, pce, vce = loss(out.policy, out.value, batch, value_coefficient)
        k = len(batch)
        sums["loss"] += total.item() * k
        sums["policy_loss"] += pce.item() * k
        sums["value_loss"] += vce.item() * k
        sums["policy_acc"] += (masked_logits(out.policy, batch.legal_mask).argmax(1) == batch.target).sum().item()
        sums["value_acc"] += (out.value.argmax(1) == batch.outcome).sum().item()
    return {k: v / len(ds) for k, v in sums.items()}


# -- stochastic weight averaging -----------------------------------------------

@dataclass
class SWAState:
    average: dict[str, torch.Tensor]
    count: int = 0


def swa_init(model: torch.nn.Module) -> SWAState:
    return SWAState({k: torch.zeros_like(v) for k, v in model.state_dict().items()}, 0)


@torch.no_grad()
def swa_update(state: SWAState, params: dict[str, torch.Tensor]) -> None:
    for name, avg in state.average.items():
        p = params[name]
        if p.shape != avg.shape:
            raise ValueError(f"SWA shape mismatch for {name}: {tuple(p.shape)} vs {tuple(avg.shape)}")
        avg += (p.detach() - avg) / (state.count + 1)
    state.count += 1


def swa_finalize(state: SWAState) -> dict[str, torch.Tensor]:
    if state.count == 0:
        raise ValueError("no SWA snapshots")
    return {k: v.clone() for k, v in state.average.items()}


# -- loop ----------------------------------------------------------------------

def batch_indices(step: int, batch_size: int, size: int, seed: int) -> np.ndarray:
    """Indices for ``step``: consecutive slices of per-epoch permutations keyed by (seed, epoch)."""
    pos = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs, offsets = pos // size, pos % size
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, int(e)]).permutation(size)
        sel = epochs == e
        out[sel] = perm[offsets[sel]]
    return out


@dataclass
class TrainState:
    model: Chessformer
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    step: int = 0
    swa: SWAState | None = None
    history: list = dataclasses.field(default_factory=list)
    aborted: int = 0


def new_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = Chessformer(model_cfg)
    return TrainState(model, make_optimizer(model, cfg), cfg, swa=swa_init(model) if cfg.swa else None)


def save_state(path, state: TrainState) -> None:
    meta = {f"train.{k}": v for k, v in ckpt.parse_meta(state.cfg.to_text()).items()}
    meta["step"] = state.step
    extra = {}
    opt = state.optimizer.state_dict()["state"]
    for idx in sorted(opt):
        for key, value in sorted(opt[idx].items()):
            value = torch.as_tensor(value, dtype=torch.float32)
            extra[f"opt/{idx}/{key}"] = value.reshape(1) if value.dim() == 0 else value
    if state.swa is not None:
        meta["swa_count"] = state.swa.count
        extra.update({f"swa/{k}": v for k, v in state.swa.average.items()})
    ckpt.save_model(path, state.model, meta, extra)


def load_state(path) -> TrainState:
    model, meta, tensors = ckpt.load_model(path)
    cfg = TrainConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("train.")})
    optimizer = make_optimizer(model, cfg)
    sd = optimizer.state_dict()
    params = sd["param_groups"][0]["params"]
    shapes = {i: p.shape for i, p in zip(params, model.parameters())}
    opt_state: dict = {}
    for name, t in tensors.items():
        if not name.startswith("opt/"):
            continue
        _, idx, key = name.split("/", 2)
        idx = int(idx)
        value = t.reshape(()) if key in ("step", "mu_product") else t.reshape(shapes[idx])
        opt_state.setdefault(idx, {})[key] = value
    sd["state"] = opt_state
    optimizer.load_state_dict(sd)
    model.train()
    swa = None
    if cfg.swa:
        swa = SWAState({k[4:]: v.clone() for k, v in tensors.items() if k.startswith("swa/")},
                       int(meta.get("swa_count", 0)))
    return TrainState(model, optimizer, cfg, step=int(meta["step"]), swa=swa)


def run_training(state: TrainState, train_set: ExampleSet, val_set: ExampleSet | None = None,
                 out_dir=None, until: int | None = None, metrics_path=None) -> TrainState:
    """Train from ``state.step`` to ``until`` (default ``cfg.steps``).

    Batches and history masks depend only on (seed, step), so a run resumed
    from a checkpoint replays the uninterrupted run exactly.
    """
    cfg = state.cfg
    until = cfg.steps if until is None else until
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = metrics_path or out_dir / "metrics.ndjson"
    log = open(metrics_path, "a") if metrics_path is not None else None
    try:
        while state.step < until:
            step = state.step
            rng = np.random.default_rng([cfg.seed, step, 1])
            idx = batch_indices(step, cfg.batch_size, len(train_set), cfg.seed)
            batch = mask_history_batch(train_set.batch(idx), cfg.history_mask_prob, rng)
            metrics = train_step(state.model, state.optimizer, batch, step, cfg)
            state.aborted += metrics["aborted"]
            state.step += 1
            if state.swa is not None and state.step > cfg.swa_start and state.step % cfg.swa_every == 0:
                swa_update(state.swa, state.model.state_dict())
            state.history.append(metrics)
            if cfg.val_every and val_set is not None and state.step % cfg.val_every == 0:
                metrics.update({f"val_{k}": v for k, v in evaluate(state.model, val_set).items()})
            if log is not None and (metrics["aborted"] or state.step % cfg.log_every == 0
                                    or "val_loss" in metrics or state.step == until):
                log.write(json.dumps(metrics) + "\n")
                log.flush()
            if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(out_dir / f"step{state.step}.ckpt", state)
        if out_dir is not None:
            save_state(out_dir / "last.ckpt", state)
    finally:
        if log is not None:
            log.close()
    return state
