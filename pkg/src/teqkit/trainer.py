"""Training of per-site scale vectors through simulated quantization.

The recipe: Adam with betas (0.9, 0.9), weight decay 0, lr 1e-3 with
linear decay, 1000 steps of batch size 1, model weights frozen; the
rounding inside the simulated quantizer is treated as identity in the
backward pass so the loss gradient reaches the scale vectors through
both the scaled-weight and the inverse-scaled-activation paths. Two
initializations (all ones and 1/sqrt(c_in)) can be raced with identical
data order and the better final calibration loss wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataError, DivergenceError
from .model import ModelGraph, find_fusion_sites, lm_loss
from .quant import QuantSpec
from .tensor import Tensor

SCALE_FLOOR = np.float32(1e-5)
INIT_STRATEGIES = ("ones", "inv_sqrt_cin")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.9)
    weight_decay: float = 0.0
    steps: int = 1000
    batch_size: int = 1
    seq_len: int = 64
    seed: int = 0
    init_strategy: str = "ones"  # ones | inv_sqrt_cin | auto
    quant: QuantSpec | None = None
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.init_strategy not in INIT_STRATEGIES + ("auto",):
            raise ContractError(f"unknown init strategy {self.init_strategy!r}")

    def lr_at(self, step: int) -> float:
        """Linear decay; reaches exactly 0 at step == steps."""
        return self.lr * (1.0 - step / self.steps)


class Adam:
    """Adam with bias correction over a named set of float32 parameters."""

    def __init__(self, params: dict, betas=(0.9, 0.9), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params  # name -> Tensor
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * p.data
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / (1 - self.b1**self.t)
            vhat = self.v[name] / (1 - self.b2**self.t)
            p.data = (
                p.data - np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(self.eps))
            ).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def init_scales(sites, strategy: str) -> dict:
    """site_id -> float32 vector; ones or 1/sqrt(c_in) of the consumers."""
    if strategy not in INIT_STRATEGIES:
        raise ContractError(f"unknown init strategy {strategy!r}")
    out = {}
    for site in sites:
        if strategy == "ones":
            out[site.site_id] = np.ones(site.channel_count, dtype=np.float32)
        else:
            out[site.site_id] = np.full(
                site.channel_count,
                np.float32(1.0 / np.sqrt(site.channel_count)),
                dtype=np.float32,
            )
    return out


def transformed_fake_quant_forward(
    model: ModelGraph, scales: dict, tokens: np.ndarray, targets: np.ndarray,
    quant: QuantSpec | None,
) -> Tensor:
    """Cross-entropy loss of the scaled, fake-quantized model (on the tape)."""
    return lm_loss(model, tokens, targets, quant=quant, site_scales=scales)


def calibration_windows(tokens: np.ndarray, seq_len: int, seed: int):
    """Non-overlapping (input, target) windows in seeded-shuffle order."""
    tokens = np.asarray(tokens)
    n = (len(tokens) - 1) // seq_len
    if n < 1:
        raise DataError(
            f"corpus of {len(tokens)} tokens yields no window of length {seq_len}"
        )
    order = np.random.default_rng(seed).permutation(n)
    for idx in order:
        start = int(idx) * seq_len
        yield tokens[start : start + seq_len], tokens[start + 1 : start + seq_len + 1]


@dataclass
class TraceRecord:
    step: int
    lr: float
    loss: float


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,lr,loss\n")
        for rec in trace:
            fh.write(f"{rec.step},{rec.lr!r},{rec.loss!r}\n")


def train(model: ModelGraph, calib_tokens: np.ndarray, cfg: TrainConfig):
    """Train scale vectors only; returns (scales dict, list of TraceRecord).

    Model weights are never touched; determinism follows from the seeded
    data order and the single-threaded step loop.
    """
    strategy = cfg.init_strategy
    if strategy == "auto":
        raise ContractError("train expects a concrete init strategy; use select_init")
    sites = find_fusion_sites(model)
    init = init_scales(sites, strategy)
    scale_params = {k: Tensor(v, requires_grad=True) for k, v in init.items()}
    opt = Adam(scale_params, betas=cfg.betas, eps=cfg.adam_eps,
               weight_decay=cfg.weight_decay)

    windows = calibration_windows(calib_tokens, cfg.seq_len, cfg.seed)
    trace = []
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            try:
                batch.append(next(windows))
            except StopIteration:
                raise DataError(
                    f"calibration data exhausted at step {step}: need "
                    f"{cfg.steps * cfg.batch_size} windows"
                ) from None
        inputs = np.stack([b[0] for b in batch])
        targets = np.stack([b[1] for b in batch])

        opt.zero_grad()
        loss = transformed_fake_quant_forward(
            model, scale_params, inputs, targets, cfg.quant
        )
        if not np.isfinite(loss.data):
            raise DivergenceError(step)
        loss.backward()
        lr_t = cfg.lr_at(step)
        opt.step(lr_t)
        for p in scale_params.values():
            np.maximum(p.data, SCALE_FLOOR, out=p.data)
        trace.append(TraceRecord(step=step, lr=lr_t, loss=float(loss.data)))

    return {k: p.data.copy() for k, p in scale_params.items()}, trace


def final_loss(trace, window: int = 50) -> float:
    """Comparison metric for init selection: mean of the last `window` losses."""
    tail = trace[-window:]
    return float(np.mean([r.loss for r in tail]))


def select_init(model: ModelGraph, calib_tokens: np.ndarray, cfg: TrainConfig):
    """Race both init strategies with identical seed/data; lower final loss wins.

    Exact ties go to 'ones'. Returns (strategy, scales, trace).
    """
    results = {}
    for strategy in INIT_STRATEGIES:
        run_cfg = replace(cfg, init_strategy=strategy)
        scales, trace = train(model, calib_tokens, run_cfg)
        results[strategy] = (scales, trace, final_loss(trace))
    if results["ones"][2] <= results["inv_sqrt_cin"][2]:
        winner = "ones"
    else:
        winner = "inv_sqrt_cin"
    scales, trace, _ = results[winner]
    return winner, scales, trace


@dataclass
class PretrainConfig:
    lr: float = 3e-3
    betas: tuple = (0.9, 0.999)
    steps: int = 1500
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0

    def lr_at(self, step: int) -> float:
        return self.lr * (1.0 - step / self.steps)


def pretrain(model: ModelGraph, tokens: np.ndarray, cfg: PretrainConfig):
    """Train all model weights in place on next-token prediction.

    Plain language-model fitting used to produce the desk-scale subject
    model; returns the per-step loss list.
    """
    params = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    opt = Adam(params, betas=cfg.betas, eps=1e-8)
    windows = calibration_windows(tokens, cfg.seq_len, cfg.seed)
    losses = []
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            try:
                batch.append(next(windows))
            except StopIteration:
                windows = calibration_windows(tokens, cfg.seq_len, cfg.seed + 1 + step)
                batch.append(next(windows))
        inputs = np.stack([b[0] for b in batch])
        targets = np.stack([b[1] for b in batch])
        opt.zero_grad()
        loss = lm_loss(model, inputs, targets, params_override=params)
        if not np.isfinite(loss.data):
            raise DivergenceError(step)
        loss.backward()
        opt.step(cfg.lr_at(step))
        losses.append(float(loss.data))
    for k, p in params.items():
        model.params[k] = p.data
    return losses
