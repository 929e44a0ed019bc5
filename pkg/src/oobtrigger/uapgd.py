"""Universal Auto-PGD and the fixed-step universal PGD baseline.

Both optimizers walk the trigger with signed gradient steps over every batch
of every epoch and keep the trigger with the lowest epoch loss. UAPGD also
collects epoch losses into windows of ``l_o`` epochs, summarises each window
by its minimum and population variance, and after ``l_c`` windows halves the
step size (restarting from the best trigger) when neither statistic of the
newest window improved on the earlier ones by more than the slack.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import EOTConfig
from .dataset import Dataset, split_batches
from .losses import AttackObjective, LossBreakdown, LossWeights
from .renderer import PlacementRule, save_trigger_png

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class UAPGDConfig:
    eta0: float = 16 / 255
    n_epoch: int = 50
    l_c: int = 3
    l_o: int = 5
    eps1: float = 0.01
    eps2: float = 0.1
    # "relative": eps1 scales |L_best|, eps2 the mean of the earlier window variances
    slack: str = "relative"
    eta_min: float = 1 / 255
    batch_size: int = 32
    seed: int = 0
    adaptive: bool = True
    checkpoint_every: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.eta0 < 0:
            raise ValueError("eta0 must be non-negative")
        if self.n_epoch < 0:
            raise ValueError("n_epoch must be non-negative")
        if self.l_c < 2 or self.l_o < 1:
            raise ValueError("need l_c >= 2 and l_o >= 1")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("slack variables must be non-negative")
        if self.slack not in ("relative", "absolute"):
            raise ValueError(f"unknown slack mode {self.slack!r}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


@dataclass
class UAPGDState:
    trigger: torch.Tensor
    eta: float
    epoch: int = 0
    S_o: list[float] = field(default_factory=list)
    S_c: list[tuple[float, float]] = field(default_factory=list)
    L_best: float = math.inf
    A_best: torch.Tensor | None = None
    halving_events: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "trigger": self.trigger.tolist(), "eta": self.eta, "epoch": self.epoch,
            "S_o": list(self.S_o), "S_c": [list(p) for p in self.S_c],
            "L_best": None if math.isinf(self.L_best) else self.L_best,
            "A_best": None if self.A_best is None else self.A_best.tolist(),
            "halving_events": list(self.halving_events),
        }

    @classmethod
    def from_json(cls, d: dict, dtype=torch.float32) -> "UAPGDState":
        return cls(
            trigger=torch.tensor(d["trigger"], dtype=dtype), eta=d["eta"], epoch=d["epoch"],
            S_o=list(d["S_o"]), S_c=[tuple(p) for p in d["S_c"]],
            L_best=math.inf if d["L_best"] is None else d["L_best"],
            A_best=None if d["A_best"] is None else torch.tensor(d["A_best"], dtype=dtype),
            halving_events=list(d["halving_events"]),
        )


@dataclass
class AttackReport:
    mode: str
    epoch_losses: list[float] = field(default_factory=list)
    best_losses: list[float] = field(default_factory=list)
    eta_schedule: list[float] = field(default_factory=list)
    halving_events: list[int] = field(default_factory=list)
    batch_records: list[dict] = field(default_factory=list)
    final_eta: float | None = None
    asr: float | None = None
    frame_series: list[float] | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("batch_records")
        d["best_loss"] = min(self.epoch_losses) if self.epoch_losses else None
        d["n_epochs"] = len(self.epoch_losses)
        return d

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.batch_records:
                fh.write(json.dumps(rec) + "\n")
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=1)

    @classmethod
    def read(cls, out_dir) -> "AttackReport":
        out = Path(out_dir)
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        records = []
        metrics = out / "metrics.jsonl"
        if metrics.exists():
            records = [json.loads(line) for line in metrics.read_text(encoding="utf-8").splitlines() if line]
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in summary.items() if k in known}
        return cls(**kwargs, batch_records=records)


# ---------------------------------------------------------------------------
# Primitive steps


def pgd_update(trigger: torch.Tensor, gradient: torch.Tensor, eta: float) -> torch.Tensor:
    """``clamp(trigger - eta * sign(gradient), 0, 1)``."""
    if trigger.shape != gradient.shape:
        raise ValueError(f"gradient shape {tuple(gradient.shape)} != trigger shape {tuple(trigger.shape)}")
    return (trigger - eta * torch.sign(gradient)).clamp(0.0, 1.0)


def window_stats(losses: Sequence[float], l_o: int | None = None) -> tuple[float, float]:
    """Minimum and population variance of one observation window."""
    if l_o is not None and len(losses) != l_o:
        raise ValueError(f"window needs exactly {l_o} losses, got {len(losses)}")
    if not losses:
        raise ValueError("empty window")
    arr = np.asarray(losses, dtype=np.float64)
    return float(arr.min()), float(arr.var())


def halving_condition(S_c: Sequence[tuple[float, float]], eps1: float, eps2: float,
                      l_c: int | None = None) -> bool:
    """Both stall tests on chronologically ordered ``(L_min, V)`` pairs.

    Con 1: the newest window minimum is no lower than any earlier one minus
    ``eps1``. Con 2: the newest variance is no lower than any earlier one
    minus ``eps2``.
    """
    if l_c is not None and len(S_c) != l_c:
        raise ValueError(f"need exactly {l_c} windows, got {len(S_c)}")
    if len(S_c) < 2:
        raise ValueError("need at least two windows to compare")
    *earlier, (l_new, v_new) = S_c
    con1 = all(l_new >= l_q - eps1 for l_q, _ in earlier)
    con2 = all(v_new >= v_q - eps2 for _, v_q in earlier)
    return con1 and con2


def slack_values(config: UAPGDConfig, S_c: Sequence[tuple[float, float]], L_best: float) -> tuple[float, float]:
    if config.slack == "absolute":
        return config.eps1, config.eps2
    earlier = [v for _, v in S_c[:-1]]
    return config.eps1 * abs(L_best), config.eps2 * (float(np.mean(earlier)) if earlier else 0.0)


def effective_step(config: UAPGDConfig, eta: float) -> float:
    """Step actually taken: ``eta`` floored at ``eta_min`` (never above ``eta0``)."""
    return max(eta, min(config.eta0, config.eta_min))


# ---------------------------------------------------------------------------
# Optimisation loop

Objective = Callable[[torch.Tensor, object, int, int, int], LossBreakdown]


def optimize(objective: Objective, initial_trigger: torch.Tensor, config: UAPGDConfig,
             batches: Callable[[int], Sequence], *, state: UAPGDState | None = None,
             report: AttackReport | None = None, checkpoint_dir=None,
             on_epoch: Callable[[UAPGDState, AttackReport], None] | None = None) -> tuple[torch.Tensor, AttackReport]:
    """Run the universal sign-gradient loop.

    ``objective(trigger, batch, epoch, batch_index, stream_base)`` returns a
    :class:`LossBreakdown` whose ``total`` is differentiable in ``trigger``
    and whose ``l_all`` is the recorded batch loss. ``batches(epoch)`` yields
    the k batches of that epoch. With ``config.adaptive`` false the step
    never changes and no window bookkeeping happens.
    """
    mode = "uapgd" if config.adaptive else "pgd"
    if state is None:
        state = UAPGDState(trigger=initial_trigger.detach().clone(), eta=config.eta0,
                           A_best=initial_trigger.detach().clone())
    if report is None:
        report = AttackReport(mode=mode)
    while state.epoch < config.n_epoch:
        epoch = state.epoch
        epoch_batches = list(batches(epoch))
        k = len(epoch_batches)
        if k == 0:
            raise ValueError("no batches to optimise over")
        step = effective_step(config, state.eta)
        trigger = state.trigger
        loss_i = 0.0
        stream = epoch * 1_000_003
        for j, batch in enumerate(epoch_batches):
            t = trigger.detach().clone().requires_grad_(True)
            br = objective(t, batch, epoch, j, stream)
            if not (math.isfinite(br.l_all) and torch.isfinite(br.total).all()):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {j}: {br.l_all}")
            grad, = torch.autograd.grad(br.total, t, allow_unused=True)
            if grad is None:
                grad = torch.zeros_like(t)
            loss_i += br.l_all / k
            trigger = pgd_update(trigger.detach(), grad, step)
            if config.debug:
                assert 0.0 <= float(trigger.min()) and float(trigger.max()) <= 1.0
            stream += max(br.n_images + br.skipped, len(batch) if hasattr(batch, "__len__") else 1)
            report.batch_records.append({"epoch": epoch, "batch": j, **br.record(), "eta": step})
        state.trigger = trigger
        if loss_i < state.L_best:
            state.L_best = loss_i
            state.A_best = trigger.detach().clone()
        report.epoch_losses.append(loss_i)
        report.best_losses.append(state.L_best)
        report.eta_schedule.append(step)
        if config.adaptive:
            state.S_o.append(loss_i)
            if len(state.S_o) == config.l_o:
                state.S_c.append(window_stats(state.S_o, config.l_o))
                state.S_o = []
            if len(state.S_c) == config.l_c:
                eps1, eps2 = slack_values(config, state.S_c, state.L_best)
                if halving_condition(state.S_c, eps1, eps2, config.l_c):
                    state.eta = state.eta / 2
                    state.trigger = state.A_best.detach().clone()
                    state.halving_events.append(epoch)
                    logger.info("epoch %d: halving step to %.5f", epoch, effective_step(config, state.eta))
                state.S_c = []
        state.epoch += 1
        if config.checkpoint_every and checkpoint_dir is not None and state.epoch % config.checkpoint_every == 0:
            write_checkpoint(checkpoint_dir, state, report)
        if on_epoch is not None:
            on_epoch(state, report)
    report.halving_events = list(state.halving_events)
    report.final_eta = effective_step(config, state.eta)
    report.extra["eta_nominal"] = state.eta
    return state.A_best, report


def write_checkpoint(directory, state: UAPGDState, report: AttackReport) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_trigger_png(state.trigger, d / "trigger_working.png")
    if state.A_best is not None:
        save_trigger_png(state.A_best, d / "trigger_best.png")
    payload = {"state": state.to_json(), "report": asdict(report)}
    tmp = d / "state.json.tmp"
    tmp.write_text(json.dumps(payload), encoding="utf-8")
    tmp.replace(d / "state.json")


def read_checkpoint(directory, dtype=torch.float32) -> tuple[UAPGDState, AttackReport]:
    payload = json.loads((Path(directory) / "state.json").read_text(encoding="utf-8"))
    return UAPGDState.from_json(payload["state"], dtype), AttackReport(**payload["report"])


def _dataset_objective(objective: AttackObjective):
    def run(trigger, batch, epoch, j, stream_base):
        return objective(trigger, batch, stream_base)
    return run


def run_uapgd(config: UAPGDConfig, dataset: Dataset, detector, loss_weights: LossWeights,
              eot_config: EOTConfig | None, placement_rule: PlacementRule | None, target_class: int,
              initial_trigger: torch.Tensor, *, objective: AttackObjective | None = None,
              checkpoint_dir=None, resume: bool = False, feature_levels=None) -> tuple[torch.Tensor, AttackReport]:
    """Optimise a universal trigger over ``dataset`` against ``detector``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if not getattr(detector, "differentiable", False):
        raise ValueError("detector must be differentiable")
    if objective is None:
        objective = AttackObjective(detector, loss_weights, target_class, eot=eot_config,
                                    rule=placement_rule, feature_levels=feature_levels)
    state = report = None
    if resume and checkpoint_dir is not None and (Path(checkpoint_dir) / "state.json").exists():
        state, report = read_checkpoint(checkpoint_dir, initial_trigger.dtype)
    return optimize(
        _dataset_objective(objective), initial_trigger, config,
        lambda epoch: split_batches(dataset, config.batch_size, config.seed, epoch),
        state=state, report=report, checkpoint_dir=checkpoint_dir,
    )


def run_pgd(config: UAPGDConfig, *args, **kwargs) -> tuple[torch.Tensor, AttackReport]:
    """:func:`run_uapgd` with the step size fixed at ``eta0``."""
    from dataclasses import replace
    return run_uapgd(replace(config, adaptive=False), *args, **kwargs)
