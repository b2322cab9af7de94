"""Compute accounting: forward/backward evaluation counters and FLOP estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

PHASES = ("stage1_train", "reflow_sampling", "stage3_train", "eval")


@dataclass
class PhaseCounts:
    forward_evals: int = 0
    backward_evals: int = 0
    train_steps: int = 0
    train_items: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "forward_evals": self.forward_evals,
            "backward_evals": self.backward_evals,
            "train_steps": self.train_steps,
            "train_items": self.train_items,
        }


@dataclass
class BudgetLedger:
    """Per-sample evaluation counts by phase.

    ``forward_evals`` counts one network forward on one sample. ``backward_evals``
    counts backprops and JVPs alike, each priced as one backward pass.
    """

    flops_per_forward: float = 1.0
    phases: dict[str, PhaseCounts] = field(default_factory=lambda: {p: PhaseCounts() for p in PHASES})
    forward_evals: int = 0
    backward_evals: int = 0
    train_steps: int = 0

    def charge(
        self,
        phase: str,
        forward: int = 0,
        backward: int = 0,
        steps: int = 0,
        items: int = 0,
    ) -> None:
        if phase not in self.phases:
            raise KeyError(f"unknown budget phase {phase!r}; expected one of {PHASES}")
        if min(forward, backward, steps, items) < 0:
            raise ValueError("budget counters only increase")
        pc = self.phases[phase]
        pc.forward_evals += int(forward)
        pc.backward_evals += int(backward)
        pc.train_steps += int(steps)
        pc.train_items += int(items)
        self.forward_evals += int(forward)
        self.backward_evals += int(backward)
        self.train_steps += int(steps)

    def merge(self, other: "BudgetLedger") -> None:
        for name, pc in other.phases.items():
            self.charge(name, pc.forward_evals, pc.backward_evals, pc.train_steps, pc.train_items)

    def copy(self) -> "BudgetLedger":
        out = BudgetLedger(self.flops_per_forward)
        out.merge(self)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "flops_per_forward": self.flops_per_forward,
            "forward_evals": self.forward_evals,
            "backward_evals": self.backward_evals,
            "train_steps": self.train_steps,
            "phases": {k: v.to_dict() for k, v in self.phases.items()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BudgetLedger":
        led = cls(float(d["flops_per_forward"]))
        for name, pc in d["phases"].items():
            led.charge(name, pc["forward_evals"], pc["backward_evals"], pc["train_steps"], pc.get("train_items", 0))
        return led


def train_flops(
    iters: float, batch: float, forwards: float, backwards: float, flops_per_forward: float,
    backward_multiplier: float = 2.0,
) -> float:
    """iters x batch x (forward + backward) x cost, with backward priced at ``backward_multiplier`` forwards."""
    return iters * batch * (forwards + backward_multiplier * backwards) * flops_per_forward


def sample_flops(samples: float, steps: float, forwards_per_step: float, flops_per_forward: float) -> float:
    return samples * steps * forwards_per_step * flops_per_forward


def flops_estimate(ledger: BudgetLedger, backward_multiplier: float = 2.0) -> dict[str, float]:
    """FLOPs per phase plus ``total``, from the ledger's evaluation counts."""
    if not ledger.flops_per_forward > 0:
        raise ValueError("flops_per_forward must be positive")
    out = {
        name: (pc.forward_evals + backward_multiplier * pc.backward_evals) * ledger.flops_per_forward
        for name, pc in ledger.phases.items()
    }
    out["total"] = sum(out.values())
    return out
