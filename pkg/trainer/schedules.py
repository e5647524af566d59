import logging
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

class Schedule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["diminishing", "constant", "plateau"] = "diminishing"
    alpha0: float = Field(0.1, gt=0)
    power: float = 1.0
    factor: float = Field(0.5, gt=0, lt=1)
    patience: int = Field(10, ge=1)
    threshold: float = Field(1e-4, ge=0)
    min_alpha: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def check_power(self):
        # sum alpha_j diverges and sum alpha_j^2 converges only for power in (1/2, 1]
        if self.kind == "diminishing" and not 0.5 < self.power <= 1.0:
            raise ValueError(f"diminishing schedules need power in (0.5, 1], got {self.power}")
        return self

    def alpha(self, j: int) -> float:
        """Step size of iteration j for the stateless kinds; plateau starts at alpha0."""
        if self.kind == "diminishing":
            return self.alpha0 / (1.0 + j) ** self.power
        return self.alpha0

    def start(self) -> "StepSizer":
        return StepSizer(self)


class StepSizer:
    """Running step size for one training run.

    Plateau reduction follows the usual reduce-on-plateau rule on the
    epoch-mean loss: an epoch improves when its loss is below
    best - threshold * |best|; after more than `patience` epochs without
    improvement the step is multiplied by `factor`.
    """

    def __init__(self, schedule: Schedule):
        self.schedule = schedule
        self.current = schedule.alpha0
        self.best = float("inf")
        self.bad_epochs = 0

    def alpha(self, j: int) -> float:
        if self.schedule.kind == "plateau":
            return self.current
        return self.schedule.alpha(j)

    def _improves(self, loss: float) -> bool:
        if self.best == float("inf"):
            return loss < self.best
        # relative to |best|; utility problems have negative losses
        return loss < self.best - self.schedule.threshold * abs(self.best)

    def end_epoch(self, epoch: int, mean_loss: float) -> str | None:
        """Feed one epoch-mean loss; returns an event label when the step size changed."""
        if self.schedule.kind != "plateau":
            return None
        if self._improves(mean_loss):
            self.best = mean_loss
            self.bad_epochs = 0
            return None
        self.bad_epochs += 1
        if self.bad_epochs <= self.schedule.patience:
            return None

        new = max(self.current * self.schedule.factor, self.schedule.min_alpha)
        self.bad_epochs = 0
        if new >= self.current:
            return None
        logger.info("epoch %d: loss plateaued at %.6g, step size %.4g -> %.4g", epoch, mean_loss, self.current, new)
        event = f"reduce:{self.current:.6g}->{new:.6g}"
        self.current = new
        return event
