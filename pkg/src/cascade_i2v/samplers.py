"""Deterministic DDIM (eta = 0) over v-predictions, and partial noising to a level."""

from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigError, UsageError
from .noise_schedule import NoiseSchedule, q_sample, recover_x0_eps


def ddim_step(z_t: torch.Tensor, t: int, t_prev: int, v_pred: torch.Tensor,
              schedule: NoiseSchedule) -> torch.Tensor:
    """Move ``z_t`` from step ``t`` to ``t_prev`` (``alpha_bar_0 = 1``)."""
    t, t_prev = int(t), int(t_prev)
    if not t > t_prev >= 0:
        raise UsageError(f"DDIM needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    x0, eps = recover_x0_eps(z_t, v_pred, t, schedule)
    ab_prev = schedule.alpha_bar(t_prev)
    return float(np.sqrt(ab_prev)) * x0 + float(np.sqrt(1.0 - ab_prev)) * eps


def make_step_schedule(num_steps: int, T: int, T_start: int | None = None) -> list[int]:
    """Evenly spaced, strictly decreasing timesteps from ``T_start`` toward 1.

    The sampler hops from the last entry to 0.
    """
    T_start = T if T_start is None else int(T_start)
    if not 1 <= num_steps <= T_start <= T:
        raise ConfigError(
            f"need 1 <= num_steps <= T_start <= T, got num_steps={num_steps}, "
            f"T_start={T_start}, T={T}")
    if num_steps == 1:
        return [T_start]
    steps = np.rint(np.linspace(T_start, 1, num_steps)).astype(int).tolist()
    if any(a <= b for a, b in zip(steps, steps[1:])):
        raise ConfigError(f"step schedule is not strictly decreasing: {steps}")
    return steps


def noise_to_level(z0: torch.Tensor, t_level: int, eps: torch.Tensor,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Forward-noise a clean latent to ``t_level``: the starting point of a partial trajectory."""
    return q_sample(z0, t_level, eps, schedule)


@torch.no_grad()
def ddim_sample(model, init_latent: torch.Tensor, cond, steps: list[int], schedule: NoiseSchedule,
                *, return_trajectory: bool = False):
    """Run DDIM along ``steps`` (descending) and a final hop to 0.

    ``model(z_t, t, cond)`` returns v. ``init_latent`` must sit at noise level
    ``steps[0]``. No randomness is consumed.
    """
    if hasattr(model, "stage") and hasattr(cond, "stage") and cond.stage != model.stage:
        raise UsageError(f"{model.stage} model cannot sample with a {cond.stage} bundle")
    z = init_latent
    trajectory = [z]
    hops = list(steps) + [0]
    for t, t_prev in zip(hops[:-1], hops[1:]):
        v = model(z, t, cond)
        z = ddim_step(z, t, t_prev, v, schedule)
        if return_trajectory:
            trajectory.append(z)
    return (z, trajectory) if return_trajectory else z
