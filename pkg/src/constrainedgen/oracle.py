"""Rejection sampling: the exact baseline for p(x) e^{c(x)} / Z.

Proposals come from any base sampler (the unconditional model, or an
external simulator) and are accepted with probability e^{c(x)}, which the
logic module guarantees lies in (0, 1]. Optionally, a compile-time bound
B >= sup c shifts the acceptance to e^{c(x) - B}; the accepted
distribution is unchanged while equality-heavy constraints stop wasting
proposals on a constant factor (an equality atom never exceeds -2 ln 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .logic import CompiledConstraint


@dataclass
class RejectionJob:
    base_sampler: object  # callable (count, rng) -> (count, dim) model-space matrix
    constraint: CompiledConstraint
    target_count: int
    max_proposals: int
    seed: int = 0
    batch_size: int = 20000
    use_envelope: bool = False
    staged: bool = False  # test conjunction parts cheapest-first, short-circuiting

    def __post_init__(self):
        if self.max_proposals < self.target_count:
            raise ValueError("proposal budget must cover the target count")


@dataclass
class RejectionResult:
    samples: np.ndarray
    acceptance_rate: float
    proposed: int
    accepted: int
    complete: bool
    envelope_log_bound: float = 0.0
    log_weights: np.ndarray = field(default_factory=lambda: np.empty(0))


def rejection_sample(job: RejectionJob):
    """Accept each proposal x with probability e^{c(x)} (u < e^c, u~U(0,1)).

    Deterministic per seed. If the budget runs out before the target count
    the partial result is returned with ``complete=False``.
    """
    rng = np.random.default_rng(job.seed)
    bound = job.constraint.static_upper_bound() if job.use_envelope else 0.0
    parts = job.constraint.split_conjunction() if job.staged else [job.constraint]
    part_bounds = [p.static_upper_bound() if job.use_envelope else 0.0 for p in parts]
    kept = []
    kept_logw = []
    proposed = 0
    raw_accepted = 0  # before trimming to the target count: the rate estimator
    accepted = 0
    while accepted < job.target_count and proposed < job.max_proposals:
        n = min(job.batch_size, job.max_proposals - proposed)
        batch = np.atleast_2d(job.base_sampler(n, rng))
        if len(parts) == 1:
            log_w = job.constraint.log_weight_batch(batch)
            u = rng.random(len(batch))
            take = np.log(u) < (log_w - bound)
        else:
            # each stage draws its own uniform: P(accept) = prod e^{c_i - B_i}
            # = e^{c - B}, identical to the one-shot test but short-circuited
            take = np.ones(len(batch), dtype=bool)
            log_w = np.zeros(len(batch))
            for part, part_bound in zip(parts, part_bounds):
                if not take.any():
                    break
                live = np.nonzero(take)[0]
                lw_part = part.log_weight_batch(batch[live])
                log_w[live] += lw_part
                u = rng.random(len(live))
                take[live[np.log(u) >= (lw_part - part_bound)]] = False
            log_w[~take] = -np.inf  # not fully evaluated; never reported
        proposed += len(batch)
        raw_accepted += int(take.sum())
        picked = batch[take]
        take_logw = log_w[take]
        if accepted + len(picked) > job.target_count:
            picked = picked[: job.target_count - accepted]
            take_logw = take_logw[: len(picked)]
        accepted += len(picked)
        if len(picked):
            kept.append(picked)
            kept_logw.append(take_logw)
    samples = np.vstack(kept) if kept else np.empty((0, job.constraint.dim))
    return RejectionResult(
        samples=samples,
        acceptance_rate=raw_accepted / proposed if proposed else 0.0,
        proposed=proposed,
        accepted=accepted,
        complete=accepted >= job.target_count,
        envelope_log_bound=bound,
        log_weights=np.concatenate(kept_logw) if kept_logw else np.empty(0),
    )


def model_base_sampler(model, config, instances=1, t_min=None):
    """Unconditional proposals from the trained model's PC sampler."""
    from .diffusion import T_MIN, pc_sample

    t_min = T_MIN if t_min is None else t_min

    def draw(count, rng):
        x = pc_sample(model.spec, model.score, config, model.dim, count * instances, rng=rng, t_min=t_min)
        return x.reshape(count, instances * model.dim)

    return draw


def simulator_base_sampler(params, normalization):
    """Proposals straight from the eSIRS simulator, encoded to model space."""
    from .data import esirs_simulate, trajectories_to_matrix

    def draw(count, rng):
        seed = int(rng.integers(0, 2**63 - 1))
        traj = esirs_simulate(params, count, seed)
        return normalization.apply(trajectories_to_matrix(traj))

    return draw
