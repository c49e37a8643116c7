"""Combining the rule-based prior with learned evidence, and plan selection."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from evplan.anchors import AnchorSet
from evplan.net import NetConfig, NetOutput, NetParams, infer_batch
from evplan.rh_planner import (
    ALPHA_FLOOR,
    BoltzmannConfig,
    DirichletBelief,
    boltzmann_distribution,
    prior_from_rewards,
    score_anchors,
)
from evplan.rules import RuleHierarchy
from evplan.scene import Scene, Trajectory
from evplan.train import anchors_for

MODES = ("rulefuser", "il", "rh", "mix")
_LOG_2PI = float(np.log(2.0 * np.pi))


def fuse(prior: DirichletBelief, evidence) -> DirichletBelief:
    """Conjugate update: concentration plus evidence.

    Negative evidence is clipped to zero; the prior already carries the
    positive floor, so the posterior stays valid.
    """
    n = np.asarray(evidence, dtype=float)
    if n.shape != (prior.K,):
        raise ValueError(f"evidence has shape {n.shape}, expected ({prior.K},)")
    return DirichletBelief(prior.concentration + np.maximum(n, 0.0))


def uniform_prior(K: int) -> DirichletBelief:
    return DirichletBelief(np.full(K, ALPHA_FLOOR))


def select(marginal: np.ndarray) -> int:
    return int(np.argmax(marginal))


@dataclass(frozen=True, eq=False)
class PlannerOutput:
    posterior: DirichletBelief
    marginal: np.ndarray
    refined_trajectories: tuple[Trajectory, ...]
    selected_index: int
    total_evidence: float
    mode: str
    prior: DirichletBelief
    evidence: np.ndarray  # zeros in rh mode
    anchor_positions: np.ndarray  # (K, F, 2) unrefined candidates, world frame
    scene_id: str = ""

    @property
    def K(self) -> int:
        return len(self.marginal)

    @property
    def selected(self) -> Trajectory:
        return self.refined_trajectories[self.selected_index]

    @property
    def means(self) -> np.ndarray:
        return np.stack([t.positions for t in self.refined_trajectories])


@dataclass(frozen=True, eq=False)
class Mixture:
    """Per-step independent 2-d Gaussians with identity covariance, mixed by ``weights``."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, F, 2)

    def component_log_likelihood(self, positions) -> np.ndarray:
        x = np.asarray(positions, dtype=float)
        sq = ((self.means - x[None]) ** 2).sum(axis=(1, 2))
        return -0.5 * sq - self.means.shape[1] * _LOG_2PI

    def log_likelihood(self, positions) -> float:
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return float(logsumexp(log_w + self.component_log_likelihood(positions)))

    def nll(self, positions) -> float:
        return -self.log_likelihood(positions)


def predictive_mixture(output: PlannerOutput) -> Mixture:
    return Mixture(np.asarray(output.marginal, dtype=float), output.means)


# --- planning ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SceneInputs:
    """Everything the planners need for one scene, computed once and reused across settings."""

    scene: Scene
    anchors: AnchorSet
    rewards: Optional[np.ndarray]
    net: Optional[NetOutput]

    @cached_property
    def refined(self) -> tuple[Trajectory, ...]:
        return _trajectories(self.anchors, self.scene, None if self.net is None else self.net.error_traces)

    @cached_property
    def unrefined(self) -> tuple[Trajectory, ...]:
        return _trajectories(self.anchors, self.scene, None)


def prepare(
    scenes: Sequence[Scene],
    params: Optional[NetParams],
    hierarchy: Optional[RuleHierarchy],
    anchor_sets: Optional[Sequence[AnchorSet]] = None,
    *,
    K: int = 40,
    F: Optional[int] = None,
    dt: float = 0.5,
    chunk: int = 64,
) -> list[SceneInputs]:
    scenes = list(scenes)
    if params is not None:
        cfg = params.cfg
        K, F = cfg.K, cfg.F
    if F is None:
        F = len(scenes[0].ego_future) if scenes and scenes[0].ego_future else 6
    if anchor_sets is None:
        proto = params.cfg if params is not None else NetConfig(K=K, F=F)
        anchor_sets = [anchors_for(s, proto, s.dt or dt) for s in scenes]
    nets: list[Optional[NetOutput]] = [None] * len(scenes)
    if params is not None:
        for start in range(0, len(scenes), chunk):
            outs = infer_batch(params, scenes[start : start + chunk], anchor_sets[start : start + chunk])
            nets[start : start + len(outs)] = outs
    rewards = [
        score_anchors(a, s, hierarchy).rewards if hierarchy is not None else None for s, a in zip(scenes, anchor_sets)
    ]
    return [SceneInputs(s, a, r, n) for s, a, r, n in zip(scenes, anchor_sets, rewards, nets)]


def _trajectories(anchors: AnchorSet, scene: Scene, errors) -> tuple[Trajectory, ...]:
    positions = anchors.positions if errors is None else anchors.positions + errors
    return tuple(Trajectory.from_positions(p, anchors.dt, scene.current, "refined") for p in positions)


def plan_from_inputs(
    inputs: SceneInputs,
    mode: str,
    n_prior: float = 1.0,
    zeta: float = 1.0,
    lam: float = 0.5,
) -> PlannerOutput:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in ("rulefuser", "rh", "mix") and inputs.rewards is None:
        raise ValueError(f"mode {mode!r} needs a rule hierarchy")
    if mode in ("rulefuser", "il", "mix") and inputs.net is None:
        raise ValueError(f"mode {mode!r} needs network parameters")
    K = inputs.anchors.K
    boltz = BoltzmannConfig(zeta)
    if mode == "rh":
        # selection ignores the prior strength; a unit prior keeps the floor negligible
        prior = prior_from_rewards(inputs.rewards, boltz, n_prior if n_prior > 0 else 1.0)
        evidence = np.zeros(K)
        posterior = prior
        marginal = prior.mean
        trajs = inputs.unrefined
    else:
        evidence = inputs.net.evidence
        if mode == "rulefuser":
            prior = prior_from_rewards(inputs.rewards, boltz, n_prior)
        else:
            prior = uniform_prior(K)
        posterior = fuse(prior, evidence)
        marginal = posterior.mean
        if mode == "mix":
            if not 0.0 <= lam <= 1.0:
                raise ValueError("lambda must lie in [0, 1]")
            marginal = lam * marginal + (1.0 - lam) * boltzmann_distribution(inputs.rewards, boltz)
            # mixing is not a Bayesian update; report a belief whose mean is the mixed marginal
            posterior = DirichletBelief(marginal * posterior.total)
        trajs = inputs.refined
    return PlannerOutput(
        posterior=posterior,
        marginal=marginal,
        refined_trajectories=trajs,
        selected_index=select(marginal),
        total_evidence=float(np.sum(evidence)),
        mode=mode,
        prior=prior,
        evidence=np.asarray(evidence, dtype=float),
        anchor_positions=inputs.anchors.positions,
        scene_id=inputs.scene.scene_id,
    )


def plan(
    scene: Scene,
    mode: str,
    params: Optional[NetParams] = None,
    hierarchy: Optional[RuleHierarchy] = None,
    n_prior: float = 1.0,
    zeta: float = 1.0,
    lam: float = 0.5,
    anchors: Optional[AnchorSet] = None,
) -> PlannerOutput:
    if mode in ("rulefuser", "il", "mix") and params is None:
        raise ValueError(f"mode {mode!r} needs network parameters")
    if mode in ("rulefuser", "rh", "mix") and hierarchy is None:
        raise ValueError(f"mode {mode!r} needs a rule hierarchy")
    inputs = prepare([scene], params if mode != "rh" else None, hierarchy if mode != "il" else None,
                     None if anchors is None else [anchors])[0]
    return plan_from_inputs(inputs, mode, n_prior, zeta, lam)


def plan_many(
    inputs: Sequence[SceneInputs], mode: str, n_prior: float = 1.0, zeta: float = 1.0, lam: float = 0.5
) -> list[PlannerOutput]:
    return [plan_from_inputs(i, mode, n_prior, zeta, lam) for i in inputs]
