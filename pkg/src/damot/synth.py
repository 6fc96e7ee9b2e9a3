"""Synthetic two-domain moving-object sequences.

Agents are rendered disks following constant-velocity motion with random
pauses; ground-truth boxes exactly enclose each agent. Everything is
deterministic per seed.
"""

from dataclasses import dataclass

import numpy as np

from .core import AnnotatedSequence, BoundingBox, Track


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class AgentAppearance:
    radius: float = 4.0
    intensity: float = 0.9
    profile: str = "flat"   # flat | gaussian


@dataclass(frozen=True)
class DomainSpec:
    background: str = "plain"          # plain | stripes | speckle
    appearance: AgentAppearance = AgentAppearance()
    agent_count_range: tuple = (2, 4)
    speed_distribution: tuple = (1.5, 0.5)   # (mean, std) pixels/frame
    pause_probability: float = 0.1
    background_level: float = 0.1
    frame_size: int = 64

    def __post_init__(self):
        if self.background not in ("plain", "stripes", "speckle"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.appearance.profile not in ("flat", "gaussian"):
            raise ValueError(f"unknown intensity profile {self.appearance.profile!r}")
        if not (0.0 <= self.pause_probability <= 1.0):
            raise ValueError("pause_probability must be in [0, 1]")


SOURCE_SPEC = DomainSpec()
# Default target domain: same scene layout, but brighter frames plus the
# behavioural shift (slower agents, longer pauses). The luminance offset is
# applied to background and agents alike so agent/background contrast stays
# equal across domains: a linear probe on untrained/supervised-only features
# separates the domains perfectly, yet removing the offset does not conflict
# with detection, so adversarial alignment can actually erase it.
TARGET_SPEC = DomainSpec(
    appearance=AgentAppearance(radius=4.0, intensity=1.0, profile="flat"),
    agent_count_range=(2, 4),
    speed_distribution=(0.8, 0.3),
    pause_probability=0.35,
    background_level=0.2,
)


def _render_background(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.frame_size
    if spec.background == "plain":
        return np.full((size, size), spec.background_level)
    if spec.background == "stripes":
        cols = np.arange(size)
        stripe = spec.background_level * (1.0 + 0.8 * np.sin(cols * (2 * np.pi / 8.0)))
        return np.tile(stripe, (size, 1))
    # speckle: static per sequence
    return spec.background_level * (0.5 + rng.random((size, size)))


def gen_synthetic_sequence(spec: DomainSpec, frames: int, seed: int,
                           name: str = "synseq", domain: str = "source"):
    """Render one sequence. Returns (images (frames, 1, H, W), AnnotatedSequence)."""
    if frames < 2:
        raise GenerationError(f"frames must be >= 2, got {frames}")
    size = spec.frame_size
    r = spec.appearance.radius
    lo, hi = spec.agent_count_range
    if lo < 1 or hi < lo:
        raise GenerationError(f"bad agent_count_range {spec.agent_count_range}")
    if hi * (2 * r + 2) ** 2 > size * size:
        raise GenerationError(
            f"agent_count_range {spec.agent_count_range} infeasible for "
            f"frame size {size} at radius {r}")

    rng = np.random.default_rng(seed)
    background = _render_background(spec, rng)
    n_agents = int(rng.integers(lo, hi + 1))

    pos = rng.uniform(r + 1, size - r - 1, (n_agents, 2))
    angle = rng.uniform(0, 2 * np.pi, n_agents)
    mean_v, std_v = spec.speed_distribution
    speed = np.maximum(rng.normal(mean_v, std_v, n_agents), 0.0)
    vel = np.stack([np.cos(angle), np.sin(angle)], axis=1) * speed[:, None]

    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((frames, 1, size, size))
    entries = [dict() for _ in range(n_agents)]

    for f in range(frames):
        img = background.copy()
        for a in range(n_agents):
            cx, cy = pos[a]
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            if spec.appearance.profile == "flat":
                blob = (d2 <= r * r) * spec.appearance.intensity
            else:
                blob = spec.appearance.intensity * np.exp(-d2 / (2 * (r / 2.0) ** 2))
                blob[d2 > r * r] = 0.0
            img = np.maximum(img, blob)
            entries[a][f + 1] = BoundingBox(cx - r, cy - r, 2 * r, 2 * r)
        images[f, 0] = np.clip(img, 0.0, 1.0)

        paused = rng.random(n_agents) < spec.pause_probability
        step = np.where(paused[:, None], 0.0, vel)
        pos = pos + step
        # bounce off walls
        for axis in range(2):
            low, high = r + 1, size - r - 1
            under = pos[:, axis] < low
            over = pos[:, axis] > high
            pos[under, axis] = 2 * low - pos[under, axis]
            pos[over, axis] = 2 * high - pos[over, axis]
            vel[under | over, axis] *= -1.0

    tracks = [Track(a + 1, entries[a]) for a in range(n_agents)]
    seq = AnnotatedSequence(name, frames, tracks, domain=domain)
    return images, seq
