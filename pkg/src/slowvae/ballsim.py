"""Bouncing-ball simulator, renderer, and labeled dataset generator.

A single ball moves with constant speed inside a rectangular arena and
reflects elastically off the walls (incident angle equals emergence angle,
realized as per-axis folding). Frames are antialiased discs on a black
background; labels are the per-step velocity vectors.

Generation is a pure function of its configuration: each sequence derives
its own random stream from ``(seed, sequence_index)``, so datasets are
reproducible element by element and positions can be re-derived later
without storing them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

_RENDER_CHUNK = 2048


@dataclass
class BallState:
    position: np.ndarray  # (2,) pixels, inside [0, W] x [0, H]
    velocity: np.ndarray  # (2,) pixels per step

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.position.shape != (2,) or self.velocity.shape != (2,):
            raise InputError("position and velocity must be 2-vectors")


def _check_arena(arena):
    w, h = arena
    if int(w) != w or int(h) != h or w < 2 or h < 2:
        raise ConfigError(f"arena must be integer (W, H) with W, H >= 2, got {arena!r}")
    return int(w), int(h)


def _fold(raw_positions, velocities, arena):
    """Reflect positions that crossed the walls back into the arena.

    The fold is the closed form of repeatedly mirroring at x=0 and x=bound:
    positions land in [0, bound] and the velocity component flips once per
    odd number of wall crossings. Speed is conserved exactly.
    """
    pos = np.array(raw_positions, dtype=np.float64, copy=True)
    vel = np.array(velocities, dtype=np.float64, copy=True)
    for axis, bound in enumerate(_check_arena(arena)):
        m = np.mod(pos[..., axis], 2.0 * bound)
        pos[..., axis] = bound - np.abs(bound - m)
        flip = m > bound
        vel[..., axis] = np.where(flip, -vel[..., axis], vel[..., axis])
    return pos, vel


def step(state, arena):
    """Advance one time step: move by the velocity, reflect at the walls."""
    w, h = _check_arena(arena)
    if abs(state.velocity[0]) > w or abs(state.velocity[1]) > h:
        raise ConfigError(
            f"per-step speed {state.velocity} exceeds the arena {arena}; "
            "reflection folding assumes at most one wall span per step"
        )
    pos, vel = _fold(state.position + state.velocity, state.velocity, arena)
    return BallState(pos, vel)


def simulate(position, velocity, arena, n_steps):
    """Vectorized trajectory rollout.

    ``position``/``velocity`` may be (2,) or (N, 2); returns positions and
    velocities with shape (n_steps, ..., 2) where entry t is the state at
    time t (entry 0 is the initial state).
    """
    w, h = _check_arena(arena)
    pos = np.asarray(position, dtype=np.float64)
    vel = np.asarray(velocity, dtype=np.float64)
    if np.any(np.abs(vel[..., 0]) > w) or np.any(np.abs(vel[..., 1]) > h):
        raise ConfigError("per-step speed exceeds the arena dimensions")
    positions = np.empty((n_steps,) + pos.shape)
    velocities = np.empty((n_steps,) + vel.shape)
    for t in range(n_steps):
        positions[t] = pos
        velocities[t] = vel
        pos, vel = _fold(pos + vel, vel, arena)
    return positions, velocities


def render(state, arena, radius):
    """Render one frame: an antialiased disc of value 1.0 on background 0.0.

    Pixel value = clamp(radius + 0.5 - distance_to_center, 0, 1), with pixel
    (row, col) centered at (col + 0.5, row + 0.5).
    """
    if radius < 1:
        raise InputError(f"radius must be >= 1, got {radius}")
    position = state.position if isinstance(state, BallState) else np.asarray(state, dtype=np.float64)
    return _render_positions(position[None, :], arena, radius)[0]


def _render_positions(positions, arena, radius):
    w, h = _check_arena(arena)
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    dx = xs[None, None, :] - positions[:, 0, None, None]   # (N, 1, W)
    dy = ys[None, :, None] - positions[:, 1, None, None]   # (N, H, 1)
    dist = np.sqrt(dx * dx + dy * dy)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


@dataclass
class Dataset:
    """Labeled frame sequences sharing one arena and generation config."""

    frames: np.ndarray        # (n_sequences, seq_len, H, W) float32 in [0, 1]
    labels: np.ndarray        # (n_sequences, seq_len, label_dim) float32
    arena: tuple              # (W, H)
    radius: float
    speed_range: tuple        # (min, max) pixels per step
    seed: int

    def __post_init__(self):
        if self.frames.ndim != 4 or self.labels.ndim != 3:
            raise InputError("frames must be (n, L, H, W) and labels (n, L, d)")
        if self.frames.shape[:2] != self.labels.shape[:2]:
            raise InputError("frames and labels disagree on sequence count/length")

    @property
    def n_sequences(self):
        return self.frames.shape[0]

    @property
    def seq_len(self):
        return self.frames.shape[1]

    @property
    def frame_shape(self):
        return self.frames.shape[2:]

    @property
    def n_pixels(self):
        h, w = self.frame_shape
        return h * w

    @property
    def label_dim(self):
        return self.labels.shape[2]

    @property
    def n_frames(self):
        return self.n_sequences * self.seq_len


def _validate_generation(n_sequences, seq_len, arena, radius, speed_range):
    w, h = _check_arena(arena)
    if n_sequences < 1:
        raise ConfigError(f"n_sequences must be >= 1, got {n_sequences}")
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    if radius < 1:
        raise ConfigError(f"radius must be >= 1, got {radius}")
    if 2 * radius >= min(w, h):
        raise ConfigError(f"ball of radius {radius} does not fit the arena {arena}")
    lo, hi = speed_range
    if not (0 < lo <= hi < min(w, h)):
        raise ConfigError(
            f"speed_range must satisfy 0 < min <= max < min(W, H), got {speed_range!r}"
        )
    return w, h


def _initial_state(seed, index, arena, radius, speed_range):
    """Initial ball state of sequence ``index``: uniform interior position,
    uniform direction, uniform speed. Pure function of (seed, index)."""
    w, h = arena
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), int(index)))))
    pos = np.array(
        [gen.uniform(radius, w - radius), gen.uniform(radius, h - radius)]
    )
    theta = gen.uniform(0.0, 2.0 * np.pi)
    speed = gen.uniform(speed_range[0], speed_range[1])
    vel = speed * np.array([np.cos(theta), np.sin(theta)])
    return pos, vel


def generate_dataset(n_sequences, seq_len, arena, radius, speed_range, seed):
    """Generate ``n_sequences`` sequences of ``seq_len`` frames with velocity labels.

    Deterministic in ``seed``; label[k] is the velocity that moves the ball
    from frame k to frame k+1.
    """
    w, h = _validate_generation(n_sequences, seq_len, arena, radius, speed_range)
    starts = np.empty((n_sequences, 2))
    vels = np.empty((n_sequences, 2))
    for i in range(n_sequences):
        starts[i], vels[i] = _initial_state(seed, i, (w, h), radius, speed_range)

    positions, velocities = simulate(starts, vels, (w, h), seq_len)
    # (steps, n, 2) -> (n, steps, 2)
    positions = positions.transpose(1, 0, 2)
    velocities = velocities.transpose(1, 0, 2)

    flat_pos = positions.reshape(-1, 2)
    frames = np.empty((flat_pos.shape[0], h, w), dtype=np.float32)
    for lo in range(0, flat_pos.shape[0], _RENDER_CHUNK):
        hi_ = min(lo + _RENDER_CHUNK, flat_pos.shape[0])
        frames[lo:hi_] = _render_positions(flat_pos[lo:hi_], (w, h), radius).astype(np.float32)

    return Dataset(
        frames=frames.reshape(n_sequences, seq_len, h, w),
        labels=velocities.astype(np.float32),
        arena=(w, h),
        radius=float(radius),
        speed_range=(float(speed_range[0]), float(speed_range[1])),
        seed=int(seed),
    )


def sequence_positions(dataset, index):
    """Re-derive the ball-center trajectory of one sequence from the dataset's
    generation config (the frames themselves are not consulted).

    Only valid for datasets produced by :func:`generate_dataset` (or read back
    from files it wrote), since it replays the seeded simulation.
    """
    if not 0 <= index < dataset.n_sequences:
        raise InputError(f"sequence index {index} out of range [0, {dataset.n_sequences})")
    pos, vel = _initial_state(
        dataset.seed, index, dataset.arena, dataset.radius, dataset.speed_range
    )
    positions, _ = simulate(pos, vel, dataset.arena, dataset.seq_len)
    return positions
