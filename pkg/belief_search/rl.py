"""Goal-level deep Q-learning over cluster centroids."""

import copy
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .belief import BeliefMap, normalized_entropy
from .plan import ScheduleError
from .session import SearchSession
from .world import EpisodeSpec, GridMap, Heading, Outcome, Pose, horizon_for

R_STEP = -0.01
R_SUCC = 1.0
STATE_CHANNELS = 4

CHECKPOINT_MAGIC = b"BBQN"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    gamma: float = 0.99
    learning_rate: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 50000
    target_sync_every: int = 2000  # gradient steps
    episodes: int = 5000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.8
    hidden_channels: int = 32

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.buffer_capacity < self.batch_size:
            raise ValueError(
                f"buffer_capacity ({self.buffer_capacity}) must be at least batch_size ({self.batch_size})"
            )
        if self.target_sync_every < 1:
            raise ValueError(f"target_sync_every must be at least 1, got {self.target_sync_every}")
        if self.episodes < 1:
            raise ValueError(f"episodes must be at least 1, got {self.episodes}")
        if not 0.0 < self.epsilon_fraction <= 1.0:
            raise ValueError(f"epsilon_fraction must lie in (0, 1], got {self.epsilon_fraction}")
        if self.hidden_channels < 1:
            raise ValueError(f"hidden_channels must be at least 1, got {self.hidden_channels}")


@dataclass
class Transition:
    state: np.ndarray        # (4, H, W)
    goal: tuple
    reward: float
    next_state: np.ndarray   # (4, H, W)
    next_mask: np.ndarray    # (H, W) bool
    done: bool


@dataclass
class TrainingLogRow:
    episode: int
    target: str
    episode_return: float
    length: int
    outcome: str
    epsilon: float
    loss: float  # mean over the episode's gradient steps, nan when none ran


# ── State and network ──────────────────────────────────────


def build_state_tensor(belief: BeliefMap, target_class: int, grid: GridMap, pose: Pose) -> np.ndarray:
    """Stack [target posterior, entropy, occupancy, robot one-hot] as (4, H, W) float32."""
    if belief.map is not grid:
        raise ValueError("Belief map is bound to a different grid")
    state = np.zeros((STATE_CHANNELS,) + grid.shape, dtype=np.float32)
    occ = np.asarray(grid.occupied_cells)
    post = belief.posterior()
    state[0, occ[:, 0], occ[:, 1]] = post[:, target_class]
    state[1, occ[:, 0], occ[:, 1]] = normalized_entropy(post)
    state[2] = grid.occupied
    state[3, pose.cell[0], pose.cell[1]] = 1.0
    return state


class QNetwork(nn.Module):
    """Fully convolutional, shape-preserving Q-map: 4 input grids to one value per cell."""

    def __init__(self, height: int, width: int, hidden: int = 32, depth: int = 3):
        super().__init__()
        self.height = height
        self.width = width
        self.hidden = hidden
        self.depth = depth
        layers = []
        in_ch = STATE_CHANNELS
        for _ in range(depth):
            layers += [nn.Conv2d(in_ch, hidden, kernel_size=3, padding=1), nn.ReLU()]
            in_ch = hidden
        layers.append(nn.Conv2d(in_ch, 1, kernel_size=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).squeeze(1)


def forward_q(net: QNetwork, state: np.ndarray) -> np.ndarray:
    """Q-map of one state, shape (H, W)."""
    expected = (STATE_CHANNELS, net.height, net.width)
    if tuple(state.shape) != expected:
        raise ValueError(f"State shape {tuple(state.shape)} does not match network input {expected}")
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        q = net(torch.as_tensor(state, dtype=dtype).unsqueeze(0))[0]
    return q.numpy()


def centroid_mask(grid: GridMap, admissible) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    for r, c in admissible:
        mask[r, c] = True
    return mask


def masked_select(q: np.ndarray, mask: np.ndarray, epsilon: float, rng: np.random.Generator) -> tuple:
    """ε-greedy choice over admissible cells; greedy ties go to the row-major first cell."""
    cells = np.argwhere(mask)
    if len(cells) == 0:
        raise ScheduleError("Centroid mask has no admissible cell")
    if rng.random() < epsilon:
        r, c = cells[int(rng.integers(len(cells)))]
        return (int(r), int(c))
    masked = np.where(mask, q, -np.inf)
    r, c = np.unravel_index(int(np.argmax(masked)), masked.shape)
    return (int(r), int(c))


def compute_reward(n_prim: int, success: bool, r_step: float = R_STEP, r_succ: float = R_SUCC) -> float:
    if n_prim < 0:
        raise ValueError(f"Primitive count must be nonnegative, got {n_prim}")
    return n_prim * r_step + (r_succ if success else 0.0)


def td_target(t: Transition, target_net: QNetwork, gamma: float) -> float:
    """r + γ max over the next mask; no bootstrap when done or the mask is empty."""
    if t.done or gamma == 0 or not np.any(t.next_mask):
        return float(t.reward)
    q = forward_q(target_net, t.next_state)
    return float(t.reward + gamma * np.max(q[t.next_mask]))


def epsilon_at(episode: int, cfg: TrainConfig) -> float:
    """Linear anneal over the first ``epsilon_fraction`` of episodes, then flat."""
    if episode < 0:
        raise ValueError(f"Episode index must be nonnegative, got {episode}")
    end = math.floor(cfg.epsilon_fraction * cfg.episodes)
    if end <= 0 or episode >= end:
        return cfg.epsilon_end
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * (episode / end)


# ── Learner ────────────────────────────────────────────────


class ReplayBuffer:
    """Ring buffer of transitions; the oldest one is overwritten at capacity.

    States are stored packed: the two belief channels as float16 plus the
    robot cell, with the occupancy channel shared across the buffer.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items = []
        self._next = 0
        self._occupancy = None

    def __len__(self) -> int:
        return len(self._items)

    def _pack(self, state: np.ndarray) -> tuple:
        if self._occupancy is None:
            self._occupancy = state[2].copy()
        r, c = np.unravel_index(int(np.argmax(state[3])), state[3].shape)
        return state[:2].astype(np.float16), (int(r), int(c))

    def _unpack(self, packed: tuple) -> np.ndarray:
        belief, (r, c) = packed
        state = np.zeros((STATE_CHANNELS,) + belief.shape[1:], dtype=np.float32)
        state[:2] = belief
        state[2] = self._occupancy
        state[3, r, c] = 1.0
        return state

    def push(self, t: Transition):
        item = (
            self._pack(t.state), t.goal, t.reward, self._pack(t.next_state),
            np.packbits(t.next_mask, axis=None), t.done,
        )
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._next] = item
        self._next = (self._next + 1) % self.capacity

    def _transition(self, item: tuple) -> Transition:
        state, goal, reward, next_state, mask_bits, done = item
        shape = self._occupancy.shape
        mask = np.unpackbits(mask_bits, count=shape[0] * shape[1]).reshape(shape).astype(bool)
        return Transition(self._unpack(state), goal, reward, self._unpack(next_state), mask, done)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._transition(self._items[i]) for i in idx]

    def __iter__(self):
        """Oldest first."""
        items = self._items
        if len(items) == self.capacity:
            items = items[self._next:] + items[:self._next]
        return (self._transition(item) for item in items)


class QLearner:
    """Online network, target network, optimizer and replay buffer."""

    def __init__(self, height: int, width: int, cfg: TrainConfig, seed: int = 0, depth: int = 3):
        torch.manual_seed(seed)
        self.cfg = cfg
        self.net = QNetwork(height, width, hidden=cfg.hidden_channels, depth=depth)
        self.target_net = copy.deepcopy(self.net)
        self.target_net.requires_grad_(False)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.grad_steps = 0

    def remember(self, t: Transition):
        self.buffer.push(t)

    def batch_loss(self, batch: list) -> torch.Tensor:
        """Huber loss between Q(state)[goal] and the masked TD target."""
        states = torch.from_numpy(np.stack([t.state for t in batch]))
        next_states = torch.from_numpy(np.stack([t.next_state for t in batch]))
        masks = torch.from_numpy(np.stack([t.next_mask for t in batch]))
        rewards = torch.tensor([t.reward for t in batch], dtype=torch.float32)
        done = torch.tensor([t.done for t in batch], dtype=torch.bool)
        rows = torch.tensor([t.goal[0] for t in batch])
        cols = torch.tensor([t.goal[1] for t in batch])

        q = self.net(states)[torch.arange(len(batch)), rows, cols]
        with torch.no_grad():
            next_q = self.target_net(next_states).masked_fill(~masks, -math.inf)
            best = next_q.flatten(1).max(dim=1).values
            best = torch.where(done | torch.isinf(best), torch.zeros_like(best), best)
            target = rewards + self.cfg.gamma * best
        return F.smooth_l1_loss(q, target)

    def train_step(self, rng: np.random.Generator) -> Optional[float]:
        """One gradient step on a uniform batch; None while the buffer is underfull."""
        if len(self.buffer) < self.cfg.batch_size:
            return None
        loss = self.batch_loss(self.buffer.sample(self.cfg.batch_size, rng))
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.grad_steps += 1
        if self.grad_steps % self.cfg.target_sync_every == 0:
            self.target_net.load_state_dict(self.net.state_dict())
        return float(loss.item())


# ── Episodes ───────────────────────────────────────────────


def run_bbdps_episode(
    session: SearchSession,
    net: QNetwork,
    epsilon: float,
    rng: np.random.Generator,
    learner: Optional[QLearner] = None,
) -> tuple:
    """Goal-decision loop driven by the Q-map.

    With a learner, every decision is stored as a transition and followed by
    one training step. Returns (episode return, list of losses).
    """
    spec = session.spec
    grid = session.map
    total = 0.0
    losses = []
    goals = session.admissible()
    while session.running:
        if not goals:
            session.hold()
            goals = session.admissible() if session.running else []
            continue
        state = build_state_tensor(session.belief, spec.target_class, grid, session.pose)
        mask = centroid_mask(grid, goals)
        goal = masked_select(forward_q(net, state), mask, epsilon, rng)
        n_prim = session.travel_to(goal)
        reward = compute_reward(n_prim, session.outcome is Outcome.SUCCESS)
        total += reward

        done = not session.running
        goals = [] if done else session.admissible()
        if learner is not None:
            learner.remember(Transition(
                state=state,
                goal=goal,
                reward=reward,
                next_state=build_state_tensor(session.belief, spec.target_class, grid, session.pose),
                next_mask=centroid_mask(grid, goals),
                done=done,
            ))
            loss = learner.train_step(rng)
            if loss is not None:
                losses.append(loss)
    return total, losses


def random_start(grid: GridMap, rng: np.random.Generator) -> Pose:
    cell = grid.free_cells[int(rng.integers(grid.n_free))]
    return Pose(cell, Heading(int(rng.integers(4))))


def run_training(
    scenario,
    cfg: Optional[TrainConfig] = None,
    rng_seed: int = 0,
    on_progress: Optional[Callable] = None,
) -> tuple:
    """Train one Q-network on the scenario's training targets.

    Each episode draws one training placement and a start pose; evaluation
    placements are never used. Returns (QLearner, list of TrainingLogRow).
    """
    cfg = cfg or scenario.training
    if not scenario.train_targets:
        raise ValueError(f"Scenario {scenario.name!r} defines no training targets")
    grid = scenario.map
    learner = QLearner(grid.height, grid.width, cfg, seed=rng_seed)
    horizon = horizon_for(grid, scenario.horizon_fraction)
    sampler = np.random.default_rng([rng_seed, 0x7A11])
    log = []

    for episode in range(cfg.episodes):
        rng = np.random.default_rng([rng_seed, episode])
        placement = scenario.train_targets[int(sampler.integers(len(scenario.train_targets)))]
        spec = EpisodeSpec(
            map=grid,
            target_class=placement.class_index,
            target_cell=placement.cell,
            start_pose=random_start(grid, sampler),
            horizon=horizon,
            confidence_threshold=scenario.threshold,
            rng_seed=rng_seed,
        )
        session = scenario.new_session(spec, rng)
        epsilon = epsilon_at(episode, cfg)
        episode_return, losses = run_bbdps_episode(session, learner.net, epsilon, rng, learner)
        log.append(TrainingLogRow(
            episode=episode,
            target=scenario.class_names[placement.class_index],
            episode_return=episode_return,
            length=session.primitives_executed,
            outcome=session.outcome.value,
            epsilon=epsilon,
            loss=float(np.mean(losses)) if losses else float("nan"),
        ))
        if on_progress:
            on_progress(
                f"episode {episode + 1}/{cfg.episodes}  {placement.class_name:<12} "
                f"{session.outcome.value:<18} return {episode_return:+.2f}  eps {epsilon:.3f}",
                episode + 1, cfg.episodes,
            )
    return learner, log


# ── Checkpoints ────────────────────────────────────────────

_HEADER = struct.Struct("<4sHIIIII")  # magic, version, height, width, hidden, depth, tensors


def save_checkpoint(path: Path, net: QNetwork) -> Path:
    """Write the flat binary checkpoint: header, tensors, SHA-256 trailer."""
    state = net.state_dict()
    payload = bytearray(_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.height, net.width, net.hidden, net.depth, len(state),
    ))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        payload += struct.pack("<H", len(raw)) + raw
        payload += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes(order="C")
    payload += hashlib.sha256(payload).digest()
    path = Path(path)
    path.write_bytes(bytes(payload))
    return path


def load_checkpoint(path: Path) -> QNetwork:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 32:
        raise ValueError(f"{path} is too short to be a checkpoint")
    body, digest = data[:-32], data[-32:]
    magic, version, height, width, hidden, depth, count = _HEADER.unpack_from(body, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"Checksum mismatch in {path}")

    net = QNetwork(height, width, hidden=hidden, depth=depth)
    offset = _HEADER.size
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", body, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", body, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    net.load_state_dict(tensors)
    net.eval()
    return net
