"""Seedable long-horizon POMDPs with a sparse, delayed terminal reward.

Two environments are provided:

``chaincraft``
    A household-style chain of subtasks (pick, clean, heat, ...) that must be
    completed in a fixed order, each at its own station.  The terminal reward
    is the fraction of required subtasks completed.

``keydoorgrid``
    A 7x7 two-room grid.  The agent must pick up a key, unlock the door in the
    dividing wall and walk to the goal.  The terminal reward is binary.

Environments are functional: ``reset`` and ``step`` return new immutable
states, so a state can be branched or replayed freely.  Every non-final step
carries reward 0; only the final ``StepResult`` carries the terminal reward.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class TaskInstance:
    env_kind: str
    task_id: int
    goal_spec: tuple
    max_steps: int


@dataclass(frozen=True)
class EnvState:
    task: TaskInstance
    step_index: int
    done: bool
    data: tuple  # environment-specific, opaque to callers


@dataclass(frozen=True)
class StepResult:
    observation_id: int
    grounded: bool
    done: bool
    terminal_reward: float | None = None

    @property
    def reward(self) -> float:
        return 0.0 if self.terminal_reward is None else self.terminal_reward


@dataclass(frozen=True)
class ActionSpace:
    names: tuple[str, ...]

    @property
    def count(self) -> int:
        return len(self.names)


@dataclass
class Trajectory:
    """One episode: the actions taken, what came back, and the terminal reward.

    ``logprobs`` holds the behaviour policy's log-probability of each action
    (empty for expert or replayed data).
    """

    task: TaskInstance
    seed: int
    initial_obs: int
    actions: list[int] = field(default_factory=list)
    observations: list[int] = field(default_factory=list)
    grounded: list[bool] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)
    reward: float = 0.0
    done: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    def append(self, action: int, result: StepResult, logprob: float | None = None) -> None:
        self.actions.append(int(action))
        self.observations.append(int(result.observation_id))
        self.grounded.append(bool(result.grounded))
        if logprob is not None:
            self.logprobs.append(float(logprob))
        if result.done:
            self.done = True
            self.reward = float(result.reward)

    def prefix(self, length: int) -> Trajectory:
        return Trajectory(
            task=self.task,
            seed=self.seed,
            initial_obs=self.initial_obs,
            actions=self.actions[:length],
            observations=self.observations[:length],
            grounded=self.grounded[:length],
            logprobs=self.logprobs[:length],
            reward=self.reward if length >= len(self) else 0.0,
            done=self.done and length >= len(self),
        )

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "task_id": self.task.task_id,
            "seed": self.seed,
            "initial_obs": self.initial_obs,
            "actions": list(self.actions),
            "observations": list(self.observations),
            "grounded": [int(g) for g in self.grounded],
            "reward": self.reward,
        }
        if self.logprobs:
            rec["logprobs"] = list(self.logprobs)
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any], env: Environment) -> Trajectory:
        return cls(
            task=env.task(int(rec["task_id"])),
            seed=int(rec["seed"]),
            initial_obs=int(rec["initial_obs"]),
            actions=[int(a) for a in rec["actions"]],
            observations=[int(o) for o in rec["observations"]],
            grounded=[bool(g) for g in rec["grounded"]],
            logprobs=[float(x) for x in rec.get("logprobs", [])],
            reward=float(rec["reward"]),
            done=True,
        )


class Environment:
    """Common surface of the simulated environments."""

    name: str
    action_space: ActionSpace
    num_observations: int
    task_width: int
    num_tasks: int

    def params(self) -> dict[str, Any]:
        raise NotImplementedError

    def task(self, task_id: int) -> TaskInstance:
        task_id = int(task_id)
        if not 0 <= task_id < self.num_tasks:
            raise ConfigError(f"{self.name}: task_id {task_id} out of range [0, {self.num_tasks})")
        cache = self.__dict__.setdefault("_task_cache", {})
        if task_id not in cache:
            cache[task_id] = self._make_task(task_id)
        return cache[task_id]

    def tasks(self, ids) -> list[TaskInstance]:
        return [self.task(i) for i in ids]

    def _check_task(self, task: TaskInstance) -> None:
        if task.env_kind != self.name:
            raise ConfigError(f"task for {task.env_kind!r} given to {self.name!r}")
        if not 0 <= task.task_id < self.num_tasks:
            raise ConfigError(f"{self.name}: task_id {task.task_id} out of range")

    def _check_step(self, state: EnvState, action: int) -> None:
        if state.done:
            raise UsageError("step() called on a finished episode")
        if not 0 <= action < self.action_space.count:
            raise UsageError(f"action {action} outside [0, {self.action_space.count})")

    def _finish(self, state: EnvState, data: tuple, obs: int, grounded: bool, goal: bool) -> tuple[EnvState, StepResult]:
        step_index = state.step_index + 1
        done = goal or step_index >= state.task.max_steps
        new_state = EnvState(state.task, step_index, done, data)
        reward = self.completion(new_state) if done else None
        return new_state, StepResult(obs, grounded, done, reward)

    # environment-specific
    def _make_task(self, task_id: int) -> TaskInstance:
        raise NotImplementedError

    def reset(self, task: TaskInstance, seed: int) -> tuple[EnvState, int]:
        raise NotImplementedError

    def step(self, state: EnvState, action_id: int) -> tuple[EnvState, StepResult]:
        raise NotImplementedError

    def expert_action(self, state: EnvState) -> int:
        raise NotImplementedError

    def completion(self, state: EnvState) -> float:
        raise NotImplementedError

    def encode_task(self, task: TaskInstance) -> np.ndarray:
        raise NotImplementedError

    def state_key(self, state: EnvState) -> tuple:
        """Goal-relevant part of the state (everything but the step counter)."""
        return state.data


class ChainCraft(Environment):
    """Ordered-subtask household chain.

    Action ids, in order:

    * ``0..5``   subtask verbs ``pick clean heat cool slice place``
    * ``6..11``  ``goto_<station>``, one per verb (verb ``v`` is performed at station ``v``)
    * ``12..17`` distractors ``look inventory examine open_drawer close_drawer wait``

    A task asks for ``k`` distinct verbs in a fixed order and makes ``d`` of the
    distractors available.  A verb is grounded only when it is the next required
    subtask and the agent stands at its station; a ``goto`` is grounded unless it
    targets the current station; a distractor is grounded only if available.
    Grounded distractors change nothing.

    The observation is ``3 * station + outcome`` with outcome 0 (nothing
    happened), 1 (action executed, no progress) or 2 (subtask completed).  It
    never reveals how many subtasks are done.

    Expert plan: for each remaining subtask, ``goto`` its station when not
    already there, then perform the verb.  Its length is therefore ``k`` plus one
    navigation step per subtask whose station differs from the agent's position
    at that time, i.e. ``2k - [start station == station of first subtask]``.
    """

    name = "chaincraft"
    VERBS = ("pick", "clean", "heat", "cool", "slice", "place")
    STATIONS = ("countertop", "sinkbasin", "microwave", "fridge", "cuttingboard", "shelf")
    DISTRACTORS = ("look", "inventory", "examine", "open_drawer", "close_drawer", "wait")

    def __init__(
        self,
        num_subtasks: int | None = None,
        num_distractors: int | None = None,
        horizon: int = 30,
        num_tasks: int = 10_000,
    ):
        if num_subtasks is not None and not 3 <= num_subtasks <= 6:
            raise ConfigError("num_subtasks must lie in [3, 6]")
        if num_distractors is not None and not 0 <= num_distractors <= 6:
            raise ConfigError("num_distractors must lie in [0, 6]")
        if horizon < 1:
            raise ConfigError("horizon must be >= 1")
        self.num_subtasks = num_subtasks
        self.num_distractors = num_distractors
        self.horizon = int(horizon)
        self.num_tasks = int(num_tasks)
        nv = len(self.VERBS)
        self.action_space = ActionSpace(
            self.VERBS + tuple(f"goto_{s}" for s in self.STATIONS) + self.DISTRACTORS
        )
        self.num_observations = 3 * nv
        # goal: first verb, successor table (verb -> next verb or end), available distractors
        self.task_width = nv + nv * (nv + 1) + len(self.DISTRACTORS)

    def params(self) -> dict[str, Any]:
        return {
            "num_subtasks": self.num_subtasks,
            "num_distractors": self.num_distractors,
            "horizon": self.horizon,
            "num_tasks": self.num_tasks,
        }

    def _make_task(self, task_id: int) -> TaskInstance:
        rng = np.random.default_rng([task_id, 0xC4A1C4A1])
        k = int(rng.integers(3, 7))
        d = int(rng.integers(0, 7))
        verbs = rng.permutation(len(self.VERBS))
        distractors = rng.permutation(len(self.DISTRACTORS))
        k = self.num_subtasks if self.num_subtasks is not None else k
        d = self.num_distractors if self.num_distractors is not None else d
        goal = (tuple(int(v) for v in verbs[:k]), tuple(sorted(int(x) for x in distractors[:d])))
        return TaskInstance(self.name, task_id, goal, self.horizon)

    def reset(self, task: TaskInstance, seed: int) -> tuple[EnvState, int]:
        self._check_task(task)
        rng = np.random.default_rng([int(seed), task.task_id, 1])
        station = int(rng.integers(len(self.STATIONS)))
        state = EnvState(task, 0, False, (station, 0))
        return state, 3 * station + 1

    def step(self, state: EnvState, action_id: int) -> tuple[EnvState, StepResult]:
        action_id = int(action_id)
        self._check_step(state, action_id)
        station, progress = state.data
        order, available = state.task.goal_spec
        nv = len(self.VERBS)
        outcome = 0
        if action_id < nv:
            if progress < len(order) and order[progress] == action_id and station == action_id:
                progress += 1
                outcome = 2
        elif action_id < 2 * nv:
            target = action_id - nv
            if target != station:
                station = target
                outcome = 1
        elif action_id - 2 * nv in available:
            outcome = 1
        goal = progress == len(order)
        return self._finish(state, (station, progress), 3 * station + outcome, outcome > 0, goal)

    def expert_action(self, state: EnvState) -> int:
        if state.done:
            raise UsageError("expert_action() on a finished episode")
        station, progress = state.data
        nxt = state.task.goal_spec[0][progress]
        return nxt if station == nxt else len(self.VERBS) + nxt

    def completion(self, state: EnvState) -> float:
        return state.data[1] / len(state.task.goal_spec[0])

    def encode_task(self, task: TaskInstance) -> np.ndarray:
        nv = len(self.VERBS)
        vec = np.zeros(self.task_width)
        order, available = task.goal_spec
        vec[order[0]] = 1.0
        for verb, nxt in zip(order, order[1:] + (nv,)):
            vec[nv + verb * (nv + 1) + nxt] = 1.0
        for x in available:
            vec[nv + nv * (nv + 1) + x] = 1.0
        return vec


class KeyDoorGrid(Environment):
    """7x7 grid split by a vertical wall with a single locked door.

    Actions: ``up down left right pickup unlock``.  The task fixes the wall
    column, the door row and the goal cell (right room); the seed places the
    agent and the key in the left room.  Moves into walls, the border or the
    locked door are ungrounded, as are ``pickup`` away from the key and
    ``unlock`` without the key or away from the door.

    The observation reveals the agent's cell, whether it holds the key and
    whether the key lies within its 3x3 neighbourhood.

    Expert plan: shortest path to the key, ``pickup``, shortest path to the cell
    left of the door, ``unlock``, shortest path to the goal.
    """

    name = "keydoorgrid"
    SIZE = 7
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, horizon: int = 40, num_tasks: int = 500):
        if horizon < 1:
            raise ConfigError("horizon must be >= 1")
        self.horizon = int(horizon)
        self.num_tasks = int(num_tasks)
        self.action_space = ActionSpace(("up", "down", "left", "right", "pickup", "unlock"))
        n = self.SIZE * self.SIZE
        self.num_observations = n * 4
        # wall column one-hot, door row one-hot, goal cell one-hot
        self.task_width = self.SIZE + self.SIZE + n

    def params(self) -> dict[str, Any]:
        return {"horizon": self.horizon, "num_tasks": self.num_tasks}

    def _make_task(self, task_id: int) -> TaskInstance:
        rng = np.random.default_rng([task_id, 0x6B6579])
        wall = int(rng.integers(2, 5))
        door = int(rng.integers(self.SIZE))
        goal = (int(rng.integers(self.SIZE)), int(rng.integers(wall + 1, self.SIZE)))
        return TaskInstance(self.name, task_id, (wall, door, goal), self.horizon)

    def reset(self, task: TaskInstance, seed: int) -> tuple[EnvState, int]:
        self._check_task(task)
        wall = task.goal_spec[0]
        rng = np.random.default_rng([int(seed), task.task_id, 2])
        cells = [(r, c) for r in range(self.SIZE) for c in range(wall)]
        i, j = rng.choice(len(cells), size=2, replace=False)
        pos, key = cells[int(i)], cells[int(j)]
        data = (pos, key, False, False)  # position, key cell, holding key, door open
        return EnvState(task, 0, False, data), self._observe(data)

    def _observe(self, data: tuple) -> int:
        pos, key, has_key, _ = data
        near = (not has_key) and abs(key[0] - pos[0]) <= 1 and abs(key[1] - pos[1]) <= 1
        return (pos[0] * self.SIZE + pos[1]) * 4 + 2 * int(has_key) + int(near)

    def _passable(self, task: TaskInstance, cell: tuple[int, int], door_open: bool) -> bool:
        r, c = cell
        if not (0 <= r < self.SIZE and 0 <= c < self.SIZE):
            return False
        wall, door, _ = task.goal_spec
        if c == wall:
            return r == door and door_open
        return True

    def step(self, state: EnvState, action_id: int) -> tuple[EnvState, StepResult]:
        action_id = int(action_id)
        self._check_step(state, action_id)
        task = state.task
        wall, door, goal = task.goal_spec
        pos, key, has_key, door_open = state.data
        grounded = False
        if action_id < 4:
            dr, dc = self.MOVES[action_id]
            nxt = (pos[0] + dr, pos[1] + dc)
            if self._passable(task, nxt, door_open):
                pos, grounded = nxt, True
        elif action_id == 4:
            if not has_key and pos == key:
                has_key, grounded = True, True
        elif has_key and not door_open and pos == (door, wall - 1):
            door_open, grounded = True, True
        data = (pos, key, has_key, door_open)
        return self._finish(state, data, self._observe(data), grounded, pos == goal and has_key)

    def _path_first_move(self, state: EnvState, target: tuple[int, int]) -> int:
        task = state.task
        start, door_open = state.data[0], state.data[3]
        prev: dict[tuple[int, int], tuple[tuple[int, int], int]] = {start: (start, -1)}
        queue = deque([start])
        while queue:
            cell = queue.popleft()
            if cell == target:
                break
            for a, (dr, dc) in enumerate(self.MOVES):
                nxt = (cell[0] + dr, cell[1] + dc)
                if nxt not in prev and self._passable(task, nxt, door_open):
                    prev[nxt] = (cell, a)
                    queue.append(nxt)
        cell, action = target, -1
        while cell != start:
            cell, action = prev[cell]
        return action

    def expert_action(self, state: EnvState) -> int:
        if state.done:
            raise UsageError("expert_action() on a finished episode")
        wall, door, goal = state.task.goal_spec
        pos, key, has_key, door_open = state.data
        if not has_key:
            return 4 if pos == key else self._path_first_move(state, key)
        if not door_open:
            front = (door, wall - 1)
            return 5 if pos == front else self._path_first_move(state, front)
        return self._path_first_move(state, goal)

    def completion(self, state: EnvState) -> float:
        pos, _, has_key, _ = state.data
        return 1.0 if has_key and pos == state.task.goal_spec[2] else 0.0

    def encode_task(self, task: TaskInstance) -> np.ndarray:
        wall, door, goal = task.goal_spec
        vec = np.zeros(self.task_width)
        vec[wall] = 1.0
        vec[self.SIZE + door] = 1.0
        vec[2 * self.SIZE + goal[0] * self.SIZE + goal[1]] = 1.0
        return vec


ENV_REGISTRY: dict[str, type[Environment]] = {
    ChainCraft.name: ChainCraft,
    KeyDoorGrid.name: KeyDoorGrid,
}


def make_env(name: str, **params: Any) -> Environment:
    try:
        cls = ENV_REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; known: {sorted(ENV_REGISTRY)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name!r}: {exc}") from None


def expert_rollout(env: Environment, task: TaskInstance, seed: int) -> Trajectory:
    state, obs = env.reset(task, seed)
    traj = Trajectory(task, seed, obs)
    while not state.done:
        action = env.expert_action(state)
        state, result = env.step(state, action)
        traj.append(action, result)
    return traj


def replay(env: Environment, traj: Trajectory, length: int | None = None) -> tuple[EnvState, Trajectory]:
    """Re-execute ``traj``'s first ``length`` actions from reset.

    Returns the reached state and the re-recorded trajectory (without logprobs).
    """
    length = len(traj) if length is None else length
    state, obs = env.reset(traj.task, traj.seed)
    out = Trajectory(traj.task, traj.seed, obs)
    for action in traj.actions[:length]:
        state, result = env.step(state, action)
        out.append(action, result)
    return state, out


def grounding_accuracy(traj: Trajectory) -> float:
    if len(traj) == 0:
        raise UsageError("grounding_accuracy() of an empty trajectory")
    return sum(traj.grounded) / len(traj)
