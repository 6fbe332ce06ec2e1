"""Synthetic pixel tasks behind an Atari-like contract.

Six discrete actions, sign-clipped rewards, a done flag and deterministic
frame skipping.  Game logic lives in normalized [0, 1] coordinates and is
rasterized at whatever frame size the experiment asks for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIONS = ("NOOP", "FIRE", "UP", "RIGHT", "LEFT", "DOWN")
NUM_ACTIONS = len(ACTIONS)
NOOP, FIRE, UP, RIGHT, LEFT, DOWN = range(NUM_ACTIONS)

_LUMA = np.array([0.299, 0.587, 0.114])


class UnknownTaskError(LookupError):
    pass


class EpisodeFinishedError(RuntimeError):
    pass


@dataclass
class Observation:
    frame: np.ndarray
    reward: float
    done: bool


class Canvas:
    def __init__(self, height: int, width: int, channels: int, background):
        self.h, self.w, self.c = height, width, channels
        self.frame = np.empty((height, width, channels))
        self.frame[:] = self._color(background)

    def _color(self, rgb) -> np.ndarray:
        rgb = np.asarray(rgb, dtype=np.float64)
        if self.c == 3:
            return rgb
        return np.full(self.c, float(rgb @ _LUMA))

    def rect(self, cx: float, cy: float, w: float, h: float, rgb) -> None:
        x0 = int(np.floor((cx - w / 2) * self.w))
        x1 = max(int(np.ceil((cx + w / 2) * self.w)), x0 + 1)
        y0 = int(np.floor((cy - h / 2) * self.h))
        y1 = max(int(np.ceil((cy + h / 2) * self.h)), y0 + 1)
        self.frame[max(y0, 0):min(y1, self.h), max(x0, 0):min(x1, self.w)] = self._color(rgb)


class Task:
    """Base class: subclasses implement reset/tick/draw over private state."""

    name = "task"
    background = (0.0, 0.0, 0.0)

    def reset(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def tick(self, action: int) -> tuple[float, bool]:
        raise NotImplementedError

    def draw(self, canvas: Canvas) -> None:
        raise NotImplementedError


class PaddleBounce(Task):
    """Ball bouncing off three walls; LEFT/RIGHT steer a paddle along the floor."""

    name = "paddle"
    background = (0.05, 0.05, 0.25)
    paddle_half = 0.15
    paddle_speed = 0.03
    ball_speed = 0.012
    lives = 5

    def reset(self, rng):
        self.rng = rng
        self.paddle = 0.5
        self.misses = 0
        self._serve()

    def _serve(self):
        self.bx = self.rng.uniform(0.15, 0.85)
        self.by = 0.12
        angle = self.rng.uniform(-0.8, 0.8)
        self.vx = self.ball_speed * np.sin(angle)
        self.vy = self.ball_speed * np.cos(angle)

    def tick(self, action):
        if action == LEFT:
            self.paddle = max(self.paddle - self.paddle_speed, self.paddle_half)
        elif action == RIGHT:
            self.paddle = min(self.paddle + self.paddle_speed, 1.0 - self.paddle_half)
        self.bx += self.vx
        self.by += self.vy
        if self.bx < 0.03 or self.bx > 0.97:
            self.vx = -self.vx
            self.bx = min(max(self.bx, 0.03), 0.97)
        if self.by < 0.1:
            self.vy = abs(self.vy)
        reward = 0.0
        if self.by >= 0.88:
            if abs(self.bx - self.paddle) <= self.paddle_half + 0.03:
                self.vy = -abs(self.vy)
                self.by = 0.88
                self.vx += 0.3 * self.ball_speed * (self.bx - self.paddle) / self.paddle_half
                reward = 1.0
            else:
                self.misses += 1
                reward = -1.0
                self._serve()
        return reward, self.misses >= self.lives

    def draw(self, canvas):
        canvas.rect(0.5, 0.04, 1.0, 0.08, (0.45, 0.45, 0.5))
        for k in range(self.lives - self.misses):
            canvas.rect(0.08 + 0.12 * k, 0.04, 0.08, 0.06, (0.2, 0.9, 0.2))
        canvas.rect(self.bx, self.by, 0.08, 0.08, (1.0, 1.0, 1.0))
        canvas.rect(self.paddle, 0.93, 2 * self.paddle_half, 0.07, (1.0, 0.55, 0.1))


class GatherDots(Task):
    """Top-down forager: move in four directions, eat dots to refill an energy bar."""

    name = "gather"
    background = (0.3, 0.45, 0.3)
    speed = 0.025
    n_dots = 2
    start_energy = 500
    dot_energy = 120
    max_energy = 800

    def reset(self, rng):
        self.rng = rng
        self.x, self.y = 0.5, 0.55
        self.energy = self.start_energy
        self.dots = [self._spawn() for _ in range(self.n_dots)]

    def _spawn(self):
        return (float(self.rng.uniform(0.1, 0.9)), float(self.rng.uniform(0.2, 0.9)))

    def tick(self, action):
        if action == UP:
            self.y -= self.speed
        elif action == DOWN:
            self.y += self.speed
        elif action == LEFT:
            self.x -= self.speed
        elif action == RIGHT:
            self.x += self.speed
        self.x = min(max(self.x, 0.05), 0.95)
        self.y = min(max(self.y, 0.16), 0.95)
        self.energy -= 1
        reward = 0.0
        for k, (dx, dy) in enumerate(self.dots):
            if abs(dx - self.x) < 0.09 and abs(dy - self.y) < 0.09:
                reward += 1.0
                self.energy = min(self.energy + self.dot_energy, self.max_energy)
                self.dots[k] = self._spawn()
        return reward, self.energy <= 0

    def draw(self, canvas):
        canvas.rect(0.5, 0.05, 1.0, 0.1, (0.1, 0.1, 0.1))
        frac = self.energy / self.max_energy
        canvas.rect(frac / 2, 0.05, frac, 0.08, (0.95, 0.85, 0.2))
        for dx, dy in self.dots:
            canvas.rect(dx, dy, 0.08, 0.08, (0.6, 0.05, 0.05))
        canvas.rect(self.x, self.y, 0.12, 0.12, (1.0, 1.0, 0.6))


class DodgeFallers(Task):
    """Stand on the floor and sidestep blocks falling from the sky."""

    name = "dodge"
    background = (0.8, 0.78, 0.65)
    speed = 0.03
    lives = 4
    max_fallers = 3
    spawn_prob = 0.025

    def reset(self, rng):
        self.rng = rng
        self.x = 0.5
        self.hits = 0
        self.fallers: list[list[float]] = []

    def tick(self, action):
        if action == LEFT:
            self.x = max(self.x - self.speed, 0.07)
        elif action == RIGHT:
            self.x = min(self.x + self.speed, 0.93)
        if len(self.fallers) < self.max_fallers and self.rng.random() < self.spawn_prob:
            self.fallers.append([float(self.rng.uniform(0.05, 0.95)), 0.1, float(self.rng.uniform(0.008, 0.016))])
        reward = 0.0
        keep = []
        for f in self.fallers:
            f[1] += f[2]
            if f[1] >= 0.88:
                if abs(f[0] - self.x) < 0.12:
                    self.hits += 1
                    reward -= 1.0
                else:
                    reward += 1.0
            else:
                keep.append(f)
        self.fallers = keep
        return reward, self.hits >= self.lives

    def draw(self, canvas):
        for k in range(self.lives - self.hits):
            canvas.rect(0.9 - 0.12 * k, 0.05, 0.08, 0.06, (0.8, 0.1, 0.1))
        for fx, fy, _ in self.fallers:
            canvas.rect(fx, fy, 0.1, 0.1, (0.15, 0.15, 0.15))
        canvas.rect(self.x, 0.93, 0.14, 0.1, (0.1, 0.2, 0.7))


class OneActionBandit(Task):
    """Single-step episode: one fixed action pays, everything else pays nothing."""

    name = "bandit"
    background = (0.5, 0.5, 0.5)
    good_action = FIRE
    payout = 5.0

    def reset(self, rng):
        pass

    def tick(self, action):
        return (self.payout if action == self.good_action else 0.0), True

    def draw(self, canvas):
        canvas.rect(0.5, 0.5, 0.4, 0.4, (0.9, 0.9, 0.9))


TASK_REGISTRY: dict[str, type[Task]] = {
    cls.name: cls for cls in (PaddleBounce, GatherDots, DodgeFallers, OneActionBandit)
}
DEFAULT_TASKS = ("paddle", "gather", "dodge")


class Env:
    """One episode-at-a-time environment instance."""

    def __init__(self, task: str, frame_shape: tuple[int, int, int] = (32, 32, 1),
                 frame_skip: int = 4, max_steps: int = 1000):
        if task not in TASK_REGISTRY:
            raise UnknownTaskError(f"unknown task {task!r}; registered: {sorted(TASK_REGISTRY)}")
        self.task_name = task
        self.frame_shape = tuple(frame_shape)
        self.frame_skip = frame_skip
        self.max_steps = max_steps
        self.game = TASK_REGISTRY[task]()
        self.ticks = 0
        self.steps = 0
        self.done = True

    def _render(self) -> np.ndarray:
        canvas = Canvas(*self.frame_shape, self.game.background)
        self.game.draw(canvas)
        return canvas.frame

    def reset(self, episode_seed: int) -> Observation:
        seed = np.random.SeedSequence([int(episode_seed), sum(map(ord, self.task_name))])
        self.game.reset(np.random.default_rng(seed))
        self.ticks = 0
        self.steps = 0
        self.done = False
        return Observation(self._render(), 0.0, False)

    def step(self, action: int) -> Observation:
        if self.done:
            raise EpisodeFinishedError("episode finished; call reset()")
        if not 0 <= int(action) < NUM_ACTIONS:
            raise ValueError(f"action {action} outside [0, {NUM_ACTIONS})")
        raw = 0.0
        done = False
        for _ in range(self.frame_skip):
            r, done = self.game.tick(int(action))
            self.ticks += 1
            raw += r
            if done:
                break
        self.steps += 1
        if self.steps >= self.max_steps:
            done = True
        self.done = done
        return Observation(self._render(), float(np.sign(raw)), done)


def env_reset(task: str, episode_seed: int, **kwargs) -> tuple[Env, Observation]:
    env = Env(task, **kwargs)
    return env, env.reset(episode_seed)


def random_policy_action(rng: np.random.Generator, last_action: int) -> int:
    """Sticky random policy: keep the last action with probability 0.5, else uniform."""
    if rng.random() < 0.5:
        return int(last_action)
    return int(rng.integers(NUM_ACTIONS))
