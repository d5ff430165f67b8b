"""Sequence replay for recurrent training.

Episodes are stored whole in columnar arrays.  Sampling is uniform over valid
train-window starts t0; a segment carries up to ``burn_in`` warmup records in
front of its train window plus one lookahead record for bootstrapping, and an
initial recurrent state chosen by the buffer strategy:

  burn-in      interior windows anchor at the record burn_in steps back and
               take its stored hidden state; the warmup is re-unrolled from
               there.  Windows closer than burn_in to the episode start use a
               shortened warmup from the exact zero state the episode began in.
  zero-start   same windows, but the warmup always re-unrolls from zeros.
  stored-state no warmup; the stored hidden state of the first train record is
               used directly.
  episode      whole terminated episodes, unrolled from zeros.

A train-window start is valid when a full train window fits (terminated
episodes may end with a shorter final window only if the episode itself is
shorter than train_len), and, for ongoing episodes, when the record after the
window already exists.  Ongoing episodes become visible once they hold at
least burn_in + train_len records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Array = np.ndarray

STRATEGIES = ("burn-in", "zero-start", "stored-state", "episode")


@dataclass
class StepRecord:
    """One transition as the agent saw it at collection time."""

    obs: Array
    prev_action: Array
    action: Array
    reward: float
    done: bool
    hidden: Array


@dataclass
class SequenceSegment:
    """Single-segment view used by tests and diagnostics.

    ``h0`` is the stored hidden state of ``records[0]`` unless
    ``h0_precedes_first`` is set, in which case it is the state from before
    the first record (exact zeros at an episode head, or the zero-start
    strategy's reset).  The train window begins at ``records[train_offset]``.
    """

    records: list
    h0: Array
    h0_precedes_first: bool
    train_offset: int
    lookahead: StepRecord | None


class _Episode:
    __slots__ = ("obs", "prev_action", "action", "reward", "done", "hidden", "n", "terminated", "eid")

    def __init__(self, eid: int, obs_dim: int, action_dim: int, hidden_dim: int, cap: int = 64) -> None:
        self.eid = eid
        self.obs = np.empty((cap, obs_dim))
        self.prev_action = np.empty((cap, action_dim))
        self.action = np.empty((cap, action_dim))
        self.reward = np.empty(cap)
        self.done = np.zeros(cap, dtype=bool)
        self.hidden = np.empty((cap, hidden_dim))
        self.n = 0
        self.terminated = False

    def _grow(self) -> None:
        def up(a: Array) -> Array:
            new = np.empty((a.shape[0] * 2, *a.shape[1:]), dtype=a.dtype)
            new[: a.shape[0]] = a
            return new

        self.obs, self.prev_action, self.action = up(self.obs), up(self.prev_action), up(self.action)
        self.reward, self.done, self.hidden = up(self.reward), up(self.done), up(self.hidden)

    def append(self, rec: StepRecord) -> None:
        if self.n == self.obs.shape[0]:
            self._grow()
        i = self.n
        self.obs[i] = rec.obs
        self.prev_action[i] = rec.prev_action
        self.action[i] = rec.action
        self.reward[i] = rec.reward
        self.done[i] = rec.done
        self.hidden[i] = rec.hidden
        self.n += 1
        if rec.done:
            self.terminated = True

    def record(self, i: int) -> StepRecord:
        return StepRecord(
            obs=self.obs[i].copy(),
            prev_action=self.prev_action[i].copy(),
            action=self.action[i].copy(),
            reward=float(self.reward[i]),
            done=bool(self.done[i]),
            hidden=self.hidden[i].copy(),
        )


@dataclass
class SegmentBatch:
    """Stacked segments, padded over time with boolean masks.

    ``pre_x``/``pre_h_init`` describe the no-gradient warmup: inputs are
    right-aligned so the last valid column is the record just before the train
    window.  ``first_state_given`` marks the stored-state strategy, where
    ``h_init`` already is the state of train record 0 and the unroll starts at
    record 1.  ``model_mask`` is true where a successor state exists.
    """

    h_init: Array          # (B, H)
    first_state_given: bool
    pre_x: Array           # (B, P, Dx) right-aligned warmup inputs
    pre_mask: Array        # (B, P) bool
    x_train: Array         # (B, T, Dx)
    a_train: Array         # (B, T, Da)
    reward: Array          # (B, T)
    done: Array            # (B, T) bool
    t_mask: Array          # (B, T) bool
    model_mask: Array      # (B, T) bool
    x_look: Array          # (B, Dx) lookahead inputs
    look_mask: Array       # (B,) bool
    stored_pre_h: Array    # (B, H) stored hidden at the record before the train window
    stored_pre_mask: Array # (B,) bool, false when the window starts the episode
    starts: list           # [(episode_id, t0)] for diagnostics

    @property
    def batch_size(self) -> int:
        return self.h_init.shape[0]

    @property
    def train_len(self) -> int:
        return self.x_train.shape[1]


class ReplayBuffer:
    """Whole-episode ring buffer with uniform segment-start sampling."""

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        hidden_dim: int,
        capacity: int = 1_000_000,
        burn_in: int = 10,
        train_len: int = 15,
        strategy: str = "burn-in",
    ) -> None:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown replay strategy '{strategy}'; expected one of {STRATEGIES}")
        if burn_in < 0 or train_len < 1:
            raise ValueError(f"need burn_in >= 0 and train_len >= 1, got {burn_in}, {train_len}")
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.hidden_dim = hidden_dim
        self.capacity = capacity
        self.burn_in = burn_in if strategy != "stored-state" else 0
        self.train_len = train_len
        self.strategy = strategy
        self.episodes: list[_Episode] = []
        self.total_steps = 0
        self._next_eid = 0
        self._counts_dirty = True
        self._cum_counts = np.zeros(0, dtype=np.int64)

    # -- writing ---------------------------------------------------------

    def append(self, rec: StepRecord) -> None:
        self._validate(rec)
        if not self.episodes or self.episodes[-1].terminated:
            self.episodes.append(
                _Episode(self._next_eid, self.obs_dim, self.action_dim, self.hidden_dim)
            )
            self._next_eid += 1
        self.episodes[-1].append(rec)
        self.total_steps += 1
        self._counts_dirty = True
        while self.total_steps > self.capacity and len(self.episodes) > 1:
            dropped = self.episodes.pop(0)
            self.total_steps -= dropped.n

    def _validate(self, rec: StepRecord) -> None:
        for name, arr, want in (
            ("obs", rec.obs, self.obs_dim),
            ("prev_action", rec.prev_action, self.action_dim),
            ("action", rec.action, self.action_dim),
            ("hidden", rec.hidden, self.hidden_dim),
        ):
            arr = np.asarray(arr)
            if arr.shape != (want,):
                raise ValueError(f"record {name} has shape {arr.shape}, expected ({want},)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"record {name} contains non-finite values")
        if not np.isfinite(rec.reward):
            raise ValueError("record reward is non-finite")

    # -- start enumeration -----------------------------------------------

    def _episode_start_count(self, ep: _Episode) -> int:
        t = self.train_len
        if self.strategy == "episode":
            return 1 if ep.terminated else 0
        if ep.terminated:
            return 1 if ep.n < t else ep.n - t + 1
        if ep.n >= self.burn_in + t:
            return max(ep.n - t, 0)
        return 0

    def segment_starts(self) -> list[tuple[int, int]]:
        """All valid (episode_id, t0) pairs, in storage order."""
        out = []
        for ep in self.episodes:
            for t0 in range(self._episode_start_count(ep)):
                out.append((ep.eid, t0))
        return out

    def n_valid_starts(self) -> int:
        self._refresh_counts()
        return int(self._cum_counts[-1]) if len(self._cum_counts) else 0

    def _refresh_counts(self) -> None:
        if self._counts_dirty:
            self._cum_counts = np.cumsum([self._episode_start_count(ep) for ep in self.episodes])
            self._counts_dirty = False

    # -- segment geometry --------------------------------------------------

    def _segment_plan(self, ep: _Episode, t0: int) -> tuple[int, int, bool, int]:
        """Return (first_record, n_pre, h0_precedes, train_end) for one start."""
        t_end = min(t0 + self.train_len, ep.n)
        if self.strategy == "stored-state":
            return t0, 0, False, t_end
        if self.strategy == "episode":
            return 0, 0, True, ep.n
        if self.strategy == "zero-start":
            first = max(t0 - self.burn_in, 0)
            return first, t0 - first, True, t_end
        # burn-in: anchor at the stored state when the history is long enough
        if self.burn_in == 0:
            return t0, 0, False, t_end
        if t0 >= self.burn_in:
            first = t0 - self.burn_in
            return first, self.burn_in - 1, False, t_end
        return 0, t0, True, t_end

    @property
    def first_state_given(self) -> bool:
        """True when h_init already is the state of train record 0."""
        return self.burn_in == 0 and self.strategy in ("burn-in", "stored-state")

    def make_segment(self, eid: int, t0: int) -> SequenceSegment:
        """Materialize one segment as records; test and diagnostic path."""
        ep = None
        for e in self.episodes:
            if e.eid == eid:
                ep = e
                break
        if ep is None:
            raise KeyError(f"episode {eid} not in buffer")
        if not 0 <= t0 < self._episode_start_count(ep):
            raise IndexError(f"start {t0} out of range for episode {eid}")
        first, n_pre, precedes, t_end = self._segment_plan(ep, t0)
        records = [ep.record(i) for i in range(first, t_end)]
        look = ep.record(t_end) if t_end < ep.n else None
        h0 = np.zeros(self.hidden_dim) if precedes else ep.hidden[first].copy()
        return SequenceSegment(
            records=records,
            h0=h0,
            h0_precedes_first=precedes,
            train_offset=t0 - first,
            lookahead=look,
        )

    # -- batch sampling ----------------------------------------------------

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> SegmentBatch:
        self._refresh_counts()
        total = int(self._cum_counts[-1]) if len(self._cum_counts) else 0
        if total == 0:
            raise RuntimeError("no sampleable segments in the buffer yet")
        flat = rng.integers(0, total, size=batch_size)
        ep_idx = np.searchsorted(self._cum_counts, flat, side="right")
        do, da, hd = self.obs_dim, self.action_dim, self.hidden_dim
        dx = do + da
        bsz = batch_size
        plans = []
        for b in range(bsz):
            ep = self.episodes[int(ep_idx[b])]
            base = self._cum_counts[int(ep_idx[b]) - 1] if ep_idx[b] > 0 else 0
            t0 = int(flat[b] - base)
            plans.append((ep, t0, *self._segment_plan(ep, t0)))

        p_max = max(n_pre for (_, _, _, n_pre, _, _) in plans)
        t_max = max(t_end - t0 for (_, t0, _, _, _, t_end) in plans)

        h_init = np.zeros((bsz, hd))
        pre_x = np.zeros((bsz, p_max, dx))
        pre_mask = np.zeros((bsz, p_max), dtype=bool)
        x_train = np.zeros((bsz, t_max, dx))
        a_train = np.zeros((bsz, t_max, da))
        reward = np.zeros((bsz, t_max))
        done = np.zeros((bsz, t_max), dtype=bool)
        t_mask = np.zeros((bsz, t_max), dtype=bool)
        model_mask = np.zeros((bsz, t_max), dtype=bool)
        x_look = np.zeros((bsz, dx))
        look_mask = np.zeros(bsz, dtype=bool)
        stored_pre_h = np.zeros((bsz, hd))
        stored_pre_mask = np.zeros(bsz, dtype=bool)
        starts = []

        for b, (ep, t0, first, n_pre, precedes, t_end) in enumerate(plans):
            starts.append((ep.eid, t0))
            if precedes:
                pre_lo = first
            else:
                h_init[b] = ep.hidden[first]
                pre_lo = first + 1
            # warmup inputs cover records [pre_lo, t0), right-aligned
            k = t0 - pre_lo
            if k > 0:
                pre_x[b, p_max - k:, :do] = ep.obs[pre_lo:t0]
                pre_x[b, p_max - k:, do:] = ep.prev_action[pre_lo:t0]
                pre_mask[b, p_max - k:] = True
            n_t = t_end - t0
            x_train[b, :n_t, :do] = ep.obs[t0:t_end]
            x_train[b, :n_t, do:] = ep.prev_action[t0:t_end]
            a_train[b, :n_t] = ep.action[t0:t_end]
            reward[b, :n_t] = ep.reward[t0:t_end]
            done[b, :n_t] = ep.done[t0:t_end]
            t_mask[b, :n_t] = True
            model_mask[b, : n_t - 1] = True
            if t_end < ep.n:
                x_look[b, :do] = ep.obs[t_end]
                x_look[b, do:] = ep.prev_action[t_end]
                look_mask[b] = True
                model_mask[b, n_t - 1] = True
            if t0 >= 1:
                stored_pre_h[b] = ep.hidden[t0 - 1]
                stored_pre_mask[b] = True

        return SegmentBatch(
            h_init=h_init,
            first_state_given=self.first_state_given,
            pre_x=pre_x,
            pre_mask=pre_mask,
            x_train=x_train,
            a_train=a_train,
            reward=reward,
            done=done,
            t_mask=t_mask,
            model_mask=model_mask,
            x_look=x_look,
            look_mask=look_mask,
            stored_pre_h=stored_pre_h,
            stored_pre_mask=stored_pre_mask,
            starts=starts,
        )

    def staleness(self, batch: SegmentBatch, step_fn) -> Array:
        """Per-segment distance between the stored pre-window state and its
        re-unroll under the current recurrent weights.

        ``step_fn(x, h) -> h'`` advances a raw (B, Dx) input batch.  Rows with
        no warmup or no stored reference report zero.
        """
        bsz, p_max, _ = batch.pre_x.shape
        h = batch.h_init.copy()
        for t in range(p_max):
            h_new = step_fn(batch.pre_x[:, t], h)
            m = batch.pre_mask[:, t][:, None]
            h = np.where(m, h_new, h)
        has_pre = batch.pre_mask.any(axis=1) & batch.stored_pre_mask
        dist = np.linalg.norm(h - batch.stored_pre_h, axis=1)
        return np.where(has_pre, dist, 0.0)

    # -- persistence -------------------------------------------------------

    def dump(self, path: str | Path) -> None:
        """Write the buffer to a directory: manifest.json plus one flat
        little-endian 32-bit array per field (done flags as bytes)."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        cols = {
            "obs": np.concatenate([e.obs[: e.n] for e in self.episodes], axis=0)
            if self.episodes
            else np.zeros((0, self.obs_dim)),
            "prev_action": np.concatenate([e.prev_action[: e.n] for e in self.episodes], axis=0)
            if self.episodes
            else np.zeros((0, self.action_dim)),
            "action": np.concatenate([e.action[: e.n] for e in self.episodes], axis=0)
            if self.episodes
            else np.zeros((0, self.action_dim)),
            "reward": np.concatenate([e.reward[: e.n] for e in self.episodes])
            if self.episodes
            else np.zeros(0),
            "done": np.concatenate([e.done[: e.n] for e in self.episodes])
            if self.episodes
            else np.zeros(0, dtype=bool),
            "hidden": np.concatenate([e.hidden[: e.n] for e in self.episodes], axis=0)
            if self.episodes
            else np.zeros((0, self.hidden_dim)),
        }
        manifest = {
            "version": 1,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "hidden_dim": self.hidden_dim,
            "capacity": self.capacity,
            "burn_in": self.burn_in,
            "train_len": self.train_len,
            "strategy": self.strategy,
            "next_eid": self._next_eid,
            "episodes": [
                {"eid": e.eid, "n": e.n, "terminated": e.terminated} for e in self.episodes
            ],
            "arrays": {},
        }
        for name, arr in cols.items():
            arr = np.ascontiguousarray(arr)
            fname = f"{name}.bin"
            arr.astype("<f4" if arr.dtype != bool else "u1").tofile(path / fname)
            manifest["arrays"][name] = {
                "file": fname,
                "shape": list(arr.shape),
                "dtype": "f4" if arr.dtype != bool else "u1",
            }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        buf = cls(
            obs_dim=manifest["obs_dim"],
            action_dim=manifest["action_dim"],
            hidden_dim=manifest["hidden_dim"],
            capacity=manifest["capacity"],
            burn_in=manifest["burn_in"],
            train_len=manifest["train_len"],
            strategy=manifest["strategy"],
        )
        cols = {}
        for name, meta in manifest["arrays"].items():
            dtype = "<f4" if meta["dtype"] == "f4" else "u1"
            arr = np.fromfile(path / meta["file"], dtype=dtype).reshape(meta["shape"])
            cols[name] = arr.astype(bool) if meta["dtype"] == "u1" else arr.astype(np.float64)
        offset = 0
        for meta in manifest["episodes"]:
            n = meta["n"]
            ep = _Episode(meta["eid"], buf.obs_dim, buf.action_dim, buf.hidden_dim, cap=max(n, 1))
            ep.obs[:n] = cols["obs"][offset : offset + n]
            ep.prev_action[:n] = cols["prev_action"][offset : offset + n]
            ep.action[:n] = cols["action"][offset : offset + n]
            ep.reward[:n] = cols["reward"][offset : offset + n]
            ep.done[:n] = cols["done"][offset : offset + n]
            ep.hidden[:n] = cols["hidden"][offset : offset + n]
            ep.n = n
            ep.terminated = meta["terminated"]
            buf.episodes.append(ep)
            buf.total_steps += n
            offset += n
        buf._next_eid = manifest["next_eid"]
        buf._counts_dirty = True
        return buf
