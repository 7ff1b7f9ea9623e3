"""Trajectory data: synthetic signalized-intersection records, CSV logs,
2 Hz resampling, sliding-window samples, and record-level splits.

The generator stands in for a real drone/camera dataset.  It simulates a
four-arm intersection with stop-and-go vehicles obeying a two-phase signal,
noisy pedestrian crossings, and a configurable share of "hard" agents that
keep performing abrupt maneuvers (swerves, emergency stops, red-light runs).
Those agents are what give an error-estimation module something to learn:
their constant-velocity extrapolation error is far above the compliant
traffic around them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .rng import Rng

FRAME_RATE_HZ = 2.0
FRAME_DT = 1.0 / FRAME_RATE_HZ


class DataError(ValueError):
    """Malformed input data (CSV schema, frame ordering, empty corpus)."""


class AgentType(str, Enum):
    SMALL_VEHICLE = "small_vehicle"
    BIG_VEHICLE = "big_vehicle"
    PEDESTRIAN = "pedestrian"
    TWO_WHEELER = "two_wheeler"


AGENT_TYPES = list(AgentType)


@dataclass
class Track:
    """One agent's observed states; frames are strictly increasing."""

    frames: np.ndarray  # (L,) int
    times: np.ndarray  # (L,) seconds
    xy: np.ndarray  # (L, 2) meters
    agent_type: AgentType
    hard: bool = False  # generator metadata; False for loaded logs


@dataclass
class Record:
    record_id: str
    tracks: dict[str, Track]
    rate_hz: float = FRAME_RATE_HZ

    def frame_span(self) -> int:
        if not self.tracks:
            return 0
        return int(max(t.frames[-1] for t in self.tracks.values() if len(t.frames)) + 1)


@dataclass
class Sample:
    """One prediction task: a window with full-presence agents only."""

    record_id: str
    start_frame: int
    track_ids: list[str]
    types: list[AgentType]
    hard: np.ndarray  # (m,) bool
    hist: np.ndarray  # (m, hist_len, 2)
    fut: np.ndarray  # (m, fut_len, 2)
    hist_mask: np.ndarray  # (m, hist_len) bool, all True under full presence
    fut_mask: np.ndarray  # (m, fut_len) bool

    @property
    def n_agents(self) -> int:
        return len(self.track_ids)


@dataclass
class GeneratorConfig:
    seed: int = 0
    records: int = 23
    duration_s: float = 60.0
    agents_per_record: int = 14
    type_mix: tuple[float, float, float, float] = (0.55, 0.10, 0.20, 0.15)
    hard_fraction: float = 0.3
    noise_sigma: float = 0.05
    arm_length: float = 40.0
    lane_offset: float = 1.75
    signal_cycle_s: float = 40.0

    def validate(self) -> None:
        if self.records < 1 or self.agents_per_record < 1:
            raise DataError("generator: need at least one record and one agent")
        if self.duration_s <= 0:
            raise DataError("generator: duration must be positive")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise DataError("generator: hard_fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise DataError("generator: noise sigma must be >= 0")
        if min(self.type_mix) < 0 or sum(self.type_mix) <= 0:
            raise DataError("generator: type_mix must be non-negative with positive sum")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

_CRUISE = {
    AgentType.SMALL_VEHICLE: 8.0,
    AgentType.BIG_VEHICLE: 6.0,
    AgentType.TWO_WHEELER: 4.0,
}
_ACCEL = 1.5
_DECEL = 2.5
_HARD_DECEL = 8.0
_ANTICIPATE = 1.2  # anticipatory braking toward the stop line
_LATERAL_ACCEL = 1.5


def _rotation(k: int) -> np.ndarray:
    """Rotation mapping the from-south frame to approach k (cw quarter turns)."""
    phi = -0.5 * math.pi * k
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def _arc(center: np.ndarray, radius: float, theta0: float, theta1: float, n: int) -> np.ndarray:
    theta = np.linspace(theta0, theta1, n)
    return center + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _build_path(approach: int, maneuver: str, lane: float, half_box: float, arm: float):
    """Polyline and per-point arclength for one approach/maneuver pair."""
    start = np.array([lane, -(half_box + arm)])
    entry = np.array([lane, -half_box])
    if maneuver == "straight":
        pts = np.stack([start, entry, np.array([lane, half_box + arm])])
    elif maneuver == "right":
        r = half_box - lane
        center = np.array([lane + r, -half_box])
        arc = _arc(center, r, math.pi, 0.5 * math.pi, 24)
        exit_pt = np.array([half_box + arm, -lane])
        pts = np.concatenate([start[None], arc, exit_pt[None]])
    elif maneuver == "left":
        r = half_box + lane
        center = np.array([lane - r, -half_box])
        arc = _arc(center, r, 0.0, 0.5 * math.pi, 24)
        exit_pt = np.array([-(half_box + arm), lane])
        pts = np.concatenate([start[None], arc, exit_pt[None]])
    else:
        raise ValueError(f"unknown maneuver {maneuver}")
    pts = pts @ _rotation(approach).T
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return pts, s


def _path_point(pts: np.ndarray, s_grid: np.ndarray, s: float) -> np.ndarray:
    s = min(max(s, 0.0), s_grid[-1])
    return np.array([np.interp(s, s_grid, pts[:, 0]), np.interp(s, s_grid, pts[:, 1])])


def _path_heading(pts: np.ndarray, s_grid: np.ndarray, s: float) -> np.ndarray:
    d = _path_point(pts, s_grid, s + 0.25) - _path_point(pts, s_grid, s - 0.25)
    norm = np.linalg.norm(d)
    return d / norm if norm > 0 else np.array([0.0, 1.0])


# ---------------------------------------------------------------------------
# agent simulation
# ---------------------------------------------------------------------------


def _simulate_vehicle(rng: Rng, cfg: GeneratorConfig, agent_type: AgentType, hard: bool,
                      spawn_frame: int, total_frames: int) -> np.ndarray:
    lane, arm = cfg.lane_offset, cfg.arm_length
    half_box = 2.0 * lane + 2.5
    bound = arm + half_box + 5.0
    approach = rng.randint(4)
    maneuver = ("straight", "left", "right")[rng.choice(np.array([0.74, 0.13, 0.13]))]
    pts, s_grid = _build_path(approach, maneuver, lane, half_box, arm)
    total_len = s_grid[-1]
    stop_s = arm  # arclength of the stop line
    arc_zone = (arm - 4.0, total_len - arm + 2.0)
    turn_speed = math.sqrt(_LATERAL_ACCEL * (half_box - lane if maneuver == "right" else half_box + lane))
    ns_approach = approach % 2 == 0

    v0 = _CRUISE[agent_type] * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
    v = v0
    s = 0.0
    free_pos: np.ndarray | None = None
    free_dir = np.array([0.0, 1.0])
    stopped_until = -1.0
    boost_until = -1.0
    ignore_signal = False
    next_event = spawn_frame * FRAME_DT + rng.uniform(1.0, 4.0) if hard else math.inf

    out = []
    for frame in range(spawn_frame, total_frames):
        t = frame * FRAME_DT
        pos = free_pos if free_pos is not None else _path_point(pts, s_grid, s)
        out.append(pos.copy())

        if hard and t >= next_event:
            kind = rng.choice(np.array([0.45, 0.35, 0.20]))
            if kind == 0:  # sudden swerve: leave the lane on a rotated straight course
                heading = free_dir if free_pos is not None else _path_heading(pts, s_grid, s)
                angle = rng.uniform(70.0, 160.0) * (1 if rng.randint(2) else -1) * math.pi / 180.0
                c, sn = math.cos(angle), math.sin(angle)
                free_dir = np.array([c * heading[0] - sn * heading[1], sn * heading[0] + c * heading[1]])
                free_pos = pos.copy()
                v = max(v, v0)
            elif kind == 1:  # emergency stop, then resume
                stopped_until = t + rng.uniform(1.0, 2.5)
            else:  # red-light run / aggressive burst
                ignore_signal = True
                boost_until = t + rng.uniform(2.0, 3.5)
            next_event = t + rng.uniform(2.0, 5.0)

        if t < stopped_until:
            v_cmd, dec_cap, acc_cap = 0.0, _HARD_DECEL, _ACCEL
        elif t < boost_until:
            v_cmd, dec_cap, acc_cap = 1.4 * v0, _DECEL, 4.0
        else:
            v_cmd, dec_cap, acc_cap = v0, _DECEL, _ACCEL
            if free_pos is None:
                if maneuver != "straight" and arc_zone[0] < s < arc_zone[1]:
                    v_cmd = min(v_cmd, turn_speed)
                ns_green = (t % cfg.signal_cycle_s) < 0.5 * cfg.signal_cycle_s
                green = ns_green if ns_approach else not ns_green
                if not green and not ignore_signal and s < stop_s:
                    v_cmd = min(v_cmd, math.sqrt(2.0 * _ANTICIPATE * max(stop_s - s - 0.5, 0.0)))

        v = max(0.0, v + float(np.clip(v_cmd - v, -dec_cap * FRAME_DT, acc_cap * FRAME_DT)))
        if free_pos is None:
            s += v * FRAME_DT
            if s >= total_len:
                break
        else:
            free_pos = free_pos + v * FRAME_DT * free_dir
            if np.abs(free_pos).max() > bound:
                break
    return np.asarray(out)


def _simulate_pedestrian(rng: Rng, cfg: GeneratorConfig, hard: bool,
                         spawn_frame: int, total_frames: int) -> np.ndarray:
    lane = cfg.lane_offset
    half_box = 2.0 * lane + 2.5
    edge = half_box + 2.5
    vertical = rng.randint(2) == 0  # crossing direction
    side = 1.0 if rng.randint(2) == 0 else -1.0
    sign = 1.0 if rng.randint(2) == 0 else -1.0
    if vertical:
        pos = np.array([side * (half_box + 1.2), -sign * edge])
        base_angle = 0.5 * math.pi * sign
    else:
        pos = np.array([-sign * edge, side * (half_box + 1.2)])
        base_angle = 0.0 if sign > 0 else math.pi
    speed = 1.3 + rng.uniform(-0.2, 0.3)
    boost_until = -1.0
    next_event = spawn_frame * FRAME_DT + rng.uniform(1.5, 5.0) if hard else math.inf

    out = []
    for frame in range(spawn_frame, total_frames):
        t = frame * FRAME_DT
        out.append(pos.copy())
        if hard and t >= next_event:
            if rng.randint(2) == 0:  # reversal / sharp turn
                base_angle += math.pi + rng.uniform(-0.8, 0.8)
            else:  # dash
                boost_until = t + rng.uniform(1.0, 2.0)
            next_event = t + rng.uniform(2.0, 5.0)
        angle = base_angle + rng.normal(0.0, 0.12)
        v = speed * (2.6 if t < boost_until else 1.0)
        pos = pos + v * FRAME_DT * np.array([math.cos(angle), math.sin(angle)])
        if np.abs(pos).max() > edge + cfg.arm_length:
            break
    return np.asarray(out)


def generate(config: GeneratorConfig) -> list[Record]:
    """Seeded synthetic corpus; identical config and seed give identical records."""
    config.validate()
    root = Rng(config.seed)
    total_frames = int(round(config.duration_s * FRAME_RATE_HZ))
    min_life = 16  # frames; keeps most agents window-eligible
    records = []
    for rec_idx in range(config.records):
        rec_rng = root.spawn(rec_idx)
        n = config.agents_per_record
        n_hard = int(math.floor(config.hard_fraction * n + 0.5))
        order = rec_rng.permutation(n)
        hard_flags = [False] * n
        for i in order[:n_hard]:
            hard_flags[i] = True
        tracks: dict[str, Track] = {}
        for a_idx in range(n):
            a_rng = rec_rng.spawn(a_idx)
            agent_type = AGENT_TYPES[a_rng.choice(np.array(config.type_mix))]
            spawn = a_rng.randint(max(1, total_frames - min_life))
            if agent_type is AgentType.PEDESTRIAN:
                xy = _simulate_pedestrian(a_rng, config, hard_flags[a_idx], spawn, total_frames)
            else:
                xy = _simulate_vehicle(a_rng, config, agent_type, hard_flags[a_idx], spawn, total_frames)
            if len(xy) < 2:
                continue
            if config.noise_sigma > 0:
                xy = xy + a_rng.normal(0.0, config.noise_sigma, size=xy.shape)
            frames = np.arange(spawn, spawn + len(xy), dtype=np.int64)
            tracks[f"a{a_idx:03d}"] = Track(
                frames=frames,
                times=frames * FRAME_DT,
                xy=xy,
                agent_type=agent_type,
                hard=hard_flags[a_idx],
            )
        records.append(Record(record_id=f"rec{rec_idx:03d}", tracks=tracks))
    return records


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------

CSV_HEADER = ["record_id", "track_id", "frame", "timestamp_ms", "agent_type", "x", "y"]


def load_csv(path: str | Path) -> list[Record]:
    """Load trajectory logs in the documented schema; errors carry line numbers."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"load_csv: no such file: {path}")
    rows: dict[str, dict[str, list[tuple[int, float, float, float, int]]]] = {}
    types: dict[tuple[str, str], AgentType] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"load_csv: {path}: empty file, expected header {CSV_HEADER}") from None
        if header != CSV_HEADER:
            raise DataError(f"load_csv: {path}: bad header {header}, expected {CSV_HEADER}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"load_csv: {path}:{line_no}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            rec_id, track_id, frame_s, ts_s, type_s, x_s, y_s = row
            try:
                frame = int(frame_s)
                ts_ms = float(ts_s)
                x = float(x_s)
                y = float(y_s)
            except ValueError:
                raise DataError(f"load_csv: {path}:{line_no}: unparsable numeric field") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"load_csv: {path}:{line_no}: non-finite coordinate")
            try:
                agent_type = AgentType(type_s)
            except ValueError:
                raise DataError(f"load_csv: {path}:{line_no}: unknown agent_type {type_s!r}") from None
            types[(rec_id, track_id)] = agent_type
            rows.setdefault(rec_id, {}).setdefault(track_id, []).append((frame, ts_ms / 1000.0, x, y, line_no))

    records = []
    for rec_id in sorted(rows):
        tracks = {}
        for track_id in sorted(rows[rec_id]):
            pts = sorted(rows[rec_id][track_id], key=lambda p: p[0])
            frames = np.array([p[0] for p in pts], dtype=np.int64)
            repeats = np.nonzero(np.diff(frames) <= 0)[0]
            if len(repeats):
                bad_line = pts[int(repeats[0]) + 1][4]
                raise DataError(
                    f"load_csv: {path}:{bad_line}: non-increasing frame in track {track_id!r} of record {rec_id!r}"
                )
            tracks[track_id] = Track(
                frames=frames,
                times=np.array([p[1] for p in pts]),
                xy=np.array([[p[2], p[3]] for p in pts]),
                agent_type=types[(rec_id, track_id)],
            )
        records.append(Record(record_id=rec_id, tracks=tracks))
    return records


def save_csv(records: list[Record], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for record in records:
            for track_id in sorted(record.tracks):
                track = record.tracks[track_id]
                for frame, time_s, (x, y) in zip(track.frames, track.times, track.xy):
                    writer.writerow([
                        record.record_id,
                        track_id,
                        int(frame),
                        int(round(time_s * 1000.0)),
                        track.agent_type.value,
                        f"{x:.17g}",
                        f"{y:.17g}",
                    ])


# ---------------------------------------------------------------------------
# resampling, windowing, splitting
# ---------------------------------------------------------------------------


def resample_2hz(record: Record, native_rate_hz: float) -> Record:
    """Keep the sample nearest each 0.5 s grid tick of every track."""
    if native_rate_hz < FRAME_RATE_HZ:
        raise DataError(f"resample_2hz: native rate {native_rate_hz} Hz is below {FRAME_RATE_HZ} Hz")
    new_tracks = {}
    for track_id, track in record.tracks.items():
        if len(track.frames) == 0:
            new_tracks[track_id] = track
            continue
        times = track.times
        first = math.ceil(round(times[0] / FRAME_DT, 9))
        last = math.floor(round(times[-1] / FRAME_DT, 9))
        keep_frames, keep_idx = [], []
        used = set()
        for k in range(first, last + 1):
            tick = k * FRAME_DT
            j = int(np.searchsorted(times, tick))
            candidates = [c for c in (j - 1, j) if 0 <= c < len(times)]
            best = min(candidates, key=lambda c: (abs(times[c] - tick), c))
            if best in used:
                continue
            used.add(best)
            keep_frames.append(k)
            keep_idx.append(best)
        new_tracks[track_id] = Track(
            frames=np.array(keep_frames, dtype=np.int64),
            times=np.array(keep_frames, dtype=np.float64) * FRAME_DT,
            xy=track.xy[keep_idx].copy() if keep_idx else track.xy[:0].copy(),
            agent_type=track.agent_type,
            hard=track.hard,
        )
    return Record(record_id=record.record_id, tracks=new_tracks, rate_hz=FRAME_RATE_HZ)


def window_samples(record: Record, hist_len: int = 6, fut_len: int = 6, stride: int = 1) -> list[Sample]:
    """Sliding windows; an agent joins a sample only with full presence."""
    span = hist_len + fut_len
    total = record.frame_span()
    samples = []
    track_items = sorted(record.tracks.items())
    for start in range(0, max(0, total - span + 1), stride):
        ids, types, hard, hist, fut = [], [], [], [], []
        for track_id, track in track_items:
            if len(track.frames) == 0:
                continue
            offset = start - int(track.frames[0])
            if offset < 0 or offset + span > len(track.frames):
                continue
            window = track.frames[offset:offset + span]
            if window[-1] - window[0] != span - 1:  # gap inside the window
                continue
            ids.append(track_id)
            types.append(track.agent_type)
            hard.append(track.hard)
            hist.append(track.xy[offset:offset + hist_len])
            fut.append(track.xy[offset + hist_len:offset + span])
        if not ids:
            continue
        m = len(ids)
        samples.append(Sample(
            record_id=record.record_id,
            start_frame=start,
            track_ids=ids,
            types=types,
            hard=np.array(hard, dtype=bool),
            hist=np.array(hist),
            fut=np.array(fut),
            hist_mask=np.ones((m, hist_len), dtype=bool),
            fut_mask=np.ones((m, fut_len), dtype=bool),
        ))
    return samples


def split_by_record(records: list[Record], train_fraction: float, rng: Rng) -> tuple[list[Record], list[Record]]:
    """Record-granularity split; no record ever contributes to both sides."""
    if len(records) < 2:
        raise DataError(f"split_by_record: need at least 2 records, got {len(records)}")
    order = rng.permutation(len(records))
    n_train = int(math.floor(train_fraction * len(records) + 0.5))
    n_train = min(max(n_train, 1), len(records) - 1)
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    return [records[i] for i in train_idx], [records[i] for i in test_idx]


def constant_velocity_ade(sample: Sample) -> np.ndarray:
    """Per-agent ADE of last-velocity extrapolation; a difficulty probe."""
    anchor = sample.hist[:, -1]
    if sample.hist.shape[1] >= 2:
        vel = sample.hist[:, -1] - sample.hist[:, -2]
    else:
        vel = np.zeros_like(anchor)
    steps = np.arange(1, sample.fut.shape[1] + 1)
    pred = anchor[:, None, :] + steps[None, :, None] * vel[:, None, :]
    return np.linalg.norm(pred - sample.fut, axis=2).mean(axis=1)
