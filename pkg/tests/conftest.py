from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from satp import autodiff as ad
from satp.config import RunConfig
from satp.data import AgentType, Record, Track
from satp.rng import Rng

logging.getLogger("satp").setLevel(logging.ERROR)


def finite_difference_grads(fn, arrays: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of a scalar-valued tensor function."""
    grads = []
    for ti, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = g.ravel()
        for k in range(arr.size):
            pert = [a.copy() for a in arrays]
            pert[ti].ravel()[k] += h
            up = fn(*[ad.Tensor(p) for p in pert]).item()
            pert[ti].ravel()[k] -= 2 * h
            down = fn(*[ad.Tensor(p) for p in pert]).item()
            flat[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_grad_rel_error(fn, arrays: list[np.ndarray], h: float = 1e-6) -> float:
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(fn(*tensors))
    fd = finite_difference_grads(fn, arrays, h)
    worst = 0.0
    for t, g in zip(tensors, fd):
        analytic = t.grad if t.grad is not None else np.zeros_like(g)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(g)))
        worst = max(worst, float((np.abs(analytic - g) / denom).max()))
    return worst


def straight_track(start, velocity, frames: int, agent_type=AgentType.SMALL_VEHICLE,
                   first_frame: int = 0) -> Track:
    t = np.arange(frames)
    xy = np.asarray(start, dtype=float) + 0.5 * np.asarray(velocity, dtype=float) * t[:, None]
    idx = np.arange(first_frame, first_frame + frames, dtype=np.int64)
    return Track(frames=idx, times=idx * 0.5, xy=xy, agent_type=agent_type)


def constant_velocity_records(seed: int, n_records: int = 6, n_agents: int = 8,
                              frames: int = 40) -> list[Record]:
    """Noiseless straight-line corpus; every trajectory is exactly CV."""
    rng = Rng(seed)
    records = []
    for r in range(n_records):
        tracks = {}
        for a in range(n_agents):
            speed = rng.uniform(1.0, 9.0)
            angle = rng.uniform(0.0, 2.0 * math.pi)
            start = (rng.uniform(-30, 30), rng.uniform(-30, 30))
            velocity = (speed * math.cos(angle), speed * math.sin(angle))
            tracks[f"a{a}"] = straight_track(start, velocity, frames)
        records.append(Record(record_id=f"cv{r}", tracks=tracks))
    return records


def tiny_config(seed: int = 7) -> RunConfig:
    """Small synthetic run used by fast pipeline/CLI tests."""
    cfg = RunConfig()
    cfg.seed = seed
    cfg.data.synthetic.records = 4
    cfg.data.synthetic.duration_s = 30.0
    cfg.data.synthetic.agents_per_record = 8
    cfg.model.n_max = 6
    cfg.model.feat_channels = 8
    cfg.model.hidden = 8
    cfg.selfaware.hidden = 8
    cfg.train.train_fraction = 0.5
    cfg.train.stage1_epochs = 2
    cfg.train.stage2_epochs = 2
    cfg.train.joint_epochs = 2
    cfg.train.ablation_epochs = 1
    cfg.validate()
    return cfg


def desk_config(seed: int = 0) -> RunConfig:
    """The desk-scale profile used by the acceptance suite."""
    cfg = RunConfig()
    cfg.seed = seed
    cfg.data.synthetic.records = 16
    cfg.data.synthetic.duration_s = 50.0
    cfg.data.synthetic.agents_per_record = 12
    cfg.data.synthetic.hard_fraction = 0.3
    cfg.model.n_max = 8
    cfg.model.feat_channels = 16
    cfg.model.hidden = 16
    cfg.selfaware.hidden = 16
    cfg.train.train_fraction = 0.7
    cfg.train.ablation_epochs = 6
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full desk-scale pipeline run shared by the acceptance criteria."""
    import time

    from satp.pipeline import evaluate_method, prepare_dataset, train_stage1, train_stage2

    out = tmp_path_factory.mktemp("desk_run")
    cfg = desk_config(seed=0)
    dataset = prepare_dataset(cfg)
    start = time.perf_counter()
    model, stage1 = train_stage1(cfg, dataset, out / "predictor.ckpt")
    sa, stage2 = train_stage2(cfg, dataset, out / "predictor.ckpt", out / "selfaware.ckpt")
    train_seconds = time.perf_counter() - start
    report = evaluate_method(cfg, dataset, "ours", out)
    return {
        "config": cfg,
        "dataset": dataset,
        "out": out,
        "model": model,
        "sa": sa,
        "report": report,
        "train_seconds": train_seconds,
        "stage1": stage1,
        "stage2": stage2,
    }
