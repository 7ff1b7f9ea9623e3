"""Training and evaluation orchestration.

Stage 1 trains the trajectory predictor on its own loss.  Stage 2 freezes it,
replays the training set through it once to collect graph features and
predictions, and fits the self-awareness module against on-the-fly error
labels.  The joint (single-stage, weighted-loss) trainer exists as the
ablation comparator, along with the four baseline trainings and the full
ablation matrix.

Training merges each mini-batch of scenes into one block-diagonal super-scene
(see merge_scenes): agents of different scenes cannot interact through the
graph, but batch normalization sees real batch statistics and the array math
amortizes.  Evaluation always runs scene by scene.

All randomness flows from one master seed through named child streams, so a
fixed seed reproduces every checkpoint and report byte for byte.
"""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .baselines import (
    HistoryDecoder,
    ManeuverHead,
    ae_loss,
    ae_reconstruct,
    ape_fpe,
    cross_entropy,
    ensemble_predict,
    maneuver_labels,
    mc_dropout_predict,
    mu_forward,
    nmap,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DataError, Sample, generate, load_csv, split_by_record, window_samples
from .evaluation import (
    ScoredSample,
    aucoc,
    aucoc_optimal,
    aucoc_random,
    count_parameters,
    cutoff_curve,
    default_grid,
    per_moment_report,
    per_type_report,
    sas,
    time_per_frame,
)
from .optim import Adam, ParameterSet, step_lr
from .predictor import (
    FixedGraph,
    PredictedTrajectories,
    PredictorConfig,
    SceneTensor,
    TrajectoryPredictor,
    build_scene,
    merge_scenes,
    per_sample_weights,
    scene_truth,
    tp_loss,
)
from .reportio import write_curve_csv, write_json
from .rng import Rng
from .selfaware import (
    Estimator,
    Fusion,
    LabelForm,
    SaConfig,
    SelfAwareness,
    error_labels,
    integrate_diagnostics,
    taped_error_labels,
)

logger = logging.getLogger("satp")

METHODS = ("ours", "mu_nmap", "mu_entropy", "mc_dropout", "ensemble", "ae")

# child-stream indices off the master seed; never reuse one for two purposes
_STREAM_DATA = 1
_STREAM_SPLIT = 2
_STREAM_VAL = 3
_STREAM_PREDICTOR = 10
_STREAM_STAGE1_ORDER = 11
_STREAM_SA = 20
_STREAM_STAGE2_ORDER = 21
_STREAM_JOINT = 25
_STREAM_MU = 30
_STREAM_DROPOUT = 35
_STREAM_ENSEMBLE = 40  # members use 40, 42, ... plus the +1 dropout stream each
_STREAM_EVAL = 50
_STREAM_AE = 55
_STREAM_ABLATION = 60

_VAL_CHUNK = 64


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; message carries stage, epoch and batch."""


def worker_count() -> int:
    raw = os.environ.get("SATP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def params_digest(*param_sets: ParameterSet) -> str:
    """Bit-level hash of every tensor, in name order."""
    h = hashlib.sha256()
    for ps in param_sets:
        for name, tensor in ps.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    name: str
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    train_scenes: list[tuple[SceneTensor, FixedGraph]]
    val_scenes: list[tuple[SceneTensor, FixedGraph]]
    test_scenes: list[tuple[SceneTensor, FixedGraph]]


def prepare_dataset(config: RunConfig) -> Dataset:
    master = Rng(config.seed)
    if config.data.source == "synthetic":
        gen_cfg = replace(config.data.synthetic, seed=master.spawn(_STREAM_DATA).seed)
        records = generate(gen_cfg)
        name = "synthetic"
    else:
        records = []
        for path in config.data.csv_paths:
            records.extend(load_csv(path))
        name = "csv"
    if not records or all(not r.tracks for r in records):
        raise DataError("prepare_dataset: no records with tracks")

    train_records, test_records = split_by_record(
        records, config.train.train_fraction, master.spawn(_STREAM_SPLIT))
    hist_len, fut_len = config.model.hist_len, config.model.fut_len
    stride = config.train.window_stride
    train_all = [s for r in train_records for s in window_samples(r, hist_len, fut_len, stride)]
    test = [s for r in test_records for s in window_samples(r, hist_len, fut_len, stride)]
    if not train_all or not test:
        raise DataError(
            f"prepare_dataset: empty split (train {len(train_all)}, test {len(test)} samples)")

    order = master.spawn(_STREAM_VAL).permutation(len(train_all))
    n_val = int(len(train_all) * config.train.val_fraction)
    val_idx = set(order[:n_val])
    train = [train_all[i] for i in range(len(train_all)) if i not in val_idx]
    val = [train_all[i] for i in sorted(val_idx)]
    if not train:
        raise DataError("prepare_dataset: validation carve-out emptied the training set")

    def scenes(samples):
        return [build_scene(s, config.model.n_max, config.model.close_distance) for s in samples]

    return Dataset(
        name=name,
        train=train, val=val, test=test,
        train_scenes=scenes(train), val_scenes=scenes(val), test_scenes=scenes(test),
    )


def predictor_config(config: RunConfig, *, dropout: float = 0.0, maneuvers: int = 0) -> PredictorConfig:
    m = config.model
    return PredictorConfig(
        feat_channels=m.feat_channels, blocks=m.blocks, kernel=m.kernel, hidden=m.hidden,
        hist_len=m.hist_len, fut_len=m.fut_len, dropout=dropout, maneuvers=maneuvers)


def _chunks(n: int, size: int) -> list[list[int]]:
    return [list(range(i, min(i + size, n))) for i in range(0, n, size)]


# ---------------------------------------------------------------------------
# generic epoch loop over merged batches
# ---------------------------------------------------------------------------


def _run_training(
    *,
    name: str,
    param_sets: list[ParameterSet],
    buffers: dict[str, np.ndarray],
    batch_loss: "callable",
    n_train: int,
    val_loss: "callable",
    epochs: int,
    config: RunConfig,
    order_rng: Rng,
) -> dict:
    """Adam + StepLR epochs with best-validation checkpointing in memory."""
    optimizer = Adam(param_sets, lr=config.train.lr)
    best = {
        "val": val_loss(),
        "epoch": -1,
        "params": [ps.snapshot() for ps in param_sets],
        "buffers": {k: v.copy() for k, v in buffers.items()},
    }
    history = []
    batch_size = max(1, config.train.batch_size)
    for epoch in range(epochs):
        optimizer.lr = step_lr(epoch, config.train.lr, config.train.step_size, config.train.gamma)
        order = order_rng.permutation(n_train)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n_train, batch_size):
            indices = order[start:start + batch_size]
            optimizer.zero_grad()
            try:
                loss = batch_loss(indices)
                ad.backward(loss)
                optimizer.step()
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"{name}: diverged at epoch {epoch}, batch {start // batch_size}: {exc}") from exc
            epoch_loss += loss.item()
            n_batches += 1
        current_val = val_loss()
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(1, n_batches),
                        "val_loss": current_val})
        logger.info("%s epoch %d: train %.4f val %.4f",
                    name, epoch, epoch_loss / max(1, n_batches), current_val)
        if current_val < best["val"]:
            best = {
                "val": current_val,
                "epoch": epoch,
                "params": [ps.snapshot() for ps in param_sets],
                "buffers": {k: v.copy() for k, v in buffers.items()},
            }
    for ps, snap in zip(param_sets, best["params"]):
        ps.load_arrays(snap)
    for key, value in best["buffers"].items():
        buffers[key][...] = value
    return {"best_val": best["val"], "best_epoch": best["epoch"], "history": history}


class _MergedBatcher:
    """Merges scene batches on demand, with slot-ordered truths precomputed."""

    def __init__(self, samples: list[Sample], scenes: list[tuple[SceneTensor, FixedGraph]]):
        self.samples = samples
        self.scenes = scenes
        self.truths = [scene_truth(s, scene) for s, (scene, _) in zip(samples, scenes)]

    def merge(self, indices) -> tuple[SceneTensor, FixedGraph, list[slice], np.ndarray]:
        scene, graph, slices = merge_scenes([self.scenes[i] for i in indices])
        truth = np.concatenate(
            [self.truths[i][:sl.stop - sl.start] for i, sl in zip(indices, slices)], axis=0)
        return scene, graph, slices, truth


def _sliced_tp_loss(pred: PredictedTrajectories, truth: np.ndarray, slices: list[slice]) -> Tensor:
    dists = ad.l2_norm(ad.sub(pred.positions, ad.constant(truth)))
    w = per_sample_weights(slices, truth.shape[0], truth.shape[1])
    return ad.reduce_sum(ad.mul(dists, ad.constant(w)))


# ---------------------------------------------------------------------------
# stage 1: the trajectory predictor
# ---------------------------------------------------------------------------


def train_stage1(config: RunConfig, dataset: Dataset, out_path=None,
                 *, epochs: int | None = None,
                 seed_stream: int = _STREAM_PREDICTOR) -> tuple[TrajectoryPredictor, dict]:
    master = Rng(config.seed)
    model = TrajectoryPredictor(predictor_config(config), master.spawn(seed_stream))
    dropout_rng = master.spawn(seed_stream + 1)
    train_b = _MergedBatcher(dataset.train, dataset.train_scenes)
    val_b = _MergedBatcher(dataset.val, dataset.val_scenes)

    def batch_loss(indices) -> Tensor:
        scene, graph, slices, truth = train_b.merge(indices)
        rng = dropout_rng if model.cfg.dropout > 0 else None
        _, pred = model.forward(scene, graph, training=True, dropout_rng=rng)
        return _sliced_tp_loss(pred, truth, slices)

    def val_loss() -> float:
        if not dataset.val:
            return float("inf")
        total = 0.0
        with ad.no_grad():
            for indices in _chunks(len(dataset.val), _VAL_CHUNK):
                scene, graph, slices, truth = val_b.merge(indices)
                _, pred = model.forward(scene, graph, training=False)
                total += _sliced_tp_loss(pred, truth, slices).item() * len(indices)
        return total / len(dataset.val)

    result = _run_training(
        name="stage1", param_sets=[model.params], buffers=model.buffers,
        batch_loss=batch_loss, n_train=len(dataset.train), val_loss=val_loss,
        epochs=config.train.stage1_epochs if epochs is None else epochs,
        config=config, order_rng=master.spawn(_STREAM_STAGE1_ORDER))
    if out_path is not None:
        save_checkpoint(out_path, model.params.state_arrays(), model.buffers, {
            "config_digest": config.digest(), "stage": "predictor",
            "seed": config.seed, "epoch": result["best_epoch"], "val_loss": result["best_val"]})
    return model, result


def load_predictor(config: RunConfig, path, *, dropout: float = 0.0, maneuvers: int = 0,
                   force: bool = False) -> tuple[TrajectoryPredictor, dict]:
    params, buffers, meta = load_checkpoint(path, expected_digest=config.digest(), force=force)
    model = TrajectoryPredictor(predictor_config(config, dropout=dropout, maneuvers=maneuvers), Rng(0))
    model.params.load_arrays(params)
    for key in model.buffers:
        if key in buffers:
            model.buffers[key][...] = buffers[key]
    return model, meta


# ---------------------------------------------------------------------------
# stage 2: the self-awareness module on a frozen predictor
# ---------------------------------------------------------------------------


@dataclass
class SaInputs:
    """Frozen-predictor outputs replayed once per sample before stage 2."""

    gf: np.ndarray
    increments: np.ndarray
    positions: np.ndarray
    valid: np.ndarray
    anchors: np.ndarray
    truth: np.ndarray
    step_errors: np.ndarray  # (n, fut_len) true distances


def precompute_sa_inputs(model: TrajectoryPredictor, samples: list[Sample],
                         scenes: list[tuple[SceneTensor, FixedGraph]]) -> list[SaInputs]:
    out = []
    truths = [scene_truth(s, scene) for s, (scene, _) in zip(samples, scenes)]
    with ad.no_grad():
        for indices in _chunks(len(samples), _VAL_CHUNK):
            scene, graph, slices = merge_scenes([scenes[i] for i in indices])
            gf, pred = model.forward(scene, graph, training=False)
            for i, sl in zip(indices, slices):
                m = sl.stop - sl.start
                truth = truths[i][:m]
                positions = pred.positions.data[sl]
                out.append(SaInputs(
                    gf=np.ascontiguousarray(gf.data[:, :, sl]),
                    increments=pred.increments.data[sl].copy(),
                    positions=positions.copy(),
                    valid=np.ones(m, dtype=bool),
                    anchors=scene.anchors[sl].copy(),
                    truth=truth.copy(),
                    step_errors=np.linalg.norm(truth - positions, axis=2)))
    return out


def _sa_labels(inputs: list[SaInputs], form: LabelForm) -> list[np.ndarray]:
    return [error_labels(i.truth, i.positions, i.anchors, form) for i in inputs]


def _merge_sa(inputs: list[SaInputs], labels: list[np.ndarray]):
    gf = np.concatenate([i.gf for i in inputs], axis=2)
    increments = np.concatenate([i.increments for i in inputs], axis=0)
    positions = np.concatenate([i.positions for i in inputs], axis=0)
    valid = np.concatenate([i.valid for i in inputs])
    merged_labels = np.concatenate(labels, axis=0)
    slices = []
    offset = 0
    for i in inputs:
        m = len(i.valid)
        slices.append(slice(offset, offset + m))
        offset += m
    pred = PredictedTrajectories(
        positions=ad.constant(positions), increments=ad.constant(increments), valid=valid)
    return ad.constant(gf), pred, merged_labels, slices


def _sliced_sa_loss(estimate, labels, slices: list[slice]) -> Tensor:
    labels = ad.as_tensor(labels)  # taped in joint training, constant in stage 2
    per_step = ad.l2_norm(ad.sub(estimate.values, labels))
    w = per_sample_weights(slices, labels.shape[0], labels.shape[1])
    return ad.reduce_sum(ad.mul(per_step, ad.constant(w)))


def train_stage2_from_inputs(
    config: RunConfig,
    sa_cfg: SaConfig,
    train_inputs: list[SaInputs],
    val_inputs: list[SaInputs],
    *,
    epochs: int,
    seed_stream: int = _STREAM_SA,
    order_stream: int = _STREAM_STAGE2_ORDER,
) -> tuple[SelfAwareness, dict]:
    master = Rng(config.seed)
    sa = SelfAwareness(sa_cfg, config.model.feat_channels, master.spawn(seed_stream))
    train_labels = _sa_labels(train_inputs, sa_cfg.label_form)
    val_labels = _sa_labels(val_inputs, sa_cfg.label_form)

    def batch_loss(indices) -> Tensor:
        gf, pred, labels, slices = _merge_sa(
            [train_inputs[i] for i in indices], [train_labels[i] for i in indices])
        return _sliced_sa_loss(sa.forward(gf, pred), labels, slices)

    def val_loss() -> float:
        if not val_inputs:
            return float("inf")
        total = 0.0
        with ad.no_grad():
            for indices in _chunks(len(val_inputs), _VAL_CHUNK):
                gf, pred, labels, slices = _merge_sa(
                    [val_inputs[i] for i in indices], [val_labels[i] for i in indices])
                total += _sliced_sa_loss(sa.forward(gf, pred), labels, slices).item() * len(indices)
        return total / len(val_inputs)

    result = _run_training(
        name=f"stage2[{sa_cfg.fusion.value}/{sa_cfg.estimator.value}/{sa_cfg.label_form.value}]",
        param_sets=[sa.params], buffers={}, batch_loss=batch_loss, n_train=len(train_inputs),
        val_loss=val_loss, epochs=epochs, config=config, order_rng=master.spawn(order_stream))
    return sa, result


def train_stage2(config: RunConfig, dataset: Dataset, predictor_path, out_path=None,
                 *, epochs: int | None = None) -> tuple[SelfAwareness, dict]:
    model, _ = load_predictor(config, predictor_path)
    model.params.freeze()
    before = params_digest(model.params)
    train_inputs = precompute_sa_inputs(model, dataset.train, dataset.train_scenes)
    val_inputs = precompute_sa_inputs(model, dataset.val, dataset.val_scenes)
    sa, result = train_stage2_from_inputs(
        config, config.sa_config(), train_inputs, val_inputs,
        epochs=config.train.stage2_epochs if epochs is None else epochs)
    after = params_digest(model.params)
    if before != after:
        raise AssertionError("train_stage2: frozen predictor parameters changed")
    if out_path is not None:
        save_checkpoint(out_path, sa.params.state_arrays(), {}, {
            "config_digest": config.digest(), "stage": "selfaware",
            "seed": config.seed, "epoch": result["best_epoch"], "val_loss": result["best_val"]})
    return sa, result


def load_selfaware(config: RunConfig, path, *, force: bool = False,
                   sa_cfg: SaConfig | None = None) -> SelfAwareness:
    params, _, _ = load_checkpoint(path, expected_digest=config.digest(), force=force)
    sa = SelfAwareness(sa_cfg or config.sa_config(), config.model.feat_channels, Rng(0))
    sa.params.load_arrays(params)
    return sa


# ---------------------------------------------------------------------------
# single-stage weighted training (ablation comparator)
# ---------------------------------------------------------------------------


def train_joint(config: RunConfig, dataset: Dataset, out_path=None,
                *, epochs: int | None = None) -> tuple[TrajectoryPredictor, SelfAwareness, dict]:
    master = Rng(config.seed)
    model = TrajectoryPredictor(predictor_config(config), master.spawn(_STREAM_PREDICTOR))
    sa = SelfAwareness(config.sa_config(), config.model.feat_channels, master.spawn(_STREAM_SA))
    lam = config.train.joint_weight
    form = config.sa_config().label_form
    train_b = _MergedBatcher(dataset.train, dataset.train_scenes)
    val_b = _MergedBatcher(dataset.val, dataset.val_scenes)

    def joint_loss(batcher: _MergedBatcher, indices, training: bool) -> Tensor:
        scene, graph, slices, truth = batcher.merge(indices)
        gf, pred = model.forward(scene, graph, training=training)
        labels = taped_error_labels(truth, pred.positions, scene.anchors, form)
        estimate = sa.forward(gf, pred)
        return ad.add(_sliced_tp_loss(pred, truth, slices),
                      ad.mul(_sliced_sa_loss(estimate, labels, slices), lam))

    def batch_loss(indices) -> Tensor:
        return joint_loss(train_b, indices, True)

    def val_loss() -> float:
        if not dataset.val:
            return float("inf")
        total = 0.0
        with ad.no_grad():
            for indices in _chunks(len(dataset.val), _VAL_CHUNK):
                total += joint_loss(val_b, indices, False).item() * len(indices)
        return total / len(dataset.val)

    result = _run_training(
        name="joint", param_sets=[model.params, sa.params], buffers=model.buffers,
        batch_loss=batch_loss, n_train=len(dataset.train), val_loss=val_loss,
        epochs=config.train.joint_epochs if epochs is None else epochs,
        config=config, order_rng=master.spawn(_STREAM_JOINT))
    if out_path is not None:
        merged = {f"predictor.{k}": v for k, v in model.params.state_arrays().items()}
        merged.update({f"selfaware.{k}": v for k, v in sa.params.state_arrays().items()})
        buffers = {f"predictor.{k}": v for k, v in model.buffers.items()}
        save_checkpoint(out_path, merged, buffers, {
            "config_digest": config.digest(), "stage": "joint",
            "seed": config.seed, "epoch": result["best_epoch"], "val_loss": result["best_val"]})
    return model, sa, result


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def _slot_maneuver_labels(sample: Sample, scene: SceneTensor) -> np.ndarray:
    raw = maneuver_labels(sample.hist, sample.fut)
    m = int(scene.valid.sum())
    slots = np.zeros(m, dtype=np.int64)
    for slot in range(m):
        slots[slot] = raw[scene.source_index[slot]]
    return slots


def train_mu(config: RunConfig, dataset: Dataset, out_path=None,
             *, epochs: int | None = None) -> tuple[TrajectoryPredictor, ManeuverHead, dict]:
    master = Rng(config.seed)
    model = TrajectoryPredictor(predictor_config(config, maneuvers=3), master.spawn(_STREAM_MU))
    head = ManeuverHead(config.model.feat_channels, config.model.hidden, master.spawn(_STREAM_MU + 1))
    weight = config.train.mu_class_weight
    train_b = _MergedBatcher(dataset.train, dataset.train_scenes)
    val_b = _MergedBatcher(dataset.val, dataset.val_scenes)
    train_labels = [_slot_maneuver_labels(s, scene)
                    for s, (scene, _) in zip(dataset.train, dataset.train_scenes)]
    val_labels = [_slot_maneuver_labels(s, scene)
                  for s, (scene, _) in zip(dataset.val, dataset.val_scenes)]

    def mu_loss(batcher, label_list, indices, training: bool) -> Tensor:
        scene, graph, slices, truth = batcher.merge(indices)
        labels = np.concatenate([label_list[i] for i in indices])
        gf = model.graph_feature(scene, graph, training=training)
        onehot = np.zeros((len(labels), 3))
        onehot[np.arange(len(labels)), labels] = 1.0
        pred = model.decode(gf, scene, maneuver=onehot)
        ce = cross_entropy(head.logits(gf), labels, scene.valid)
        return ad.add(_sliced_tp_loss(pred, truth, slices), ad.mul(ce, weight))

    def batch_loss(indices) -> Tensor:
        return mu_loss(train_b, train_labels, indices, True)

    def val_loss() -> float:
        if not dataset.val:
            return float("inf")
        total = 0.0
        with ad.no_grad():
            for indices in _chunks(len(dataset.val), _VAL_CHUNK):
                total += mu_loss(val_b, val_labels, indices, False).item() * len(indices)
        return total / len(dataset.val)

    result = _run_training(
        name="mu", param_sets=[model.params, head.params], buffers=model.buffers,
        batch_loss=batch_loss, n_train=len(dataset.train), val_loss=val_loss,
        epochs=config.train.stage1_epochs if epochs is None else epochs,
        config=config, order_rng=master.spawn(_STREAM_MU + 2))
    if out_path is not None:
        merged = {f"predictor.{k}": v for k, v in model.params.state_arrays().items()}
        merged.update({f"head.{k}": v for k, v in head.params.state_arrays().items()})
        buffers = {f"predictor.{k}": v for k, v in model.buffers.items()}
        save_checkpoint(out_path, merged, buffers, {
            "config_digest": config.digest(), "stage": "mu",
            "seed": config.seed, "epoch": result["best_epoch"], "val_loss": result["best_val"]})
    return model, head, result


def load_mu(config: RunConfig, path, *, force: bool = False) -> tuple[TrajectoryPredictor, ManeuverHead]:
    params, buffers, _ = load_checkpoint(path, expected_digest=config.digest(), force=force)
    model = TrajectoryPredictor(predictor_config(config, maneuvers=3), Rng(0))
    head = ManeuverHead(config.model.feat_channels, config.model.hidden, Rng(0))
    model.params.load_arrays({k[len("predictor."):]: v for k, v in params.items()
                              if k.startswith("predictor.")})
    head.params.load_arrays({k[len("head."):]: v for k, v in params.items() if k.startswith("head.")})
    for key in model.buffers:
        full = f"predictor.{key}"
        if full in buffers:
            model.buffers[key][...] = buffers[full]
    return model, head


def train_mc_dropout(config: RunConfig, dataset: Dataset, out_path=None,
                     *, epochs: int | None = None) -> tuple[TrajectoryPredictor, dict]:
    master = Rng(config.seed)
    model = TrajectoryPredictor(
        predictor_config(config, dropout=config.train.dropout_rate), master.spawn(_STREAM_DROPOUT))
    dropout_rng = master.spawn(_STREAM_DROPOUT + 1)
    train_b = _MergedBatcher(dataset.train, dataset.train_scenes)
    val_b = _MergedBatcher(dataset.val, dataset.val_scenes)

    def batch_loss(indices) -> Tensor:
        scene, graph, slices, truth = train_b.merge(indices)
        _, pred = model.forward(scene, graph, training=True, dropout_rng=dropout_rng)
        return _sliced_tp_loss(pred, truth, slices)

    def val_loss() -> float:
        if not dataset.val:
            return float("inf")
        total = 0.0
        with ad.no_grad():
            for indices in _chunks(len(dataset.val), _VAL_CHUNK):
                scene, graph, slices, truth = val_b.merge(indices)
                _, pred = model.forward(scene, graph, training=False)
                total += _sliced_tp_loss(pred, truth, slices).item() * len(indices)
        return total / len(dataset.val)

    result = _run_training(
        name="mc_dropout", param_sets=[model.params], buffers=model.buffers,
        batch_loss=batch_loss, n_train=len(dataset.train), val_loss=val_loss,
        epochs=config.train.stage1_epochs if epochs is None else epochs,
        config=config, order_rng=master.spawn(_STREAM_DROPOUT + 2))
    if out_path is not None:
        save_checkpoint(out_path, model.params.state_arrays(), model.buffers, {
            "config_digest": config.digest(), "stage": "mc_dropout",
            "seed": config.seed, "epoch": result["best_epoch"], "val_loss": result["best_val"]})
    return model, result


def train_ensemble(config: RunConfig, dataset: Dataset, out_dir=None,
                   *, epochs: int | None = None) -> list[TrajectoryPredictor]:
    """Members differ by initialization seed and by shuffle order."""
    members = []
    for m in range(config.train.ensemble_size):
        model, result = train_stage1(
            config, dataset, epochs=epochs, seed_stream=_STREAM_ENSEMBLE + 2 * m)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, f"ensemble_{m}.ckpt"),
                            model.params.state_arrays(), model.buffers, {
                                "config_digest": config.digest(), "stage": f"ensemble_{m}",
                                "seed": config.seed, "epoch": result["best_epoch"],
                                "val_loss": result["best_val"]})
        members.append(model)
    return members


def train_ae(config: RunConfig, dataset: Dataset, predictor_path, out_path=None,
             *, epochs: int | None = None) -> tuple[HistoryDecoder, dict]:
    model, _ = load_predictor(config, predictor_path)
    model.params.freeze()
    before = params_digest(model.params)
    master = Rng(config.seed)
    decoder = HistoryDecoder(config.model.feat_channels, config.model.hidden, master.spawn(_STREAM_AE))
    train_inputs = precompute_sa_inputs(model, dataset.train, dataset.train_scenes)
    val_inputs = precompute_sa_inputs(model, dataset.val, dataset.val_scenes)
    # reconstruction targets are the anchor-relative history offsets
    train_hist = [scene.values[0:2, :, :int(scene.valid.sum())].transpose(2, 1, 0)
                  for scene, _ in dataset.train_scenes]
    val_hist = [scene.values[0:2, :, :int(scene.valid.sum())].transpose(2, 1, 0)
                for scene, _ in dataset.val_scenes]

    def recon_loss(inputs, hists, indices) -> Tensor:
        gf = ad.constant(np.concatenate([inputs[i].gf for i in indices], axis=2))
        target = np.concatenate([hists[i] for i in indices], axis=0)
        slices = []
        offset = 0
        for i in indices:
            m = len(inputs[i].valid)
            slices.append(slice(offset, offset + m))
            offset += m
        recon = decoder.forward(gf)
        dists = ad.l2_norm(ad.sub(recon, ad.constant(target)))
        w = per_sample_weights(slices, target.shape[0], target.shape[1])
        return ad.reduce_sum(ad.mul(dists, ad.constant(w)))

    def batch_loss(indices) -> Tensor:
        return recon_loss(train_inputs, train_hist, indices)

    def val_loss() -> float:
        if not val_inputs:
            return float("inf")
        total = 0.0
        with ad.no_grad():
            for indices in _chunks(len(val_inputs), _VAL_CHUNK):
                total += recon_loss(val_inputs, val_hist, indices).item() * len(indices)
        return total / len(val_inputs)

    result = _run_training(
        name="ae", param_sets=[decoder.params], buffers={}, batch_loss=batch_loss,
        n_train=len(train_inputs), val_loss=val_loss,
        epochs=config.train.stage2_epochs if epochs is None else epochs,
        config=config, order_rng=master.spawn(_STREAM_AE + 1))
    if params_digest(model.params) != before:
        raise AssertionError("train_ae: frozen predictor parameters changed")
    if out_path is not None:
        save_checkpoint(out_path, decoder.params.state_arrays(), {}, {
            "config_digest": config.digest(), "stage": "ae",
            "seed": config.seed, "epoch": result["best_epoch"], "val_loss": result["best_val"]})
    return decoder, result


def load_ae(config: RunConfig, path, *, force: bool = False) -> HistoryDecoder:
    params, _, _ = load_checkpoint(path, expected_digest=config.digest(), force=force)
    decoder = HistoryDecoder(config.model.feat_channels, config.model.hidden, Rng(0))
    decoder.params.load_arrays(params)
    return decoder


# ---------------------------------------------------------------------------
# scoring and reports
# ---------------------------------------------------------------------------


def _scored_from_point(sample: Sample, scene: SceneTensor, point: np.ndarray,
                       diag_ade: np.ndarray, diag_fde: np.ndarray,
                       step_diags: np.ndarray | None) -> list[ScoredSample]:
    truth = scene_truth(sample, scene)
    errors = np.linalg.norm(truth - point, axis=2)
    out = []
    for slot, agent in enumerate(scene.source_index):
        if agent < 0:
            continue
        out.append(ScoredSample(
            record_id=sample.record_id,
            start_frame=sample.start_frame,
            track_id=sample.track_ids[agent],
            agent_type=sample.types[agent],
            step_errors=errors[slot].copy(),
            ade=float(errors[slot].mean()),
            fde=float(errors[slot][-1]),
            diag_ade=float(diag_ade[slot]),
            diag_fde=float(diag_fde[slot]),
            step_diags=None if step_diags is None else step_diags[slot].copy(),
            hard=bool(sample.hard[agent]),
        ))
    return out


def score_ours(model: TrajectoryPredictor, sa: SelfAwareness, samples, scenes) -> list[ScoredSample]:
    scored = []
    with ad.no_grad():
        for sample, (scene, graph) in zip(samples, scenes):
            gf, pred = model.forward(scene, graph, training=False)
            estimate = sa.forward(gf, pred)
            values = estimate.values.data
            step = values[..., 0] if values.shape[2] == 1 else np.linalg.norm(values, axis=2)
            diag_ade, diag_fde = integrate_diagnostics(values)
            scored.extend(_scored_from_point(sample, scene, pred.positions.data,
                                             diag_ade, diag_fde, step))
    return scored


def score_mu(model: TrajectoryPredictor, head: ManeuverHead, samples, scenes,
             *, use_entropy: bool) -> list[ScoredSample]:
    scored = []
    with ad.no_grad():
        for sample, (scene, graph) in zip(samples, scenes):
            bundle, probs, point = mu_forward(model, head, scene, graph)
            if use_entropy:
                diag_ade, diag_fde = ape_fpe(bundle)
            else:
                diag = nmap(probs)
                diag_ade = diag_fde = diag
            scored.extend(_scored_from_point(sample, scene, point, diag_ade, diag_fde, None))
    return scored


def score_mc_dropout(model: TrajectoryPredictor, samples, scenes, rng: Rng,
                     mc_samples: int) -> list[ScoredSample]:
    scored = []
    with ad.no_grad():
        for i, (sample, (scene, graph)) in enumerate(zip(samples, scenes)):
            bundle = mc_dropout_predict(model, scene, graph, rng.spawn(i), samples=mc_samples)
            diag_ade, diag_fde = ape_fpe(bundle)
            scored.extend(_scored_from_point(sample, scene, bundle.mean_trajectory(),
                                             diag_ade, diag_fde, None))
    return scored


def score_ensemble(members: list[TrajectoryPredictor], samples, scenes) -> list[ScoredSample]:
    scored = []
    with ad.no_grad():
        for sample, (scene, graph) in zip(samples, scenes):
            bundle = ensemble_predict(members, scene, graph, expected_members=len(members))
            diag_ade, diag_fde = ape_fpe(bundle)
            scored.extend(_scored_from_point(sample, scene, bundle.mean_trajectory(),
                                             diag_ade, diag_fde, None))
    return scored


def score_ae(model: TrajectoryPredictor, decoder: HistoryDecoder, samples, scenes) -> list[ScoredSample]:
    scored = []
    with ad.no_grad():
        for sample, (scene, graph) in zip(samples, scenes):
            gf, pred = model.forward(scene, graph, training=False)
            _, recon_error = ae_reconstruct(decoder, gf, scene)
            scored.extend(_scored_from_point(sample, scene, pred.positions.data,
                                             recon_error, recon_error, None))
    return scored


def shuffle_scored(scored: list[ScoredSample], rng: Rng) -> list[ScoredSample]:
    """Seeded shuffle before metric computation.

    Real-valued diagnostics are unaffected (their sort order is their value),
    but degenerate all-tied diagnostics then break ties randomly instead of
    inheriting record/window enumeration structure, which keeps tied
    diagnostics statistically indistinguishable from random removal.
    """
    order = rng.permutation(len(scored))
    return [scored[i] for i in order]


def build_report(method: str, dataset_name: str, scored: list[ScoredSample], grid,
                 total_parameters: int, avg_ms: float | None, config: RunConfig) -> dict:
    ades = np.array([s.ade for s in scored])
    fdes = np.array([s.fde for s in scored])
    diag_a = np.array([s.diag_ade for s in scored])
    diag_f = np.array([s.diag_fde for s in scored])
    per_moment = per_moment_report(scored, grid) if scored and all(
        s.step_diags is not None for s in scored) else []
    return {
        "method": method,
        "dataset": dataset_name,
        "aucoc": {
            "ade": aucoc(cutoff_curve(ades, diag_a, grid)),
            "fde": aucoc(cutoff_curve(fdes, diag_f, grid)),
            "ade_random": aucoc_random(ades, grid),
            "fde_random": aucoc_random(fdes, grid),
            "ade_optimal": aucoc_optimal(ades, grid),
            "fde_optimal": aucoc_optimal(fdes, grid),
        },
        "sas": {"ade": sas(ades, diag_a, grid), "fde": sas(fdes, diag_f, grid)},
        "per_moment": per_moment,
        "per_type": per_type_report(scored, grid),
        "total_parameters": total_parameters,
        "avg_ms_per_frame": avg_ms,
        "seed": config.seed,
        "config_digest": config.digest(),
    }


def evaluate_method(config: RunConfig, dataset: Dataset, method: str, out_dir,
                    *, with_timing: bool = False, force: bool = False) -> dict:
    """Score one method on the test split and write its report artifacts."""
    if method not in METHODS:
        raise ValueError(f"evaluate: unknown method {method!r}, expected one of {METHODS}")
    out_dir = os.fspath(out_dir)
    grid = default_grid(config.eval.grid_step, config.eval.grid_stop)
    master = Rng(config.seed)
    samples, scenes = dataset.test, dataset.test_scenes

    def ckpt(name: str) -> str:
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            raise CheckpointError(f"evaluate: missing checkpoint file: {path}")
        return path

    if method == "ours":
        model, _ = load_predictor(config, ckpt("predictor.ckpt"), force=force)
        model.params.freeze()
        sa = load_selfaware(config, ckpt("selfaware.ckpt"), force=force)
        scored = score_ours(model, sa, samples, scenes)
        params = count_parameters(model.params, sa.params)
        def frame(i: int):
            scene, graph = scenes[i % len(scenes)]
            gf, pred = model.forward(scene, graph, training=False)
            integrate_diagnostics(sa.forward(gf, pred).values.data)
    elif method in ("mu_nmap", "mu_entropy"):
        model, head = load_mu(config, ckpt("mu.ckpt"), force=force)
        model.params.freeze()
        use_entropy = method == "mu_entropy"
        scored = score_mu(model, head, samples, scenes, use_entropy=use_entropy)
        params = count_parameters(model.params, head.params)
        def frame(i: int):
            scene, graph = scenes[i % len(scenes)]
            bundle, probs, _ = mu_forward(model, head, scene, graph)
            _ = ape_fpe(bundle) if use_entropy else nmap(probs)
    elif method == "mc_dropout":
        model, _ = load_predictor(config, ckpt("mc_dropout.ckpt"),
                                  dropout=config.train.dropout_rate, force=force)
        model.params.freeze()
        eval_rng = master.spawn(_STREAM_EVAL)
        scored = score_mc_dropout(model, samples, scenes, eval_rng, config.train.mc_samples)
        params = count_parameters(model.params)
        timing_rng = master.spawn(_STREAM_EVAL + 1)
        def frame(i: int):
            scene, graph = scenes[i % len(scenes)]
            ape_fpe(mc_dropout_predict(model, scene, graph, timing_rng.spawn(i),
                                       samples=config.train.mc_samples))
    elif method == "ensemble":
        members = []
        for m in range(config.train.ensemble_size):
            member, _ = load_predictor(config, ckpt(f"ensemble_{m}.ckpt"), force=force)
            member.params.freeze()
            members.append(member)
        scored = score_ensemble(members, samples, scenes)
        params = count_parameters(*[m.params for m in members])
        def frame(i: int):
            scene, graph = scenes[i % len(scenes)]
            ape_fpe(ensemble_predict(members, scene, graph, expected_members=len(members)))
    else:  # ae
        model, _ = load_predictor(config, ckpt("predictor.ckpt"), force=force)
        model.params.freeze()
        decoder = load_ae(config, ckpt("ae.ckpt"), force=force)
        scored = score_ae(model, decoder, samples, scenes)
        params = count_parameters(model.params, decoder.params)
        def frame(i: int):
            scene, graph = scenes[i % len(scenes)]
            gf, pred = model.forward(scene, graph, training=False)
            ae_reconstruct(decoder, gf, scene)

    avg_ms = None
    if with_timing:
        counter = iter(range(10**9))
        with ad.no_grad():
            avg_ms = time_per_frame(lambda: frame(next(counter)),
                                    frames=config.eval.timing_frames,
                                    warmup=config.eval.timing_warmup)

    scored = shuffle_scored(scored, master.spawn(_STREAM_EVAL + 9))
    report = build_report(method, dataset.name, scored, grid, params, avg_ms, config)
    write_json(os.path.join(out_dir, f"metrics_{method}.json"), report)
    ades = np.array([s.ade for s in scored])
    fdes = np.array([s.fde for s in scored])
    diag_a = np.array([s.diag_ade for s in scored])
    diag_f = np.array([s.diag_fde for s in scored])
    write_curve_csv(os.path.join(out_dir, f"cutoff_{method}_ade.csv"),
                    cutoff_curve(ades, diag_a, grid))
    write_curve_csv(os.path.join(out_dir, f"cutoff_{method}_fde.csv"),
                    cutoff_curve(fdes, diag_f, grid))
    return report


# ---------------------------------------------------------------------------
# the ablation matrix
# ---------------------------------------------------------------------------

INPUT_FORM_ROWS: list[tuple[str, str]] = [
    ("gf", "none"),
    ("gf", "mlp"), ("gf", "conv"), ("gf", "lstm"),
    ("add", "mlp"), ("add", "conv"), ("add", "lstm"),
    ("concat", "mlp"), ("concat", "conv"), ("concat", "lstm"),
]
LABEL_FORM_ROWS = ["velocity", "position_xy", "distance"]


def _sas_for_sa(sa: SelfAwareness, model: TrajectoryPredictor, dataset: Dataset, grid) -> dict:
    scored = score_ours(model, sa, dataset.test, dataset.test_scenes)
    ades = np.array([s.ade for s in scored])
    fdes = np.array([s.fde for s in scored])
    diag_a = np.array([s.diag_ade for s in scored])
    diag_f = np.array([s.diag_fde for s in scored])
    return {
        "sas_ade": sas(ades, diag_a, grid),
        "sas_fde": sas(fdes, diag_f, grid),
        "aucoc_ade": aucoc(cutoff_curve(ades, diag_a, grid)),
        "aucoc_fde": aucoc(cutoff_curve(fdes, diag_f, grid)),
    }


def run_ablations(config: RunConfig, dataset: Dataset, predictor_path, out_path=None) -> dict:
    """Tables for input forms x estimators, label forms, and training processes.

    Cells run independently; a failing cell is reported in place and the rest
    continue.
    """
    model, _ = load_predictor(config, predictor_path)
    model.params.freeze()
    grid = default_grid(config.eval.grid_step, config.eval.grid_stop)
    epochs = config.train.ablation_epochs
    train_inputs = precompute_sa_inputs(model, dataset.train, dataset.train_scenes)
    val_inputs = precompute_sa_inputs(model, dataset.val, dataset.val_scenes)

    def sa_cell(fusion: str, estimator: str, label_form: str, stream: int) -> dict:
        cfg = SaConfig(fusion=Fusion(fusion), estimator=Estimator(estimator),
                       label_form=LabelForm(label_form), hidden=config.selfaware.hidden)
        sa, result = train_stage2_from_inputs(
            config, cfg, train_inputs, val_inputs, epochs=epochs,
            seed_stream=_STREAM_ABLATION + 2 * stream,
            order_stream=_STREAM_ABLATION + 2 * stream + 1)
        return {**_sas_for_sa(sa, model, dataset, grid), "val_loss": result["best_val"]}

    def guarded(fn, **cell_id) -> dict:
        try:
            return {**cell_id, **fn()}
        except Exception as exc:  # cell isolation: record and continue
            logger.warning("ablation cell %s failed: %s", cell_id, exc)
            return {**cell_id, "error": f"{type(exc).__name__}: {exc}"}

    input_jobs = [
        (dict(input_form=fusion, basic_model=estimator),
         lambda fusion=fusion, estimator=estimator, i=i: sa_cell(fusion, estimator, "distance", i))
        for i, (fusion, estimator) in enumerate(INPUT_FORM_ROWS)
    ]
    label_jobs = [
        (dict(error_label=form),
         lambda form=form, i=i: sa_cell(config.selfaware.fusion, config.selfaware.estimator,
                                        form, 20 + i))
        for i, form in enumerate(LABEL_FORM_ROWS)
    ]

    def weighting_cell() -> dict:
        joint_model, joint_sa, result = train_joint(config, dataset, epochs=epochs)
        joint_model.params.freeze()
        return {**_sas_for_sa(joint_sa, joint_model, dataset, grid), "val_loss": result["best_val"]}

    def two_stage_cell() -> dict:
        return sa_cell(config.selfaware.fusion, config.selfaware.estimator,
                       config.selfaware.label_form, 30)

    process_jobs = [
        (dict(training_process="weighting"), weighting_cell),
        (dict(training_process="two_stage"), two_stage_cell),
    ]

    all_jobs = input_jobs + label_jobs + process_jobs
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda kf: guarded(kf[1], **kf[0]), all_jobs))
    else:
        results = [guarded(fn, **key) for key, fn in all_jobs]

    n_input, n_label = len(input_jobs), len(label_jobs)
    report = {
        "input_forms": results[:n_input],
        "label_forms": results[n_input:n_input + n_label],
        "training_processes": results[n_input + n_label:],
        "seed": config.seed,
        "config_digest": config.digest(),
    }
    if out_path is not None:
        write_json(out_path, report)
    return report
