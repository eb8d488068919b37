"""Server loop: client sampling, broadcast, aggregation, server optimizer.

One round samples a client subset, runs each client's local training on a
copy of the global parameters, averages the returned deltas in sorted client
order and applies the server optimizer (plain SGD or Adam with bias
correction). Everything is keyed off counter-based streams, so the loop is a
pure function of (config, strategy, data, seed) and client execution may be
parallelized freely without changing a single bit of the result.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, FederatedDataset
from .errors import AggregationError, ConfigError, DivergedError
from .mlp import Batch, ParamSet, init_params, mean_cross_entropy, predict_logits
from .quantize import StepTable
from .rng import Purpose, RngStream
from .strategies import (ClientTask, ClientUpdate, StepTables, StrategyConfig,
                         calibrate_steps, local_train, resolve_bits)

CHECKPOINT_MAGIC = "fedquant.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class FedConfig:
    """Round schedule, learning rates and server optimizer settings.

    ``local_steps=None`` means one local epoch per round: each client runs
    ceil(len(local data) / batch_size) SGD steps.
    """

    total_rounds: int = 100
    num_clients: int = 100
    clients_per_round: int = 10
    eta_s: float = 1.0
    eta_c: float = 0.05
    local_steps: int | None = None
    batch_size: int = 20
    server_opt: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be >= 1")
        if not (1 <= self.clients_per_round <= self.num_clients):
            raise ConfigError("need 1 <= clients_per_round <= num_clients")
        if self.eta_s <= 0 or self.eta_c <= 0:
            raise ConfigError("learning rates must be positive")
        if self.local_steps is not None and self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1 when set")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.server_opt not in ("sgd", "adam"):
            raise ConfigError(f"unknown server optimizer {self.server_opt!r}")
        if self.server_opt == "adam" and self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class ServerState:
    """Global parameters plus optimizer moments and calibrated step tables."""

    round_idx: int
    params: ParamSet
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    step_tables: StepTables | None = None


@dataclass
class HistoryRow:
    round_idx: int
    val_accuracy: float
    val_loss: float
    mean_client_loss: float


@dataclass
class TrainingHistory:
    rows: list[HistoryRow] = field(default_factory=list)

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("round,val_accuracy,val_loss,mean_client_loss\n")
            for r in self.rows:
                fh.write(f"{r.round_idx},{r.val_accuracy!r},{r.val_loss!r},"
                         f"{r.mean_client_loss!r}\n")


def sample_clients(num_clients: int, subset_size: int, rng: RngStream) -> np.ndarray:
    """``subset_size`` distinct ids, uniform without replacement, sorted."""
    if not (1 <= subset_size <= num_clients):
        raise ConfigError(f"cannot sample {subset_size} of {num_clients} clients")
    perm = rng.permutation(num_clients)
    return np.sort(perm[:subset_size])


def aggregate(updates: list[ClientUpdate]) -> np.ndarray:
    """Unweighted mean of deltas, summed in sorted client-id order."""
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    dim = ordered[0].delta.shape
    total = np.zeros(dim, dtype=np.float64)
    for u in ordered:
        if u.delta.shape != dim:
            raise AggregationError(
                f"client {u.client_id} delta shape {u.delta.shape} != {dim}")
        total += u.delta
    return total / len(ordered)


def server_step(state: ServerState, delta: np.ndarray, cfg: FedConfig) -> ServerState:
    """Apply the aggregated delta with the configured server optimizer."""
    flat = state.params.flatten()
    if delta.shape != flat.shape:
        raise AggregationError("aggregated delta does not match parameter count")
    if cfg.server_opt == "sgd":
        new_flat = flat + cfg.eta_s * delta
        m, v = state.adam_m, state.adam_v
    else:
        t = state.round_idx + 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        m = b1 * state.adam_m + (1.0 - b1) * delta
        v = b2 * state.adam_v + (1.0 - b2) * delta * delta
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_flat = flat + cfg.eta_s * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    if not np.all(np.isfinite(new_flat)):
        raise DivergedError("server update produced non-finite parameters",
                            round_idx=state.round_idx)
    return ServerState(round_idx=state.round_idx + 1,
                       params=state.params.unflatten(new_flat),
                       adam_m=m, adam_v=v, step_tables=state.step_tables)


def make_calibration_batch(train: Dataset, batch_size: int, root: RngStream) -> Batch:
    """Server-held batch used for activation range calibration."""
    stream = root.child(Purpose.CALIBRATION)
    take = min(batch_size, train.size)
    idx = stream.permutation(train.size)[:take]
    return Batch(train.inputs[idx], train.labels[idx])


def client_batches(data: Dataset, indices: np.ndarray, steps: int,
                   batch_size: int, rng: RngStream) -> list[Batch]:
    """Shuffle the client's indices once, then slice cyclically per step."""
    perm = indices[rng.permutation(indices.size)]
    batches = []
    take = min(batch_size, perm.size)
    for k in range(steps):
        sel = np.take(perm, np.arange(k * take, (k + 1) * take), mode="wrap")
        batches.append(Batch(data.inputs[sel], data.labels[sel]))
    return batches


def _resolve_local_steps(cfg: FedConfig, n_local: int) -> int:
    if cfg.local_steps is not None:
        return cfg.local_steps
    return max(1, math.ceil(n_local / cfg.batch_size))


def evaluate_global(params: ParamSet, dataset: Dataset) -> tuple[float, float]:
    """Full-precision top-1 accuracy and mean cross-entropy."""
    logits = predict_logits(params, dataset.inputs)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return acc, mean_cross_entropy(logits, dataset.labels)


def run(cfg: FedConfig, strat: StrategyConfig, data: FederatedDataset,
        hidden: tuple[int, ...] = (64,), threads: int = 1,
        progress=None) -> tuple[ServerState, TrainingHistory]:
    """Execute the full round loop; deterministic for a given cfg.seed.

    ``progress`` is an optional callback(round_idx, HistoryRow) fired at each
    evaluation round. Client work runs on a thread pool when threads > 1; the
    result is independent of the thread count by construction.
    """
    if data.num_clients != cfg.num_clients:
        raise ConfigError(f"config expects {cfg.num_clients} clients, "
                          f"dataset has {data.num_clients}")
    if data.holdout is None or data.holdout.size == 0:
        raise ConfigError("a non-empty holdout set is required for evaluation")
    train = data.base
    root = RngStream(cfg.seed)
    widths = [train.inputs.shape[1], *hidden, train.num_classes]
    params = init_params(widths, root.child(Purpose.INIT))
    calib_batch = make_calibration_batch(train, cfg.batch_size, root)
    tables = None
    if strat.quantizing:
        tables = calibrate_steps(params, strat.relevant_bits(), calib_batch,
                                 strat.quantize_acts)
    dim = params.dim
    state = ServerState(
        round_idx=0, params=params,
        adam_m=np.zeros(dim) if cfg.server_opt == "adam" else None,
        adam_v=np.zeros(dim) if cfg.server_opt == "adam" else None,
        step_tables=tables)

    def run_client(round_idx: int, client_id: int, start: ParamSet) -> ClientUpdate:
        indices = data.client_indices(client_id)
        steps = _resolve_local_steps(cfg, indices.size)
        batch_rng = root.child(Purpose.BATCH, round_idx, client_id)
        task = ClientTask(
            client_id=client_id, round_idx=round_idx, start_params=start,
            step_tables=tables, local_steps=steps, eta_c=cfg.eta_c,
            batches=client_batches(train, indices, steps, cfg.batch_size, batch_rng),
            rng=root.child(Purpose.NOISE, round_idx, client_id))
        bit = resolve_bits(strat, round_idx, client_id, root)
        sampled = bit if strat.kind == "mqat" else None
        return local_train(task, strat, sampled_bit=sampled)

    history = TrainingHistory()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(cfg.total_rounds):
            selected = sample_clients(cfg.num_clients, cfg.clients_per_round,
                                      root.child(Purpose.CLIENT_SAMPLING, t))
            jobs = [(t, int(cid), state.params) for cid in selected]
            if pool is not None:
                updates = list(pool.map(lambda j: run_client(*j), jobs))
            else:
                updates = [run_client(*j) for j in jobs]
            delta = aggregate(updates)
            state = server_step(state, delta, cfg)
            if (t + 1) % cfg.eval_every == 0 or t == cfg.total_rounds - 1:
                acc, loss = evaluate_global(state.params, data.holdout)
                client_loss = float(np.mean(
                    [u.local_loss_trace[-1] for u in updates]))
                row = HistoryRow(round_idx=t + 1, val_accuracy=acc,
                                 val_loss=loss, mean_client_loss=client_loss)
                history.rows.append(row)
                if progress is not None:
                    progress(t + 1, row)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
    return state, history


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config document."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _tables_to_json(tables: StepTables | None):
    if tables is None:
        return None
    return {
        "weights": [{str(b): s for b, s in t.steps.items()} for t in tables.weights],
        "acts": None if tables.acts is None else
                [{str(b): s for b, s in t.steps.items()} for t in tables.acts],
    }


def _tables_from_json(obj) -> StepTables | None:
    if obj is None:
        return None
    def parse(entries):
        return [StepTable({int(b): float(s) for b, s in e.items()}) for e in entries]
    return StepTables(weights=parse(obj["weights"]),
                      acts=None if obj["acts"] is None else parse(obj["acts"]))


def save_checkpoint(path: str, state: ServerState, config: dict) -> None:
    """Versioned JSON container for a ServerState plus its experiment config."""
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "round": state.round_idx,
        "config_hash": config_hash(config),
        "config": config,
        "widths": state.params.widths,
        "layers": [{"weight": w.tolist(), "bias": b.tolist()}
                   for w, b in state.params.layers],
        "adam_m": None if state.adam_m is None else state.adam_m.tolist(),
        "adam_v": None if state.adam_v is None else state.adam_v.tolist(),
        "step_tables": _tables_to_json(state.step_tables),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[ServerState, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    layers = [(np.asarray(l["weight"], dtype=np.float64),
               np.asarray(l["bias"], dtype=np.float64)) for l in doc["layers"]]
    state = ServerState(
        round_idx=int(doc["round"]),
        params=ParamSet(layers),
        adam_m=None if doc["adam_m"] is None else np.asarray(doc["adam_m"]),
        adam_v=None if doc["adam_v"] is None else np.asarray(doc["adam_v"]),
        step_tables=_tables_from_json(doc["step_tables"]))
    return state, doc["config"]
