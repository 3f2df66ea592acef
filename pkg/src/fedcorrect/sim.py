"""Experiment driver: config parsing, the round loop, schedules and metrics files.

A round samples clients, runs every sampled client's local optimizer from the
current global model (restarted state, private random stream keyed by
``(seed, round, client)``), optionally corrects and aggregates the changes in
ascending client order, and hands the result to the server optimizer.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from fedcorrect.analysis import decaying_server_lr
from fedcorrect.client_opt import KINDS, ClientOptKind, run_local
from fedcorrect.correction import CorrectionMode, apply_local, joint_aggregate
from fedcorrect.problems import (
    PRESETS,
    LogRegTask,
    NoiseModel,
    NotContractiveError,
    QuadraticFamily,
    client_oracle,
    fixed_point_closed_form,
    global_grad,
    global_loss,
    global_min,
    make_logreg,
    per_client,
)
from fedcorrect.server_opt import SERVER_KINDS, ServerOptKind, ServerState, aggregate, sample_clients, server_step

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class RoundError(RuntimeError):
    def __init__(self, round_index: int, cause: Exception):
        self.round_index = round_index
        super().__init__(f"round {round_index}: {cause}")


# ---------------------------------------------------------------- config schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class QuadraticClientSpec(_Strict):
    H: list[list[float]] | list[float]  # full matrix, or its diagonal
    e: list[float] | None = None
    x_star: list[float] | None = None
    c: float = 0.0
    w: float | None = None


class QuadraticProblemSpec(_Strict):
    type: Literal["quadratic"]
    preset: Literal["hetero_1d", "hetero_2d"] | None = None
    clients: list[QuadraticClientSpec] | None = None


class LogRegProblemSpec(_Strict):
    type: Literal["logreg"]
    seed: int = 0
    num_clients: int = Field(ge=1)
    n_per_client: int = Field(ge=1)
    dim: int = Field(ge=1)
    skew: float = Field(default=0.0, ge=0.0, le=1.0)
    l2: float = Field(default=1e-3, ge=0.0)
    separation: float = 1.0
    scale_ratio: float = Field(default=10.0, gt=0.0)


class ClientOptSpec(_Strict):
    kind: Literal[KINDS]
    lr: float | list[float]
    local_steps: int | list[int] = 1
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-7
    # "inverse_hessian_diagonal" sets P_i = 1/diag(H_i) on quadratics
    preconditioner: Literal["inverse_hessian_diagonal"] | list[list[float]] | None = None


class ServerOptSpec(_Strict):
    kind: Literal[SERVER_KINDS] = "gd"
    lr: float = 1.0
    eps: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99


class ConstantSchedule(_Strict):
    kind: Literal["constant"] = "constant"


class StepDecaySchedule(_Strict):
    kind: Literal["step_decay"]
    rounds: list[int]
    factor: float = Field(gt=0.0)


class DecayingServerSchedule(_Strict):
    kind: Literal["decaying_server"]
    beta: float = Field(gt=0.0)
    mu: float | None = None  # defaults to the smallest client curvature on quadratics


Schedule = Annotated[Union[ConstantSchedule, StepDecaySchedule, DecayingServerSchedule], Field(discriminator="kind")]


class NoiseSpec(_Strict):
    sigma: float = Field(default=0.0, ge=0.0)
    batch_size: int | None = Field(default=None, ge=1)


class ExperimentConfig(_Strict):
    schema_version: Literal[1]
    problem: Annotated[Union[QuadraticProblemSpec, LogRegProblemSpec], Field(discriminator="type")]
    client_opt: ClientOptSpec
    server_opt: ServerOptSpec = ServerOptSpec()
    correction: CorrectionMode = CorrectionMode.NONE
    rounds: int = Field(ge=1)
    clients_per_round: int | None = None
    # weights under partial participation: 1/|S| ("uniform") or w_i renormalized over S
    sampled_weights: Literal["uniform", "renormalized"] = "uniform"
    seed: int = 0
    lr_schedule: Schedule = ConstantSchedule()
    noise: NoiseSpec = NoiseSpec()
    x0: list[float] | None = None
    record_iterates: bool = False
    compute_metrics: bool = True
    wall_clock: bool = False
    workers: int = Field(default=1, ge=1)
    # every quadratic oracle is a dense direct solve
    max_dim: int = Field(default=64, ge=1)


def load_config(source) -> ExperimentConfig:
    """Parse a config from a path, a JSON string or a dict."""
    try:
        if isinstance(source, dict):
            return ExperimentConfig.model_validate(source)
        if isinstance(source, str) and source.lstrip().startswith("{"):
            return ExperimentConfig.model_validate_json(source)
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        return ExperimentConfig.model_validate_json(path.read_text())
    except ValidationError as err:
        raise ConfigError(str(err)) from err


# ---------------------------------------------------------------- prepared experiment


@dataclass
class Experiment:
    config: ExperimentConfig
    problem: QuadraticFamily | LogRegTask
    kinds: list[ClientOptKind]
    server: ServerOptKind
    noise: NoiseModel
    x0: np.ndarray
    per_round: int

    @property
    def num_clients(self) -> int:
        return self.problem.num_clients

    @property
    def mode(self) -> CorrectionMode:
        return self.config.correction


def build_problem(spec) -> QuadraticFamily | LogRegTask:
    if spec.type == "logreg":
        return make_logreg(
            spec.seed, spec.num_clients, spec.n_per_client, spec.dim,
            skew=spec.skew, l2=spec.l2, separation=spec.separation, scale_ratio=spec.scale_ratio,
        )
    if (spec.preset is None) == (spec.clients is None):
        raise ConfigError("quadratic problem needs exactly one of 'preset' or 'clients'")
    if spec.preset is not None:
        return PRESETS[spec.preset]()
    hs, es, cs, ws = [], [], [], []
    for j, client in enumerate(spec.clients):
        h = np.asarray(client.H, dtype=float)
        h = np.diag(h) if h.ndim == 1 else h
        if (client.e is None) == (client.x_star is None):
            raise ConfigError(f"client {j}: give exactly one of 'e' or 'x_star'")
        e = np.asarray(client.e, dtype=float) if client.e is not None else h @ np.asarray(client.x_star, dtype=float)
        hs.append(h)
        es.append(e)
        cs.append(client.c)
        ws.append(client.w)
    if any(w is None for w in ws) and not all(w is None for w in ws):
        raise ConfigError("either every quadratic client has a weight 'w' or none does")
    w = None if ws[0] is None else np.asarray(ws, dtype=float)
    try:
        return QuadraticFamily(H=np.stack(hs), e=np.stack(es), c=np.asarray(cs), w=w)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _client_kinds(spec: ClientOptSpec, problem) -> list[ClientOptKind]:
    m = problem.num_clients
    lrs = per_client(spec.lr, m, "client_opt.lr")
    steps = per_client(spec.local_steps, m, "client_opt.local_steps")
    if spec.kind == "precond_gd":
        if spec.preconditioner is None:
            raise ConfigError("precond_gd needs 'preconditioner'")
        if spec.preconditioner == "inverse_hessian_diagonal":
            if not isinstance(problem, QuadraticFamily):
                raise ConfigError("inverse_hessian_diagonal preconditioners need a quadratic problem")
            preconds = [1.0 / np.diagonal(problem.H[i]) for i in range(m)]
        else:
            preconds = [np.asarray(p, dtype=float) for p in per_client(spec.preconditioner, m, "preconditioner")]
    elif spec.preconditioner is not None:
        raise ConfigError(f"'preconditioner' is only valid for precond_gd, not {spec.kind}")
    else:
        preconds = [None] * m
    return [
        ClientOptKind(
            name=spec.kind, lr=lrs[i], local_steps=steps[i], beta1=spec.beta1,
            beta2=spec.beta2, eps=spec.eps, preconditioner=preconds[i],
        )
        for i in range(m)
    ]


def prepare(config: ExperimentConfig) -> Experiment:
    """Validate a config against its problem and build every runtime object."""
    try:
        problem = build_problem(config.problem)
        kinds = _client_kinds(config.client_opt, problem)
        so = config.server_opt
        server = ServerOptKind(name=so.kind, lr=so.lr, eps=so.eps, beta1=so.beta1, beta2=so.beta2)
        noise = NoiseModel(sigma=config.noise.sigma, batch_size=config.noise.batch_size)
        if isinstance(problem, QuadraticFamily) and noise.batch_size is not None:
            raise ConfigError("minibatch noise needs the logreg problem")
    except (ValueError, TypeError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from err
    if problem.dim > config.max_dim:
        raise ConfigError(f"problem dimension {problem.dim} exceeds max_dim={config.max_dim}")
    m = problem.num_clients
    per_round = config.clients_per_round or m
    if not 1 <= per_round <= m:
        raise ConfigError(f"clients_per_round must lie in [1, {m}], got {per_round}")
    x0 = np.zeros(problem.dim) if config.x0 is None else np.asarray(config.x0, dtype=float)
    if x0.shape != (problem.dim,):
        raise ConfigError(f"x0 must have length {problem.dim}")
    sched = config.lr_schedule
    if isinstance(sched, StepDecaySchedule) and any(r < 0 for r in sched.rounds):
        raise ConfigError("step_decay rounds must be non-negative")
    if isinstance(sched, DecayingServerSchedule):
        if len({k.lr for k in kinds}) != 1 or len({k.local_steps for k in kinds}) != 1:
            raise ConfigError("decaying_server schedule needs a common client lr and local_steps")
        if sched.mu is None and not isinstance(problem, QuadraticFamily):
            raise ConfigError("decaying_server schedule needs 'mu' outside quadratic problems")
    return Experiment(config, problem, kinds, server, noise, x0, per_round)


def _schedule_mu(exp: Experiment) -> float:
    sched = exp.config.lr_schedule
    if sched.mu is not None:
        return sched.mu
    return min(float(np.linalg.eigvalsh(h)[0]) for h in exp.problem.H)


def lr_at(schedule, t: int, lr, server_lr: float, mu: float | None = None, local_steps: int | None = None):
    """Client and server learning rates used in round ``t``.

    ``lr`` may be a scalar or per-client array; step decay divides it by
    ``factor`` once for every listed round ``<= t``.
    """
    lr = np.asarray(lr, dtype=float)
    if isinstance(schedule, ConstantSchedule) or schedule is None:
        return lr, server_lr
    if isinstance(schedule, StepDecaySchedule):
        n_decays = sum(1 for r in schedule.rounds if t >= r)
        return lr / schedule.factor**n_decays, server_lr
    if isinstance(schedule, DecayingServerSchedule):
        if mu is None or local_steps is None:
            raise ValueError("decaying_server schedule needs mu and local_steps")
        return lr, decaying_server_lr(t, float(np.max(lr)), mu, local_steps, schedule.beta)
    raise TypeError(f"unknown schedule {schedule!r}")


def round_lrs(exp: Experiment, t: int) -> tuple[np.ndarray, float]:
    base = np.array([k.lr for k in exp.kinds])
    sched = exp.config.lr_schedule
    mu = _schedule_mu(exp) if isinstance(sched, DecayingServerSchedule) else None
    return lr_at(sched, t, base, exp.server.lr, mu=mu, local_steps=exp.kinds[0].local_steps)


# ---------------------------------------------------------------- one round


@dataclass
class ClientUpdate:
    client: int
    delta: np.ndarray
    n_matrix: np.ndarray


def client_rng(seed: int, t: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, i + 1])


def sampling_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, 0])


def combine(updates: list[ClientUpdate], weights, mode: CorrectionMode) -> np.ndarray:
    """Pseudo-gradient from client updates under the given correction mode."""
    deltas = [u.delta for u in updates]
    if mode is CorrectionMode.NONE:
        return aggregate(deltas, weights)
    if mode is CorrectionMode.LOCAL:
        return aggregate([apply_local(u.delta, u.n_matrix) for u in updates], weights)
    return joint_aggregate(deltas, [u.n_matrix for u in updates], weights)


def _round_weights(exp: Experiment, sampled: list[int]) -> list[float]:
    if len(sampled) == exp.num_clients:
        return [float(exp.problem.w[i]) for i in sampled]
    if exp.config.sampled_weights == "uniform":
        return [1.0 / len(sampled)] * len(sampled)
    w = np.array([exp.problem.w[i] for i in sampled])
    return list(w / w.sum())


def _local_update(exp: Experiment, kind: ClientOptKind, i: int, x, rng) -> ClientUpdate:
    res = run_local(kind, client_oracle(exp.problem, i, exp.noise), x, rng)
    return ClientUpdate(client=i, delta=res.delta, n_matrix=res.n_matrix)


def make_round_operator(exp: Experiment, t: int = 0):
    """``A(x, rng)``: one draw of the full-participation round operator at round ``t``'s client lrs.

    Under correction this is ``x`` minus the corrected aggregate, so its fixed
    points are the fixed points of the corrected iteration.
    """
    lrs, _ = round_lrs(exp, t)
    kinds = [replace(k, lr=float(lr)) for k, lr in zip(exp.kinds, lrs)]
    clients = list(range(exp.num_clients))
    weights = [float(w) for w in exp.problem.w]

    def operator(x, rng):
        seeds = rng.integers(0, 2**63 - 1, size=len(clients))
        updates = [_local_update(exp, kinds[i], i, x, np.random.default_rng(int(seeds[i]))) for i in clients]
        return np.asarray(x, dtype=float) - combine(updates, weights, exp.mode)

    return operator


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsRecord:
    """Metrics after round ``round`` (i.e. evaluated at the updated model).

    ``client_lr`` is the largest client learning rate used in the round.
    Distances are only available on quadratic problems; the distance to the
    fixed point only for fixed-preconditioner clients.
    """

    round: int
    loss: float | None
    grad_norm: float | None
    dist_to_opt: float | None
    dist_to_fixed_point: float | None
    client_lr: float
    server_lr: float
    wall_clock: float | None = None


METRIC_FIELDS = [f.name for f in fields(MetricsRecord)]


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    x_final: np.ndarray
    iterates: list[np.ndarray] | None = None


def expected_fixed_point(exp: Experiment, lrs) -> np.ndarray | None:
    """Closed-form fixed point of the expected round operator, where one exists."""
    prob = exp.problem
    if not isinstance(prob, QuadraticFamily) or any(k.name not in ("sgd", "precond_gd") for k in exp.kinds):
        return None
    full = exp.per_round == exp.num_clients
    uniform_w = np.allclose(prob.w, prob.w[0], rtol=0, atol=0)
    if not full and (exp.mode is CorrectionMode.JOINT or not uniform_w):
        return None
    steps = [k.local_steps for k in exp.kinds]
    preconds = [k.preconditioner for k in exp.kinds]
    try:
        return fixed_point_closed_form(prob, list(lrs), steps, preconds, corrected=exp.mode.local)
    except (NotContractiveError, np.linalg.LinAlgError):
        return None


def run_experiment(config, on_record=None) -> ExperimentResult:
    """Run every round of a config (dict, path, JSON string or ExperimentConfig)."""
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    exp = prepare(config)
    prob = exp.problem
    seed = config.seed
    x = exp.x0.copy()
    state = ServerState.initial(exp.server, prob.dim)
    x_opt = global_min(prob) if isinstance(prob, QuadraticFamily) and config.compute_metrics else None
    fp_cache: dict[tuple, np.ndarray | None] = {}
    iterates = [x.copy()] if config.record_iterates else None
    records = []
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    start = time.perf_counter()
    try:
        for t in range(config.rounds):
            try:
                lrs, alpha = round_lrs(exp, t)
                sampled = sample_clients(exp.num_clients, exp.per_round, sampling_rng(seed, t))
                weights = _round_weights(exp, sampled)
                kinds = {i: replace(exp.kinds[i], lr=float(lrs[i])) for i in sampled}
                x_t = x

                def work(i):
                    return _local_update(exp, kinds[i], i, x_t, client_rng(seed, t, i))

                updates = list(pool.map(work, sampled)) if pool else [work(i) for i in sampled]
                pseudo = combine(updates, weights, exp.mode)
                x, state = server_step(exp.server, state, x, pseudo, lr=alpha)
            except (ValueError, ArithmeticError) as err:
                raise RoundError(t, err) from err
            if iterates is not None:
                iterates.append(x.copy())
            rec = MetricsRecord(
                round=t, loss=None, grad_norm=None, dist_to_opt=None, dist_to_fixed_point=None,
                client_lr=float(np.max(lrs)), server_lr=float(alpha),
                wall_clock=time.perf_counter() - start if config.wall_clock else None,
            )
            if config.compute_metrics:
                rec.loss = global_loss(prob, x)
                rec.grad_norm = float(np.linalg.norm(global_grad(prob, x)))
                if x_opt is not None:
                    rec.dist_to_opt = float(np.linalg.norm(x - x_opt))
                    key = tuple(lrs)
                    if key not in fp_cache:
                        fp_cache[key] = expected_fixed_point(exp, lrs)
                    if fp_cache[key] is not None:
                        rec.dist_to_fixed_point = float(np.linalg.norm(x - fp_cache[key]))
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(records=records, x_final=x, iterates=iterates)


# ---------------------------------------------------------------- metrics files


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


@contextmanager
def atomic_open(path):
    """Open ``path`` for text writing via a temporary sibling renamed on success.

    A failure never leaves a partial file behind.
    """
    path = Path(path)
    directory = path.parent
    if not directory.is_dir():
        raise FileNotFoundError(f"cannot write {path}: directory {directory} does not exist")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_metrics(records, fh, format: str = "csv") -> None:
    if format == "csv":
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, name)) for name in METRIC_FIELDS])
    elif format == "jsonl":
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")
    else:
        raise ValueError(f"unknown metrics format {format!r}")


def write_metrics(records, path, format: str = "csv") -> None:
    """Write records as CSV (fixed header ``METRIC_FIELDS``) or JSONL.

    Floats keep 17 significant digits so reading back is lossless.
    """
    if format not in ("csv", "jsonl"):
        raise ValueError(f"unknown metrics format {format!r}")
    with atomic_open(path) as fh:
        dump_metrics(records, fh, format)


def _parse(name, text):
    if text == "":
        return None
    if name == "round":
        return int(text)
    return float(text)


def read_metrics(path, format: str | None = None) -> list[MetricsRecord]:
    path = Path(path)
    format = format or ("jsonl" if path.suffix == ".jsonl" else "csv")
    with open(path, newline="") as fh:
        if format == "jsonl":
            return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if header != METRIC_FIELDS:
            raise ValueError(f"unexpected metrics header in {path}: {header}")
        return [MetricsRecord(**{k: _parse(k, v) for k, v in zip(header, row)}) for row in reader]

