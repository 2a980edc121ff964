"""Best-response training of the ensemble game across environments.

Each training environment owns one classifier; every environment predicts
with the arithmetic mean of all classifiers. Environments take turns
minimizing their own risk of the shared ensemble (optionally preceded by a
representation turn that minimizes the summed risk). Training stops when a
rolling-window quantile rule catches the ensemble in its low-accuracy,
low-spurious-correlation state.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .core import Rng, ShapeError, cross_entropy, mean_squared_error, pearson, softmax_rows

FIXED_PHI = "fixed_phi"
VARIABLE_PHI = "variable_phi"

CROSS_ENTROPY = "cross_entropy"
SQUARED = "squared"


@dataclass
class EnsembleModel:
    classifiers: list  # one Mlp per environment
    representation: nn.Mlp = None  # None means identity (fixed-phi game)
    mode: str = FIXED_PHI

    def __post_init__(self):
        if not self.classifiers:
            raise ValueError("need at least one classifier")
        in_dims = {c.input_dim for c in self.classifiers}
        out_dims = {c.output_dim for c in self.classifiers}
        if len(in_dims) != 1 or len(out_dims) != 1:
            raise ShapeError("classifiers must share input and output dims")
        if self.representation is not None:
            if self.representation.output_dim != self.classifiers[0].input_dim:
                raise ShapeError("representation output does not match classifiers")
        if self.mode == VARIABLE_PHI and self.representation is None:
            raise ValueError("variable-phi game needs a representation network")

    @property
    def n_envs(self) -> int:
        return len(self.classifiers)

    def represent(self, batch: np.ndarray) -> np.ndarray:
        if self.representation is None:
            return np.asarray(batch, dtype=np.float64)
        z, _ = nn.forward(self.representation, batch, train_mode=False)
        return z


def ensemble_logits(model: EnsembleModel, batch: np.ndarray) -> np.ndarray:
    """Mean of the per-environment classifier outputs, inference mode."""
    z = model.represent(batch)
    total = None
    for clf in model.classifiers:
        logits, _ = nn.forward(clf, z, train_mode=False)
        total = logits if total is None else total + logits
    return total / model.n_envs


@dataclass
class TerminationRule:
    window: int = 20
    quantile: float = 0.25
    min_steps: int = None  # default: warm start + window
    enabled: bool = True
    threshold: float = None  # optional manual accuracy threshold


class TerminationMonitor:
    """Fires when the tracked accuracy sits in the low quartile of a window.

    Never fires before min_steps or before the window fills. With a manual
    threshold set, firing additionally requires accuracy <= threshold.
    """

    def __init__(self, window: int = 20, quantile: float = 0.25,
                 min_steps: int = 0, threshold: float = None):
        self.window = deque(maxlen=window)
        self.quantile = quantile
        self.min_steps = min_steps
        self.threshold = threshold

    def observe(self, accuracy: float, step: int) -> bool:
        self.window.append(accuracy)
        if step < self.min_steps or len(self.window) < self.window.maxlen:
            return False
        if self.threshold is not None and accuracy > self.threshold:
            return False
        return accuracy <= float(np.quantile(self.window, self.quantile))


def should_terminate(monitor: TerminationMonitor, accuracy: float, step: int) -> bool:
    return monitor.observe(accuracy, step)


@dataclass
class TrainConfig:
    lr: float = 2.5e-4
    batch_size: int = 256
    steps_per_turn: int = 1
    warm_start_steps: int = None  # default: steps in one epoch of pooled data
    max_iters: int = 500
    termination: TerminationRule = field(default_factory=TerminationRule)
    seed: int = 0
    loss: str = CROSS_ENTROPY
    # architecture used when best_response_train builds the model itself
    hidden_dims: tuple = (390, 390)
    phi_hidden_dims: tuple = (390,)
    repr_dim: int = 390
    l2_coeff: float = 1.25e-3
    dropout_rate: float = 0.75
    activation: str = "elu"
    n_classes: int = 2
    test_every: int = 10  # trace cadence for test accuracy

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for name in ("batch_size", "steps_per_turn", "max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class TraceRecord:
    step: int
    turn_owner: str
    ens_train_acc: float
    env_risks: list
    env_accs: list
    ens_spur_corr: float
    w_spur_corrs: list
    test_acc: float = None


class TrainTrace:
    """Per-turn training diagnostics; serializes to the trace CSV schema."""

    def __init__(self):
        self.records = []

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("trace steps must strictly increase")
        self.records.append(rec)

    def train_accuracies(self) -> np.ndarray:
        return np.array([r.ens_train_acc for r in self.records])

    def ensemble_correlations(self) -> np.ndarray:
        return np.array([r.ens_spur_corr for r in self.records])

    def to_csv(self, path) -> None:
        if not self.records:
            raise ValueError("empty trace")
        n_envs = len(self.records[0].env_risks)
        cols = ["step", "turn_owner", "ens_train_acc"]
        cols += [f"env{k}_risk" for k in range(n_envs)]
        cols += ["ens_spur_corr"]
        cols += [f"w{k}_spur_corr" for k in range(n_envs)]
        cols += ["test_acc"]
        fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6g}"
        with open(path, "w", newline="") as f:
            f.write(",".join(cols) + "\n")
            for r in self.records:
                row = [str(r.step), r.turn_owner, fmt(r.ens_train_acc)]
                row += [fmt(v) for v in r.env_risks]
                row += [fmt(r.ens_spur_corr)]
                row += [fmt(v) for v in r.w_spur_corrs]
                row += [fmt(r.test_acc)]
                f.write(",".join(row) + "\n")


def _env_xy(env, loss: str):
    if loss == SQUARED:
        return env.features, np.asarray(env.targets, dtype=np.float64)
    return env.features, np.asarray(env.labels)


def _loss_grad(ens_out: np.ndarray, y: np.ndarray, loss: str) -> np.ndarray:
    if loss == SQUARED:
        target = y.reshape(ens_out.shape)
        return 2.0 * (ens_out - target) / ens_out.shape[0]
    return nn.loss_grad_logits(softmax_rows(ens_out), y)


def _risk(ens_out: np.ndarray, y: np.ndarray, loss: str) -> float:
    if loss == SQUARED:
        return mean_squared_error(ens_out, y.reshape(ens_out.shape))
    return cross_entropy(softmax_rows(ens_out), y)


class _Batcher:
    """Cycles a per-environment shuffled index permutation, reshuffled per epoch."""

    def __init__(self, n: int, batch_size: int, rng: Rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def env_turn(model: EnsembleModel, e: int, batch_x, batch_y, opt: nn.AdamState,
             rng: Rng = None, loss: str = CROSS_ENTROPY) -> None:
    """One best-response gradient step for environment e's classifier.

    Only w^e moves; the ensemble mean contributes the 1/n_envs chain factor
    to its logit gradient. The representation and all other classifiers are
    read-only here.
    """
    if not 0 <= e < model.n_envs:
        raise IndexError(f"environment index {e} out of range")
    z = model.represent(batch_x)
    outputs = []
    cache_e = None
    for q, clf in enumerate(model.classifiers):
        train = q == e
        out, cache = nn.forward(clf, z, train_mode=train, rng=rng if train else None)
        if train:
            cache_e = cache
        outputs.append(out)
    ens = sum(outputs) / model.n_envs
    dlogits = _loss_grad(ens, batch_y, loss) / model.n_envs
    grads, _ = nn.backward(model.classifiers[e], cache_e, dlogits)
    nn.adam_step(opt, model.classifiers[e].parameters(), grads)


def phi_turn(model: EnsembleModel, env_batches, opt: nn.AdamState,
             rng: Rng = None, loss: str = CROSS_ENTROPY) -> None:
    """One representation step on the summed environment risks.

    env_batches is a list of (x, y), one per environment. Classifier
    parameters are untouched; gradients flow through every classifier into
    the shared representation.
    """
    if model.mode != VARIABLE_PHI:
        raise ValueError("phi_turn requires a variable-phi game")
    phi = model.representation
    total = [np.zeros_like(p) for p in phi.parameters()]
    for e, (x, y) in enumerate(env_batches):
        z, phi_cache = nn.forward(
            phi, x, train_mode=True, rng=rng.child(f"phi_env{e}") if rng else None
        )
        outputs, caches = [], []
        for clf in model.classifiers:
            out, cache = nn.forward(clf, z, train_mode=False)
            outputs.append(out)
            caches.append(cache)
        ens = sum(outputs) / model.n_envs
        dlogits = _loss_grad(ens, y, loss) / model.n_envs
        dz = np.zeros_like(z)
        for clf, cache in zip(model.classifiers, caches):
            _, dinput = nn.backward(clf, cache, dlogits)
            dz += dinput
        grads, _ = nn.backward(phi, phi_cache, dz)
        for t, g in zip(total, grads):
            t += g
    nn.adam_step(opt, phi.parameters(), total)


def predictions(model: EnsembleModel, features: np.ndarray,
                loss: str = CROSS_ENTROPY) -> np.ndarray:
    out = ensemble_logits(model, features)
    if loss == SQUARED:
        return out.ravel()
    return np.argmax(out, axis=1)


def evaluate(model: EnsembleModel, dataset, loss: str = CROSS_ENTROPY) -> dict:
    """Accuracy (argmax, ties to class 0) and mean risk, inference mode."""
    x, y = _env_xy(dataset, loss)
    out = ensemble_logits(model, x)
    risk = _risk(out, y, loss)
    if loss == SQUARED:
        return {"accuracy": float("nan"), "risk": risk}
    acc = float(np.mean(np.argmax(out, axis=1) == y))
    return {"accuracy": acc, "risk": risk}


def spurious_correlation(model: EnsembleModel, dataset,
                         loss: str = CROSS_ENTROPY) -> float:
    """Pearson correlation between hard predictions and the spurious bit."""
    preds = predictions(model, dataset.features, loss)
    return pearson(preds.astype(np.float64), dataset.spurious_bits)


def _classifier_correlations(model: EnsembleModel, features, bits) -> list:
    z = model.represent(features)
    corrs = []
    for clf in model.classifiers:
        logits, _ = nn.forward(clf, z, train_mode=False)
        corrs.append(pearson(np.argmax(logits, axis=1).astype(np.float64), bits))
    return corrs


def build_ensemble(envs, config: TrainConfig, mode: str, rng: Rng) -> EnsembleModel:
    in_dim = envs[0].features.shape[1]
    out_dim = 1 if config.loss == SQUARED else config.n_classes
    representation = None
    clf_in = in_dim
    if mode == VARIABLE_PHI:
        representation = nn.make_mlp(
            (in_dim, *config.phi_hidden_dims, config.repr_dim),
            rng.child("phi"),
            hidden_activation=config.activation,
            l2_coeff=config.l2_coeff,
            dropout_rate=config.dropout_rate,
        )
        # the representation's output layer is ELU-regularized too
        representation.layers[-1].activation = config.activation
        representation.layers[-1].l2_coeff = config.l2_coeff
        clf_in = config.repr_dim
    classifiers = [
        nn.make_mlp(
            (clf_in, *config.hidden_dims, out_dim),
            rng.child(f"clf{e}"),
            hidden_activation=config.activation,
            l2_coeff=config.l2_coeff,
            dropout_rate=config.dropout_rate,
        )
        for e in range(len(envs))
    ]
    return EnsembleModel(classifiers, representation, mode)


def best_response_train(envs, config: TrainConfig, mode: str = FIXED_PHI,
                        model: EnsembleModel = None, test_env=None,
                        trace_owner: str = None):
    """Play the ensemble game by round-robin best response; returns (model, trace).

    Turn order per iteration: representation turn (variable-phi only), then
    each environment in index order for steps_per_turn gradient steps. The
    trace records one row after every player's turn. The returned model is
    the state at termination, which is the low-correlation state the
    monitor is designed to catch.
    """
    if not envs:
        raise ValueError("need at least one environment")
    for env in envs:
        if env.features.shape[0] == 0:
            raise ValueError("empty environment")
    rng = Rng(config.seed)
    if model is None:
        model = build_ensemble(envs, config, mode, rng.child("init"))
    loss = config.loss

    data = [_env_xy(env, loss) for env in envs]
    pooled_x = np.vstack([x for x, _ in data])
    pooled_y = np.concatenate([y for _, y in data])
    pooled_bits = (
        np.concatenate([env.spurious_bits for env in envs])
        if getattr(envs[0], "spurious_bits", None) is not None
        else None
    )

    n_pooled = pooled_x.shape[0]
    warm = config.warm_start_steps
    if warm is None:
        warm = max(1, n_pooled // config.batch_size)
    rule = config.termination
    min_steps = rule.min_steps if rule.min_steps is not None else warm + rule.window
    monitor = TerminationMonitor(rule.window, rule.quantile, min_steps, rule.threshold)

    batchers = [
        _Batcher(x.shape[0], config.batch_size, rng.child(f"batch{e}"))
        for e, (x, _) in enumerate(data)
    ]
    opts = [
        nn.AdamState.for_params(clf.parameters(), lr=config.lr)
        for clf in model.classifiers
    ]
    phi_opt = (
        nn.AdamState.for_params(model.representation.parameters(), lr=config.lr)
        if mode == VARIABLE_PHI
        else None
    )
    drop_rng = rng.child("dropout")

    trace = TrainTrace()
    step = 0
    stop = False

    env_sizes = [x.shape[0] for x, _ in data]
    env_slices = []
    lo_row = 0
    for size in env_sizes:
        env_slices.append(slice(lo_row, lo_row + size))
        lo_row += size

    def record(owner: str) -> bool:
        nonlocal step
        step += 1
        # one representation pass and one pass per classifier cover every
        # diagnostic below, so full-data traces stay cheap per turn
        z = model.represent(pooled_x)
        clf_outs = [nn.forward(clf, z, train_mode=False)[0]
                    for clf in model.classifiers]
        out = sum(clf_outs) / model.n_envs
        if loss == SQUARED:
            acc = float("nan")
            monitored = -_risk(out, pooled_y, loss)
        else:
            acc = float(np.mean(np.argmax(out, axis=1) == pooled_y))
            monitored = acc
        risks, accs = [], []
        for sl, (_, y) in zip(env_slices, data):
            risks.append(_risk(out[sl], y, loss))
            accs.append(
                float(np.mean(np.argmax(out[sl], axis=1) == y))
                if loss != SQUARED else float("nan")
            )
        if pooled_bits is not None and loss != SQUARED:
            preds = np.argmax(out, axis=1).astype(np.float64)
            ens_corr = pearson(preds, pooled_bits)
            w_corrs = [
                pearson(np.argmax(o, axis=1).astype(np.float64), pooled_bits)
                for o in clf_outs
            ]
        else:
            ens_corr = float("nan")
            w_corrs = [float("nan")] * model.n_envs
        test_acc = None
        if test_env is not None and step % config.test_every == 0:
            test_acc = evaluate(model, test_env, loss)["accuracy"]
        trace.append(
            TraceRecord(step, owner, acc, risks, accs, ens_corr, w_corrs, test_acc)
        )
        fired = monitor.observe(monitored, step)
        return rule.enabled and fired

    owner_prefix = trace_owner
    for _ in range(config.max_iters):
        if stop:
            break
        if mode == VARIABLE_PHI:
            for _ in range(config.steps_per_turn):
                env_batches = []
                for e, (x, y) in enumerate(data):
                    idx = batchers[e].next()
                    env_batches.append((x[idx], y[idx]))
                phi_turn(model, env_batches, phi_opt,
                         rng=drop_rng.child(f"phi{step}"), loss=loss)
            if record(owner_prefix or "phi"):
                stop = True
                continue
        for e in range(model.n_envs):
            for k in range(config.steps_per_turn):
                idx = batchers[e].next()
                x, y = data[e]
                env_turn(model, e, x[idx], y[idx], opts[e],
                         rng=drop_rng.child(f"env{e}_{step}_{k}"), loss=loss)
            if record(owner_prefix or f"env{e}"):
                stop = True
                break
    return model, trace
