"""Comparison methods: pooled/per-environment ERM, robust min-max, oracle.

All baselines reuse the game module's batching, seeding, and trace schema
so that comparisons isolate the objective rather than the pipeline. The
grayscale oracle is plain ERM run on the benchmark's oracle split.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import nn
from .core import Rng
from .datasets import EnvironmentDataset
from .game import (
    CROSS_ENTROPY,
    EnsembleModel,
    TerminationRule,
    TrainConfig,
    TrainTrace,
    TraceRecord,
    _Batcher,
    _env_xy,
    _loss_grad,
    _risk,
    best_response_train,
    ensemble_logits,
    evaluate,
    pearson,
)


def as_ensemble(model: nn.Mlp) -> EnsembleModel:
    """Wrap a single classifier so game-module evaluation applies."""
    return EnsembleModel([model])


def pool_environments(datasets) -> EnvironmentDataset:
    if not datasets:
        raise ValueError("need at least one dataset")
    bits = [getattr(d, "spurious_bits", None) for d in datasets]
    return EnvironmentDataset(
        np.vstack([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate(bits) if all(b is not None for b in bits) else None,
        "pooled",
        float("nan"),
    )


def train_erm(datasets, config: TrainConfig, test_env=None):
    """Single classifier minimizing mean loss on the pooled rows via Adam.

    Runs the fixed step budget from config (no termination rule); an
    ensemble of one played for max_iters turns is exactly that.
    """
    pooled = pool_environments(datasets)
    cfg = dataclasses.replace(
        config, termination=TerminationRule(enabled=False)
    )
    model, trace = best_response_train(
        [pooled], cfg, test_env=test_env, trace_owner="erm"
    )
    return model.classifiers[0], trace


def train_robust_minmax(envs, config: TrainConfig, test_env=None):
    """Minimize the maximum per-environment loss by hard-max subgradient.

    Each step draws one batch per environment and applies the gradient of
    the worst environment only; ties break toward the lowest index.
    """
    if len(envs) < 2:
        raise ValueError("robust min-max needs at least 2 environments")
    loss = config.loss
    rng = Rng(config.seed)
    data = [_env_xy(env, loss) for env in envs]
    pooled_x = np.vstack([x for x, _ in data])
    pooled_y = np.concatenate([y for _, y in data])
    env_slices = []
    lo_row = 0
    for x, _ in data:
        env_slices.append(slice(lo_row, lo_row + x.shape[0]))
        lo_row += x.shape[0]
    bits = [getattr(env, "spurious_bits", None) for env in envs]
    pooled_bits = np.concatenate(bits) if all(b is not None for b in bits) else None

    from .game import build_ensemble  # single classifier, shared init path

    wrapper = build_ensemble(envs[:1], config, "fixed_phi", rng.child("init"))
    model = wrapper.classifiers[0]
    opt = nn.AdamState.for_params(model.parameters(), lr=config.lr)
    batchers = [
        _Batcher(x.shape[0], config.batch_size, rng.child(f"batch{e}"))
        for e, (x, _) in enumerate(data)
    ]
    drop_rng = rng.child("dropout")

    trace = TrainTrace()
    for step in range(1, config.max_iters + 1):
        losses, caches, grads_inputs = [], [], []
        for e, (x, y) in enumerate(data):
            idx = batchers[e].next()
            bx, by = x[idx], y[idx]
            out, cache = nn.forward(
                model, bx, train_mode=True, rng=drop_rng.child(f"s{step}e{e}")
            )
            losses.append(_risk(out, by, loss) + nn.regularization_loss(model))
            caches.append(cache)
            grads_inputs.append((out, by))
        worst = int(np.argmax(losses))  # argmax takes the first max: lowest index
        out, by = grads_inputs[worst]
        dlogits = _loss_grad(out, by, loss)
        grads, _ = nn.backward(model, caches[worst], dlogits)
        nn.adam_step(opt, model.parameters(), grads)

        ens = as_ensemble(model)
        out_all = ensemble_logits(ens, pooled_x)
        acc = (
            float(np.mean(np.argmax(out_all, axis=1) == pooled_y))
            if loss == CROSS_ENTROPY
            else float("nan")
        )
        risks, accs = [], []
        for sl, (_, y) in zip(env_slices, data):
            risks.append(_risk(out_all[sl], y, loss))
            accs.append(
                float(np.mean(np.argmax(out_all[sl], axis=1) == y))
                if loss == CROSS_ENTROPY else float("nan")
            )
        if pooled_bits is not None and loss == CROSS_ENTROPY:
            preds = np.argmax(out_all, axis=1).astype(np.float64)
            corr = pearson(preds, pooled_bits)
        else:
            corr = float("nan")
        test_acc = None
        if test_env is not None and step % config.test_every == 0:
            test_acc = evaluate(ens, test_env, loss)["accuracy"]
        trace.append(
            TraceRecord(step, "robust", acc, risks, accs, corr, [corr], test_acc)
        )
    return model, trace
