"""Single-process counterparts of the federated computations.

``centralized_step`` puts all four networks on one tape and applies one
optimizer step; a federated round must land on the same parameters.
``train_source_only`` is plain supervised training of the source
extractor and classifier with the federated batch plan and learning-rate
schedule, which is what the federated loop reduces to when the adaptation
terms are switched off.  It is also the source-only baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedled import autodiff as ad
from fedled.data import DomainDataset
from fedled.losses import KernelConfig, LossWeights, cross_entropy, fedled_objective
from fedled.models import AdamState, MlpParams, adam_step, lr_schedule, mlp_forward
from fedled.protocol import SOURCE_STREAM, Schedule

NETS = ("source", "target", "classifier", "discriminator")


def centralized_step(
    params: dict,
    states: dict,
    x_s,
    y_s,
    x_t,
    weights: LossWeights,
    lr: float,
    kernel: KernelConfig = KernelConfig(),
    *,
    random_map=None,
):
    """One monolithic optimizer step on raw inputs.

    ``params`` and ``states`` map each of ``NETS`` to its parameters and Adam
    state.  Returns ``(new_params, new_states, breakdown, grads)``.
    """
    tape = ad.Tape()
    fs = mlp_forward(params["source"], tape.constant(x_s), tape)
    ft = mlp_forward(params["target"], tape.constant(x_t), tape)
    obj = fedled_objective(
        tape, fs.output, y_s, ft.output, params["classifier"], params["discriminator"],
        weights, kernel, random_map=random_map,
    )
    g = tape.backward(obj.total)
    grads = {
        "source": fs.grads(g),
        "target": ft.grads(g),
        "classifier": obj.classifier.grads(g),
        "discriminator": obj.discriminator.grads(g),
    }
    new_params, new_states = {}, {}
    for name in NETS:
        new_params[name], new_states[name] = adam_step(params[name], grads[name], states[name], lr)
    return new_params, new_states, obj.breakdown, grads


@dataclass
class SupervisedTrace:
    extractor: MlpParams
    classifier: MlpParams
    # parameter snapshots after every step, only when requested
    extractors: list
    classifiers: list
    losses: list


def train_source_only(
    data: DomainDataset,
    extractor: MlpParams,
    classifier: MlpParams,
    schedule: Schedule,
    seed: int,
    lr0: float = 0.01,
    *,
    keep_trajectory: bool = False,
    on_epoch=None,
) -> SupervisedTrace:
    """Supervised training of extractor then classifier on labeled rows.

    Draws batches exactly like the source agent does, so with the adaptation
    weights at zero the federated trajectory reproduces this one.
    """
    rng = np.random.default_rng([int(seed), SOURCE_STREAM])
    opt_f = AdamState.for_params(extractor)
    opt_c = AdamState.for_params(classifier)
    trace = SupervisedTrace(extractor, classifier, [], [], [])
    step = 0
    for epoch in range(schedule.epochs):
        perm = rng.permutation(len(data))
        for j in range(schedule.rounds_per_epoch):
            idx = schedule.indices(perm, j)
            tape = ad.Tape()
            ffwd = mlp_forward(extractor, tape.constant(data.features[idx]), tape)
            cfwd = mlp_forward(classifier, ffwd.output, tape)
            loss = cross_entropy(cfwd.output, data.labels[idx])
            g = tape.backward(loss)
            lr = lr_schedule(schedule.progress(step), lr0)
            extractor, opt_f = adam_step(extractor, ffwd.grads(g), opt_f, lr)
            classifier, opt_c = adam_step(classifier, cfwd.grads(g), opt_c, lr)
            trace.losses.append(float(loss.value))
            if keep_trajectory:
                trace.extractors.append(extractor)
                trace.classifiers.append(classifier)
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, extractor, classifier, trace.losses[-schedule.rounds_per_epoch :])
    trace.extractor, trace.classifier = extractor, classifier
    return trace
