"""Three-party federated training: source agent, target agent, server.

Per round the source uploads ``(f_S, y_S)``, the target uploads ``f_T``,
the server evaluates the full objective, steps the classifier and the
discriminator, and returns ``dL/df`` plus the new classifier to each agent.
Agents finish backpropagation through their own extractor locally.

The same party methods drive both transports: :class:`Federation` calls
them sequentially over in-process channels, :func:`train_tcp` runs each
party's loop in its own thread over sockets.  The server is the hub, so it
keeps the transcript; its processing order is fixed by the lockstep
contract and therefore identical across transports.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from fedled import autodiff as ad
from fedled.data import DomainDataset
from fedled.errors import AuditError, ConfigError, DataError, ProtocolError, TransportError
from fedled.losses import KernelConfig, LossBreakdown, LossWeights, fedled_objective, random_multilinear_map
from fedled.messages import (
    EpochEnd,
    GradToSource,
    GradToTarget,
    Shutdown,
    SourceBatch,
    TargetBatch,
    payload_fields,
)
from fedled.models import (
    AdamState,
    MlpParams,
    NetConfig,
    adam_step,
    init_params,
    lr_schedule,
    mlp_forward,
    predict,
)
from fedled.transport import DEFAULT_TIMEOUT, InProcChannel, encode_payload

log = logging.getLogger(__name__)

SOURCE, TARGET, SERVER = "source", "target", "server"
# rng stream ids mixed with the run seed; one independent shuffle per party
SOURCE_STREAM, TARGET_STREAM, PRETRAIN_STREAM = 101, 202, 303


@dataclass(frozen=True)
class Hyper:
    lam: float = 1.0
    beta: float = 0.5
    lr0: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    pre_epochs: int = 10
    pre_lr: float = 0.01
    grl_warmup: bool = True
    kernel: KernelConfig = KernelConfig()

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0 or self.pre_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.lr0 <= 0 or self.pre_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lam and beta must be >= 0")


def grl_warmup(progress: float) -> float:
    """``2 / (1 + exp(-10 p)) - 1``: ramps the reversal strength from 0 to ~1."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


@dataclass(frozen=True)
class Schedule:
    """Round accounting shared by all parties (derived from public sizes only)."""

    n_source: int
    n_target: int
    batch_size: int
    epochs: int

    @property
    def rounds_per_epoch(self) -> int:
        return math.ceil(max(self.n_source, self.n_target) / self.batch_size)

    @property
    def total_rounds(self) -> int:
        return self.rounds_per_epoch * self.epochs

    def batch_len(self, j: int) -> int:
        return min(self.batch_size, max(self.n_source, self.n_target) - j * self.batch_size)

    def progress(self, global_round: int) -> float:
        """Fraction of rounds completed once the current one finishes, in (0, 1]."""
        return (global_round + 1) / self.total_rounds

    def indices(self, perm: np.ndarray, j: int) -> np.ndarray:
        """Batch ``j`` of an epoch; the shorter dataset wraps around."""
        start = j * self.batch_size
        return perm[(start + np.arange(self.batch_len(j))) % perm.size]


class _Agent:
    role = "?"

    def __init__(self, data: DomainDataset, extractor: MlpParams, classifier: MlpParams, schedule: Schedule, hyper: Hyper, seed: int, stream: int):
        self.data = data
        self.extractor = extractor
        self.classifier = classifier
        self.optimizer = AdamState.for_params(extractor)
        self.schedule = schedule
        self.hyper = hyper
        self.rng = np.random.default_rng([int(seed), stream])
        self.round = 0
        self._perm = None
        self._pending = None
        self.last_indices = None

    def _next_indices(self) -> np.ndarray:
        j = self.round % self.schedule.rounds_per_epoch
        if j == 0:
            self._perm = self.rng.permutation(len(self.data))
        self.last_indices = self.schedule.indices(self._perm, j)
        return self.last_indices

    def _forward(self, idx):
        tape = ad.Tape()
        fwd = mlp_forward(self.extractor, tape.constant(self.data.features[idx]), tape)
        self._pending = (tape, fwd)
        return fwd.output.value

    def _apply(self, grad, classifier: MlpParams):
        if self._pending is None:
            raise ProtocolError(f"{self.role}: gradient arrived with no batch outstanding")
        tape, fwd = self._pending
        out = fwd.output
        if grad.shape != out.value.shape:
            raise ProtocolError(f"{self.role}: gradient shape {grad.shape} != feature shape {out.value.shape}")
        if classifier.sizes != self.classifier.sizes:
            raise ProtocolError(f"{self.role}: classifier architecture changed")
        grads = tape.backward(out, seed=grad)
        lr = lr_schedule(self.schedule.progress(self.round), self.hyper.lr0)
        self.extractor, self.optimizer = adam_step(self.extractor, fwd.grads(grads), self.optimizer, lr)
        self.classifier = classifier
        self._pending = None
        self.round += 1

    def on_epoch_end(self, epoch: int) -> None:
        pass


class SourceAgent(_Agent):
    """Holds the labeled source data, its extractor and a classifier copy."""

    role = SOURCE

    def __init__(self, data, extractor, classifier, schedule, hyper, seed):
        if data.labels is None:
            raise DataError("source agent needs labeled data")
        super().__init__(data, extractor, classifier, schedule, hyper, seed, SOURCE_STREAM)

    def next_batch(self) -> SourceBatch:
        idx = self._next_indices()
        return SourceBatch(self._forward(idx), self.data.labels[idx])

    def apply(self, msg) -> None:
        if not isinstance(msg, GradToSource):
            raise ProtocolError(f"source expected GradToSource, got {type(msg).__name__}")
        self._apply(msg.grad, msg.classifier)


class TargetAgent(_Agent):
    """Holds unlabeled target data.  ``eval_features`` (its own held-out
    rows, still unlabeled) are scored at every epoch end."""

    role = TARGET

    def __init__(self, data, extractor, classifier, schedule, hyper, seed, eval_features=None):
        if data.labels is not None:
            raise DataError("target agent must not hold labels")
        super().__init__(data, extractor, classifier, schedule, hyper, seed, TARGET_STREAM)
        self.eval_features = eval_features
        self.eval_predictions: list[np.ndarray] = []

    def next_batch(self) -> TargetBatch:
        return TargetBatch(self._forward(self._next_indices()))

    def apply(self, msg) -> None:
        if not isinstance(msg, GradToTarget):
            raise ProtocolError(f"target expected GradToTarget, got {type(msg).__name__}")
        self._apply(msg.grad, msg.classifier)

    def diagnose(self, x) -> np.ndarray:
        """Class predictions of the deployed diagnoser (target extractor then classifier)."""
        logits = predict(self.classifier, predict(self.extractor, x))
        return np.argmax(logits, axis=1)

    def on_epoch_end(self, epoch: int) -> None:
        if self.eval_features is not None:
            self.eval_predictions.append(self.diagnose(self.eval_features))


class Server:
    """Authoritative classifier plus the domain discriminator."""

    role = SERVER

    def __init__(self, classifier: MlpParams, discriminator: MlpParams, net: NetConfig, schedule: Schedule, hyper: Hyper, seed: int = 0):
        self.classifier = classifier
        self.discriminator = discriminator
        self.opt_classifier = AdamState.for_params(classifier)
        self.opt_discriminator = AdamState.for_params(discriminator)
        self.net = net
        self.schedule = schedule
        self.hyper = hyper
        self.random_map = None
        if not net.exact_conditioning:
            self.random_map = random_multilinear_map((net.feature_dim, net.num_classes, net.random_map_dim), seed)
        self.round = 0
        self.history: list[LossBreakdown] = []

    def loss_weights(self, progress: float) -> LossWeights:
        grl = grl_warmup(progress) if self.hyper.grl_warmup else 1.0
        return LossWeights(self.hyper.lam, self.hyper.beta, grl)

    def _check(self, msg, want, width_name):
        if not isinstance(msg, want):
            raise ProtocolError(f"server expected {want.__name__}, got {type(msg).__name__}")
        f = msg.features
        if f.ndim != 2 or f.shape[1] != self.net.feature_dim or f.shape[0] < 2:
            raise ProtocolError(f"{width_name} has shape {f.shape}; expected (n>=2, {self.net.feature_dim})")

    def process(self, sb: SourceBatch, tb: TargetBatch):
        self._check(sb, SourceBatch, "f_S")
        self._check(tb, TargetBatch, "f_T")
        if sb.labels.shape != (sb.features.shape[0],):
            raise ProtocolError("label count does not match source batch size")
        progress = self.schedule.progress(self.round)
        lr = lr_schedule(progress, self.hyper.lr0)
        tape = ad.Tape()
        f_s = tape.param(sb.features)
        f_t = tape.param(tb.features)
        obj = fedled_objective(
            tape, f_s, sb.labels, f_t, self.classifier, self.discriminator,
            self.loss_weights(progress), self.hyper.kernel, random_map=self.random_map,
        )
        grads = tape.backward(obj.total)
        self.classifier, self.opt_classifier = adam_step(
            self.classifier, obj.classifier.grads(grads), self.opt_classifier, lr
        )
        self.discriminator, self.opt_discriminator = adam_step(
            self.discriminator, obj.discriminator.grads(grads), self.opt_discriminator, lr
        )
        self.round += 1
        self.history.append(obj.breakdown)
        return GradToSource(grads[f_s], self.classifier), GradToTarget(grads[f_t], self.classifier), obj.breakdown


# --- transcript & audit --------------------------------------------------

@dataclass(frozen=True)
class TranscriptEntry:
    seq: int
    sender: str
    receiver: str
    tag: str
    shapes: dict
    sha256: str
    row_hashes: frozenset = field(default=frozenset(), compare=False, repr=False)

    def to_json(self) -> dict:
        return {"seq": self.seq, "from": self.sender, "to": self.receiver, "tag": self.tag,
                "shapes": self.shapes, "sha256": self.sha256}


def row_digest(row) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(row, dtype="<f8").tobytes()).digest()[:16]


class Transcript:
    """Append-only log of every message that crossed a party boundary."""

    def __init__(self, hash_rows: bool = True):
        self.entries: list[TranscriptEntry] = []
        self.hash_rows = hash_rows
        self._lock = threading.Lock()

    def record(self, sender: str, receiver: str, msg) -> TranscriptEntry:
        fields = payload_fields(msg)
        shapes = {k: list(v.shape) for k, v in fields.items()}
        digest = hashlib.sha256(encode_payload(msg)).hexdigest()
        rows = frozenset()
        if self.hash_rows:
            rows = frozenset(
                row_digest(r) for k, v in fields.items() if not k.startswith("y") for r in np.atleast_2d(v)
            )
        with self._lock:
            entry = TranscriptEntry(len(self.entries), sender, receiver, type(msg).__name__, shapes, digest, rows)
            self.entries.append(entry)
        return entry

    def __len__(self):
        return len(self.entries)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.entries)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def export(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "Transcript":
        t = cls(hash_rows=False)
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                t.entries.append(TranscriptEntry(int(d["seq"]), d["from"], d["to"], d["tag"], d["shapes"], d["sha256"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"transcript line {line_no}: {exc}") from None
        return t

    @classmethod
    def load(cls, path) -> "Transcript":
        return cls.from_jsonl(Path(path).read_text())


ROUTES = {
    "SourceBatch": (SOURCE, SERVER),
    "TargetBatch": (TARGET, SERVER),
    "GradToSource": (SERVER, SOURCE),
    "GradToTarget": (SERVER, TARGET),
}
UPLOADS = ("SourceBatch", "TargetBatch")
DOWNLOADS = ("GradToSource", "GradToTarget")
ROUND_ORDER = UPLOADS + DOWNLOADS


@dataclass
class AuditReport:
    passed: bool
    violations: list = field(default_factory=list)  # (entry index, reason)
    warnings: list = field(default_factory=list)
    messages_checked: int = 0

    @property
    def offending_indices(self) -> list[int]:
        return sorted({i for i, _ in self.violations})

    def raise_for_failure(self):
        if not self.passed:
            raise AuditError(f"privacy audit failed at messages {self.offending_indices}", self.violations)


def privacy_audit(
    transcript: Transcript,
    *,
    raw_dims: tuple = (),
    feature_dim: int | None = None,
    raw_rows=(),
) -> AuditReport:
    """Check a transcript for anything that looks like raw data leaving an agent.

    * no tensor is as wide as a raw input space (``raw_dims``), except a
      coincidental match with ``feature_dim``, which is only a warning;
    * no transcript row or payload hash equals the hash of a raw sample row;
    * label fields appear only on source-to-server messages;
    * routes are legal and each round is both uploads (either order)
      followed by both replies.
    """
    report = AuditReport(passed=True, messages_checked=len(transcript.entries))
    raw_digests = set()
    raw_payload_digests = set()
    for block in raw_rows:
        for r in np.atleast_2d(np.asarray(block, dtype=np.float64)):
            raw_digests.add(row_digest(r))
            raw_payload_digests.add(hashlib.sha256(np.ascontiguousarray(r, dtype="<f8").tobytes()).hexdigest())
            raw_payload_digests.add(hashlib.sha256(encode_payload(TargetBatch(r[None, :]))).hexdigest())
    raw_dims = set(int(d) for d in raw_dims)
    pending_up, pending_down = set(UPLOADS), set(DOWNLOADS)
    for i, e in enumerate(transcript.entries):
        route = ROUTES.get(e.tag)
        if route is not None and (e.sender, e.receiver) != route:
            report.violations.append((i, f"{e.tag} routed {e.sender}->{e.receiver}"))
        for name, shape in e.shapes.items():
            if name.startswith("y") and (e.sender, e.receiver) != (SOURCE, SERVER):
                report.violations.append((i, f"label field {name} on {e.sender}->{e.receiver}"))
            if name.startswith("theta_C") or name.startswith("y") or len(shape) < 2:
                continue
            width = shape[-1]
            if width in raw_dims:
                if feature_dim is not None and width == feature_dim:
                    report.warnings.append((i, f"{name} width {width} equals a raw dim and the feature dim"))
                else:
                    report.violations.append((i, f"{name} width {width} matches a raw input dimension"))
        if e.sha256 in raw_payload_digests or (raw_digests and e.row_hashes & raw_digests):
            report.violations.append((i, "payload contains a raw sample row"))
        if e.tag in ROUND_ORDER:
            phase = UPLOADS if e.tag in UPLOADS else DOWNLOADS
            if phase is DOWNLOADS and pending_up:
                report.violations.append((i, f"{e.tag} before both uploads of the round"))
            elif phase is UPLOADS and pending_down != set(DOWNLOADS):
                report.violations.append((i, f"{e.tag} before the previous round finished"))
                pending_down = set(DOWNLOADS)
            if phase is UPLOADS:
                if e.tag not in pending_up:
                    report.violations.append((i, f"duplicate {e.tag} in one round"))
                pending_up.discard(e.tag)
            else:
                if e.tag not in pending_down:
                    report.violations.append((i, f"duplicate {e.tag} in one round"))
                pending_down.discard(e.tag)
            if not pending_up and not pending_down:
                pending_up, pending_down = set(UPLOADS), set(DOWNLOADS)
        elif e.tag in ("EpochEnd", "Shutdown"):
            if pending_up != set(UPLOADS) or pending_down != set(DOWNLOADS):
                report.violations.append((i, f"{e.tag} inside an unfinished round"))
                pending_up, pending_down = set(UPLOADS), set(DOWNLOADS)
        else:
            report.violations.append((i, f"unknown message tag {e.tag}"))
    report.passed = not report.violations
    return report


# --- pretraining ---------------------------------------------------------

def pretrain_source(
    data: DomainDataset,
    extractor: MlpParams,
    classifier: MlpParams,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
):
    """Supervised warm start of the source extractor and classifier, local to the source."""
    from fedled.losses import cross_entropy

    if len(data) == 0:
        raise DataError("cannot pretrain on an empty dataset")
    if data.labels is None:
        raise DataError("pretraining needs labels")
    rng = np.random.default_rng([int(seed), PRETRAIN_STREAM])
    opt_f = AdamState.for_params(extractor)
    opt_c = AdamState.for_params(classifier)
    for _ in range(epochs):
        perm = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            idx = perm[start : start + batch_size]
            tape = ad.Tape()
            ffwd = mlp_forward(extractor, tape.constant(data.features[idx]), tape)
            cfwd = mlp_forward(classifier, ffwd.output, tape)
            loss = cross_entropy(cfwd.output, data.labels[idx])
            grads = tape.backward(loss)
            extractor, opt_f = adam_step(extractor, ffwd.grads(grads), opt_f, lr)
            classifier, opt_c = adam_step(classifier, cfwd.grads(grads), opt_c, lr)
    return extractor, classifier


# --- drivers -------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    l_cls: float
    l_cdan: float
    l_align: float
    total: float
    loss_check: bool


def _epoch_metrics(epoch: int, rows: list[LossBreakdown]) -> EpochMetrics:
    if not rows:
        return EpochMetrics(epoch, float("nan"), float("nan"), float("nan"), float("nan"), True)
    return EpochMetrics(
        epoch,
        float(np.mean([r.l_cls for r in rows])),
        float(np.mean([r.l_cdan for r in rows])),
        float(np.mean([r.l_align for r in rows])),
        float(np.mean([r.total for r in rows])),
        all(r.check() for r in rows),
    )


def agent_send(agent, channel) -> None:
    channel.send(agent.next_batch())


def agent_receive(agent, channel) -> None:
    agent.apply(channel.recv())


def agent_epoch_end(agent, channel, epoch: int) -> None:
    msg = channel.recv()
    if not isinstance(msg, EpochEnd):
        raise ProtocolError(f"{agent.role} expected EpochEnd, got {type(msg).__name__}")
    agent.on_epoch_end(epoch)


def server_round(server: Server, ch_source, ch_target, transcript: Transcript) -> LossBreakdown:
    sb = ch_source.recv()
    transcript.record(SOURCE, SERVER, sb)
    if not isinstance(sb, SourceBatch):
        raise ProtocolError(f"server expected SourceBatch, got {type(sb).__name__}")
    tb = ch_target.recv()
    transcript.record(TARGET, SERVER, tb)
    if not isinstance(tb, TargetBatch):
        raise ProtocolError(f"server expected TargetBatch, got {type(tb).__name__}")
    to_s, to_t, breakdown = server.process(sb, tb)
    transcript.record(SERVER, SOURCE, to_s)
    ch_source.send(to_s)
    transcript.record(SERVER, TARGET, to_t)
    ch_target.send(to_t)
    return breakdown


def server_broadcast(ch_source, ch_target, transcript: Transcript, msg) -> None:
    for role, ch in ((SOURCE, ch_source), (TARGET, ch_target)):
        transcript.record(SERVER, role, msg)
        ch.send(msg)


class Federation:
    """Sequential in-process driver over codec-backed channels."""

    def __init__(self, source: SourceAgent, target: TargetAgent, server: Server, transcript: Transcript | None = None):
        self.source, self.target, self.server = source, target, server
        self.transcript = transcript if transcript is not None else Transcript()
        self.src_end, self.srv_src = InProcChannel.pair(blocking=False)
        self.tgt_end, self.srv_tgt = InProcChannel.pair(blocking=False)
        self.epoch = 0

    def check_classifier_consistency(self) -> bool:
        c = self.server.classifier
        return self.source.classifier.equals(c) and self.target.classifier.equals(c)

    def run_round(self) -> LossBreakdown:
        agent_send(self.source, self.src_end)
        agent_send(self.target, self.tgt_end)
        breakdown = server_round(self.server, self.srv_src, self.srv_tgt, self.transcript)
        agent_receive(self.source, self.src_end)
        agent_receive(self.target, self.tgt_end)
        return breakdown

    def end_epoch(self) -> None:
        server_broadcast(self.srv_src, self.srv_tgt, self.transcript, EpochEnd())
        agent_epoch_end(self.source, self.src_end, self.epoch)
        agent_epoch_end(self.target, self.tgt_end, self.epoch)
        self.epoch += 1

    def shutdown(self) -> None:
        server_broadcast(self.srv_src, self.srv_tgt, self.transcript, Shutdown())
        for end in (self.src_end, self.tgt_end):
            if not isinstance(end.recv(), Shutdown):
                raise ProtocolError("expected Shutdown")


@dataclass
class TrainResult:
    target_extractor: MlpParams
    classifier: MlpParams
    source_extractor: MlpParams
    discriminator: MlpParams
    history: list[EpochMetrics]
    transcript: Transcript
    eval_predictions: list
    rounds: int
    aborted: str | None = None


def build_parties(
    net: NetConfig,
    source_data: DomainDataset,
    target_data: DomainDataset,
    hyper: Hyper,
    seed: int,
    *,
    source_extractor: MlpParams | None = None,
    classifier: MlpParams | None = None,
    target_eval=None,
):
    """Initialize the three parties.  Extractor/classifier default to fresh
    random parameters; pass pretrained ones from :func:`pretrain_source`."""
    schedule = Schedule(len(source_data), len(target_data), hyper.batch_size, hyper.epochs)
    f_s = source_extractor if source_extractor is not None else init_params(net, seed, "source")
    clf = classifier if classifier is not None else init_params(net, seed, "classifier")
    f_t = init_params(net, seed, "target")
    disc = init_params(net, seed, "discriminator")
    if source_data.num_features != net.source_dim or target_data.num_features != net.target_dim:
        raise ConfigError("dataset widths do not match the network config")
    source = SourceAgent(source_data, f_s, clf, schedule, hyper, seed)
    target = TargetAgent(target_data, f_t, clf, schedule, hyper, seed, eval_features=target_eval)
    server = Server(clf, disc, net, schedule, hyper, seed)
    return source, target, server


def train(
    source: SourceAgent,
    target: TargetAgent,
    server: Server,
    *,
    transport: str = "inproc",
    on_epoch: Callable | None = None,
    timeout: float = DEFAULT_TIMEOUT,
) -> TrainResult:
    """Run every epoch of federated training and return the target diagnoser.

    On a transport failure the partial transcript and history are kept and
    the result carries the abort reason.
    """
    if transport == "tcp":
        return train_tcp(source, target, server, on_epoch=on_epoch, timeout=timeout)
    if transport != "inproc":
        raise ConfigError(f"unknown transport {transport!r}")
    fed = Federation(source, target, server)
    schedule = server.schedule
    history: list[EpochMetrics] = []
    aborted = None
    try:
        for epoch in range(schedule.epochs):
            start = len(server.history)
            for _ in range(schedule.rounds_per_epoch):
                fed.run_round()
            fed.end_epoch()
            history.append(_epoch_metrics(epoch, server.history[start:]))
            if on_epoch is not None:
                on_epoch(epoch, target, history[-1])
        fed.shutdown()
    except TransportError as exc:
        aborted = str(exc)
        log.error("training aborted: %s", exc)
    return _result(source, target, server, history, fed.transcript, aborted)


def _result(source, target, server, history, transcript, aborted):
    return TrainResult(
        target_extractor=target.extractor,
        classifier=target.classifier,
        source_extractor=source.extractor,
        discriminator=server.discriminator,
        history=history,
        transcript=transcript,
        eval_predictions=list(target.eval_predictions),
        rounds=server.round,
        aborted=aborted,
    )


# --- networked loops -----------------------------------------------------

def source_loop(agent: SourceAgent, channel) -> None:
    _agent_loop(agent, channel)


def target_loop(agent: TargetAgent, channel) -> None:
    _agent_loop(agent, channel)


def _agent_loop(agent, channel) -> None:
    sched = agent.schedule
    for epoch in range(sched.epochs):
        for _ in range(sched.rounds_per_epoch):
            agent_send(agent, channel)
            agent_receive(agent, channel)
        agent_epoch_end(agent, channel, epoch)
    msg = channel.recv()
    if not isinstance(msg, Shutdown):
        raise ProtocolError(f"{agent.role} expected Shutdown, got {type(msg).__name__}")


def server_loop(server: Server, ch_source, ch_target, transcript: Transcript, on_epoch=None) -> list[EpochMetrics]:
    sched = server.schedule
    history = []
    for epoch in range(sched.epochs):
        start = len(server.history)
        for _ in range(sched.rounds_per_epoch):
            server_round(server, ch_source, ch_target, transcript)
        server_broadcast(ch_source, ch_target, transcript, EpochEnd())
        history.append(_epoch_metrics(epoch, server.history[start:]))
        if on_epoch is not None:
            on_epoch(epoch, None, history[-1])
    server_broadcast(ch_source, ch_target, transcript, Shutdown())
    return history


def train_tcp(source, target, server, *, on_epoch=None, timeout: float = DEFAULT_TIMEOUT, host: str = "127.0.0.1") -> TrainResult:
    """All three parties in one process, each in its own thread, talking over localhost TCP."""
    from fedled.transport import Listener, dial

    transcript = Transcript()
    errors: dict[str, BaseException] = {}
    listeners = {SOURCE: Listener(f"{host}:0"), TARGET: Listener(f"{host}:0")}

    def run_agent(role, agent):
        try:
            ch = listeners[role].accept(timeout)
            try:
                _agent_loop(agent, ch)
            finally:
                ch.close()
        except BaseException as exc:  # surfaced after join
            errors[role] = exc

    threads = [
        threading.Thread(target=run_agent, args=(SOURCE, source), name="fedled-source"),
        threading.Thread(target=run_agent, args=(TARGET, target), name="fedled-target"),
    ]
    for t in threads:
        t.start()
    history: list[EpochMetrics] = []
    aborted = None
    ch_s = ch_t = None
    try:
        ch_s = dial(listeners[SOURCE].address, timeout)
        ch_t = dial(listeners[TARGET].address, timeout)
        history = server_loop(server, ch_s, ch_t, transcript)
    except TransportError as exc:
        aborted = str(exc)
    finally:
        for ch in (ch_s, ch_t):
            if ch is not None:
                ch.close()
        for t in threads:
            t.join(timeout)
    for role in (SOURCE, TARGET):
        exc = errors.get(role)
        if exc is None:
            continue
        if isinstance(exc, TransportError):
            aborted = aborted or f"{role}: {exc}"
        else:
            raise exc
    if on_epoch is not None:
        for m in history:
            on_epoch(m.epoch, target, m)
    return _result(source, target, server, history, transcript, aborted)
