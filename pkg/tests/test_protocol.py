import json

import numpy as np
import pytest

from fedled.data import DomainDataset
from fedled.errors import AuditError, DataError, ProtocolError, TransportError
from fedled.messages import EpochEnd, GradToSource, SourceBatch, TargetBatch
from fedled.models import NetConfig, init_params
from fedled.protocol import (
    Federation,
    Hyper,
    Schedule,
    Transcript,
    TranscriptEntry,
    build_parties,
    grl_warmup,
    pretrain_source,
    privacy_audit,
    train,
)
from fedled.transport import InProcChannel

NET = NetConfig(6, 5, num_classes=3, feature_dim=8, extractor_hidden=(10,), classifier_hidden=(7,), discriminator_hidden=(9,))


def toy_data(n_s=20, n_t=14, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n_s) % 3
    src = DomainDataset(rng.standard_normal((n_s, 6)) + y[:, None], y, tuple(f"s{i}" for i in range(6)), "source")
    tgt = DomainDataset(rng.standard_normal((n_t, 5)), None, tuple(f"t{i}" for i in range(5)), "target")
    return src, tgt


def parties(hyper=None, seed=0, **kw):
    hyper = hyper or Hyper(batch_size=8, epochs=2)
    src, tgt = toy_data(**kw)
    return build_parties(NET, src, tgt, hyper, seed, target_eval=tgt.features[:4])


def test_schedule_batches_wrap_the_smaller_side():
    s = Schedule(20, 14, 8, 3)
    assert s.rounds_per_epoch == 3 and s.total_rounds == 9
    assert [s.batch_len(j) for j in range(3)] == [8, 8, 4]
    perm = np.arange(14)[::-1]
    assert s.indices(perm, 2).tolist() == [perm[16 % 14], perm[17 % 14], perm[18 % 14], perm[19 % 14]]
    assert s.progress(0) == 1 / 9 and s.progress(8) == 1.0


def test_grl_warmup_curve():
    assert grl_warmup(0.0) == 0.0
    assert 0.99 < grl_warmup(1.0) < 1.0
    assert grl_warmup(0.1) < grl_warmup(0.5)


def test_round_has_four_messages_in_order_and_consistent_classifier():
    fed = Federation(*parties())
    fed.run_round()
    tags = [(e.sender, e.receiver, e.tag) for e in fed.transcript.entries]
    assert tags == [
        ("source", "server", "SourceBatch"),
        ("target", "server", "TargetBatch"),
        ("server", "source", "GradToSource"),
        ("server", "target", "GradToTarget"),
    ]
    assert fed.check_classifier_consistency()
    for _ in range(4):
        fed.run_round()
        assert fed.check_classifier_consistency()


def test_zero_adaptation_leaves_target_and_discriminator_still():
    source, target, server = parties(Hyper(lam=0.0, beta=0.0, batch_size=8, epochs=2))
    f_t, d = target.extractor, server.discriminator
    f_s = source.extractor
    fed = Federation(source, target, server)
    for _ in range(3):
        fed.run_round()
    assert target.extractor.equals(f_t)
    assert server.discriminator.equals(d)
    assert not source.extractor.equals(f_s)


def test_agents_reject_out_of_order_and_mismatched_messages():
    source, target, server = parties()
    with pytest.raises(ProtocolError):
        source.apply(GradToSource(np.zeros((8, 8)), server.classifier))
    sb = source.next_batch()
    with pytest.raises(ProtocolError):
        source.apply(GradToSource(np.zeros((3, 8)), server.classifier))
    with pytest.raises(ProtocolError):
        source.apply(EpochEnd())
    with pytest.raises(ProtocolError):
        server.process(sb, sb)
    with pytest.raises(ProtocolError):
        server.process(sb, TargetBatch(np.zeros((4, 3))))
    with pytest.raises(ProtocolError):
        server.process(SourceBatch(sb.features, sb.labels[:-1]), TargetBatch(np.zeros((4, 8))))


def test_agents_keep_their_side_of_the_labels():
    src, tgt = toy_data()
    with pytest.raises(DataError):
        build_parties(NET, src.unlabeled(), tgt, Hyper(batch_size=8, epochs=1), 0)
    with pytest.raises(DataError):
        build_parties(NET, src, DomainDataset(tgt.features, np.zeros(len(tgt), int), tgt.feature_names, "t"), Hyper(batch_size=8, epochs=1), 0)


def test_pretraining_learns_separable_data():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 3, 150)
    x = rng.standard_normal((150, 6)) * 0.3
    x[np.arange(150), y] += 3.0
    ds = DomainDataset(x, y, tuple(f"s{i}" for i in range(6)), "source")
    f0, c0 = init_params(NET, 0, "source"), init_params(NET, 0, "classifier")
    f, c = pretrain_source(ds, f0, c0, epochs=30, lr=0.01, batch_size=16, seed=0)
    from fedled.models import predict

    acc = np.mean(np.argmax(predict(c, predict(f, x)), axis=1) == y)
    assert acc >= 0.95
    f_again, c_again = pretrain_source(ds, f0, c0, epochs=30, lr=0.01, batch_size=16, seed=0)
    assert f.equals(f_again) and c.equals(c_again)
    f_same, c_same = pretrain_source(ds, f0, c0, epochs=0, lr=0.01)
    assert f_same.equals(f0) and c_same.equals(c0)
    with pytest.raises(DataError):
        pretrain_source(ds.unlabeled(), f0, c0, epochs=1, lr=0.01)


def test_zero_epochs_is_a_no_op():
    source, target, server = parties(Hyper(batch_size=8, epochs=0))
    res = train(source, target, server)
    assert res.history == [] and res.rounds == 0
    assert res.aborted is None
    assert [e.tag for e in res.transcript.entries] == ["Shutdown", "Shutdown"]


def test_training_is_deterministic_and_logs_every_epoch():
    runs = [train(*parties()) for _ in range(2)]
    assert runs[0].transcript.digest() == runs[1].transcript.digest()
    assert runs[0].target_extractor.equals(runs[1].target_extractor)
    assert [m.epoch for m in runs[0].history] == [0, 1]
    assert all(m.loss_check for m in runs[0].history)
    assert len(runs[0].eval_predictions) == 2
    other = train(*parties(seed=1))
    assert other.transcript.digest() != runs[0].transcript.digest()


def test_transcript_jsonl_fields_and_round_trip(tmp_path):
    res = train(*parties())
    path = tmp_path / "t.jsonl"
    res.transcript.export(path)
    lines = path.read_text().splitlines()
    # 2 epochs x 3 rounds x 4 messages + 2 EpochEnd pairs + Shutdown pair
    assert len(lines) == 2 * 3 * 4 + 4 + 2
    first = json.loads(lines[0])
    assert set(first) == {"seq", "from", "to", "tag", "shapes", "sha256"}
    assert first["shapes"] == {"f_S": [8, 8], "y_S": [8]}
    back = Transcript.load(path)
    assert back.to_jsonl() == res.transcript.to_jsonl()
    with pytest.raises(DataError):
        Transcript.from_jsonl('{"seq": 0}\n')


def test_audit_passes_an_honest_run():
    src, tgt = toy_data()
    res = train(*parties())
    report = privacy_audit(res.transcript, raw_dims=(6, 5), feature_dim=8, raw_rows=[src.features, tgt.features])
    assert report.passed, report.violations
    assert report.messages_checked == len(res.transcript)
    report.raise_for_failure()


def test_audit_flags_raw_rows_and_raw_widths():
    src, tgt = toy_data()
    t = Transcript()
    t.record("source", "server", SourceBatch(src.features[:4], src.labels[:4]))
    t.record("target", "server", TargetBatch(np.zeros((4, 8))))
    report = privacy_audit(t, raw_dims=(6, 5), feature_dim=8, raw_rows=[src.features])
    assert not report.passed
    assert report.offending_indices == [0]
    with pytest.raises(AuditError) as info:
        report.raise_for_failure()
    assert info.value.violations

    # a single raw row smuggled inside a feature-width tensor is caught by its row hash
    t = Transcript()
    leak = np.zeros((3, 6))
    leak[1] = src.features[7]
    t.record("source", "server", SourceBatch(leak, [0, 0, 0]))
    assert privacy_audit(t, raw_rows=[src.features]).offending_indices == [0]


def test_audit_width_coinciding_with_feature_dim_is_a_warning():
    t = Transcript()
    t.record("target", "server", TargetBatch(np.ones((2, 8))))
    report = privacy_audit(t, raw_dims=(8,), feature_dim=8)
    assert report.passed and report.warnings


def test_audit_flags_routing_labels_and_order():
    def entry(i, sender, receiver, tag, shapes=None):
        return TranscriptEntry(i, sender, receiver, tag, shapes or {}, "0" * 64)

    t = Transcript(hash_rows=False)
    t.entries = [
        entry(0, "target", "server", "SourceBatch"),
        entry(1, "server", "target", "GradToTarget", {"y_S": [4]}),
        entry(2, "server", "source", "Mystery"),
    ]
    report = privacy_audit(t)
    assert report.offending_indices == [0, 1, 2]

    # uploads may arrive in either order; replies may not precede them
    t.entries = [
        entry(0, "target", "server", "TargetBatch"),
        entry(1, "source", "server", "SourceBatch"),
        entry(2, "server", "target", "GradToTarget"),
        entry(3, "server", "source", "GradToSource"),
    ]
    assert privacy_audit(t).passed
    t.entries = [
        entry(0, "source", "server", "SourceBatch"),
        entry(1, "server", "source", "GradToSource"),
        entry(2, "target", "server", "TargetBatch"),
        entry(3, "server", "target", "GradToTarget"),
    ]
    # the early reply, then the upload that lands while a reply is outstanding
    assert privacy_audit(t).offending_indices == [1, 2]
    t.entries = [
        entry(0, "source", "server", "SourceBatch"),
        entry(1, "server", "source", "EpochEnd"),
    ]
    assert privacy_audit(t).offending_indices == [1]


def test_transport_failure_keeps_partial_transcript(monkeypatch):
    sent = {"n": 0}
    real_send = InProcChannel.send

    def flaky(self, msg):
        sent["n"] += 1
        if sent["n"] > 9:
            raise TransportError("link dropped")
        real_send(self, msg)

    monkeypatch.setattr(InProcChannel, "send", flaky)
    res = train(*parties())
    assert res.aborted and "link dropped" in res.aborted
    assert 0 < len(res.transcript) < 30
    assert res.history == []
