# %% [markdown]
# Quickstart: two agents with different sensors, one unlabeled.
#
# The source agent has labels and 12 channels; the target agent has 12
# different channels (4 shared by name) and no labels at all.  We train
# the federation for a few epochs, score the target diagnoser, then audit
# the message log.

# %%
from dataclasses import replace

from fedled.data import SyntheticConfig, generate_synthetic
from fedled.harness import ExperimentConfig, run_experiment
from fedled.protocol import privacy_audit

# %%
data = SyntheticConfig(samples_per_domain=600)
syn = generate_synthetic(data)
print("source", syn.source.features.shape, syn.source.feature_names[:6])
print("target", syn.target.features.shape, syn.target.feature_names[:6])
print("target rows carry labels?", syn.target.labels is not None)

# %% a short run, one seed
cfg = ExperimentConfig(data=data, epochs=5, pre_epochs=5, seeds=(42,), feature_dim=32)
fed = run_experiment(cfg)
base = run_experiment(replace(cfg, method="baseline"))
print(f"fedled   {fed.accuracy_mean:5.1f}%")
print(f"baseline {base.accuracy_mean:5.1f}%  flags={base.flags}")

# %% per-epoch trend (plot-ready)
for row in fed.trend():
    print({k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})

# %% the transcript: what crossed each party boundary
from fedled.harness import _net_config, _pretrained, prepare_data
from fedled.protocol import build_parties, train

prep = prepare_data(data, 42)
net = _net_config(cfg, prep)
fs, clf = _pretrained(cfg, prep, net, 42)
parties = build_parties(net, prep.source_train, prep.target_train, replace(cfg.hyper(), epochs=1), 42,
                        source_extractor=fs, classifier=clf)
result = train(*parties)
for e in result.transcript.entries[:4]:
    print(e.seq, e.sender, "->", e.receiver, e.tag, e.shapes if e.tag.endswith("Batch") else list(e.shapes)[:2])

# %% nothing raw-width or raw-valued left an agent
report = privacy_audit(
    result.transcript,
    raw_dims=(prep.source_train.num_features, prep.target_train.num_features),
    feature_dim=net.feature_dim,
    raw_rows=[prep.source_train.features, prep.target_train.features],
)
print("audit passed:", report.passed, "messages:", report.messages_checked)
