# %% [markdown]
# The same federation as three operating-system processes over TCP.
#
# Each party is started with ``fedled run --role ...``.  The agents listen,
# the server dials both.  The source writes its pretrained classifier to
# the shared output directory first; the others pick it up from there.
# At the end the server's transcript hash is compared to an in-process run.

# %%
import json
import socket
import subprocess
import sys
import tempfile
from pathlib import Path

from fedled.harness import load_config, run_experiment


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# %%
work = Path(tempfile.mkdtemp(prefix="fedled-demo-"))
config = work / "exp.toml"
config.write_text(
    'seeds = [7]\nepochs = 2\npre_epochs = 1\nfeature_dim = 16\n'
    '[data]\nsamples_per_domain = 200\n'
)
src_addr, tgt_addr = f"127.0.0.1:{free_port()}", f"127.0.0.1:{free_port()}"
base = [sys.executable, "-m", "fedled.cli", "run", "--config", str(config), "--out", str(work / "net"),
        "--transport", "tcp", "--source-addr", src_addr, "--target-addr", tgt_addr]

procs = {role: subprocess.Popen(base + ["--role", role], stdout=subprocess.PIPE, text=True)
         for role in ("source", "target", "server")}
outs = {role: p.communicate(timeout=120)[0] for role, p in procs.items()}
print({role: p.returncode for role, p in procs.items()})
networked = json.loads(outs["server"].strip().splitlines()[-1])
print("networked:", networked)

# %% the in-process run records the identical message sequence
local = run_experiment(load_config(config))
print("in-process:", local.results[0].transcript_hash)
print("match:", local.results[0].transcript_hash == networked["transcript_sha256"])
