import pytest

from mgtlab.config import parse_config

TINY = (
    "model.depth=2", "model.width=16", "model.heads=2", "model.vocab=8", "model.seq_len=9", "task.copy_m=4",
    "train.batch_size=8", "train.total_steps=20", "train.eval_every=10", "train.eval_batch_size=16",
    "train.probe_batch_size=4", "train.seeds=0,1", "experiment.rank_depths=1,2", "experiment.ablation_depth=2",
    "experiment.beta_depth=3", "experiment.scale_depths=1,2", "experiment.param_budget=40000",
)


def tiny_config(*overrides, output_dir="out"):
    return parse_config(None, TINY + overrides, output_dir=output_dir)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("\n".join(TINY) + "\n")
    return path
