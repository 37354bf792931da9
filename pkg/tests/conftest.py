import pytest

from linex.grpo import GrpoConfig
from linex.policy import ModelConfig, PolicyModel
from linex.tasks import TaskSpec
from linex.trainer import ScheduleSpec, train

TINY = ModelConfig(d_model=8, n_heads=2, n_layers=2, seed=0)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A 12-step run with checkpoints every 2 steps."""
    out = tmp_path_factory.mktemp("tiny_run")
    res = train(PolicyModel.init(TINY), TaskSpec(), GrpoConfig(group_size=4, prompts_per_batch=8, lr=1e-2),
                ScheduleSpec(), 12, 2, seed=0, out_dir=out, run_id="tiny")
    return res.trajectory
