import pytest

from tecswin.train import DataConfig, EncoderConfig, RunConfig, TrainConfig, run_train
from tecswin.unet import ModelConfig


def tiny_config(out_dir, steps=20):
    return RunConfig(model=ModelConfig.tiny(), encoder=EncoderConfig(dim=8, max_tokens=4),
                     train=TrainConfig(steps=steps, batch_size=8, lr=3e-3, min_lr=3e-4, warmup_frac=0.1,
                                       checkpoint_every=0, eval_batch=16),
                     data=DataConfig(num_classes=4), output_dir=str(out_dir))


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A briefly trained 8×8 model shared by the CLI tests."""
    return run_train(tiny_config(tmp_path_factory.mktemp("tiny"))).checkpoint


def pytest_terminal_summary(terminalreporter):
    from _acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
