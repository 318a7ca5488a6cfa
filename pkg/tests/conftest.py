import pytest
import torch

from distillseg.data import make_synthetic_dataset, split_by_subject
from distillseg.models import ModelConfig, ROLE_TEACHER
from distillseg.train import train_teacher


@pytest.fixture(scope="session")
def small_split():
    """48 slices of 32x32 blobs, split by subject: quick engine food."""
    ds = make_synthetic_dataset(48, 32, seed=3)
    return split_by_subject(ds, 0.2, seed=3)


@pytest.fixture(scope="session")
def tiny_teacher_ckpt(tmp_path_factory, small_split):
    """A briefly trained reduced-width teacher shared by engine tests."""
    train_set, val_set = small_split
    path = tmp_path_factory.mktemp("teacher") / "teacher.ckpt"
    cfg = ModelConfig(role=ROLE_TEACHER, base_channels=8)
    train_teacher(train_set, cfg, val_set=val_set, epochs=2, batch_size=8,
                  seed=0, ckpt_path=path)
    return path


@pytest.fixture(autouse=True)
def _no_grad_leaks():
    yield
    torch.set_grad_enabled(True)
