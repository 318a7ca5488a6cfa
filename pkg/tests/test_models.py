import numpy as np
import pytest
import torch
import torch.nn as nn

from distillseg.models import (
    CheckpointError,
    FeatureAdapter,
    ModelConfig,
    ModelError,
    ProjectionHead,
    ROLE_STUDENT_S1,
    ROLE_STUDENT_S2,
    ROLE_TEACHER,
    build_model,
    count_parameters,
    forward_with_taps,
    freeze,
    load_checkpoint,
    load_checkpoint_aux,
    parameter_checksum,
    project,
    save_checkpoint,
)


def test_config_rejects_unknown_role():
    with pytest.raises(ModelError, match="unknown role"):
        ModelConfig(role="resnet50")


def test_config_defaults_per_role():
    t = ModelConfig(role=ROLE_TEACHER)
    assert t.base_channels == 64 and t.with_recon_head and t.downsample_factor == 16
    s = ModelConfig(role=ROLE_STUDENT_S1)
    assert s.base_channels == 16 and not s.with_recon_head and s.downsample_factor == 4


def test_config_recon_head_is_teacher_only():
    with pytest.raises(ModelError):
        ModelConfig(role=ROLE_STUDENT_S1, with_recon_head=True)


def test_config_dict_round_trip():
    cfg = ModelConfig(role=ROLE_STUDENT_S2, base_channels=8)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_count_parameters_linear_example():
    assert count_parameters(nn.Linear(10, 5)) == 55


def test_count_parameters_ignores_freeze_state():
    m = build_model(ModelConfig(role=ROLE_STUDENT_S1))
    before = count_parameters(m)
    freeze(m)
    assert count_parameters(m) == before


@pytest.mark.parametrize(
    "role,expected",
    [(ROLE_TEACHER, 43_236_036), (ROLE_STUDENT_S1, 52_929), (ROLE_STUDENT_S2, 117_681)],
)
def test_parameter_counts_are_stable(role, expected):
    assert count_parameters(build_model(ModelConfig(role=role))) == expected


def test_forward_shapes_and_taps():
    x = torch.randn(2, 3, 32, 32)
    t = build_model(ModelConfig(role=ROLE_TEACHER, base_channels=4)).eval()
    with torch.no_grad():
        out = forward_with_taps(t, x)
    assert out.seg_logits.shape == (2, 1, 32, 32)
    assert out.recon.shape == (2, 3, 32, 32)
    assert float(out.recon.min()) >= 0.0 and float(out.recon.max()) <= 1.0
    assert out.taps.encoder.shape == (2, 32, 4, 4)
    assert out.taps.bottleneck.shape == (2, 64, 2, 2)
    assert out.taps.decoder.shape == (2, 4, 32, 32)

    s = build_model(ModelConfig(role=ROLE_STUDENT_S1)).eval()
    with torch.no_grad():
        sout = forward_with_taps(s, x)
    assert sout.recon is None
    # encoder tap sits at half resolution, bottleneck at a quarter
    assert sout.taps.encoder.shape == (2, 32, 16, 16)
    assert sout.taps.bottleneck.shape == (2, 64, 8, 8)
    assert sout.taps.decoder.shape == (2, 16, 32, 32)


def test_forward_with_taps_validates_input():
    s = build_model(ModelConfig(role=ROLE_STUDENT_S1))
    with pytest.raises(ModelError, match="4D"):
        forward_with_taps(s, torch.randn(3, 32, 32))
    with pytest.raises(ModelError, match="channels"):
        forward_with_taps(s, torch.randn(1, 1, 32, 32))
    with pytest.raises(ModelError, match="multiples of 4"):
        forward_with_taps(s, torch.randn(1, 3, 30, 30))
    t = build_model(ModelConfig(role=ROLE_TEACHER, base_channels=4))
    with pytest.raises(ModelError, match="multiples of 16"):
        forward_with_taps(t, torch.randn(1, 3, 24, 24))


def test_forward_deterministic_in_eval():
    m = build_model(ModelConfig(role=ROLE_STUDENT_S2)).eval()
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        a = forward_with_taps(m, x).seg_logits
        b = forward_with_taps(m, x).seg_logits
    assert torch.equal(a, b)


def test_taps_get_rejects_unknown_scale():
    m = build_model(ModelConfig(role=ROLE_STUDENT_S1)).eval()
    out = forward_with_taps(m, torch.randn(1, 3, 16, 16))
    with pytest.raises(ModelError, match="unknown tap scale"):
        out.taps.get("stem")


def test_freeze_is_idempotent_and_stops_updates():
    m = build_model(ModelConfig(role=ROLE_STUDENT_S1))
    freeze(m)
    freeze(m)
    assert not any(p.requires_grad for p in m.parameters())
    assert not m.training
    before = parameter_checksum(m)
    opt = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=1.0)
    x = torch.randn(2, 3, 16, 16)
    for _ in range(10):
        out = m(x)
        # nothing requires grad; backward through the frozen graph is impossible,
        # so just confirm repeated forwards leave the weights untouched
        assert out.seg_logits.requires_grad is False
        opt.step()
    assert parameter_checksum(m) == before


def test_projection_head_unit_norm():
    head = ProjectionHead(in_channels=32, embed_dim=16)
    tap = torch.randn(5, 32, 7, 7)
    z = project(head, tap)
    assert z.shape == (5, 16)
    norms = z.norm(dim=1)
    assert torch.allclose(norms, torch.ones(5), atol=1e-6)


def test_projection_head_handles_zero_tap():
    head = ProjectionHead(in_channels=8, embed_dim=4)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    z = project(head, torch.zeros(2, 8, 3, 3))
    assert torch.isfinite(z).all()


def test_project_validates_channels():
    head = ProjectionHead(in_channels=8, embed_dim=4)
    with pytest.raises(ModelError, match="channels"):
        project(head, torch.randn(2, 16, 3, 3))
    with pytest.raises(ModelError, match="4D"):
        project(head, torch.randn(2, 8))


def test_feature_adapter_matches_channels_and_size():
    ad = FeatureAdapter(16, 64)
    x = torch.randn(2, 16, 8, 8)
    y = ad(x, size=(4, 4))
    assert y.shape == (2, 64, 4, 4)
    assert ad(x).shape == (2, 64, 8, 8)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = build_model(ModelConfig(role=ROLE_STUDENT_S2, base_channels=4))
    path = save_checkpoint(m, tmp_path / "m.ckpt", step=12, seed=34, extra={"note": "x"})
    m2, manifest = load_checkpoint(path)
    assert parameter_checksum(m2) == parameter_checksum(m)
    assert manifest["step"] == 12 and manifest["seed"] == 34
    assert manifest["extra"] == {"note": "x"}
    assert manifest["config"] == m.config.to_dict()


def test_checkpoint_truncated_file_is_structured_error(tmp_path):
    m = build_model(ModelConfig(role=ROLE_STUDENT_S1, base_channels=2))
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="cannot read checkpoint"):
        load_checkpoint(path)


def test_checkpoint_garbage_file_is_structured_error(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_mismatched_config_names_first_bad_array(tmp_path):
    t = build_model(ModelConfig(role=ROLE_TEACHER, base_channels=4))
    path = save_checkpoint(t, tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError, match=r"state/enc1"):
        load_checkpoint(path, ModelConfig(role=ROLE_STUDENT_S1))


def test_checkpoint_version_gate(tmp_path, monkeypatch):
    import distillseg.models as M

    m = build_model(ModelConfig(role=ROLE_STUDENT_S1, base_channels=2))
    monkeypatch.setattr(M, "CHECKPOINT_VERSION", 99)
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    monkeypatch.setattr(M, "CHECKPOINT_VERSION", 1)
    with pytest.raises(CheckpointError, match="99"):
        load_checkpoint(path)


def test_checkpoint_aux_round_trip(tmp_path):
    m = build_model(ModelConfig(role=ROLE_STUDENT_S1, base_channels=2))
    aux = nn.ModuleDict({"proj": ProjectionHead(8, 4)})
    path = save_checkpoint(m, tmp_path / "m.ckpt", aux=aux)
    state = load_checkpoint_aux(path)
    assert set(state) == set(dict(aux.state_dict()))
    for k, v in aux.state_dict().items():
        assert torch.equal(state[k], v)
    # inference load ignores aux arrays
    m2, manifest = load_checkpoint(path)
    assert manifest["aux"]
    assert parameter_checksum(m2) == parameter_checksum(m)


def test_checkpoint_no_pickle(tmp_path):
    m = build_model(ModelConfig(role=ROLE_STUDENT_S1, base_channels=2))
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    # loads fine with pickling hard-disabled
    with np.load(path, allow_pickle=False) as z:
        assert "manifest" in z
