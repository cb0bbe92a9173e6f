import pytest
import torch

from mvhuman.denoiser import DenoiserConfig
from mvhuman.model import ModelConfig, build_model

torch.set_num_threads(1)


def tiny_denoiser_config(**kw) -> DenoiserConfig:
    base = dict(base_channels=8, channel_mult=(1, 2), attention_levels=(1,), heads=2, token_width=8,
                image_embed_dim=8, groups=4)
    base.update(kw)
    return DenoiserConfig(**base)


def tiny_model_config(**kw) -> ModelConfig:
    return ModelConfig(denoiser=tiny_denoiser_config(**kw), face_resolution=16, face_channels=4, id_dim=8,
                       fusion_hidden=16, encoder_hidden=4)


@pytest.fixture
def tiny_model():
    return build_model(tiny_model_config(), seed=0).eval()


@pytest.fixture(scope="session")
def scene():
    from mvhuman.data import generate_scene

    return generate_scene(0, 32)


@pytest.fixture(scope="session")
def scene_dir(scene, tmp_path_factory):
    from mvhuman.data import write_scene

    return write_scene(scene, tmp_path_factory.mktemp("data") / "scene_00000")


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    from mvhuman.model import save_checkpoint

    return save_checkpoint(tmp_path_factory.mktemp("ckpt") / "tiny.ckpt", build_model(tiny_model_config(), 0),
                           {"phase": "body", "step": 0})


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
