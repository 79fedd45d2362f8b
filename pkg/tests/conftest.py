import numpy as np
import pytest
import torch

from m2hvideo.data import SynthSpec, generate_synthetic, list_samples, read_video_dir
from m2hvideo.encoders import MiniVAE, fit_vae

torch.set_num_threads(max(torch.get_num_threads(), 1))

SYNTH_SPEC = SynthSpec(seed=7, num_samples=2, frames=32)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    generate_synthetic(SYNTH_SPEC, root)
    return root


@pytest.fixture(scope="session")
def synth_frames(synth_root) -> torch.Tensor:
    vids = [read_video_dir(synth_root / sid / "frames") for sid in list_samples(synth_root)]
    return torch.from_numpy(np.concatenate(vids))


@pytest.fixture(scope="session")
def fitted_vae(synth_frames) -> MiniVAE:
    vae = MiniVAE(seed=100)
    fit_vae(vae, synth_frames, steps=300, batch_size=16, lr=2e-3,
            generator=torch.Generator().manual_seed(0))
    return vae
