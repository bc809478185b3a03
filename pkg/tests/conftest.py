import numpy as np
import pytest
import torch

from tumorforge.core_data import load_manifest, normalize_slice, write_dataset
from tumorforge.phantom import PhantomConfig, generate_phantom


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(1234)
    yield


@pytest.fixture(scope="session")
def mini_phantom_dir(tmp_path_factory):
    """Small raw phantom dataset shared by unit tests (40 slices at 64^2)."""
    out = tmp_path_factory.mktemp("mini_phantom")
    generate_phantom(
        PhantomConfig(size=64, n_subjects=8, slices_per_subject=5, tumor_probability=0.9, seed=5),
        out,
    )
    return out


@pytest.fixture(scope="session")
def mini_norm_dir(mini_phantom_dir, tmp_path_factory):
    """Normalized copy of the mini phantom dataset."""
    out = tmp_path_factory.mktemp("mini_norm")
    manifest = load_manifest(mini_phantom_dir)
    records = []
    for rec in manifest.iter_all():
        rec.images = normalize_slice(rec.images)
        records.append(rec)
    write_dataset(records, manifest.splits, out)
    return out


@pytest.fixture(scope="session")
def mini_norm_manifest(mini_norm_dir):
    return load_manifest(mini_norm_dir)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(99)
