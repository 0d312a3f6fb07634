import pytest

from didmdn.raingen import DatasetManifest, build_dataset, generate_clean_images


@pytest.fixture(scope="session")
def clean_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("clean")
    generate_clean_images(path, 8, size=(80, 80), seed=123)
    return path


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory, clean_dir) -> DatasetManifest:
    out = tmp_path_factory.mktemp("toyset")
    return build_dataset(clean_dir, per_label_count=2, seed=7, out_dir=out)
