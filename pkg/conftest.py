import pandas as pd
import pytest

from components.dataset import GroupLabel, ItemCatalog, RatingsDataset


def _dataset(rows, labels, scale_max=5.0, check_scale=True):
    """rows: (user, item, rating) triples; labels: item -> "A" or "D"."""
    catalog = ItemCatalog({i: GroupLabel.parse(g) for i, g in labels.items()})
    frame = pd.DataFrame(rows, columns=["user_id", "item_id", "rating"])
    return RatingsDataset(scale_max=scale_max, frame=frame, catalog=catalog, check_scale=check_scale)


@pytest.fixture
def make_dataset():
    return _dataset


@pytest.fixture
def write_text(tmp_path):
    def write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return write
