import numpy as np
import pytest

from rsxfer import DatasetManifest, LabelMode, ManifestRecord


def build_manifest(
    dataset_id="toy",
    n_classes=3,
    per_class=10,
    label_mode=LabelMode.SINGLE_LABEL,
    class_names=None,
    extra_labels=None,
):
    """In-memory manifest with synthetic refs; no image files behind it."""
    classes = class_names or tuple(f"class_{i:02d}" for i in range(n_classes))
    records = []
    for cls in range(len(classes)):
        for i in range(per_class):
            labels = {cls}
            if label_mode is LabelMode.MULTI_LABEL and extra_labels:
                labels |= set(extra_labels(cls, i))
            records.append(
                ManifestRecord(
                    image_ref=f"{dataset_id}/{classes[cls]}/img_{i:04d}.png",
                    labels=frozenset(labels),
                )
            )
    return DatasetManifest(
        dataset_id=dataset_id,
        label_mode=label_mode,
        classes=tuple(classes),
        records=tuple(records),
    )


def build_brightness_dataset(
    root,
    dataset_id="brightness",
    n_per_class=8,
    levels=(0.25, 0.75),
    size=20,
    seed=99,
):
    """Write a tiny on-disk dataset whose classes differ by mean brightness."""
    from rsxfer.imageio import write_image

    rng = np.random.default_rng(seed)
    records = []
    for cls, base in enumerate(levels):
        for i in range(n_per_class):
            img = np.clip(
                base + rng.normal(scale=0.05, size=(size, size, 3)), 0.0, 1.0
            ).astype(np.float32)
            ref = f"{dataset_id}/cls{cls}/img_{i}.png"
            write_image(img, root / ref)
            records.append(ManifestRecord(image_ref=ref, labels=frozenset({cls})))
    return DatasetManifest(
        dataset_id=dataset_id,
        label_mode=LabelMode.SINGLE_LABEL,
        classes=tuple(f"level_{i}" for i in range(len(levels))),
        records=tuple(records),
    )


# Mock vocabularies mimicking the class overlap between a large multi-class
# source dataset and a 21-class target benchmark, with assorted name
# formatting to exercise normalization.
MOCK_TARGET_CLASSES = (
    "agricultural", "airplane", "Baseball Diamond", "beach", "buildings",
    "chaparral", "dense-residential", "forest", "freeway", "golf-course",
    "harbor", "intersection", "medium residential", "mobile-home-park",
    "overpass", "parking lot", "river", "runway", "sparse residential",
    "storage tanks", "tennis court",
)
MOCK_SOURCE_CLASSES = (
    "airplane", "airport", "bareland", "baseball_diamond", "basketball_court",
    "beach", "bridge", "chaparral", "cloud", "commercial_area",
    "Dense Residential", "desert", "farmland", "forest", "freeway",
    "golf_course", "ground_track_field", "harbor", "intersection", "island",
    "lake", "meadow", "medium-residential", "Mobile Home Park", "mountain",
    "overpass", "park", "parking_lot", "railway", "railway_station", "river",
    "roundabout", "runway", "shipping_yard", "snowberg",
    "sparse_residential", "stadium", "storage_tank", "swimming_pool",
    "tennis_court", "terrace", "transmission_tower", "vegetable_greenhouse",
    "wetland", "wind_turbine", "woodland",
)
# Hand-built oracle: normalized names present in both lists above.
MOCK_SHARED_NORMALIZED = sorted(
    [
        "airplane", "baseball_diamond", "beach", "chaparral",
        "dense_residential", "forest", "freeway", "golf_course", "harbor",
        "intersection", "medium_residential", "mobile_home_park", "overpass",
        "parking_lot", "river", "runway", "sparse_residential", "tennis_court",
    ]
)


@pytest.fixture
def manifest_builder():
    return build_manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
