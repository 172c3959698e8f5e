from .dataset import (
    Dataset,
    Sample,
    SOURCE,
    TARGET,
    DOMAINS,
    dataset_path,
    load,
    save,
)
from .scene import (
    CLASS_NAMES,
    PRESETS,
    SceneSpec,
    build_scene,
    generate,
    generate_sample,
    preset_spec,
    render,
    scan,
)
