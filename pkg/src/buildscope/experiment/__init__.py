from .grid import (CellRecord, ExperimentGrid, ManifestError, RunManifest, Scene, run_cell,
                   run_grid, stage_scene_images, synthetic_scene)
from .reports import emit_reports
from .stats import BoxStats, MeansTable, box_stats, exact_mean, per_scene_model_means
