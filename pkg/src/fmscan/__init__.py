import logging

from .errors import FmscanError
from .region import StudyRegion, compare_models, ingest, run_pipeline
from .report import read_clusters
from .set_up import RunConfig, load_config, save_default
from .sim import SimulationConfig, run_study
from .testing import make_test_region

_logger = logging.getLogger(__name__)
