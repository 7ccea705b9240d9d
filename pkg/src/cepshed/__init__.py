"""cepshed: a complex event processing engine with utility-based load shedding
and a deterministic overload benchmark harness."""

from .engine import CepEngine, ComplexEvent, Notification, ProcessResult, Window, contributions
from .events import (
    AttributeSpec,
    Event,
    EventStream,
    EventType,
    StreamFormatError,
    StreamSchema,
    bin_value,
    read_stream,
    write_stream,
)
from .harness import (
    CostModel,
    QoRReport,
    ReplayOutcome,
    TrainingResult,
    build_shedder,
    compare_reports,
    ground_truth,
    replay_overload,
    run_experiment,
    run_training,
)
from .models import (
    FeatureEncoder,
    MlUtilityModel,
    UtilityForestRegressor,
    UtilityTable,
    UtilityTreeRegressor,
)
from .patterns import Branch, Element, Pattern, PatternSyntaxError, Predicate
from .shedding import (
    LoadMonitor,
    MonitorConfig,
    NoShedder,
    SamplingShedder,
    Shedder,
    TableShedder,
    UtilityHistogram,
    estimate_rho,
    select_threshold,
)
from .stats import (
    Observation,
    ObservationCollector,
    TypeHistory,
    aggregate_observations,
    utility_map,
)
from .synthetic import SyntheticSpec, UniformIntAttr, generate_synthetic
from .zobrist import ZobristKeys

__version__ = "0.1.0"
