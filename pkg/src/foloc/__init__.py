"""Forced-oscillation source localization from ambient-data impulse responses."""

from .dynsim import (
    FOComponent,
    FOInputSpec,
    GridModel,
    GridValidationError,
    SwingSystem,
    build_swing_system,
    gen_ambient,
    gen_fo,
    load_grid,
    reference_impulse_response,
    save_grid,
    simulate,
    transfer_at,
)
from .estimator import FOLocalizer
from .folocate import (
    FOEvent,
    LocalizationReport,
    NoForcedOscillation,
    detect_event,
    localize,
    localize_output,
    localize_pair,
    localize_state,
    ls_fit_state,
    neighbor_set,
    phase_fit,
)
from .harness import (
    AccuracyGrid,
    Scenario,
    emit_report,
    run_accuracy_grid,
    run_scenario,
)
from .respinfer import (
    ResponseBank,
    SurrogateMap,
    bank_at,
    infer_bank_outputs,
    infer_bank_states,
    load_bank,
    save_bank,
    validate_bank,
)
from .timeseries import Channel, TimeSeriesSet, read_timeseries, write_timeseries

__version__ = "0.1.0"
