"""Bilateral storage accounting with online, evidence-based dispute resolution."""

from .accounting import (
    AccountingParams,
    AccountingRecord,
    ClockField,
    ConsumptionInterval,
    FsConfig,
    MeterRecord,
    Party,
    chunks_consumed,
    compensated_by_difference,
    interval_consumption,
    scuf,
    shifted_interval_consumption,
    tt_average,
    tt_of_request,
)
from .metering import MeterLog, UploadRequest, intercept_consumer, intercept_provider
from .simulator import Scenario, load_scenario, parse_scenario, run

__all__ = [
    "AccountingParams",
    "AccountingRecord",
    "ClockField",
    "ConsumptionInterval",
    "FsConfig",
    "MeterLog",
    "MeterRecord",
    "Party",
    "Scenario",
    "UploadRequest",
    "chunks_consumed",
    "compensated_by_difference",
    "intercept_consumer",
    "intercept_provider",
    "interval_consumption",
    "load_scenario",
    "parse_scenario",
    "run",
    "scuf",
    "shifted_interval_consumption",
    "tt_average",
    "tt_of_request",
]
__version__ = "0.1.0"
