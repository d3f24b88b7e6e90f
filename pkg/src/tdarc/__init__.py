"""Time-dependent capacitated arc routing toolkit."""

from .bcp import BcpResult, run_bcp
from .hgs import HgsParams, RoutePlan, decode_route, run_hgs
from .network import (
    Instance,
    Link,
    ScenarioSpec,
    ServiceRef,
    generate_speed_profiles,
    parse_instance,
    perturb_scenario,
    serialize_instance,
)
from .pltime import (
    ArrivalFunction,
    SpeedFunction,
    arrival_query_iterative,
    build_arrival_function,
    build_bucket_index,
    bucket_query,
    compose,
    departure_query_iterative,
    lower_envelope,
)
from .profiles import (
    ProfileMatrix,
    build_profile_matrix,
    discrete_quickest_path,
    mode_pair_arrival,
)
from .tables import ServiceTables

__all__ = [
    "ArrivalFunction",
    "BcpResult",
    "HgsParams",
    "Instance",
    "Link",
    "ProfileMatrix",
    "RoutePlan",
    "ScenarioSpec",
    "ServiceRef",
    "ServiceTables",
    "SpeedFunction",
    "arrival_query_iterative",
    "build_arrival_function",
    "build_bucket_index",
    "build_profile_matrix",
    "bucket_query",
    "compose",
    "decode_route",
    "departure_query_iterative",
    "discrete_quickest_path",
    "generate_speed_profiles",
    "lower_envelope",
    "mode_pair_arrival",
    "parse_instance",
    "perturb_scenario",
    "run_bcp",
    "run_hgs",
    "serialize_instance",
]

__version__ = "0.1.0"
