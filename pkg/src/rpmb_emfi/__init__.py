"""Software model of eMMC RPMB authenticated storage under electromagnetic fault injection."""

__version__ = "0.1.0"

from .checks import CheckVariant, rpmb_check_hmac  # noqa: E402
from .controller import Device, DeviceProfile, load_device_profile  # noqa: E402
from .faults import (  # noqa: E402
    FaultPrimitive, PulseSpec, SimulatedInjector, SusceptibilityProfile, load_fault_profile,
    sample_fault,
)
from .protocol import (  # noqa: E402
    RequestType, ResultCode, RpmbFrame, build_auth_write, compute_mac, parse_frame,
    serialize_frame,
)
from .timeline import MicroOpTimeline, map_delay_to_microop  # noqa: E402

__all__ = [
    "CheckVariant", "Device", "DeviceProfile", "FaultPrimitive", "MicroOpTimeline", "PulseSpec",
    "RequestType", "ResultCode", "RpmbFrame", "SimulatedInjector", "SusceptibilityProfile",
    "__version__", "build_auth_write", "compute_mac", "load_device_profile", "load_fault_profile",
    "map_delay_to_microop", "parse_frame", "rpmb_check_hmac", "sample_fault", "serialize_frame",
]
