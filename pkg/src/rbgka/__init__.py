"""Region-based group key agreement: GDH subgroups joined by a TGDH gateway tree."""

from .crypto import DEMO_PARAMS, AuthenticationError, GroupParams
from .region import Event, RegionTopology, form_subgroups, handle_event, route_message
from .sim import run_scenario

__all__ = ["DEMO_PARAMS", "AuthenticationError", "GroupParams", "Event", "RegionTopology",
           "form_subgroups", "handle_event", "route_message", "run_scenario"]
__version__ = "0.1.0"
