"""Dynamic IP access lists with group-based exceptions, backed by BDDs."""

from .bdd import BDD, BoolFn
from .compiler import (
    DEFAULT_LAYOUT, BitLayout, GrantRow, compile_condition, compile_deny_mask,
    compile_list, tabulate_grant,
)
from .engine import Classification, Decision, Engine, Outcome, Status, UpdateRecord
from .model import (
    AclSyntaxError, Action, AddrPattern, BaseList, Condition, GroupHierarchy,
    PacketKey, Rule, match_condition, parse_acl, parse_exception_list,
    parse_hierarchy, serialize_acl, supergroups,
)

__all__ = [
    "BDD", "BoolFn", "BitLayout", "DEFAULT_LAYOUT", "GrantRow", "compile_condition",
    "compile_deny_mask", "compile_list", "tabulate_grant", "Classification", "Decision",
    "Engine", "Outcome", "Status", "UpdateRecord", "AclSyntaxError", "Action",
    "AddrPattern", "BaseList", "Condition", "GroupHierarchy", "PacketKey", "Rule",
    "match_condition", "parse_acl", "parse_exception_list", "parse_hierarchy",
    "serialize_acl", "supergroups",
]
