"""Semantic peer-to-peer lookup of RDF context data.

Peers hold triples, place themselves on a ring by the cluster of their
dominant predicates, and answer RDQL queries (pull) and single-pattern
subscriptions (push) across the overlay.
"""

from .node import ConfigError, ContextPeer, NodeConfig
from .rdql import QuerySemanticError, QuerySyntaxError, ResultSet, evaluate_local, parse_query
from .semantic import ClusterMapping, DistributedQueryError, PartialResult
from .store import ChangeSet, ContractError, TripleStore
from .terms import Iri, Literal, Triple, TriplePattern, ValidationError, Variable, parse_triple

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContextPeer", "NodeConfig", "QuerySemanticError", "QuerySyntaxError",
    "ResultSet", "evaluate_local", "parse_query", "ClusterMapping", "DistributedQueryError",
    "PartialResult", "ChangeSet", "ContractError", "TripleStore", "Iri", "Literal", "Triple",
    "TriplePattern", "ValidationError", "Variable", "parse_triple",
]
