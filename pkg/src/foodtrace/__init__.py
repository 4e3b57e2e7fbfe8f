"""Permissioned supply-chain ledger and deterministic network simulator.

Tamper-evident blocks, certificate-based membership, channels with
policies, crash-fault-tolerant ordering, deterministic chaincode,
hierarchical product identities, IoT ingestion, and the three
traceability regimes (segregation, mass balance, book and claim).
"""

__version__ = "0.1.0"
