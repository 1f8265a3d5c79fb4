"""Federated three-node decision-support runtime.

Isolated per-node datastores, HMAC case-token linkage, a cross-node
operation relay with a fail-closed leak guard, deterministic agent
policies, and an offline trace checker for the data-locality contract.
"""

from .datastore import (
    ClinicStore,
    ClinicalObservation,
    CoverageRule,
    EnrollmentRow,
    GuidanceDoc,
    InsurerStore,
    PatientRecord,
    ProtectedValueIndex,
    coverage_rule,
    load_clinic_store,
    load_guidance,
    load_insurer_store,
    lookup_observation,
    match_enrollment,
    protected_values,
)
from .errors import FedmeshError
from .locality import (
    LeakVerdict,
    MessageEnvelope,
    Topology,
    TraceLog,
    Violation,
    check_trace,
    read_trace,
    scan_outbound,
)
from .policies import (
    CoverageInquiry,
    CoverageVerdict,
    Recommendation,
    SpecialistConsult,
    infer_treatment,
    parse_inquiry,
    prerequisites_satisfied,
    render_inquiry,
)
from .pseudonym import CanonicalId, CaseToken, SecretKey, derive_token, load_secret, normalize_id
from .relay import RelayRequest, RelayResponse, RelayTarget, relay_call, serve
from .runtime import Node, OperationConfig, OperationRequest, OperationResponse, handle_operation
from .scenario import boot_scenario, run_scenario

__version__ = "0.1.0"
