"""chainveil: IoT blockchain timing-privacy workbench.

Models a smart-home ledger populated from device communication traces,
applies timestamp obfuscation defenses (delay, multi-device ledgers,
multi-packet transactions, spoofing), and measures how well a decision-tree
attacker can identify device types from inter-transaction gaps alone.
"""

from .attacker import (
    AttackReport,
    DecisionTree,
    FeatureInstance,
    FeatureTable,
    TreeParams,
    blind_attack,
    extract_features,
    fit,
    informed_attack,
    predict,
)
from .experiment import (
    AttackSpec,
    ExperimentConfig,
    RunResult,
    SweepResult,
    TraceSpec,
    emit_report,
    load_config,
    reference_config,
    run,
    sweep_aggregate,
    sweep_combined,
    sweep_delay,
    sweep_merge,
    sweep_spoof,
)
from .ledger import (
    Ledger,
    LedgerSet,
    Transaction,
    build_baseline,
    find_chain_fault,
    load_public_view,
    load_sidecar,
    public_view,
    save_public_view,
    save_sidecar,
    verify_chain,
)
from .obfuscate import (
    AggregateParams,
    DelayParams,
    MergeParams,
    PipelineStage,
    SpoofParams,
    aggregate_packets,
    compose,
    delay_transactions,
    load_pipeline,
    merge_ledgers,
    spoof_transactions,
)
from .trace import (
    CommRecord,
    DeviceProfile,
    TraceSet,
    builtin_profiles,
    ingest_csv,
    load_profiles,
    save_profiles,
    synth_trace,
    write_csv,
)

__version__ = "0.1.0"
