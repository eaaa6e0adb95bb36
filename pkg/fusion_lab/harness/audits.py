"""
Run audits: frozen weights unchanged, optimizer owns exactly the QFormer
parameters, and no held-out combination reaches a training batch.
"""

from typing import Iterable, Sequence, Tuple

from ..dataflows.world import Sample
from ..errors import AuditError
from ..frozen.bundle import FrozenBundle
from ..nn.optim import Optimizer
from ..qformer.qformer import QFormerState


def audit_frozen(bundle: FrozenBundle, fingerprint_before: str) -> str:
    """Recompute the bundle fingerprint and compare it with the recorded one."""
    current = bundle.current_fingerprint()
    if current != fingerprint_before or current != bundle.fingerprint:
        raise AuditError(
            f"Frozen bundle changed: built as {bundle.fingerprint}, run started at {fingerprint_before}, now {current}"
        )
    return current


def audit_parameter_set(optimizer: Optimizer, qformer: QFormerState, bundle: FrozenBundle):
    owned = {id(p) for p in optimizer.params}
    expected = {id(p) for p in qformer.parameters()}
    frozen = {id(p) for p in bundle.parameters()}
    if owned & frozen:
        raise AuditError(f"Optimizer holds {len(owned & frozen)} frozen bundle parameter(s)")
    if owned != expected:
        raise AuditError(
            f"Optimizer parameter set differs from the QFormer state: {len(owned - expected)} extra, {len(expected - owned)} missing"
        )


def audit_batch(samples: Iterable[Sample], holdout: Sequence[Tuple[str, str]]):
    """Scan batch provenance for held-out (shape, color) pairs."""
    for sample in samples:
        if sample.scene.contains_any(holdout):
            raise AuditError(
                f"Training batch contains sample {sample.index} with held-out combination(s) "
                f"{sorted(sample.scene.combinations() & set(map(tuple, holdout)))}"
            )
