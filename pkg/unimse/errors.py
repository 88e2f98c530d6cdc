"""
Exception hierarchy for the UniMSE pipeline
Every error carries a human-readable detail and a structured context dict
"""

from typing import Any, Dict, Optional


class UniMSEError(ValueError):
    """Base error: detail message plus structured context fields"""

    def __init__(self, detail: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.detail = detail
        self.context = dict(context or {})

    def __str__(self) -> str:
        if not self.context:
            return self.detail
        fields = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.detail} ({fields})"


# ============= NUMERICAL CORE =============

class ShapeError(UniMSEError):
    """Operand shapes incompatible with an op"""

    def __init__(self, op: str, *shapes, detail: Optional[str] = None):
        shapes = tuple(tuple(s) for s in shapes)
        super().__init__(
            detail or f"Shape mismatch in {op}: {' vs '.join(str(s) for s in shapes)}",
            {"op": op, "shapes": shapes},
        )
        self.op = op
        self.shapes = shapes


class NumericError(UniMSEError):
    """An op produced NaN or infinite values"""

    def __init__(self, op: str):
        super().__init__(f"Non-finite output produced by {op}", {"op": op})
        self.op = op


class GraphError(UniMSEError):
    """Misuse of the differentiation graph (non-scalar loss, backward before forward)"""


# ============= DATA AND LABELS =============

class VocabularyError(UniMSEError):
    pass


class LabelError(UniMSEError):
    """Invalid or incomplete universal label"""


class CompletionError(UniMSEError):
    """Label completion failed for a sample"""


class ManifestError(UniMSEError):
    """One or more manifest records failed validation"""

    def __init__(self, detail: str, errors: Optional[Dict[str, str]] = None):
        super().__init__(detail, {"records": len(errors or {})})
        self.errors = dict(errors or {})

    def __str__(self) -> str:
        lines = [self.detail]
        for record_id, message in self.errors.items():
            lines.append(f"  - {record_id}: {message}")
        return "\n".join(lines)


# ============= RUNTIME =============

class ConfigError(UniMSEError):
    pass


class CheckpointError(UniMSEError):
    """Unreadable checkpoint or checkpoint incompatible with the requested config"""

    def __init__(self, detail: str, mismatched: Optional[Dict[str, Any]] = None):
        super().__init__(detail, {"mismatched": sorted(mismatched or {})})
        self.mismatched = dict(mismatched or {})


class ObjectiveError(UniMSEError):
    """Loss called on inputs it is undefined for"""


class MetricError(UniMSEError):
    pass
