from typing import Any, Dict, List, Optional


class CocoParseError(ValueError):
    """Raised when an annotation document cannot be read as COCO."""

    def __init__(self, message: str, offset: Optional[int] = None, field: Optional[str] = None):
        self.offset = offset
        self.field = field
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class SchemaError(ValueError):
    pass


class MappingError(ValueError):
    pass


class TaxonomyMismatchError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DatasetValidationError(ValueError):
    def __init__(self, violations: List[Any]):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"{len(self.violations)} validation violation(s): {head}{more}")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; `diagnostic` holds the offending step."""

    def __init__(self, diagnostic: Dict[str, Any]):
        self.diagnostic = dict(diagnostic)
        super().__init__(f"non-finite loss during training: {self.diagnostic}")
